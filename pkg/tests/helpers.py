"""Synthetic multi-view datasets shared by the CLI and acceptance tests."""

import numpy as np

from kmdhoi.dataio import FeatureView, MultiViewDataset, TripletCatalog, Unit
from kmdhoi.kernels import KernelSpec


def unit_dataset(n, units, seed=0, planted=None, strength=3.0, constant_units=()):
    """Three quantitative views with one column per unit and linear kernels on views 1 and 3.

    ``units`` gives the unit count per view. ``planted`` is an optional
    (i, j, k) triplet whose column product is added to ``y``. View 2 uses a
    Gaussian kernel so that any unit listed in ``constant_units`` (indices
    into view 2) has all-zero distances and cannot be scanned.
    """
    rng = np.random.default_rng(seed)
    mats = [rng.standard_normal((n, k)) for k in units]
    for j in constant_units:
        mats[1][:, j] = 1.0
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    y = X @ [1.0, 0.5] + rng.standard_normal(n)
    if planted is not None:
        i, j, k = planted
        y = y + strength * mats[0][:, i] * mats[1][:, j] * mats[2][:, k]
    kernels = ("linear", "gauss", "linear")
    views = tuple(
        FeatureView(f"view{v + 1}", "quantitative", M, KernelSpec.parse(kernels[v]),
                    tuple(f"v{v + 1}c{c}" for c in range(M.shape[1])))
        for v, M in enumerate(mats)
    )
    ds = MultiViewDataset(y, X, views, tuple(f"s{i:03d}" for i in range(n)))
    catalog = TripletCatalog(tuple(
        tuple(Unit(f"u{v + 1}_{c}", (c,)) for c in range(k)) for v, k in enumerate(units)
    ))
    return ds, catalog
