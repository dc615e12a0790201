import numpy as np


def central_diff(f, arrays, eps=1e-4):
    """Central finite differences of scalar ``f(*arrays)`` w.r.t. every array."""
    arrays = [np.array(a, dtype=np.float64, order="C") for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(*arrays)
            flat[i] = orig - eps
            lo = f(*arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / scale


def toy_schema(dims=2, groups=("F", "M"), categorical=None):
    """Continuous columns x0..x{dims-1}, plus an optional categorical block."""
    from contrastive_fairness.data import FeatureGroup, FeatureSchema, ProtectedAttribute

    feats = [FeatureGroup(f"x{i}", "continuous") for i in range(dims)]
    if categorical:
        feats.append(FeatureGroup("cat", "categorical", categories=tuple(categorical)))
    return FeatureSchema(tuple(feats), (ProtectedAttribute("g", tuple(groups)),))


def toy_dataset(X, y, s, schema=None, **prov):
    from contrastive_fairness.data import Dataset

    X = np.asarray(X, dtype=np.float64)
    return Dataset(schema or toy_schema(X.shape[1]), X, y, s, prov)
