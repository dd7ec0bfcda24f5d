import numpy as np

from trajmoe.config import ModelConfig
from trajmoe.synth import City


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar f with respect to every entry of x (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b, floor=1e-6):
    """Largest absolute deviation relative to the largest magnitude of either array.

    ``floor`` bounds the denominator so gradients that vanish analytically
    (shift-invariant biases) compare on absolute roundoff instead of noise/noise.
    """
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / scale)


def tiny_model(**kw):
    base = dict(d=8, layers=1, heads=2, poi_categories=3)
    base.update(kw)
    return ModelConfig(**base)


def tiny_city(n=5, c=3, seed=0, city_id=0):
    rng = np.random.default_rng(seed)
    counts = rng.poisson(1.0, size=(n, c))
    coords = np.stack([30 + rng.uniform(0, 0.1, n), -100 + rng.uniform(0, 0.1, n)], axis=1)
    flow = rng.integers(1, 100, size=n).astype(float)
    return City(city_id, counts, coords, flow)
