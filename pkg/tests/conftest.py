import math

import numpy as np
import pytest


def student_t_two_sided_p_oracle(t: float, df: int) -> float:
    """Independent p-value oracle: Simpson quadrature of the t density."""
    t = abs(t)
    if t == 0.0:
        return 1.0

    log_norm = (math.lgamma((df + 1) / 2.0) - math.lgamma(df / 2.0)
                - 0.5 * math.log(df * math.pi))

    def pdf(x):
        return math.exp(log_norm - (df + 1) / 2.0 * math.log1p(x * x / df))

    n = 40_000  # even
    h = t / n
    acc = pdf(0.0) + pdf(t)
    for i in range(1, n):
        acc += pdf(i * h) * (4 if i % 2 else 2)
    integral = acc * h / 3.0
    return 2.0 * (0.5 - integral)


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of a scalar-valued f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def assert_grads_close(analytic, numeric, rtol=1e-4):
    """Max-norm comparison: |a - n| <= rtol * max(1, |n|)."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    assert analytic.shape == numeric.shape
    scale = max(1.0, float(np.max(np.abs(numeric))))
    err = float(np.max(np.abs(analytic - numeric)))
    assert err <= rtol * scale, f"gradient mismatch: err={err:.3e} scale={scale:.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
