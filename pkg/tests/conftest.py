import os

# keep BLAS single-threaded so small-matrix results are bit-reproducible
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(f, tensors, h=1e-3):
    """Central finite differences of scalar-valued f() wrt each tensor.

    ``f`` must rebuild its graph on every call from the same tensor
    objects; their ``data`` buffers are perturbed in place.
    """
    grads = []
    for x in tensors:
        g = np.zeros(x.data.shape, dtype=np.float64)
        flat = x.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            fp = float(f())
            flat[i] = saved - h
            fm = float(f())
            flat[i] = saved
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(), 1e-8)
    return np.abs(analytic - numeric).max() / scale
