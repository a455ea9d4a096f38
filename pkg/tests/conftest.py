import numpy as np
import pytest

from feddgm import autodiff as ad


def fd_gradient(graph: ad.Graph, bindings: dict, wrt: ad.Tensor, step: float = 1e-5):
    """Central finite differences of a scalar graph output w.r.t. one leaf.

    Independent of the reverse-mode path: re-evaluates the forward graph
    with each coordinate of the leaf perturbed by +/- step.
    """
    base = np.array(bindings[wrt], dtype=np.float64)
    out = np.zeros_like(base)
    flat = base.ravel()
    gflat = out.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(graph.eval({**bindings, wrt: base}, dtype=np.float64))
        flat[i] = orig - step
        lo = float(graph.eval({**bindings, wrt: base}, dtype=np.float64))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return out


def relative_errors(approx, exact, floor: float = 1e-8):
    approx = np.asarray(approx, dtype=np.float64).ravel()
    exact = np.asarray(exact, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(approx), np.abs(exact)), floor)
    return np.abs(approx - exact) / denom


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
