import numpy as np
import pytest

from prunevit.tensor import Tape, Tensor
from prunevit import ops


def tensor64(arr, requires_grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad,
                  dtype=np.float64)


def central_diff(f, arrays, eps=1e-5):
    """Central finite differences of a scalar function of numpy arrays.

    Forward evaluations only; independent of any backward implementation.
    """
    grads = []
    for ai, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        flat = g.reshape(-1)
        for i in range(a.size):
            bumped = [x.copy() for x in arrays]
            bumped[ai].reshape(-1)[i] += eps
            hi = f(*bumped)
            bumped[ai].reshape(-1)[i] -= 2 * eps
            lo = f(*bumped)
            flat[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.abs(n) + 1e-8
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def run_gradcheck(op_fn, arrays, eps=1e-5, tol=1e-4, seed=0):
    """Compare tape gradients of a random-weighted sum of op_fn's output
    against central finite differences, at float64.
    """
    rng = np.random.default_rng(seed)
    ts = [tensor64(a) for a in arrays]
    with Tape() as tape:
        out = op_fn(*ts)
        w = rng.standard_normal(out.shape)
        loss = ops.tsum(ops.mul(out, Tensor(w, dtype=np.float64)))
        tape.backward(loss)
    analytic = [t.grad for t in ts]

    def forward(*arrs):
        val = op_fn(*[tensor64(a, requires_grad=False) for a in arrs])
        return float((val.data * w).sum())

    numeric = central_diff(forward, [np.asarray(a, dtype=np.float64) for a in arrays],
                           eps=eps)
    err = max_rel_err(analytic, numeric)
    assert err < tol, f"gradcheck failed: rel err {err:.3e} >= {tol}"
    return err


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
