"""Central finite-difference oracle used by the gradient tests."""

import numpy as np

from motiongen.tensor import Tape, Tensor


def finite_difference(f, xs, step=1e-5):
    """Numeric gradient of scalar f(*xs) w.r.t. each array in xs."""
    grads = []
    for i, x in enumerate(xs):
        g = np.zeros_like(x, dtype=np.float64)
        flat = g.reshape(-1)
        xflat = x.reshape(-1)
        for j in range(xflat.size):
            orig = xflat[j]
            xflat[j] = orig + step
            hi = f(*xs)
            xflat[j] = orig - step
            lo = f(*xs)
            xflat[j] = orig
            flat[j] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def analytic_gradients(build, xs):
    """Reverse-mode gradients of scalar build(*tensors) w.r.t. each input."""
    tensors = [Tensor(x, requires_grad=True, dtype=np.float64) for x in xs]
    out = build(*tensors)
    tape = Tape()
    tape.backward(out)
    return [tape.grad(t) for t in tensors]


def max_rel_error(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradients(build, xs, step=1e-5, tol=1e-5):
    """Assert analytic and central-difference gradients agree."""
    analytic = analytic_gradients(build, xs)

    def scalar(*arrays):
        ts = [Tensor(a, dtype=np.float64) for a in arrays]
        return float(build(*ts).data)

    numeric = finite_difference(scalar, [x.copy() for x in xs], step=step)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        worst = max(worst, max_rel_error(a, n))
    assert worst < tol, f"gradient mismatch: max rel err {worst:.3e} >= {tol:.0e}"
    return worst
