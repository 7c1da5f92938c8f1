"""Central finite-difference checks shared by the gradient tests."""
import numpy as np

from chemgnn.diffkernel import Tape


def numeric_grad(loss_fn, param, h=1e-5):
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(loss_fn().data)
        flat[i] = old - h
        fm = float(loss_fn().data)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def analytic_grads(loss_fn, params):
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    return {k: p.grad.copy() for k, p in params.items()}


def relative_error(a, n):
    """Norm-wise relative error of one parameter tensor's gradient."""
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def max_relative_error(loss_fn, params, h=1e-5, keys=None):
    grads = analytic_grads(loss_fn, params)
    worst = 0.0, None
    for k in keys or sorted(params):
        err = relative_error(grads[k], numeric_grad(loss_fn, params[k], h))
        if err > worst[0]:
            worst = err, k
    return worst
