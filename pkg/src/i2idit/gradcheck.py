"""Central finite-difference gradient checking."""

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_grad(fn, tensor, h=1e-5, indices=None):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensor.data``.

    ``indices`` restricts the probe to a subset of flat positions; the
    returned array holds only those entries, in order.
    """
    flat = tensor.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = []
    with no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            out.append((fp - fm) / (2 * h))
    return np.array(out)


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn, tensors, h=1e-5, indices=None):
    """Compare autodiff and finite-difference gradients of scalar ``fn()``.

    Returns the worst relative error over ``tensors``.  ``indices`` may map a
    tensor's position in ``tensors`` to the flat entries to probe.
    """
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    loss = fn()
    backward(loss)
    worst = 0.0
    for k, t in enumerate(tensors):
        idx = None if indices is None else indices.get(k)
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        if idx is not None:
            analytic = analytic[np.asarray(idx)]
        numeric = numerical_grad(fn, t, h, idx)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def random_tensor(rng, shape, requires_grad=True):
    return Tensor(rng.normal(shape), requires_grad=requires_grad)
