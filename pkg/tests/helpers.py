"""Shared finite-difference oracle for the gradient tests."""
import numpy as np

from agg import autodiff as ad

H = 1e-4


def numeric_grad(fn, x, h=H):
    """Central finite differences of a scalar-valued fn at x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = fn(x)
        flat[i] = keep - h
        fm = fn(x)
        flat[i] = keep
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1.0)
    return np.abs(a - b).max(initial=0.0) / denom


def check_op(build_loss, shapes, seed, tol=1e-4, h=H):
    """build_loss(list of Tensors) -> scalar Tensor. Compares every input's
    analytic gradient against central differences."""
    rng = np.random.default_rng(seed)
    values = [rng.normal(size=s) for s in shapes]
    tensors = [ad.Tensor(v.copy()) for v in values]
    loss = build_loss(tensors)
    ad.backward(loss)
    for k, v in enumerate(values):
        def scalar(x, k=k):
            ts = [ad.Tensor(values[j].copy()) if j != k else ad.Tensor(x.copy())
                  for j in range(len(values))]
            return float(build_loss(ts).value)

        num = numeric_grad(scalar, v, h=h)
        ana = tensors[k].grad_or_zero()
        assert rel_err(ana, num) < tol, f"input {k}: {rel_err(ana, num)}"
