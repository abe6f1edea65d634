"""Central finite differences, kept independent of the tape machinery."""
import numpy as np

from swinecat.tensor import Tensor, backward, double_precision, no_grad
from swinecat.tensor import sum as tsum


def numeric_grad(f, arrays, which, h=1e-4):
    """d f(*arrays) / d arrays[which] by central differences; ``f`` returns a float."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[which]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = target[i]
        target[i] = old + h
        fp = f(*base)
        target[i] = old - h
        fm = f(*base)
        target[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_op(op, arrays, rng, h=1e-4):
    """Max relative error between tape gradients and finite differences of
    ``sum(op(*inputs) * R)`` for a fixed random projection ``R``."""
    with double_precision():
        probe = op(*[Tensor(a) for a in arrays])
        weights = rng.standard_normal(probe.shape)

        def scalar(*arrs):
            with no_grad():
                return float(np.sum(op(*[Tensor(a) for a in arrs]).data * weights))

        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        backward(tsum(op(*leaves) * Tensor(weights)))
        errs = []
        for i, leaf in enumerate(leaves):
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            errs.append(rel_error(analytic, numeric_grad(scalar, arrays, i, h)))
    return max(errs)
