"""Central finite-difference oracle, independent of the backward rules."""

import numpy as np


def numeric_grad(fn, arrays, eps=1e-5):
    """d fn / d arrays[i] by central differences; fn maps float64 arrays to a float."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + eps
            up = fn(*arrays)
            arr[idx] = orig - eps
            down = fn(*arrays)
            arr[idx] = orig
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-6):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def check_op(build, arrays, eps=1e-5):
    """Compare autodiff and finite-difference gradients of ``sum(w * build(*tensors))``.

    ``w`` is a fixed random weighting so every output element contributes.
    """
    from neutrocaps.autodiff import Tensor, precision

    with precision(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        probe = build(*[Tensor(a) for a in arrays])
        rng = np.random.default_rng(1234)
        weight = rng.normal(size=probe.shape)

        def scalar(*arrs):
            return float((build(*[Tensor(a) for a in arrs]).data * weight).sum())

        tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = build(*tensors)
        out.backward(weight)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
        numeric = numeric_grad(scalar, arrays, eps)
    return max(max_rel_error(a, n) for a, n in zip(analytic, numeric))
