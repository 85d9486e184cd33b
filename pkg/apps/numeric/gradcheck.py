"""Central finite-difference oracle used by the gradient tests."""
import numpy as np

from .tensor import backward


def numerical_gradient(loss_fn, tensor, eps=1e-6, entries=None):
    """Central differences of ``loss_fn()`` w.r.t. ``tensor`` at the flat ``entries`` (all by default)."""
    flat = tensor.data.reshape(-1)
    entries = range(flat.size) if entries is None else entries
    out = np.zeros(len(entries), dtype=np.float64)
    for slot, i in enumerate(entries):
        original = flat[i]
        flat[i] = original + eps
        plus = loss_fn().item()
        flat[i] = original - eps
        minus = loss_fn().item()
        flat[i] = original
        out[slot] = (plus - minus) / (2 * eps)
    return out


def relative_error(analytic, numeric, floor=1e-4):
    """
    ||a - n|| / max(||a|| + ||n||, floor). The floor keeps round-off in the
    differences of a vanishing gradient from counting as a full mismatch.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return float(np.linalg.norm(analytic - numeric) / max(scale, floor))


def check_gradients(loss_fn, named_tensors, eps=1e-6, max_entries=None, rng=None):
    """
    Compare backprop gradients of ``loss_fn()`` against central differences.
    With ``max_entries`` only that many randomly chosen entries of each tensor
    are compared. Returns ``{name: relative error}``.
    """
    named_tensors = list(named_tensors)
    rng = rng if rng is not None else np.random.default_rng(0)
    for _, t in named_tensors:
        t.grad = None
    backward(loss_fn())
    errors = {}
    for name, t in named_tensors:
        analytic = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
        entries = None
        if max_entries is not None and t.size > max_entries:
            entries = np.sort(rng.choice(t.size, size=max_entries, replace=False))
            analytic = analytic[entries]
        errors[name] = relative_error(analytic, numerical_gradient(loss_fn, t, eps, entries))
    return errors
