"""Central finite differences against reverse-mode gradients."""
import numpy as np

from localtrans.tensor.core import Tensor, backward


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(f, arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def check_gradients(build, leaves: list[Tensor], eps: float = 1e-6, max_entries: int = 0, rng=None) -> float:
    """Largest relative error over ``leaves`` for the scalar returned by ``build()``.

    With ``max_entries`` only that many randomly chosen entries per leaf are
    probed (the analytic gradient is compared on the same entries).
    """
    for leaf in leaves:
        leaf.grad = None
    out = build()
    backward(out)
    worst = 0.0
    for leaf in leaves:
        analytic = np.array(leaf.grad, dtype=np.float64)
        flat = leaf.data.reshape(-1)
        if max_entries and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        else:
            idx = np.arange(flat.size)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            fp = build().item()
            flat[i] = old - eps
            fm = build().item()
            flat[i] = old
            numeric[j] = (fp - fm) / (2 * eps)
        worst = max(worst, rel_error(analytic.reshape(-1)[idx], numeric))
    return worst


def projection(shape, seed: int = 0) -> np.ndarray:
    """Fixed random weights that turn a tensor output into a generic scalar."""
    # separate stream so weights never coincide with test inputs drawn from the same seed
    return np.random.default_rng([seed, 7919]).standard_normal(shape)


def weighted_sum(y: Tensor, w: np.ndarray) -> Tensor:
    return (y * Tensor(w)).sum()
