import numpy as np

from poco import numerics as nx


def central_fd(loss_of_params, params: nx.ParamSet, h: float = 1e-4, coords=None) -> np.ndarray:
    """Central finite differences of a scalar function of a float64 ParamSet."""
    flat = params.flatten().astype(np.float64)
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(len(list(idx)) if coords is not None else flat.size)
    for j, i in enumerate(idx if coords is not None else range(flat.size)):
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        out[j] = (loss_of_params(params.unflatten(up)) - loss_of_params(params.unflatten(dn))) / (2 * h)
    return out


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest entrywise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


# one line per acceptance criterion, printed in the terminal summary by conftest
ACCEPTANCE_LINES: list[str] = []


def report(criterion, ok: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
