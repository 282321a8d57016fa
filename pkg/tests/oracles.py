"""Reference implementations the tests compare against.

Kept deliberately naive: loops and explicit formulas rather than the
vectorized code under test.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

H = 1e-5


def central_difference(f, arrays: dict[str, np.ndarray], name: str, index) -> float:
    """(f(x + h e_i) - f(x - h e_i)) / 2h, restoring the entry afterwards."""
    a = arrays[name]
    old = a[index]
    a[index] = old + H
    up = f()
    a[index] = old - H
    down = f()
    a[index] = old
    return (up - down) / (2 * H)


def rel_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def max_fd_error(f, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                 names=None, max_entries: int | None = None, seed: int = 0) -> tuple[float, str]:
    """Largest relative error over the checked entries, and where it occurred.

    ``f`` must read ``arrays`` afresh on every call. With ``max_entries``
    a random subset of each tensor's entries is checked.
    """
    rng = np.random.default_rng(seed)
    worst, where = 0.0, ""
    for name in (names or arrays):
        a = arrays[name]
        flat = list(np.ndindex(a.shape)) if a.ndim else [()]
        if max_entries is not None and len(flat) > max_entries:
            flat = [flat[i] for i in rng.choice(len(flat), max_entries, replace=False)]
        for idx in flat:
            err = rel_error(float(grads[name][idx]), central_difference(f, arrays, name, idx))
            if err > worst:
                worst, where = err, f"{name}{list(idx)}"
    return worst, where


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    out = np.empty_like(logits, dtype=float)
    for t, row in enumerate(logits):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        out[t] = [v - lse for v in row]
    return out


def collapse(path) -> list[int]:
    out, prev = [], None
    for k in path:
        if k != prev and k != 0:
            out.append(k)
        prev = k
    return out


def ctc_brute_force(logits: np.ndarray, label) -> float:
    """-log of the summed probability of every length-t path collapsing to ``label``."""
    lp = log_softmax_rows(np.asarray(logits, dtype=float))
    t, v = lp.shape
    terms = [sum(lp[i, k] for i, k in enumerate(path))
             for path in itertools.product(range(v), repeat=t) if collapse(path) == list(label)]
    if not terms:
        return math.inf
    m = max(terms)
    return -(m + math.log(sum(math.exp(x - m) for x in terms)))


def scalar_adam(p: float, grads, lr: float, b1: float = 0.9, b2: float = 0.999,
                eps: float = 1e-8, wd: float = 0.0) -> float:
    m = v = 0.0
    for n, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * wd * p
        p = p - lr * (m / (1 - b1 ** n)) / (math.sqrt(v / (1 - b2 ** n)) + eps)
    return p
