"""Training losses (MPC, APC, CTC, smoothed attention CE, weighted joint) and CER."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, InfeasibleAlignmentError
from .numerics import ShapeError, Tensor, as_tensor, custom_op, log_softmax

BLANK = 0


class Branch(str, enum.Enum):
    MPC = "MPC"
    APC = "APC"


@dataclass(frozen=True)
class APCConfig:
    step: int = 5

    def __post_init__(self):
        if self.step < 1:
            raise ConfigError(f"APC step must be >= 1, got {self.step}")


@dataclass(frozen=True)
class UnifiedConfig:
    p: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"switching probability must lie in [0, 1], got {self.p}")


def _zero() -> Tensor:
    return Tensor(0.0)


def mpc_loss(pred: Tensor, target, frame_mask) -> Tensor:
    """Mean |pred - target| over every bin of every masked frame."""
    target = np.asarray(getattr(target, "frames", target), dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    idx = np.flatnonzero(np.asarray(frame_mask, dtype=bool))
    if idx.size == 0:
        return _zero()
    diff = pred[idx] - target[idx]
    return diff.abs().sum() * (1.0 / diff.size)


def apc_loss(pred: Tensor, target, step: int, valid: int) -> Tensor:
    """Mean |pred[u] - target[u + step]| over u < valid - step."""
    target = np.asarray(getattr(target, "frames", target), dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    if step < 1:
        raise ConfigError(f"APC step must be >= 1, got {step}")
    n = valid - step
    if n <= 0:
        return _zero()
    diff = pred[:n] - target[step:valid]
    return diff.abs().sum() * (1.0 / diff.size)


def choose_branch(cfg: UnifiedConfig, rng: np.random.Generator) -> Branch:
    """APC with probability p, otherwise MPC. One draw per batch."""
    return Branch.APC if rng.random() < cfg.p else Branch.MPC


# CTC ---------------------------------------------------------------------

def _extend(label: Sequence[int]) -> np.ndarray:
    ext = np.full(2 * len(label) + 1, BLANK, dtype=np.int64)
    ext[1::2] = label
    return ext


def min_frames(label: Sequence[int]) -> int:
    """Shortest input admitting an alignment: one frame per token plus a blank between repeats."""
    return len(label) + sum(1 for a, b in zip(label, label[1:]) if a == b)


def _ctc_tables(lp: np.ndarray, ext: np.ndarray):
    T, S = lp.shape[0], ext.size
    emit = lp[:, ext]                               # T x S
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    neg = -np.inf

    alpha = np.full((T, S), neg)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    # beta excludes the emission at its own frame
    beta = np.full((T, S), neg)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc

    log_p = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    return alpha, beta, log_p


def ctc_from_log_probs(log_probs: Tensor, label: Sequence[int]) -> Tensor:
    """-log p(label | frames) by the log-space forward recursion over the blank-extended label."""
    T, V = log_probs.shape
    label = [int(t) for t in label]
    if any(t <= BLANK or t >= V for t in label):
        raise ValueError(f"label ids must lie in [1, {V}), got {label}")
    needed = min_frames(label)
    if needed > T:
        raise InfeasibleAlignmentError(f"label of length {len(label)} needs {needed} frames, have {T}")
    ext = _extend(label)
    lp = log_probs.data
    alpha, beta, log_p = _ctc_tables(lp, ext)

    def back(g):
        occ = np.exp(alpha + beta - log_p)          # state occupancy per frame
        grad = np.zeros_like(lp)
        np.add.at(grad, (slice(None), ext), -occ)
        return (g * grad,)

    return custom_op(np.asarray(-log_p), (log_probs,), back, "ctc")


def ctc_loss(logits: Tensor, label: Sequence[int]) -> Tensor:
    return ctc_from_log_probs(log_softmax(as_tensor(logits)), label)


def attention_ce_loss(logits: Tensor, targets: Sequence[int], smoothing: float = 0.1) -> Tensor:
    """Mean CE against (1 - eps) on the target and eps / (V - 1) elsewhere."""
    L, V = logits.shape
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != (L,):
        raise ShapeError(f"{tgt.shape[0] if tgt.ndim else 0} targets for {L} logit rows")
    if tgt.min() < 0 or tgt.max() >= V:
        raise ValueError(f"target id outside [0, {V})")
    if not 0.0 <= smoothing < 1.0:
        raise ConfigError(f"label smoothing must lie in [0, 1), got {smoothing}")
    dist = np.full((L, V), smoothing / (V - 1) if V > 1 else 0.0)
    dist[np.arange(L), tgt] = 1.0 - smoothing
    lp = log_softmax(logits)
    return -(lp * dist).sum() * (1.0 / L)


# joint loss --------------------------------------------------------------------

@dataclass
class LossBreakdown:
    l_attn: Tensor
    l_ctc: Tensor
    l_mpc: Tensor
    alpha_attn: float
    beta_ctc: float
    gamma_mpc: float
    total: Tensor

    def as_dict(self) -> dict[str, float]:
        return {
            "l_attn": self.l_attn.item(), "l_ctc": self.l_ctc.item(), "l_mpc": self.l_mpc.item(),
            "alpha_attn": self.alpha_attn, "beta_ctc": self.beta_ctc, "gamma_mpc": self.gamma_mpc,
            "total": self.total.item(),
        }


def joint_loss(parts: Mapping[str, Tensor | None], alpha_attn: float, beta_ctc: float,
               gamma_mpc: float) -> LossBreakdown:
    """alpha * attn + beta * ctc + gamma * mpc, summed in that order; missing parts are 0."""
    for w in (alpha_attn, beta_ctc, gamma_mpc):
        if w < 0:
            raise ConfigError(f"loss weights must be >= 0, got {(alpha_attn, beta_ctc, gamma_mpc)}")
    la, lc, lm = (parts.get(k) for k in ("attn", "ctc", "mpc"))
    la = _zero() if la is None else la
    lc = _zero() if lc is None else lc
    lm = _zero() if lm is None else lm
    total = la * alpha_attn + lc * beta_ctc + lm * gamma_mpc
    return LossBreakdown(la, lc, lm, alpha_attn, beta_ctc, gamma_mpc, total)


def mean_breakdown(items: Sequence[LossBreakdown]) -> LossBreakdown:
    """Batch reduction: average each component in fixed order, then re-weight."""
    la, lc, lm = items[0].l_attn, items[0].l_ctc, items[0].l_mpc
    for b in items[1:]:
        la, lc, lm = la + b.l_attn, lc + b.l_ctc, lm + b.l_mpc
    f = 1.0 / len(items)
    first = items[0]
    return joint_loss({"attn": la * f, "ctc": lc * f, "mpc": lm * f},
                      first.alpha_attn, first.beta_ctc, first.gamma_mpc)


# decoding and scoring -------------------------------------------------------------

def ctc_greedy_decode(logits) -> list[int]:
    """Frame argmax, merge repeats, drop blanks."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    path = np.argmax(data, axis=-1) if data.ndim == 2 else np.asarray(data, dtype=np.int64)
    out, prev = [], None
    for k in path.tolist():
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    row = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        prev_diag, row[0] = row[0], i
        for j, h in enumerate(hyp, 1):
            cur = min(row[j] + 1, row[j - 1] + 1, prev_diag + (r != h))
            prev_diag, row[j] = row[j], cur
    return row[-1]


def cer(ref: Sequence, hyp: Sequence) -> float:
    if len(ref) == 0:
        raise ValueError("CER needs a non-empty reference")
    return edit_distance(ref, hyp) / len(ref)
