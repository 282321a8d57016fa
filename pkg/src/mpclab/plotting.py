"""Figures written next to the JSONL/CSV outputs of each stage."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
})


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _get(rec, key):
    return rec[key] if isinstance(rec, dict) else getattr(rec, key)


def plot_training(records: Sequence, path, dev_records: Sequence[dict] = ()) -> Path:
    """Loss components and learning rate against optimizer step."""
    steps = np.array([_get(r, "step") for r in records])
    fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(6, 5), sharex=True,
                                    gridspec_kw={"height_ratios": [3, 1]})
    for key, label in (("total", "total"), ("l_mpc", "MPC"), ("l_apc", "APC"),
                       ("l_ctc", "CTC"), ("l_attn", "attention")):
        vals = np.array([_get(r, key) for r in records])
        if np.any(vals != 0):
            ax.plot(steps, vals, lw=1, label=label)
    if dev_records:
        per_epoch = max(len(steps) // max(len(dev_records) - 1, 1), 1)
        ax.plot([d["epoch"] * per_epoch for d in dev_records], [d["dev_loss"] for d in dev_records],
                "ko--", ms=3, lw=1, label="dev joint")
    ax.set_ylabel("loss")
    ax.legend(frameon=False, ncol=3)
    ax_lr.plot(steps, [_get(r, "lr") for r in records], color="0.3", lw=1)
    ax_lr.set_ylabel("base lr")
    ax_lr.set_xlabel("step")
    return _save(fig, path)


def plot_probe(rows: Sequence[dict], path) -> Path:
    layers = [r["layer"] for r in rows]
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(layers, [100 * r["dev_cer"] for r in rows], "o-", color="C0")
    ax.set_xlabel("encoder layers kept (frozen)")
    ax.set_ylabel("dev CER (%)", color="C0")
    ax2 = ax.twinx()
    ax2.plot(layers, [r["dev_loss"] for r in rows], "s--", color="C1", ms=3)
    ax2.set_ylabel("dev loss", color="C1")
    ax2.spines["right"].set_visible(True)
    ax.set_xticks(layers)
    return _save(fig, path)


def plot_eval(records: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(max(4, 0.15 * len(records) + 2), 3))
    ax.bar(range(len(records)), [100 * r["cer"] for r in records], color="C2")
    ax.set_xlabel("utterance")
    ax.set_ylabel("CER (%)")
    return _save(fig, path)


def plot_features(frames: np.ndarray, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 2.5))
    im = ax.imshow(frames.T, origin="lower", aspect="auto", cmap="magma")
    fig.colorbar(im, ax=ax, pad=0.01)
    ax.set_xlabel("frame")
    ax.set_ylabel("bin")
    if title:
        ax.set_title(title)
    return _save(fig, path)
