from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from mpclab import pipeline
from mpclab.config import parse_config
from mpclab.model import ModelConfig, init_params

# Small enough that a full finite-difference sweep over every weight is cheap.
GRAD_CFG = ModelConfig(enc_layers=2, dec_layers=1, d_model=8, d_ff=8, heads=2, feat_dim=4,
                       vocab_size=4, prenet_channels=4)

# Model section used by the stage tests.
MODEL_INI = """
[model]
enc_layers = 2
dec_layers = 1
d_model = 8
d_ff = 16
heads = 2
feat_dim = 6
vocab_size = 4
prenet_channels = 4
"""


def stage_config(stage: str, root: Path, body: str, model: str = MODEL_INI):
    return parse_config(body + model, stage, root)


@pytest.fixture
def grad_params():
    """GRAD_CFG weights jittered so biases and gains are not at their initial 0/1."""
    params = init_params(GRAD_CFG, 0)
    rng = np.random.default_rng(1)
    for t in params.values():
        t.data = t.data + 0.1 * rng.standard_normal(t.shape)
    return params


def _synth(root: Path, out: str, seed: int, n: int, labeled: bool, lo: int, hi: int) -> Path:
    body = f"""
[run]
seed = {seed}
out = {out}
plots = false
[synth]
n = {n}
min_frames = {lo}
max_frames = {hi}
feat_dim = 6
vocab_size = 4
labeled = {str(labeled).lower()}
prefix = {out}
"""
    pipeline.cmd_synth(stage_config("synth", root, body))
    return root / out / "manifest.tsv"


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Tiny unlabeled, labeled-train and labeled-dev corpora shared by the stage tests."""
    root = tmp_path_factory.mktemp("corpus")
    return {
        "root": root,
        "pre": _synth(root, "pre", 11, 8, False, 20, 36),
        "ft": _synth(root, "ft", 12, 8, True, 28, 40),
        "dev": _synth(root, "dev", 13, 4, True, 28, 40),
    }


def strip_wall(records):
    """Metrics with the wall-clock field removed (the only non-deterministic one)."""
    out = []
    for r in records:
        d = dict(r.__dict__) if hasattr(r, "__dict__") else dict(r)
        d.pop("wall_ms")
        out.append(d)
    return out
