"""Stage configuration: an INI document with fixed sections; unknown keys are errors."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import get_type_hints

from .errors import ConfigError
from .model import ModelConfig

STAGES = ("synth", "pretrain", "adapt", "finetune", "probe", "average", "eval")


@dataclass
class RunSection:
    seed: int = 0
    out: str = "run"
    plots: bool = True


@dataclass
class DataSection:
    manifest: str = ""
    dev_manifest: str = ""


@dataclass
class SynthSection:
    n: int = 200
    min_frames: int = 64
    max_frames: int = 192
    feat_dim: int = 40
    vocab_size: int = 8
    style: str = "reading"
    smoothness: float = -1.0
    pause_rate: float = -1.0
    pitch_drift: float = -1.0
    labeled: bool = False
    prefix: str = "utt"


@dataclass
class ModelSection:
    enc_layers: int = 4
    dec_layers: int = 2
    d_model: int = 32
    d_ff: int = 64
    heads: int = 4
    feat_dim: int = 40
    vocab_size: int = 8
    prenet_channels: int = 32
    attention: str = "full"

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.enc_layers, self.dec_layers, self.d_model, self.d_ff, self.heads,
                           self.feat_dim, self.vocab_size, self.prenet_channels)


@dataclass
class ObjectiveSection:
    kind: str = "mpc"
    p: float = 0.5
    apc_step: int = 5
    mask_prob: float = 0.15
    mask_chunk: int = 4
    alpha_attn: float = 0.7
    beta_ctc: float = 0.3
    label_smoothing: float = 0.1


@dataclass
class ScheduleSection:
    # 0 means "use the stage default" for k and warmup_n
    k: float = 0.0
    warmup_n: int = 0
    dmodel_exponent: float = 0.5
    weight_decay: float = -1.0
    lam: float = 0.95
    theta: float = 5.5
    gamma0: float = 0.2
    halve_every: int = 5


@dataclass
class TrainSection:
    # -1 means "use the stage default"
    epochs: int = -1
    batch_size: int = -1


@dataclass
class TransferSection:
    target_adapt_epochs: int = 1
    layerwise: bool = False
    multitask_mpc: bool = False
    dual_pass: bool = False


@dataclass
class ProbeSection:
    epochs: int = 5


@dataclass
class AverageSection:
    checkpoints: str = ""
    k: int = 10


# Desk-scale defaults per stage; the published 100-epoch / batch-256 regime is legal config.
STAGE_DEFAULTS = {
    "pretrain": dict(k=0.004, warmup_n=100, weight_decay=0.0, epochs=20, batch_size=8),
    "adapt": dict(k=0.004, warmup_n=100, weight_decay=0.0, epochs=0, batch_size=8),
    "finetune": dict(k=0.01, warmup_n=100, weight_decay=1e-5, epochs=10, batch_size=2),
    "probe": dict(k=0.01, warmup_n=100, weight_decay=1e-5, epochs=5, batch_size=2),
}

SECTIONS = {
    "run": RunSection, "data": DataSection, "synth": SynthSection, "model": ModelSection,
    "objective": ObjectiveSection, "schedule": ScheduleSection, "train": TrainSection,
    "transfer": TransferSection, "probe": ProbeSection, "average": AverageSection,
}


@dataclass
class StageConfig:
    stage: str
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    synth: SynthSection = field(default_factory=SynthSection)
    model: ModelSection = field(default_factory=ModelSection)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    train: TrainSection = field(default_factory=TrainSection)
    transfer: TransferSection = field(default_factory=TransferSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    average: AverageSection = field(default_factory=AverageSection)
    base_dir: Path = Path(".")
    init: str = ""

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        defaults = STAGE_DEFAULTS.get(self.stage)
        if defaults:
            s, t = self.schedule, self.train
            if s.k == 0.0:
                s.k = defaults["k"]
            if s.warmup_n == 0:
                s.warmup_n = defaults["warmup_n"]
            if s.weight_decay < 0:
                s.weight_decay = defaults["weight_decay"]
            if t.epochs < 0:
                t.epochs = defaults["epochs"]
            if t.batch_size < 0:
                t.batch_size = defaults["batch_size"]
        else:
            self.train.epochs = max(self.train.epochs, 0)
            self.train.batch_size = max(self.train.batch_size, 0)
        self.validate()

    def validate(self) -> None:
        o = self.objective
        if o.kind not in ("mpc", "apc", "unified"):
            raise ConfigError(f"objective.kind must be mpc, apc or unified, got {o.kind!r}")
        if not 0.0 <= o.p <= 1.0 or not 0.0 <= o.mask_prob <= 1.0:
            raise ConfigError("probabilities must lie in [0, 1]")
        if o.apc_step < 1 or o.mask_chunk < 1:
            raise ConfigError("apc_step and mask_chunk must be >= 1")
        if min(o.alpha_attn, o.beta_ctc) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.model.attention not in ("full", "causal"):
            raise ConfigError(f"model.attention must be full or causal, got {self.model.attention!r}")
        if self.train.epochs < 0 or self.train.batch_size < 0:
            raise ConfigError("epochs and batch_size must be >= 0")
        if self.stage in STAGE_DEFAULTS and self.train.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.transfer.target_adapt_epochs < 0:
            raise ConfigError("target_adapt_epochs must be >= 0")
        if self.stage == "synth":
            s = self.synth
            if s.n < 1 or s.min_frames < 1 or s.max_frames < s.min_frames or s.feat_dim < 1:
                raise ConfigError("synth counts must be >= 1 and min_frames <= max_frames")
        if self.stage in ("pretrain", "adapt") and (self.transfer.layerwise or self.transfer.multitask_mpc):
            raise ConfigError(f"transfer options layerwise/multitask_mpc apply to fine-tuning, not {self.stage}")
        self.model.model_config()

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q

    @property
    def out_dir(self) -> Path:
        return self.path(self.run.out)

    def to_dict(self) -> dict:
        d = {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}
        d["stage"] = self.stage
        return d

    def digest(self) -> str:
        """SHA-256 of the settings that shape a run (output location excluded)."""
        d = self.to_dict()
        d["run"] = {k: v for k, v in d["run"].items() if k != "out"}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()


def _coerce(value: str, typ, where: str):
    try:
        if typ is bool:
            v = value.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        return typ(value.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {value!r} as {typ.__name__}") from None


def parse_config(text: str, stage: str, base_dir: Path = Path(".")) -> StageConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    kwargs = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        cls = SECTIONS[section]
        hints = get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        values = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = _coerce(raw, hints[key], f"[{section}] {key}")
        kwargs[section] = cls(**values)
    return StageConfig(stage=stage, base_dir=base_dir, **kwargs)


def load_config(path, stage: str) -> StageConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, stage, path.parent)


def dump_config(cfg: StageConfig) -> str:
    parts = []
    for name in SECTIONS:
        parts.append(f"[{name}]")
        for k, v in dataclasses.asdict(getattr(cfg, name)).items():
            parts.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
        parts.append("")
    return "\n".join(parts)
