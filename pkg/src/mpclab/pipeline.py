"""Stage drivers: synthesize, pre-train, adapt, fine-tune, probe, average, evaluate."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import plotting
from .checkpoint import Checkpoint, restore_rng, rng_state
from .config import StageConfig
from .errors import ConfigError, DataError
from .features import (FeatureSequence, Manifest, ManifestEntry, Normalizer, SynthStyle, apply_normalizer,
                       fit_normalizer, load_features, pad_to_multiple, read_manifest, save_features,
                       style_preset, synth_labeled, write_manifest)
from .masking import apply_mask, plan_masks
from .model import (DOWNSAMPLE, ModelConfig, ctc_logits, decoder_forward, encode,
                    encoder_forward, frontend, init_params, make_mask, mpc_projection_reshape, param_group)
from .numerics import AdamState, Tensor, adam_step, backward, layer_norm
from .objectives import (Branch, LossBreakdown, UnifiedConfig, apc_loss, attention_ce_loss,
                         choose_branch, ctc_greedy_decode, ctc_loss, edit_distance, joint_loss,
                         mean_breakdown, mpc_loss)
from .schedules import (LayerwiseConfig, MpcWeightSchedule, WarmupConfig, gamma_mpc, layer_multiplier,
                        lrate)

log = logging.getLogger(__name__)

ENCODER_PREFIXES = ("prenet.", "encoder.")


@dataclass
class Utterance:
    uid: str
    frames: np.ndarray      # normalized and zero-padded to a multiple of 4
    valid: int
    transcript: tuple[int, ...] | None = None


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    stage: str
    l_attn: float
    l_ctc: float
    l_mpc: float
    l_apc: float
    alpha_attn: float
    beta_ctc: float
    gamma_mpc: float
    total: float
    lr: float
    group_lr: dict[str, float]
    branch: str | None
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainState:
    params: dict[str, Tensor]
    adam: AdamState
    mask_rng: np.random.Generator
    branch_rng: np.random.Generator
    epoch: int = 0
    step: int = 0

    @classmethod
    def fresh(cls, params, seed: int) -> TrainState:
        return cls(params, AdamState(), np.random.default_rng([seed, 1]), np.random.default_rng([seed, 2]))

    def rng_dict(self) -> dict:
        return {"mask": rng_state(self.mask_rng), "branch": rng_state(self.branch_rng)}


@dataclass
class StageResult:
    out_dir: Path
    checkpoints: list[Path] = field(default_factory=list)
    metrics: list[MetricsRecord] = field(default_factory=list)
    extra: dict = field(default_factory=dict)


# data ------------------------------------------------------------------------

def prepare(seqs: Sequence[FeatureSequence], norm: Normalizer,
            transcripts: Sequence | None = None) -> list[Utterance]:
    out = []
    for i, seq in enumerate(seqs):
        padded, valid = pad_to_multiple(apply_normalizer(seq, norm), DOWNSAMPLE)
        tr = None if transcripts is None else tuple(transcripts[i])
        out.append(Utterance(seq.utterance_id, padded.frames, valid, tr))
    return out


def is_dev(uid: str) -> bool:
    """Deterministic ~10% split keyed on the utterance id."""
    return int(hashlib.md5(uid.encode("utf-8")).hexdigest(), 16) % 10 == 0


def split_entries(entries: Sequence[ManifestEntry]) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    train = [e for e in entries if not is_dev(e.utterance_id)]
    dev = [e for e in entries if is_dev(e.utterance_id)]
    return train, dev


def _load_entries(entries: Sequence[ManifestEntry]) -> list[FeatureSequence]:
    return [load_features(e.feature_path) for e in entries]


def _labeled_sets(cfg: StageConfig, vocab_size: int):
    if not cfg.data.manifest:
        raise ConfigError("data.manifest is required")
    manifest = read_manifest(cfg.path(cfg.data.manifest), vocab_size=vocab_size)
    if not manifest.labeled:
        raise DataError(f"{cfg.data.manifest}: every entry needs a transcript for {cfg.stage}")
    if cfg.data.dev_manifest:
        dev_m = read_manifest(cfg.path(cfg.data.dev_manifest), vocab_size=vocab_size)
        train, dev = list(manifest.entries), list(dev_m.entries)
    else:
        train, dev = split_entries(manifest.entries)
    if not train:
        raise DataError("no training utterances after the dev split")
    return train, dev


def _check_dim(seqs: Sequence[FeatureSequence], mcfg: ModelConfig) -> None:
    for s in seqs:
        if s.dim != mcfg.feat_dim:
            raise DataError(f"{s.utterance_id}: feature dim {s.dim} != model feat_dim {mcfg.feat_dim}")


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 3, epoch]).permutation(n)


def batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    return [order[i:i + size] for i in range(0, len(order), size)]


# checkpoints and metrics -------------------------------------------------------------

def params_to_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def arrays_to_params(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in arrays.items()}


def state_from_checkpoint(ckpt: Checkpoint, seed: int) -> TrainState:
    st = TrainState.fresh(arrays_to_params(ckpt.params), seed)
    if ckpt.adam is not None:
        st.adam = ckpt.adam
    if ckpt.rng_state:
        st.mask_rng = restore_rng(ckpt.rng_state["mask"])
        st.branch_rng = restore_rng(ckpt.rng_state["branch"])
    st.epoch, st.step = ckpt.epoch, ckpt.step
    return st


def make_checkpoint(state: TrainState, mcfg: ModelConfig, cfg: StageConfig, norm: Normalizer | None,
                    parent: str | None, info: dict | None = None) -> Checkpoint:
    return Checkpoint(params=params_to_arrays(state.params), model_config=mcfg, stage=cfg.stage,
                      config_digest=cfg.digest(), epoch=state.epoch, step=state.step, adam=state.adam,
                      rng_state=state.rng_dict(), normalizer=norm, parent_digest=parent,
                      info=dict(info or {}, attention=cfg.model.attention))


class MetricsLog:
    def __init__(self, path: Path, append: bool):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        if not append:
            path.write_text("", encoding="utf-8")
        self.records: list[MetricsRecord] = []

    def write(self, rec: MetricsRecord) -> None:
        self.records.append(rec)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(rec.to_json() + "\n")


def read_metrics(path) -> list[dict]:
    return [json.loads(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]


def _save_epoch(ckpt: Checkpoint, out_dir: Path) -> Path:
    path = ckpt.save(out_dir / f"ckpt_epoch{ckpt.epoch:03d}.mpcc")
    (out_dir / "latest.mpcc").write_bytes(path.read_bytes())
    return path


def _load_init(init) -> Checkpoint | None:
    if not init:
        return None
    return Checkpoint.load(init)


# pre-training -----------------------------------------------------------------

PRETRAIN_PREFIXES = ("prenet.", "encoder.", "mpc_head.")
PROBE_PREFIXES = ("decoder.", "ctc_head.")


def _pretrain_batch(state: TrainState, utts: Sequence[Utterance], mcfg: ModelConfig, branch: Branch,
                    cfg: StageConfig) -> tuple[Tensor, float]:
    o = cfg.objective
    losses = []
    for u in utts:
        if branch is Branch.MPC:
            seq = FeatureSequence(u.frames, u.uid)
            plan = plan_masks(u.frames.shape[0], u.valid, state.mask_rng, o.mask_chunk, o.mask_prob)
            enc = encode(apply_mask(seq, plan).frames, state.params, mcfg, "full")
            pred = mpc_projection_reshape(enc, state.params, mcfg.r, mcfg.feat_dim)
            losses.append(mpc_loss(pred, u.frames, plan.frame_mask))
        else:
            enc = encode(u.frames, state.params, mcfg, "causal")
            pred = mpc_projection_reshape(enc, state.params, mcfg.r, mcfg.feat_dim)
            losses.append(apc_loss(pred, u.frames, o.apc_step, u.valid))
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    total = total * (1.0 / len(losses))
    return total, total.item()


def run_pretraining(cfg: StageConfig, state: TrainState, utts: list[Utterance], mcfg: ModelConfig,
                    n_epochs: int, objective: str, metrics: MetricsLog, norm: Normalizer,
                    parent: str | None) -> list[Path]:
    warm = WarmupConfig(cfg.schedule.k, cfg.schedule.warmup_n, mcfg.d_model, cfg.schedule.dmodel_exponent)
    unified = UnifiedConfig(cfg.objective.p)
    names = [n for n in state.params if n.startswith(PRETRAIN_PREFIXES)]
    saved = []
    stop = state.epoch + n_epochs
    while state.epoch < stop:
        epoch = state.epoch
        for idx in batches(epoch_order(cfg.run.seed, epoch, len(utts)), cfg.train.batch_size):
            t0 = time.perf_counter()
            if objective == "unified":
                branch = choose_branch(unified, state.branch_rng)
            else:
                branch = Branch.APC if objective == "apc" else Branch.MPC
            loss, value = _pretrain_batch(state, [utts[i] for i in idx], mcfg, branch, cfg)
            grads = backward(loss, {n: state.params[n] for n in names})
            state.step += 1
            lr = lrate(warm, state.step)
            adam_step(state.params, grads, state.adam, lr, cfg.schedule.weight_decay, names=names)
            is_mpc = branch is Branch.MPC
            metrics.write(MetricsRecord(
                step=state.step, epoch=epoch, stage=cfg.stage, l_attn=0.0, l_ctc=0.0,
                l_mpc=value if is_mpc else 0.0, l_apc=0.0 if is_mpc else value,
                alpha_attn=0.0, beta_ctc=0.0, gamma_mpc=1.0 if is_mpc else 0.0, total=value, lr=lr,
                group_lr={"prenet": lr, "encoder": lr, "mpc_head": lr}, branch=branch.value,
                wall_ms=(time.perf_counter() - t0) * 1e3))
        state.epoch += 1
        saved.append(_save_epoch(make_checkpoint(state, mcfg, cfg, norm, parent,
                                                 {"objective": objective}), cfg.out_dir))
        log.info("%s epoch %d done, last loss %.4f", cfg.stage, state.epoch, metrics.records[-1].total
                 if metrics.records else float("nan"))
    return saved


def _unlabeled_corpus(cfg: StageConfig, mcfg: ModelConfig) -> tuple[list[Utterance], Normalizer]:
    if not cfg.data.manifest:
        raise ConfigError("data.manifest is required")
    manifest = read_manifest(cfg.path(cfg.data.manifest))
    if not manifest.entries:
        raise DataError(f"{cfg.data.manifest}: empty manifest")
    seqs = _load_entries(manifest.entries)          # transcripts deliberately ignored
    _check_dim(seqs, mcfg)
    norm = fit_normalizer(seqs)
    return prepare(seqs, norm), norm


def cmd_pretrain(cfg: StageConfig, init=None) -> StageResult:
    """MPC / APC / unified pre-training; ``init`` resumes an earlier run."""
    mcfg = cfg.model.model_config()
    utts, norm = _unlabeled_corpus(cfg, mcfg)
    ckpt = _load_init(init or cfg.init)
    if ckpt is not None:
        if ckpt.model_config != mcfg:
            raise ConfigError("resume checkpoint model config differs from [model]")
        state = state_from_checkpoint(ckpt, cfg.run.seed)
        parent = ckpt.parent_digest
    else:
        state = TrainState.fresh(init_params(mcfg, cfg.run.seed), cfg.run.seed)
        parent = None
    metrics = MetricsLog(cfg.out_dir / "metrics.jsonl", append=ckpt is not None)
    saved = run_pretraining(cfg, state, utts, mcfg, max(cfg.train.epochs - state.epoch, 0),
                            cfg.objective.kind, metrics, norm, parent)
    _finish_plots(cfg, metrics)
    return StageResult(cfg.out_dir, saved, metrics.records)


def cmd_adapt(cfg: StageConfig, init=None) -> StageResult:
    """Continue MPC-only training on target-task features for target_adapt_epochs."""
    ckpt = _load_init(init or cfg.init)
    if ckpt is None:
        raise ConfigError("adapt needs --init with a pre-trained checkpoint")
    mcfg = ckpt.model_config
    utts, norm = _unlabeled_corpus(cfg, mcfg)
    state = state_from_checkpoint(ckpt, cfg.run.seed)
    metrics = MetricsLog(cfg.out_dir / "metrics.jsonl", append=False)
    saved = run_pretraining(cfg, state, utts, mcfg, cfg.transfer.target_adapt_epochs, "mpc",
                            metrics, norm, ckpt.digest())
    if not saved:
        out = make_checkpoint(state, mcfg, cfg, norm, ckpt.digest(), {"objective": "mpc"})
        saved.append(_save_epoch(out, cfg.out_dir))
    _finish_plots(cfg, metrics)
    return StageResult(cfg.out_dir, saved, metrics.records)


# fine-tuning --------------------------------------------------------------------------

def _utterance_losses(params, mcfg: ModelConfig, u: Utterance, cfg: StageConfig, gamma: float,
                      mask_rng: np.random.Generator | None, attention: str) -> LossBreakdown:
    o = cfg.objective
    seq = FeatureSequence(u.frames, u.uid)
    plan = None
    if mask_rng is not None:
        plan = plan_masks(u.frames.shape[0], u.valid, mask_rng, o.mask_chunk, o.mask_prob)
        masked = apply_mask(seq, plan).frames
        enc_task = encode(masked if not cfg.transfer.dual_pass else u.frames, params, mcfg, attention)
        enc_mpc = enc_task if not cfg.transfer.dual_pass else encode(masked, params, mcfg, attention)
    else:
        enc_task = enc_mpc = encode(u.frames, params, mcfg, attention)
    y = list(u.transcript)
    parts = {
        "ctc": ctc_loss(ctc_logits(enc_task, params), y),
        "attn": attention_ce_loss(decoder_forward([0] + y, enc_task, params, mcfg), y + [0],
                                  o.label_smoothing),
    }
    if plan is not None:
        pred = mpc_projection_reshape(enc_mpc, params, mcfg.r, mcfg.feat_dim)
        parts["mpc"] = mpc_loss(pred, u.frames, plan.frame_mask)
    return joint_loss(parts, o.alpha_attn, o.beta_ctc, gamma)


def per_param_lr(base: float, names: Sequence[str], mcfg: ModelConfig,
                 layerwise: LayerwiseConfig | None) -> dict[str, float]:
    """Learning rate handed to the optimizer for each parameter."""
    out = {}
    for n in names:
        group = param_group(n, mcfg.enc_layers)
        if layerwise is not None and group.startswith("encoder."):
            out[n] = base * layer_multiplier(layerwise, int(group.split(".")[1]), mcfg.enc_layers)
        else:
            out[n] = base
    return out


def _group_lr(lrs: dict[str, float], mcfg: ModelConfig) -> dict[str, float]:
    groups: dict[str, float] = {}
    for n, v in lrs.items():
        groups.setdefault(param_group(n, mcfg.enc_layers), v)
    return groups


def dev_evaluate(params, mcfg: ModelConfig, utts: Sequence[Utterance], cfg: StageConfig,
                 attention: str) -> dict:
    """Clean-input losses and greedy-CTC CER over a labeled set."""
    if not utts:
        return {}
    la = lc = 0.0
    edits = ref_len = 0
    for u in utts:
        enc = encode(u.frames, params, mcfg, attention)
        y = list(u.transcript)
        logits = ctc_logits(enc, params)
        lc += ctc_loss(logits, y).item()
        la += attention_ce_loss(decoder_forward([0] + y, enc, params, mcfg), y + [0],
                                cfg.objective.label_smoothing).item()
        edits += edit_distance(y, ctc_greedy_decode(logits))
        ref_len += len(y)
    n = len(utts)
    la, lc = la / n, lc / n
    return {"l_attn": la, "l_ctc": lc, "dev_loss": cfg.objective.alpha_attn * la + cfg.objective.beta_ctc * lc,
            "dev_cer": edits / max(ref_len, 1)}


def _labeled_utts(cfg: StageConfig, mcfg: ModelConfig, norm: Normalizer | None = None):
    train_e, dev_e = _labeled_sets(cfg, mcfg.vocab_size)
    train_s, dev_s = _load_entries(train_e), _load_entries(dev_e)
    _check_dim(train_s + dev_s, mcfg)
    if norm is None:
        norm = fit_normalizer(train_s)
    train = prepare(train_s, norm, [e.transcript for e in train_e])
    dev = prepare(dev_s, norm, [e.transcript for e in dev_e]) if dev_s else []
    return train, dev, norm


def transfer_params(mcfg: ModelConfig, seed: int, source: Checkpoint | None, keep_mpc_head: bool):
    """Fresh parameters with prenet+encoder (and optionally the MPC head) copied from ``source``."""
    params = init_params(mcfg, seed)
    if source is None:
        return params
    src = source.model_config
    for f in ("enc_layers", "d_model", "d_ff", "heads", "feat_dim", "prenet_channels"):
        if getattr(src, f) != getattr(mcfg, f):
            raise ConfigError(f"init checkpoint {f}={getattr(src, f)} differs from model {getattr(mcfg, f)}")
    prefixes = ENCODER_PREFIXES + (("mpc_head.",) if keep_mpc_head else ())
    for name, arr in source.params.items():
        if name.startswith(prefixes):
            params[name] = Tensor(arr.copy(), requires_grad=True, name=name)
    return params


def cmd_finetune(cfg: StageConfig, init=None) -> StageResult:
    """Supervised attention+CTC training, optionally from a pre-trained encoder."""
    mcfg = cfg.model.model_config()
    tr = cfg.transfer
    ckpt = _load_init(init or cfg.init)
    resume = ckpt is not None and ckpt.stage == "finetune"
    if tr.multitask_mpc and ckpt is None:
        raise ConfigError("multitask_mpc needs an MPC head from a pre-trained --init checkpoint")
    train, dev, norm = _labeled_utts(cfg, mcfg, ckpt.normalizer if resume else None)
    if resume:
        if ckpt.model_config != mcfg:
            raise ConfigError("resume checkpoint model config differs from [model]")
        state = state_from_checkpoint(ckpt, cfg.run.seed)
        parent = ckpt.parent_digest
    else:
        params = transfer_params(mcfg, cfg.run.seed, ckpt, tr.multitask_mpc)
        state = TrainState.fresh(params, cfg.run.seed)
        parent = None if ckpt is None else ckpt.digest()
    s = cfg.schedule
    warm = WarmupConfig(s.k, s.warmup_n, mcfg.d_model, s.dmodel_exponent)
    lw = LayerwiseConfig(s.lam, s.theta) if tr.layerwise else None
    gsched = MpcWeightSchedule(s.gamma0, s.halve_every)
    names = [n for n in state.params if tr.multitask_mpc or not n.startswith("mpc_head.")]
    attention = cfg.model.attention

    metrics = MetricsLog(cfg.out_dir / "metrics.jsonl", append=resume)
    dev_log = cfg.out_dir / "dev_metrics.jsonl"
    dev_records = []
    if not resume:
        dev_log.write_text("", encoding="utf-8")
        if dev:
            rec = {"epoch": 0, **dev_evaluate(state.params, mcfg, dev, cfg, attention)}
            dev_records.append(rec)
            with open(dev_log, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    saved = []
    while state.epoch < cfg.train.epochs:
        epoch = state.epoch
        gamma = gamma_mpc(gsched, epoch) if tr.multitask_mpc else 0.0
        for idx in batches(epoch_order(cfg.run.seed, epoch, len(train)), cfg.train.batch_size):
            t0 = time.perf_counter()
            mask_rng = state.mask_rng if tr.multitask_mpc else None
            parts = [_utterance_losses(state.params, mcfg, train[i], cfg, gamma, mask_rng, attention)
                     for i in idx]
            bd = mean_breakdown(parts)
            grads = backward(bd.total, {n: state.params[n] for n in names})
            state.step += 1
            base = lrate(warm, state.step)
            lrs = per_param_lr(base, names, mcfg, lw)
            adam_step(state.params, grads, state.adam, lrs, s.weight_decay, names=names)
            vals = bd.as_dict()
            metrics.write(MetricsRecord(
                step=state.step, epoch=epoch, stage=cfg.stage, l_attn=vals["l_attn"], l_ctc=vals["l_ctc"],
                l_mpc=vals["l_mpc"], l_apc=0.0, alpha_attn=bd.alpha_attn, beta_ctc=bd.beta_ctc,
                gamma_mpc=bd.gamma_mpc, total=vals["total"], lr=base, group_lr=_group_lr(lrs, mcfg),
                branch=None, wall_ms=(time.perf_counter() - t0) * 1e3))
        state.epoch += 1
        if dev:
            rec = {"epoch": state.epoch, **dev_evaluate(state.params, mcfg, dev, cfg, attention)}
            dev_records.append(rec)
            with open(dev_log, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        saved.append(_save_epoch(make_checkpoint(state, mcfg, cfg, norm, parent,
                                                 {"layerwise": tr.layerwise,
                                                  "multitask_mpc": tr.multitask_mpc}), cfg.out_dir))
    _finish_plots(cfg, metrics, dev_records)
    return StageResult(cfg.out_dir, saved, metrics.records, {"dev": dev_records, "normalizer": norm})


# probing --------------------------------------------------------------------------------

def cmd_probe(cfg: StageConfig, init=None) -> StageResult:
    """Per depth l: frozen prenet + encoder layers 1..l, fresh decoder and CTC head trained on top."""
    ckpt = _load_init(init or cfg.init)
    if ckpt is None:
        raise ConfigError("probe needs --init with a pre-trained checkpoint")
    mcfg = cfg.model.model_config()
    train, dev, norm = _labeled_utts(cfg, mcfg)
    frozen = transfer_params(mcfg, cfg.run.seed, ckpt, keep_mpc_head=False)
    attention = cfg.model.attention
    o, s = cfg.objective, cfg.schedule

    def features_by_depth(utts):
        out = []
        for u in utts:
            h = frontend(u.frames, frozen)
            layers = encoder_forward(h, make_mask(attention, h.shape[0]), frozen, mcfg)
            g, b = frozen["encoder.final_ln.gain"], frozen["encoder.final_ln.bias"]
            out.append([Tensor(layer_norm(x, g, b).data) for x in layers])
        return out

    def losses(params, feats, y):
        return joint_loss({"ctc": ctc_loss(ctc_logits(feats, params), y),
                           "attn": attention_ce_loss(decoder_forward([0] + y, feats, params, mcfg), y + [0],
                                                     o.label_smoothing)},
                          o.alpha_attn, o.beta_ctc, 0.0)

    train_f, dev_f = features_by_depth(train), features_by_depth(dev)
    rows = []
    for l in range(1, mcfg.enc_layers + 1):
        params = init_params(mcfg, cfg.run.seed)
        names = [n for n in params if n.startswith(PROBE_PREFIXES)]
        adam = AdamState()
        warm = WarmupConfig(s.k, s.warmup_n, mcfg.d_model, s.dmodel_exponent)
        step = 0
        for epoch in range(cfg.probe.epochs):
            for idx in batches(epoch_order(cfg.run.seed, epoch, len(train)), cfg.train.batch_size):
                bd = mean_breakdown([losses(params, train_f[i][l - 1], list(train[i].transcript))
                                     for i in idx])
                grads = backward(bd.total, {n: params[n] for n in names})
                step += 1
                adam_step(params, grads, adam, lrate(warm, step), s.weight_decay, names=names)
        la = lc = 0.0
        edits = ref_len = 0
        for u, feats in zip(dev, dev_f):
            y = list(u.transcript)
            bd = losses(params, feats[l - 1], y)
            la += bd.l_attn.item()
            lc += bd.l_ctc.item()
            edits += edit_distance(y, ctc_greedy_decode(ctc_logits(feats[l - 1], params)))
            ref_len += len(y)
        n = max(len(dev), 1)
        la, lc = la / n, lc / n
        rows.append({"layer": l, "dev_loss": o.alpha_attn * la + o.beta_ctc * lc,
                     "dev_cer": edits / max(ref_len, 1)})
        log.info("probe layer %d: dev_loss %.4f dev_cer %.4f", l, rows[-1]["dev_loss"], rows[-1]["dev_cer"])

    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "probe.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["layer", "dev_loss", "dev_cer"])
        w.writeheader()
        for r in rows:
            w.writerow({"layer": r["layer"], "dev_loss": repr(r["dev_loss"]), "dev_cer": repr(r["dev_cer"])})
    if cfg.run.plots:
        plotting.plot_probe(rows, out / "probe.png")
    return StageResult(out, [], [], {"rows": rows, "frozen": frozen})


# averaging and evaluation ------------------------------------------------------------------

def average_params(ckpts: Sequence[Checkpoint]) -> dict[str, np.ndarray]:
    """Elementwise mean, accumulated as offsets from the first checkpoint."""
    first = ckpts[0].params
    out = {}
    for name, base in first.items():
        acc = np.zeros_like(base)
        for c in ckpts[1:]:
            acc = acc + (c.params[name] - base)
        out[name] = base + acc / len(ckpts)
    return out


def _ctc_scores(params, mcfg: ModelConfig, utts: Sequence[Utterance], attention: str):
    records = []
    for u in utts:
        logits = ctc_logits(encode(u.frames, params, mcfg, attention), params)
        ref, hyp = list(u.transcript), ctc_greedy_decode(logits)
        e = edit_distance(ref, hyp)
        records.append({"utterance_id": u.uid, "ref": ref, "hyp": hyp, "edits": e, "ref_len": len(ref),
                        "cer": e / len(ref) if ref else float(len(hyp) > 0)})
    return records


def _eval_utts(manifest_path: Path, ckpt: Checkpoint) -> list[Utterance]:
    m = read_manifest(manifest_path, vocab_size=ckpt.model_config.vocab_size)
    if not m.labeled:
        raise DataError(f"{manifest_path}: evaluation needs transcripts")
    seqs = _load_entries(m.entries)
    _check_dim(seqs, ckpt.model_config)
    norm = ckpt.normalizer or fit_normalizer(seqs)
    return prepare(seqs, norm, [e.transcript for e in m.entries])


def corpus_cer(records: Sequence[dict]) -> float:
    total = sum(r["ref_len"] for r in records)
    return sum(r["edits"] for r in records) / total if total else 0.0


def cmd_average(cfg: StageConfig, paths: Sequence | None = None) -> StageResult:
    """Score checkpoints on dev, average the k best (optimizer state dropped)."""
    if paths is None:
        paths = [cfg.path(p) for p in cfg.average.checkpoints.replace(",", " ").split()]
    if not paths:
        raise ConfigError("average.checkpoints lists no files")
    ckpts = [Checkpoint.load(p) for p in paths]
    k = cfg.average.k
    if k < 1 or len(ckpts) < k:
        raise ConfigError(f"need at least k={k} checkpoints, got {len(ckpts)}")
    ref = ckpts[0]
    for c in ckpts[1:]:
        if c.model_config != ref.model_config or set(c.params) != set(ref.params):
            raise ConfigError("checkpoints to average have different model configurations")
    dev_path = cfg.data.dev_manifest or cfg.data.manifest
    scores = []
    for c in ckpts:
        if dev_path:
            utts = _eval_utts(cfg.path(dev_path), c)
            scores.append(corpus_cer(_ctc_scores(arrays_to_params(c.params), c.model_config, utts,
                                                 cfg.model.attention)))
        else:
            scores.append(0.0)
    ranked = sorted(range(len(ckpts)), key=lambda i: scores[i])[:k]
    chosen = [ckpts[i] for i in ranked]
    best = chosen[0]
    out = Checkpoint(params=average_params(chosen), model_config=best.model_config, stage="average",
                     config_digest=cfg.digest(), epoch=best.epoch, step=best.step, adam=None,
                     rng_state={}, normalizer=best.normalizer, parent_digest=best.digest(),
                     info={"averaged": [str(paths[i]) for i in ranked], "dev_cer": [scores[i] for i in ranked],
                           "attention": best.info.get("attention", "full")})
    path = out.save(cfg.out_dir / "averaged.mpcc")
    return StageResult(cfg.out_dir, [path], [], {"scores": scores, "chosen": ranked})


def cmd_eval(cfg: StageConfig, init=None) -> StageResult:
    """Greedy CTC decoding and corpus CER over a labeled manifest."""
    ckpt = _load_init(init or cfg.init)
    if ckpt is None:
        raise ConfigError("eval needs --init CKPT")
    if not cfg.data.manifest:
        raise ConfigError("data.manifest is required")
    utts = _eval_utts(cfg.path(cfg.data.manifest), ckpt)
    records = _ctc_scores(arrays_to_params(ckpt.params), ckpt.model_config, utts, cfg.model.attention)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.jsonl", "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    report = {"corpus_cer": corpus_cer(records), "total_edits": sum(r["edits"] for r in records),
              "total_ref_len": sum(r["ref_len"] for r in records), "utterances": len(records),
              "attention": cfg.model.attention}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if cfg.run.plots:
        plotting.plot_eval(records, out / "eval.png")
    return StageResult(out, [], [], {"report": report, "records": records})


# synthesis -------------------------------------------------------------------------------

def synth_style(cfg: StageConfig, seed: int) -> SynthStyle:
    s = cfg.synth
    base = style_preset(s.style, seed)
    return SynthStyle(smoothness=base.smoothness if s.smoothness < 0 else s.smoothness,
                      pause_rate=base.pause_rate if s.pause_rate < 0 else s.pause_rate,
                      pitch_drift=base.pitch_drift if s.pitch_drift < 0 else s.pitch_drift,
                      seed=seed)


def cmd_synth(cfg: StageConfig) -> StageResult:
    """Write N feature files and a manifest (with transcripts when labeled)."""
    s = cfg.synth
    out = cfg.out_dir
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    rng = np.random.default_rng([cfg.run.seed, 0])
    lengths = rng.integers(s.min_frames, s.max_frames + 1, size=s.n)
    entries, spans = [], []
    first = None
    for i in range(s.n):
        style = synth_style(cfg, int(np.random.SeedSequence([cfg.run.seed, 7, i]).generate_state(1)[0]))
        seq, tokens = synth_labeled(style, int(lengths[i]), s.feat_dim, s.vocab_size)
        seq.utterance_id = f"{s.prefix}{i:05d}"
        path = out / f"{seq.utterance_id}.mpcf"
        try:
            save_features(seq, path)
        except OSError as exc:
            raise DataError(f"cannot write {path}: {exc}") from exc
        entries.append(ManifestEntry(path, tuple(tokens) if s.labeled else None))
        spans.append(len(tokens))
        first = first or (seq, tokens)
    write_manifest(Manifest(entries), out / "manifest.tsv")
    if cfg.run.plots:
        plotting.plot_features(first[0].frames, out / "synth_preview.png", title=first[0].utterance_id)
    return StageResult(out, [], [], {"manifest": out / "manifest.tsv", "spans": spans})


def _finish_plots(cfg: StageConfig, metrics: MetricsLog, dev_records: Sequence[dict] = ()) -> None:
    if cfg.run.plots and metrics.records:
        plotting.plot_training(metrics.records, cfg.out_dir / "training.png", dev_records)
