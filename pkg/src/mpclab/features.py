"""Filterbank-like feature sequences: synthesis, file I/O, manifests, normalization."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import (BadMagicError, ConfigError, DataError, ShapeMismatchError,
                     TruncatedPayloadError)

MAGIC = b"MPCF"
VERSION = 1
_HEADER = struct.Struct("<4sIII")

STD_FLOOR = 1e-5
DEFAULT_FEAT_DIM = 40

# fixed seed for token band templates: every corpus shares one "phone inventory"
_TEMPLATE_SEED = 20200527


@dataclass
class FeatureSequence:
    frames: np.ndarray
    utterance_id: str = ""
    sample_rate_tag: int = 16000

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise DataError(f"frames must be a non-empty T x D matrix, got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise DataError(f"non-finite feature values in {self.utterance_id!r}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class SynthStyle:
    """Knobs of the synthetic generator.

    smoothness is the per-bin AR(1) coefficient, pause_rate the expected
    number of low-energy segments per 100 frames, pitch_drift the
    amplitude of a slow sinusoid sweeping across bins.
    """

    smoothness: float = 0.9
    pause_rate: float = 0.5
    pitch_drift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.smoothness <= 1.0:
            raise ConfigError(f"smoothness must lie in [0, 1], got {self.smoothness}")
        if self.pause_rate < 0:
            raise ConfigError(f"pause_rate must be >= 0, got {self.pause_rate}")
        if self.pitch_drift < 0:
            raise ConfigError(f"pitch_drift must be >= 0, got {self.pitch_drift}")


STYLE_PRESETS = {
    "reading": dict(smoothness=0.9, pause_rate=0.5, pitch_drift=0.3),
    "spontaneous": dict(smoothness=0.6, pause_rate=3.0, pitch_drift=0.8),
}


def style_preset(name: str, seed: int = 0) -> SynthStyle:
    try:
        return SynthStyle(seed=seed, **STYLE_PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown style preset {name!r}; choose from {sorted(STYLE_PRESETS)}") from None


def _band_noise(rng: np.random.Generator, T: int, D: int) -> np.ndarray:
    white = rng.standard_normal((T, D))
    if D < 3:
        return white
    # neighbouring bins share energy; renormalized to unit variance
    w = np.array([0.25, 0.5, 0.25])
    padded = np.pad(white, ((0, 0), (1, 1)), mode="wrap")
    banded = w[0] * padded[:, :-2] + w[1] * padded[:, 1:-1] + w[2] * padded[:, 2:]
    return banded / np.sqrt(np.sum(w * w))


def _envelope(D: int) -> np.ndarray:
    return 1.0 - np.linspace(0.0, 1.5, D)


def _background(style: SynthStyle, rng: np.random.Generator, T: int, D: int) -> np.ndarray:
    a = style.smoothness
    e = _band_noise(rng, T, D)
    x = np.empty((T, D))
    x[0] = e[0]
    gain = np.sqrt(1.0 - a * a)
    for t in range(1, T):
        x[t] = a * x[t - 1] + gain * e[t]

    if style.pitch_drift > 0:
        period = rng.uniform(150.0, 300.0)
        phase = rng.uniform(0, 2 * np.pi)
        t = np.arange(T)[:, None]
        bins = np.arange(D)[None, :]
        x = x + style.pitch_drift * np.sin(2 * np.pi * t / period + phase + 0.3 * bins)

    if style.pause_rate > 0:
        n_pauses = rng.poisson(style.pause_rate * T / 100.0)
        for _ in range(n_pauses):
            start = int(rng.integers(0, T))
            length = int(rng.integers(4, 13))
            x[start:start + length] *= 0.2
    return x + _envelope(D)


def synth_generate(style: SynthStyle, T: int, D: int) -> FeatureSequence:
    """Draw a T x D feature matrix from ``style`` (deterministic in its seed)."""
    if T < 1 or D < 1:
        raise ConfigError(f"T and D must be >= 1, got T={T}, D={D}")
    rng = np.random.default_rng(style.seed)
    return FeatureSequence(_background(style, rng, T, D), utterance_id=f"synth-{style.seed}")


def token_templates(vocab_size: int, D: int) -> np.ndarray:
    """Band-energy pattern for each token id (row 0, the blank, is zero)."""
    rng = np.random.default_rng(_TEMPLATE_SEED)
    bins = np.arange(D)
    out = np.zeros((vocab_size, D))
    n = max(vocab_size - 1, 1)
    width = max(D / (2.0 * n), 1.0)
    for k in range(1, vocab_size):
        centre = (k - 0.5) / n * (D - 1)
        second = rng.uniform(0, D - 1)
        out[k] = 2.5 * np.exp(-0.5 * ((bins - centre) / width) ** 2)
        out[k] += 1.2 * np.exp(-0.5 * ((bins - second) / width) ** 2)
    return out


def latent_spans(rng: np.random.Generator, T: int, vocab_size: int,
                 min_span: int = 12, max_span: int = 20, max_gap: int = 6) -> list[tuple[int, int, int]]:
    """Non-overlapping (start, stop, token) spans; consecutive tokens differ."""
    spans: list[tuple[int, int, int]] = []
    # extended CTC label must fit the 4x-downsampled length
    max_tokens = max((T // 4 - 1) // 2, 0)
    pos = int(rng.integers(0, max_gap + 1))
    prev = 0
    while len(spans) < max_tokens:
        length = int(rng.integers(min_span, max_span + 1))
        if pos + length > T:
            break
        token = int(rng.integers(1, vocab_size))
        if token == prev and vocab_size > 2:
            token = token % (vocab_size - 1) + 1
        spans.append((pos, pos + length, token))
        prev = token
        pos += length + int(rng.integers(0, max_gap + 1))
    return spans


def synth_labeled(style: SynthStyle, T: int, D: int, vocab_size: int) -> tuple[FeatureSequence, list[int]]:
    """Background from ``style`` plus token band patterns over latent spans.

    Returns the sequence and the token id list, one id per span.
    """
    if vocab_size < 2:
        raise ConfigError(f"vocab_size must be >= 2 (blank plus one token), got {vocab_size}")
    if T < 1 or D < 1:
        raise ConfigError(f"T and D must be >= 1, got T={T}, D={D}")
    rng = np.random.default_rng(style.seed)
    frames = _background(style, rng, T, D)
    templates = token_templates(vocab_size, D)
    tokens = []
    for start, stop, token in latent_spans(rng, T, vocab_size):
        taper = np.hanning(stop - start + 2)[1:-1, None]
        frames[start:stop] += taper * templates[token]
        tokens.append(token)
    return FeatureSequence(frames, utterance_id=f"synth-{style.seed}"), tokens


# binary feature files -------------------------------------------------------

def save_features(seq: FeatureSequence, path) -> None:
    T, D = seq.frames.shape
    payload = np.ascontiguousarray(seq.frames, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, T, D))
        fh.write(payload)


def load_features(path, utterance_id: str | None = None) -> FeatureSequence:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a feature file (magic {raw[:4]!r})")
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated ({len(raw)} bytes)")
    _, version, T, D = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise DataError(f"{path}: unsupported feature file version {version}")
    expected = T * D * 4
    body = len(raw) - _HEADER.size
    if body < expected:
        raise TruncatedPayloadError(f"{path}: header claims {T}x{D} frames, payload holds {body // 4} values")
    if body > expected:
        raise ShapeMismatchError(f"{path}: payload has {body - expected} bytes beyond {T}x{D}")
    frames = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(T, D).astype(np.float64)
    uid = utterance_id if utterance_id is not None else Path(path).stem
    return FeatureSequence(frames, utterance_id=uid)


# manifests --------------------------------------------------------------------

@dataclass
class ManifestEntry:
    feature_path: Path
    transcript: tuple[int, ...] | None = None

    @property
    def utterance_id(self) -> str:
        return self.feature_path.stem


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def labeled(self) -> bool:
        return bool(self.entries) and all(e.transcript is not None for e in self.entries)

    def load(self) -> list[FeatureSequence]:
        return [load_features(e.feature_path) for e in self.entries]


def read_manifest(path, vocab_size: int | None = None, validate: bool = True) -> Manifest:
    """Parse ``feature_path<TAB>token ids`` lines; relative paths resolve against the manifest."""
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fpath, _, tokens = line.partition("\t")
        transcript = None
        if tokens.strip():
            try:
                transcript = tuple(int(t) for t in tokens.split())
            except ValueError:
                raise DataError(f"{path}:{lineno}: token ids must be integers") from None
            if vocab_size is not None and any(t < 0 or t >= vocab_size for t in transcript):
                raise DataError(f"{path}:{lineno}: token id outside vocabulary of size {vocab_size}")
        fp = Path(fpath)
        entries.append(ManifestEntry(fp if fp.is_absolute() else base / fp, transcript))
    manifest = Manifest(entries)
    if validate:
        dims = {load_features(e.feature_path).dim for e in entries}
        if len(dims) > 1:
            raise DataError(f"{path}: feature dimension differs across corpus: {sorted(dims)}")
    return manifest


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    lines = []
    for e in manifest.entries:
        try:
            fp = e.feature_path.relative_to(path.parent)
        except ValueError:
            fp = e.feature_path
        tokens = "" if e.transcript is None else "\t" + " ".join(str(t) for t in e.transcript)
        lines.append(f"{fp.as_posix()}{tokens}")
    path.write_text("".join(l + "\n" for l in lines), encoding="utf-8")


# normalization ------------------------------------------------------------------

@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)


def fit_normalizer(corpus: Manifest | Iterable[FeatureSequence]) -> Normalizer:
    seqs = corpus.load() if isinstance(corpus, Manifest) else list(corpus)
    if not seqs:
        raise DataError("cannot fit a normalizer on an empty corpus")
    stacked = np.concatenate([s.frames for s in seqs], axis=0)
    return Normalizer(stacked.mean(axis=0), stacked.std(axis=0))


def apply_normalizer(seq: FeatureSequence, norm: Normalizer) -> FeatureSequence:
    if seq.dim != norm.mean.shape[0]:
        raise DataError(f"normalizer has {norm.mean.shape[0]} bins, sequence has {seq.dim}")
    return FeatureSequence((seq.frames - norm.mean) / norm.std, seq.utterance_id, seq.sample_rate_tag)


def pad_to_multiple(seq: FeatureSequence, r: int) -> tuple[FeatureSequence, int]:
    """Append zero frames up to the next multiple of ``r``; returns (padded, original T)."""
    if r < 1:
        raise ConfigError(f"r must be >= 1, got {r}")
    T = seq.num_frames
    extra = (-T) % r
    if extra == 0:
        return seq, T
    frames = np.concatenate([seq.frames, np.zeros((extra, seq.dim))], axis=0)
    return FeatureSequence(frames, seq.utterance_id, seq.sample_rate_tag), T
