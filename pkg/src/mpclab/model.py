"""Strided conv prenet, switchable full/causal Transformer encoder, MPC head and decoder."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .numerics import (Tensor, as_tensor, conv1d, layer_norm, masked_softmax, relu, ShapeError)

BLANK = 0
DOWNSAMPLE = 4


@dataclass(frozen=True)
class ModelConfig:
    enc_layers: int = 4
    dec_layers: int = 2
    d_model: int = 32
    d_ff: int = 64
    heads: int = 4
    feat_dim: int = 40
    vocab_size: int = 8
    prenet_channels: int = 32
    r: int = DOWNSAMPLE

    def __post_init__(self):
        if self.r != DOWNSAMPLE:
            raise ConfigError(f"downsample rate is fixed at {DOWNSAMPLE} (two stride-2 convs), got {self.r}")
        if self.enc_layers < 1:
            raise ConfigError("enc_layers must be >= 1")
        if self.dec_layers < 0:
            raise ConfigError("dec_layers must be >= 0")
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} must be divisible by heads={self.heads}")
        if self.d_model < 2 or self.d_ff < 1 or self.feat_dim < 1 or self.prenet_channels < 1:
            raise ConfigError("model dimensions must be positive (d_model >= 2)")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must include the blank and at least one token")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


@dataclass(frozen=True)
class AttentionMask:
    kind: str
    matrix: np.ndarray

    @classmethod
    def full(cls, t: int, s: int | None = None) -> AttentionMask:
        return cls("full", np.zeros((t, t if s is None else s)))


def causal_mask(t: int) -> AttentionMask:
    """Additive mask with -inf strictly above the diagonal."""
    if t < 1:
        raise ValueError(f"causal mask needs t >= 1, got {t}")
    m = np.zeros((t, t))
    m[np.triu_indices(t, k=1)] = -np.inf
    return AttentionMask("causal", m)


def make_mask(kind: str, t: int) -> AttentionMask:
    if kind == "full":
        return AttentionMask.full(t)
    if kind == "causal":
        return causal_mask(t)
    raise ConfigError(f"attention must be 'full' or 'causal', got {kind!r}")


# parameters ---------------------------------------------------------------

def _attn_shapes(prefix: str, d: int) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for p in ("q", "k", "v", "o"):
        out += [(f"{prefix}.w{p}", (d, d)), (f"{prefix}.b{p}", (d,))]
    return out


def _ln_shapes(prefix: str, d: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.gain", (d,)), (f"{prefix}.bias", (d,))]


def _ffn_shapes(prefix: str, d: int, f: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.w1", (d, f)), (f"{prefix}.b1", (f,)), (f"{prefix}.w2", (f, d)), (f"{prefix}.b2", (d,))]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map. Encoder layers are numbered from 1."""
    d, c = cfg.d_model, cfg.prenet_channels
    shapes = [
        ("prenet.conv1.weight", (3, cfg.feat_dim, c)), ("prenet.conv1.bias", (c,)),
        ("prenet.conv2.weight", (3, c, c)), ("prenet.conv2.bias", (c,)),
        ("prenet.proj.weight", (c, d)), ("prenet.proj.bias", (d,)),
    ]
    for l in range(1, cfg.enc_layers + 1):
        pre = f"encoder.layers.{l}"
        shapes += _ln_shapes(f"{pre}.ln1", d) + _attn_shapes(f"{pre}.attn", d)
        shapes += _ln_shapes(f"{pre}.ln2", d) + _ffn_shapes(f"{pre}.ffn", d, cfg.d_ff)
    shapes += _ln_shapes("encoder.final_ln", d)
    shapes += [("mpc_head.weight", (d, cfg.feat_dim * cfg.r)), ("mpc_head.bias", (cfg.feat_dim * cfg.r,))]
    shapes += [("ctc_head.weight", (d, cfg.vocab_size)), ("ctc_head.bias", (cfg.vocab_size,))]
    shapes += [("decoder.embed", (cfg.vocab_size, d))]
    for j in range(1, cfg.dec_layers + 1):
        pre = f"decoder.layers.{j}"
        shapes += _ln_shapes(f"{pre}.ln1", d) + _attn_shapes(f"{pre}.self_attn", d)
        shapes += _ln_shapes(f"{pre}.ln2", d) + _attn_shapes(f"{pre}.cross_attn", d)
        shapes += _ln_shapes(f"{pre}.ln3", d) + _ffn_shapes(f"{pre}.ffn", d, cfg.d_ff)
    shapes += _ln_shapes("decoder.final_ln", d)
    shapes += [("decoder.out.weight", (d, cfg.vocab_size)), ("decoder.out.bias", (cfg.vocab_size,))]
    return dict(shapes)


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name == "decoder.embed":
        return 1
    if len(shape) == 3:
        return shape[0] * shape[1]
    return shape[0]


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(_fan_in(name, shape))
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def count_params(params) -> int:
    return sum(p.size for p in params.values())


_ENC_LAYER = re.compile(r"^encoder\.layers\.(\d+)\.")


def encoder_layer_of(name: str, enc_layers: int) -> int | None:
    """Encoder layer (1-based) a parameter belongs to; the final norm counts as the top layer."""
    m = _ENC_LAYER.match(name)
    if m:
        return int(m.group(1))
    if name.startswith("encoder.final_ln"):
        return enc_layers
    return None


def param_group(name: str, enc_layers: int) -> str:
    layer = encoder_layer_of(name, enc_layers)
    if layer is not None:
        return f"encoder.{layer}"
    return name.split(".", 1)[0]


# forward pieces -------------------------------------------------------------

@lru_cache(maxsize=64)
def positional_encoding(t: int, d: int) -> np.ndarray:
    pos = np.arange(t)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((t, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    pe.setflags(write=False)
    return pe


def _linear(x: Tensor, params, prefix: str, w: str = "weight", b: str = "bias") -> Tensor:
    return x @ params[f"{prefix}.{w}"] + params[f"{prefix}.{b}"]


def _ln(x: Tensor, params, prefix: str) -> Tensor:
    return layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def prenet_forward(x, params) -> Tensor:
    """Two stride-2 kernel-3 convs with ReLU, then a linear map to d_model.

    Output row j sees input frames [4j-3, 4j+3].
    """
    x = as_tensor(x)
    if x.shape[0] % DOWNSAMPLE:
        raise ShapeError(f"prenet input length {x.shape[0]} is not a multiple of {DOWNSAMPLE}; pad first")
    h = relu(conv1d(x, params["prenet.conv1.weight"], stride=2) + params["prenet.conv1.bias"])
    h = relu(conv1d(h, params["prenet.conv2.weight"], stride=2) + params["prenet.conv2.bias"])
    return _linear(h, params, "prenet.proj")


def frontend(x, params) -> Tensor:
    h = prenet_forward(x, params)
    return h + positional_encoding(*h.shape)


def multi_head_attention(xq: Tensor, xkv: Tensor, params, prefix: str, heads: int,
                         mask: np.ndarray | None) -> Tensor:
    t, d = xq.shape
    s = xkv.shape[0]
    dk = d // heads

    def split(x, n, p):
        y = x @ params[f"{prefix}.w{p}"] + params[f"{prefix}.b{p}"]
        return y.reshape(n, heads, dk).transpose(1, 0, 2)

    q, k, v = split(xq, t, "q"), split(xkv, s, "k"), split(xkv, s, "v")
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(dk))
    att = masked_softmax(scores, np.zeros((t, s)) if mask is None else mask)
    ctx = (att @ v).transpose(1, 0, 2).reshape(t, d)
    return ctx @ params[f"{prefix}.wo"] + params[f"{prefix}.bo"]


def _ffn(x: Tensor, params, prefix: str) -> Tensor:
    h = relu(_linear(x, params, prefix, "w1", "b1"))
    return _linear(h, params, prefix, "w2", "b2")


def encoder_layer(h: Tensor, params, l: int, heads: int, mask: np.ndarray) -> Tensor:
    pre = f"encoder.layers.{l}"
    x = _ln(h, params, f"{pre}.ln1")
    h = h + multi_head_attention(x, x, params, f"{pre}.attn", heads, mask)
    return h + _ffn(_ln(h, params, f"{pre}.ln2"), params, f"{pre}.ffn")


def encoder_forward(h: Tensor, mask: AttentionMask, params, cfg: ModelConfig,
                    layers: int | None = None) -> list[Tensor]:
    """Run pre-norm layers 1..layers; returns every layer's output."""
    t = h.shape[0]
    if mask.matrix.shape != (t, t):
        raise ShapeError(f"attention mask {mask.matrix.shape} does not match sequence length {t}")
    n = cfg.enc_layers if layers is None else layers
    if not 1 <= n <= cfg.enc_layers:
        raise ConfigError(f"requested {n} encoder layers, model has {cfg.enc_layers}")
    outs = []
    for l in range(1, n + 1):
        h = encoder_layer(h, params, l, cfg.heads, mask.matrix)
        outs.append(h)
    return outs


def encode(x, params, cfg: ModelConfig, attention: str = "full", layers: int | None = None) -> Tensor:
    """Prenet + encoder + final norm on a padded T x D input."""
    h = frontend(x, params)
    outs = encoder_forward(h, make_mask(attention, h.shape[0]), params, cfg, layers)
    return _ln(outs[-1], params, "encoder.final_ln")


def reshape_blocks(y, r: int, D: int):
    """(t/r, D*r) -> (t, D): row u, block b becomes frame u*r + b."""
    u = y.shape[0]
    if y.shape[1] != D * r:
        raise ShapeError(f"projection width {y.shape[1]} != D*r = {D * r}")
    return y.reshape(u * r, D)


def unreshape_blocks(frames, r: int):
    t, D = frames.shape
    if t % r:
        raise ShapeError(f"{t} frames not divisible by r={r}")
    return frames.reshape(t // r, D * r)


def mpc_projection_reshape(h_e: Tensor, params, r: int, D: int) -> Tensor:
    w = params["mpc_head.weight"]
    if w.shape[1] != D * r or h_e.shape[1] != w.shape[0]:
        raise ShapeError(f"mpc head {w.shape} incompatible with input {h_e.shape}, D={D}, r={r}")
    return reshape_blocks(_linear(h_e, params, "mpc_head"), r, D)


def ctc_logits(enc_out: Tensor, params) -> Tensor:
    return _linear(enc_out, params, "ctc_head")


def decoder_forward(tokens: Sequence[int], enc_out: Tensor, params, cfg: ModelConfig) -> Tensor:
    """Teacher-forced logits (L x V) for decoder input ``tokens``."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 1:
        raise ShapeError("decoder needs a non-empty 1-D token sequence")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError(f"token id outside [0, {cfg.vocab_size})")
    L, d = ids.size, cfg.d_model
    h = params["decoder.embed"][ids] + positional_encoding(L, d)
    self_mask = causal_mask(L).matrix
    for j in range(1, cfg.dec_layers + 1):
        pre = f"decoder.layers.{j}"
        x = _ln(h, params, f"{pre}.ln1")
        h = h + multi_head_attention(x, x, params, f"{pre}.self_attn", cfg.heads, self_mask)
        x = _ln(h, params, f"{pre}.ln2")
        h = h + multi_head_attention(x, enc_out, params, f"{pre}.cross_attn", cfg.heads, None)
        h = h + _ffn(_ln(h, params, f"{pre}.ln3"), params, f"{pre}.ffn")
    h = _ln(h, params, "decoder.final_ln")
    return _linear(h, params, "decoder.out")


def attention_greedy_decode(enc_out: Tensor, params, cfg: ModelConfig, max_len: int) -> list[int]:
    """Autoregressive argmax decoding; id 0 doubles as start and end symbol."""
    out = [BLANK]
    for _ in range(max_len):
        logits = decoder_forward(out, enc_out, params, cfg)
        nxt = int(np.argmax(logits.data[-1]))
        if nxt == BLANK:
            break
        out.append(nxt)
    return out[1:]
