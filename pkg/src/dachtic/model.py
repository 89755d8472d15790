"""Hierarchical causal audio transformer with multi-task and domain heads.

Tokens are ordered time-major: all frequency patches of the first time
window, then the second window, and so on.  "Causal" therefore means a token
attends to earlier time windows and to lower-frequency patches of its own
window.
"""
from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .dsp import Spectrogram
from .tensor import Tensor

MAGIC = b"DACHTIC1\n"


@dataclass(frozen=True)
class EncoderConfig:
    patch_t: int = 16
    patch_f: int = 16
    stride_t: int = 8
    stride_f: int = 8
    width_d: int = 64
    n_heads: int = 4
    token_blocks: int = 2
    semantic_blocks: int = 1
    mlp_ratio: int = 4
    pool_factor: int = 2
    n_classes: int = 5
    n_domains: int = 2
    grl_lambda: float = 1.0
    # architecture switches used by the ablation variants
    causal: bool = True
    causal_semantic: bool = True
    hierarchical: bool = True
    multitask: bool = True
    domain_adversarial: bool = True
    max_positions: int = 4096

    def __post_init__(self):
        if self.width_d % self.n_heads:
            raise ValueError(f"width_d={self.width_d} not divisible by n_heads={self.n_heads}")
        if not (self.patch_t >= self.stride_t > 0 and self.patch_f >= self.stride_f > 0):
            raise ValueError("need patch >= stride > 0 on both axes")
        if self.pool_factor < 1:
            raise ValueError("pool_factor must be >= 1")
        if self.grl_lambda < 0:
            raise ValueError("grl_lambda must be >= 0")

    @classmethod
    def full_scale(cls, **overrides) -> "EncoderConfig":
        base = dict(width_d=384, n_heads=6, token_blocks=4, semantic_blocks=2)
        base.update(overrides)
        return cls(**base)

    @property
    def patch_len(self) -> int:
        return self.patch_t * self.patch_f

    def grid(self, n_frames: int, n_mels: int) -> tuple[int, int]:
        if n_frames < self.patch_t or n_mels < self.patch_f:
            raise ValueError("input too small")
        return ((n_frames - self.patch_t) // self.stride_t + 1,
                (n_mels - self.patch_f) // self.stride_f + 1)

    def block_names(self) -> tuple[list[str], list[str]]:
        if self.hierarchical:
            return ([f"token.{i}" for i in range(self.token_blocks)],
                    [f"semantic.{i}" for i in range(self.semantic_blocks)])
        return [f"token.{i}" for i in range(self.token_blocks + self.semantic_blocks)], []


@dataclass
class TokenSequence:
    tokens: Tensor  # [B, N, d]
    n_time: int
    n_freq: int

    def __post_init__(self):
        if self.tokens.shape[-2] != self.n_time * self.n_freq:
            raise ValueError(f"{self.tokens.shape[-2]} tokens != {self.n_time} x {self.n_freq} grid")

    @property
    def n(self) -> int:
        return self.n_time * self.n_freq


@dataclass
class HeadOutputs:
    class_probs: Tensor  # [B, C]
    h_cls: Tensor  # [B, d]
    intensity: Tensor | None = None  # [B]
    relevance: Tensor | None = None  # [B, N] over token-stage positions
    domain_probs: Tensor | None = None  # [B, K]
    token_attention: list[np.ndarray] = field(default_factory=list)
    semantic_attention: list[np.ndarray] = field(default_factory=list)
    grid: tuple[int, int] = (0, 0)


# --- parameters ---------------------------------------------------------------

class ModelParams(OrderedDict):
    """Ordered name -> Tensor mapping of every learnable weight.

    Names starting with ``domain.`` form the domain classifier; everything else
    belongs to the shared encoder and task heads.
    """

    @property
    def theta_names(self) -> list[str]:
        return [k for k in self if not k.startswith("domain.")]

    @property
    def phi_names(self) -> list[str]:
        return [k for k in self if k.startswith("domain.")]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def copy(self) -> "ModelParams":
        return ModelParams((k, Tensor(v.data.copy(), requires_grad=True)) for k, v in self.items())

    def flat(self, names: list[str] | None = None) -> np.ndarray:
        names = list(self) if names is None else names
        return np.concatenate([self[k].data.reshape(-1) for k in names])

    def with_flat(self, vector, names: list[str] | None = None) -> "ModelParams":
        """Copy in which ``names`` are carved (differentiably) out of ``vector``."""
        names = list(self) if names is None else names
        vec = vector if isinstance(vector, Tensor) else Tensor(vector)
        out = ModelParams(self)
        offset = 0
        for k in names:
            shape = self[k].shape
            n = int(np.prod(shape))
            out[k] = T.reshape(T.slice_(vec, (slice(offset, offset + n),)), shape)
            offset += n
        if offset != vec.size:
            raise ValueError(f"vector has {vec.size} entries, parameters need {offset}")
        return out


def param_shapes(cfg: EncoderConfig) -> "OrderedDict[str, tuple[int, ...]]":
    d, hidden = cfg.width_d, cfg.mlp_ratio * cfg.width_d
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["embed.W"] = (d, cfg.patch_len)
    shapes["embed.b"] = (d,)
    token, semantic = cfg.block_names()
    for name in token + semantic:
        for w in ("Wq", "Wk", "Wv", "Wo"):
            shapes[f"{name}.{w}"] = (d, d)
        shapes[f"{name}.ffn.W1"] = (d, hidden)
        shapes[f"{name}.ffn.b1"] = (hidden,)
        shapes[f"{name}.ffn.W2"] = (hidden, d)
        shapes[f"{name}.ffn.b2"] = (d,)
        shapes[f"{name}.ln.scale"] = (d,)
        shapes[f"{name}.ln.shift"] = (d,)
    shapes["head.cls.W"] = (cfg.n_classes, d)
    shapes["head.cls.b"] = (cfg.n_classes,)
    shapes["head.int.W"] = (1, d)
    shapes["head.int.b"] = (1,)
    shapes["head.rel.W"] = (1, d)
    shapes["head.rel.b"] = (1,)
    shapes["domain.W1"] = (d, d)
    shapes["domain.b1"] = (d,)
    shapes["domain.W2"] = (cfg.n_domains, d)
    shapes["domain.b2"] = (cfg.n_domains,)
    return shapes


def init_params(cfg: EncoderConfig, rng: np.random.Generator | int = 0) -> ModelParams:
    """Fan-balanced uniform weights, zero biases, unit layer-norm scale."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    params = ModelParams()
    for name, shape in param_shapes(cfg).items():
        if name.endswith("ln.scale"):
            value = np.ones(shape)
        elif len(shape) == 1:
            value = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, size=shape)
        params[name] = Tensor(value, requires_grad=True)
    return params


# --- building blocks ----------------------------------------------------------

def patchify(X, cfg: EncoderConfig) -> tuple[np.ndarray, tuple[int, int]]:
    """Overlapping patches, flattened row-major, as [B, N, p_t * p_f] in time-major order."""
    values = X.values if isinstance(X, Spectrogram) else np.asarray(X, dtype=np.float64)
    if values.ndim == 2:
        values = values[None]
    _, n_frames, n_mels = values.shape
    n_time, n_freq = cfg.grid(n_frames, n_mels)
    win = np.lib.stride_tricks.sliding_window_view(values, (cfg.patch_t, cfg.patch_f), axis=(1, 2))
    win = win[:, ::cfg.stride_t, ::cfg.stride_f][:, :n_time, :n_freq]
    B = values.shape[0]
    return win.reshape(B, n_time * n_freq, cfg.patch_len).copy(), (n_time, n_freq)


def embed(patches, W_e, b_e) -> Tensor:
    """Tokens x_i = W_e vec(P_i) + b_e for every patch."""
    patches = patches if isinstance(patches, Tensor) else Tensor(patches)
    if patches.shape[-1] != W_e.shape[1]:
        raise T.ShapeError(f"embed: patch length {patches.shape[-1]} != W_e columns {W_e.shape[1]}")
    return T.add(T.matmul(patches, T.transpose(W_e, (1, 0))), b_e)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    rate = 1.0 / (10000.0 ** (np.arange(0, d, 2) / d))
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(pos * rate)
    table[:, 1::2] = np.cos(pos * rate[: d // 2])
    return table


def add_positional(tokens: Tensor, pos: np.ndarray) -> Tensor:
    n = tokens.shape[-2]
    if pos.shape[0] < n or pos.shape[1] != tokens.shape[-1]:
        raise ValueError(f"need {n} positional encodings of width {tokens.shape[-1]}, have {pos.shape}")
    return T.add(tokens, pos[:n])


def causal_mask(n: int) -> np.ndarray:
    """True above the diagonal: entries a query may not attend to."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def causal_attention(Z: Tensor, params: Mapping[str, Tensor], prefix: str, n_heads: int,
                     masked: bool = True) -> tuple[Tensor, np.ndarray]:
    """Multi-head scaled dot-product attention; returns output and [B, h, N, N] weights."""
    B, N, d = Z.shape
    dh = d // n_heads

    def heads(W):
        x = T.reshape(T.matmul(Z, params[f"{prefix}.{W}"]), (B, N, n_heads, dh))
        return T.transpose(x, (0, 2, 1, 3))

    q, k, v = heads("Wq"), heads("Wk"), heads("Wv")
    logits = T.scalar_mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = T.softmax(logits, causal_mask(N) if masked else None)
    ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (B, N, d))
    return T.matmul(ctx, params[f"{prefix}.Wo"]), attn.data


def encoder_block(Z: Tensor, params: Mapping[str, Tensor], prefix: str, cfg: EncoderConfig,
                  masked: bool = True) -> tuple[Tensor, np.ndarray]:
    """Z' = LayerNorm(Z + FFN(MHSA(Z)))."""
    a, weights = causal_attention(Z, params, prefix, cfg.n_heads, masked)
    h = T.relu(T.add(T.matmul(a, params[f"{prefix}.ffn.W1"]), params[f"{prefix}.ffn.b1"]))
    f = T.add(T.matmul(h, params[f"{prefix}.ffn.W2"]), params[f"{prefix}.ffn.b2"])
    out = T.layer_norm(T.add(Z, f), params[f"{prefix}.ln.scale"], params[f"{prefix}.ln.shift"])
    return out, weights


def pool_matrix(n_time: int, n_freq: int, pool_factor: int) -> np.ndarray:
    """[N', N] averaging matrix grouping consecutive time windows per frequency slot."""
    groups = -(-n_time // pool_factor)
    P = np.zeros((groups, n_time))
    for g in range(groups):
        members = range(g * pool_factor, min((g + 1) * pool_factor, n_time))
        P[g, list(members)] = 1.0 / len(members)
    return np.kron(P, np.eye(n_freq))


def temporal_pool(seq: TokenSequence, pool_factor: int) -> TokenSequence:
    if pool_factor < 1:
        raise ValueError("pool_factor must be >= 1")
    if pool_factor == 1:
        return seq
    P = pool_matrix(seq.n_time, seq.n_freq, pool_factor)
    return TokenSequence(T.matmul(P, seq.tokens), -(-seq.n_time // pool_factor), seq.n_freq)


def token_stage(tokens: Tensor, params: Mapping[str, Tensor], cfg: EncoderConfig
                ) -> tuple[Tensor, list[np.ndarray]]:
    names, _ = cfg.block_names()
    attn = []
    for name in names:
        tokens, w = encoder_block(tokens, params, name, cfg, masked=cfg.causal)
        attn.append(w)
    return tokens, attn


def semantic_stage(Zp: Tensor, params: Mapping[str, Tensor], cfg: EncoderConfig
                   ) -> tuple[Tensor, list[np.ndarray]]:
    _, names = cfg.block_names()
    attn = []
    masked = cfg.causal and cfg.causal_semantic
    for name in names:
        Zp, w = encoder_block(Zp, params, name, cfg, masked=masked)
        attn.append(w)
    return Zp, attn


def domain_classifier(h: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    hidden = T.relu(T.add(T.matmul(h, T.transpose(params["domain.W1"], (1, 0))), params["domain.b1"]))
    logits = T.add(T.matmul(hidden, T.transpose(params["domain.W2"], (1, 0))), params["domain.b2"])
    return T.softmax(logits)


def heads(Z2: TokenSequence, params: Mapping[str, Tensor], cfg: EncoderConfig,
          token_grid: tuple[int, int] | None = None, grl_lambda: float | None = None,
          domain_branch: bool = True) -> HeadOutputs:
    """Class, intensity, relevance and (through gradient reversal) domain outputs.

    Relevance is scored per semantic token and broadcast back to the
    ``token_grid`` positions each pooled token summarises, so ``relevance`` is
    always indexed like the patch sequence.
    """
    z = Z2.tokens
    h = T.mean(z, axis=-2)

    def linear(x, name):
        return T.add(T.matmul(x, T.transpose(params[f"{name}.W"], (1, 0))), params[f"{name}.b"])

    out = HeadOutputs(class_probs=T.softmax(linear(h, "head.cls")), h_cls=h)
    if cfg.multitask:
        out.intensity = T.reshape(T.sigmoid(linear(h, "head.int")), (h.shape[0],))
        rel_logit = T.reshape(linear(z, "head.rel"), z.shape[:-1])
        if token_grid is not None and token_grid != (Z2.n_time, Z2.n_freq):
            up = (pool_matrix(token_grid[0], token_grid[1], cfg.pool_factor) > 0).astype(float)
            rel_logit = T.matmul(rel_logit, up)
        out.relevance = T.sigmoid(rel_logit)
    if cfg.domain_adversarial and domain_branch:
        lam = cfg.grl_lambda if grl_lambda is None else grl_lambda
        out.domain_probs = domain_classifier(T.grl(h, lam), params)
    return out


def forward(params: Mapping[str, Tensor], cfg: EncoderConfig, X, *, grl_lambda: float | None = None,
            domain_branch: bool = True) -> HeadOutputs:
    """patchify -> embed -> positions -> token stage -> pool -> semantic stage -> heads.

    ``X`` is a Spectrogram, a [T, F] array, or a [B, T, F] batch.
    """
    patches, (n_time, n_freq) = patchify(X, cfg)
    x = embed(patches, params["embed.W"], params["embed.b"])
    x = add_positional(x, sinusoidal_positions(n_time * n_freq, cfg.width_d))
    z1, token_attn = token_stage(x, params, cfg)
    seq = TokenSequence(z1, n_time, n_freq)
    sem_attn: list[np.ndarray] = []
    if cfg.hierarchical:
        seq = temporal_pool(seq, cfg.pool_factor)
        z2, sem_attn = semantic_stage(seq.tokens, params, cfg)
        seq = TokenSequence(z2, seq.n_time, seq.n_freq)
    out = heads(seq, params, cfg, token_grid=(n_time, n_freq), grl_lambda=grl_lambda,
                domain_branch=domain_branch)
    out.token_attention = token_attn
    out.semantic_attention = sem_attn
    out.grid = (n_time, n_freq)
    return out


# --- checkpoint container -----------------------------------------------------

def config_to_dict(cfg) -> dict:
    return asdict(cfg)


def encoder_config_from_dict(d: Mapping) -> EncoderConfig:
    known = {f.name for f in fields(EncoderConfig)}
    return EncoderConfig(**{k: v for k, v in d.items() if k in known})


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray], cfg: EncoderConfig,
                    meta: Mapping | None = None) -> None:
    """Write ``arrays`` (name -> float64 array) plus config/meta to one versioned file.

    Layout: magic line, little-endian u64 header length, sorted-key JSON header,
    then each array's float64 little-endian bytes in header order.
    """
    names = list(arrays)
    header = {
        "format": "DACHTIC1",
        "encoder": config_to_dict(cfg),
        "meta": dict(meta or {}),
        "tensors": [{"name": k, "shape": list(np.shape(arrays[k]))} for k in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], EncoderConfig, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a DACHTIC1 checkpoint")
    pos = len(MAGIC)
    (n,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    header = json.loads(raw[pos:pos + n])
    pos += n
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = pos + 8 * count
        if end > len(raw):
            raise ValueError(f"{path}: truncated at tensor {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw[pos:end], dtype="<f8").reshape(entry["shape"]).copy()
        pos = end
    return arrays, encoder_config_from_dict(header["encoder"]), header["meta"]


def params_from_arrays(arrays: Mapping[str, np.ndarray], cfg: EncoderConfig) -> ModelParams:
    params = ModelParams()
    for name, shape in param_shapes(cfg).items():
        if name not in arrays:
            raise ValueError(f"checkpoint lacks parameter {name}")
        if tuple(arrays[name].shape) != shape:
            raise ValueError(f"parameter {name} has shape {arrays[name].shape}, config needs {shape}")
        params[name] = Tensor(arrays[name].copy(), requires_grad=True)
    return params
