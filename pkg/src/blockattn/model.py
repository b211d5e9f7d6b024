"""Toy decoder-only transformer: pre-norm, grouped-query attention, gated FFN.

Weights are seeded random (no checkpoint loading). The forward pass takes an
explicit visibility mask so the same code serves causal prefill, the
block-masked monolithic pass and the final block of a cached prefill.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from pathlib import Path

import numpy as np

from . import rope as rope_mod
from . import tensor
from .splitmix import derive_seed, normal_stream

INIT_STD = 0.02
WEIGHTS_MAGIC = b"BAW1"

# byte-level tokenizer: ids 0..255 are bytes, 256..259 reserved specials
BYTE_VOCAB = 256
BOS, EOS, SEP, PAD = 256, 257, 258, 259


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    d_ffn: int
    vocab_size: int
    theta_base: float = 10000.0
    max_positions: int = 4096
    norm_eps: float = 1e-5

    def __post_init__(self):
        for f in ("n_layers", "d_model", "n_heads", "n_kv_heads", "head_dim",
                  "d_ffn", "vocab_size", "max_positions"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1, got {getattr(self, f)}")
        if self.n_heads % self.n_kv_heads:
            raise ValueError(f"n_heads {self.n_heads} not divisible by n_kv_heads {self.n_kv_heads}")
        if self.d_model != self.n_heads * self.head_dim:
            raise ValueError(
                f"d_model {self.d_model} != n_heads*head_dim {self.n_heads * self.head_dim}")
        self.rope  # validates head_dim parity and theta_base

    @property
    def rope(self) -> rope_mod.RopeParams:
        return rope_mod.RopeParams(self.head_dim, self.theta_base)

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.head_dim

    def canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode()).digest()

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


PROFILES = {
    "toy": ModelConfig(
        n_layers=4, d_model=256, n_heads=8, n_kv_heads=2, head_dim=32,
        d_ffn=688, vocab_size=260, theta_base=10000.0, max_positions=16384,
    ),
    # shape only: used for analytic FLOPs, never instantiated as weights
    "llama3-8b-shape": ModelConfig(
        n_layers=32, d_model=4096, n_heads=32, n_kv_heads=8, head_dim=128,
        d_ffn=14336, vocab_size=128256, theta_base=500000.0, max_positions=32768,
    ),
}


def profile(name: str) -> ModelConfig:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


def tokenize(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def detokenize(tokens) -> str:
    data = bytes(t for t in tokens if t < BYTE_VOCAB)
    return data.decode("utf-8", errors="backslashreplace")


@dataclass
class LayerWeights:
    attn_norm: np.ndarray  # [d]
    wq: np.ndarray  # [d, n_heads*head_dim]
    wk: np.ndarray  # [d, n_kv*head_dim]
    wv: np.ndarray  # [d, n_kv*head_dim]
    wo: np.ndarray  # [n_heads*head_dim, d]
    ffn_norm: np.ndarray  # [d]
    w_gate: np.ndarray  # [d, d_ffn]
    w_up: np.ndarray  # [d, d_ffn]
    w_down: np.ndarray  # [d_ffn, d]


LAYER_TENSORS = tuple(f.name for f in fields(LayerWeights))


@dataclass
class Weights:
    config: ModelConfig
    embed: np.ndarray  # [vocab, d]
    layers: list[LayerWeights]
    final_norm: np.ndarray  # [d]
    head: np.ndarray  # [d, vocab]
    _blob: bytes | None = field(default=None, repr=False, compare=False)

    def tensors(self):
        """(name, array) pairs in declaration order, the on-disk order."""
        yield "embed", self.embed
        for i, lw in enumerate(self.layers):
            for name in LAYER_TENSORS:
                yield f"layers.{i}.{name}", getattr(lw, name)
        yield "final_norm", self.final_norm
        yield "head", self.head

    def to_bytes(self) -> bytes:
        if self._blob is None:
            buf = io.BytesIO()
            buf.write(WEIGHTS_MAGIC)
            buf.write(self.config.fingerprint())
            for _, arr in self.tensors():
                buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            self._blob = buf.getvalue()
        return self._blob

    @cached_property
    def fingerprint(self) -> bytes:
        """SHA-256 of the serialized weights file."""
        return hashlib.sha256(self.to_bytes()).digest()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())


def _shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, hd = config.d_model, config.head_dim
    return {
        "attn_norm": (d,),
        "wq": (d, config.n_heads * hd),
        "wk": (d, config.kv_dim),
        "wv": (d, config.kv_dim),
        "wo": (config.n_heads * hd, d),
        "ffn_norm": (d,),
        "w_gate": (d, config.d_ffn),
        "w_up": (d, config.d_ffn),
        "w_down": (config.d_ffn, d),
    }


def _draw(seed: int, layer: int, tensor_index: int, shape) -> np.ndarray:
    stream = derive_seed(seed, layer, tensor_index)
    n = int(np.prod(shape))
    return normal_stream(stream, n, INIT_STD).astype(np.float32).reshape(shape)


def init_weights(config: ModelConfig, seed: int) -> Weights:
    """Deterministic Normal(0, 0.02) parameters; norm gains start at one.

    Each projection draws from its own splitmix64 stream keyed by
    (seed, layer index, tensor index). The embedding and output head use
    layer index ``n_layers`` with tensor indices 0 and 1.
    """
    shapes = _shapes(config)
    layers = []
    for li in range(config.n_layers):
        parts = {}
        for ti, name in enumerate(LAYER_TENSORS):
            if name.endswith("_norm"):
                parts[name] = np.ones(shapes[name], dtype=np.float32)
            else:
                parts[name] = _draw(seed, li, ti, shapes[name])
        layers.append(LayerWeights(**parts))
    glob = config.n_layers
    return Weights(
        config=config,
        embed=_draw(seed, glob, 0, (config.vocab_size, config.d_model)),
        layers=layers,
        final_norm=np.ones(config.d_model, dtype=np.float32),
        head=_draw(seed, glob, 1, (config.d_model, config.vocab_size)),
    )


def load_weights(path, config: ModelConfig) -> Weights:
    blob = Path(path).read_bytes()
    if blob[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a weights file (bad magic {blob[:4]!r})")
    if blob[4:36] != config.fingerprint():
        raise ValueError(f"{path}: weights were saved for a different model config")
    shapes = _shapes(config)
    order = [(config.vocab_size, config.d_model)]
    order += [shapes[n] for _ in range(config.n_layers) for n in LAYER_TENSORS]
    order += [(config.d_model,), (config.d_model, config.vocab_size)]
    need = 36 + 4 * sum(int(np.prod(s)) for s in order)
    if len(blob) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(blob)}")
    arrays, off = [], 36
    for shape in order:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(blob, dtype="<f4", count=n, offset=off)
                      .astype(np.float32).reshape(shape))
        off += 4 * n
    it = iter(arrays[1:-2])
    layers = [LayerWeights(**{n: next(it) for n in LAYER_TENSORS}) for _ in range(config.n_layers)]
    return Weights(config, arrays[0], layers, arrays[-2], arrays[-1], _blob=blob)


@dataclass
class LayerKV:
    """Keys (RoPE-encoded) and values for a run of positions: [n, n_kv_heads, head_dim]."""

    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if self.k.shape != self.v.shape:
            raise ValueError(f"k {self.k.shape} and v {self.v.shape} differ")

    @property
    def n_positions(self) -> int:
        return self.k.shape[0]


def concat_kv(parts: list[list[LayerKV]]) -> list[LayerKV]:
    """Join per-layer KV stacks along the position axis."""
    n_layers = len(parts[0])
    return [LayerKV(np.concatenate([p[l].k for p in parts]),
                    np.concatenate([p[l].v for p in parts]))
            for l in range(n_layers)]


def causal_allowed(n: int, prefix: int = 0) -> np.ndarray:
    """Visibility for ``n`` new tokens over ``prefix`` fully visible ones plus themselves."""
    allowed = np.zeros((n, prefix + n), dtype=bool)
    allowed[:, :prefix] = True
    allowed[:, prefix:] = np.tri(n, dtype=bool)
    return allowed


def _check_tokens(tokens, config: ModelConfig) -> np.ndarray:
    toks = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if toks.size and (toks.min() < 0 or toks.max() >= config.vocab_size):
        bad = toks[(toks < 0) | (toks >= config.vocab_size)][0]
        raise ValueError(f"token id {bad} outside vocabulary of size {config.vocab_size}")
    return toks


def forward(tokens, positions, allowed: np.ndarray, w: Weights,
            prefix: list[LayerKV] | None = None, logits: str = "all"):
    """Run the decoder over ``tokens`` attending ``prefix`` KV plus themselves.

    ``allowed`` is boolean [n, prefix_len + n]. ``logits`` selects which rows
    reach the output head: "all", "last" or "none". Returns (logits, kv) where
    kv covers only the new tokens.
    """
    cfg = w.config
    toks = _check_tokens(tokens, cfg)
    pos = np.asarray(positions, dtype=np.int64).reshape(-1)
    n = toks.size
    n_prefix = prefix[0].n_positions if prefix else 0
    if pos.size != n:
        raise ValueError(f"{pos.size} positions for {n} tokens")
    if allowed.shape != (n, n_prefix + n):
        raise ValueError(f"mask shape {allowed.shape} != ({n}, {n_prefix + n})")
    if n and pos.max() >= cfg.max_positions:
        raise ValueError(f"position {pos.max()} exceeds max_positions {cfg.max_positions}")
    kern = tensor.kernels()
    H, G, hd = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(hd)
    mask = np.ascontiguousarray(allowed, dtype=bool).view(np.uint8)
    cos, sin = rope_mod.angle_table(pos, cfg.rope)

    x = w.embed[toks]
    kv = []
    for li, lw in enumerate(w.layers):
        h = tensor.rms_norm(x, lw.attn_norm, cfg.norm_eps)
        q = tensor.matmul(h, lw.wq).reshape(n, H, hd)
        k = tensor.matmul(h, lw.wk).reshape(n, G, hd)
        v = tensor.matmul(h, lw.wv).reshape(n, G, hd)
        q = kern.rope_rotate(q, cos, sin, False)
        k = kern.rope_rotate(k, cos, sin, False)
        kv.append(LayerKV(k, v))
        if n_prefix:
            k_all = np.concatenate([prefix[li].k, k])
            v_all = np.concatenate([prefix[li].v, v])
        else:
            k_all, v_all = k, v
        att = kern.attention(q, k_all, v_all, mask, scale)
        x = x + tensor.matmul(att.reshape(n, H * hd), lw.wo)
        h = tensor.rms_norm(x, lw.ffn_norm, cfg.norm_eps)
        gated = tensor.silu(tensor.matmul(h, lw.w_gate)) * tensor.matmul(h, lw.w_up)
        x = x + tensor.matmul(gated, lw.w_down)

    if logits == "none":
        return None, kv
    if logits == "last":
        x = x[-1:]
    elif logits != "all":
        raise ValueError(f"logits must be 'all', 'last' or 'none', got {logits!r}")
    out = tensor.matmul(tensor.rms_norm(x, w.final_norm, cfg.norm_eps), w.head)
    return out, kv


def forward_masked(tokens, positions, mask, w: Weights):
    """Full forward under a square visibility ``mask``; returns (logits [n, vocab], kv)."""
    allowed = getattr(mask, "allowed", mask)
    n = len(tokens)
    if allowed.shape != (n, n):
        raise ValueError(f"mask shape {allowed.shape} does not match {n} tokens")
    return forward(tokens, positions, allowed, w)


def encode_block_kv(tokens, w: Weights) -> list[LayerKV]:
    """KV of one block computed on its own, keys encoded from local position 0."""
    n = len(tokens)
    if n == 0:
        raise ValueError("cannot encode an empty block")
    _, kv = forward(tokens, np.arange(n), causal_allowed(n), w, logits="none")
    return kv
