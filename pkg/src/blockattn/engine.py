"""Prefill paths, block attention mask, greedy decoding and TTFT timing.

Three ways to prefill a segmented prompt:

* ``prefill_vanilla``: ordinary causal attention over the whole prompt.
* ``prefill_block``: every block but the last is encoded on its own (or
  fetched from the cache), its keys are rotated from local position zero to
  the block's offset, and only the final block attends across blocks.
* ``prefill_monolithic_blockmask``: a single forward pass under the block
  mask. It needs no cache and serves as the oracle for ``prefill_block``.
"""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import rope
from .blocks import PromptLayout, block_key
from .kvcache import CacheMismatchError, EntryTooLargeError, KVCache, KVEntry
from .model import LayerKV, Weights, causal_allowed, concat_kv, encode_block_kv, forward

log = logging.getLogger(__name__)

MODES = ("vanilla", "block", "monolithic")


@dataclass(frozen=True)
class AttentionMask:
    """Square visibility matrix: ``allowed[i, j]`` lets token i attend token j."""

    allowed: np.ndarray
    check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        a = np.asarray(self.allowed, dtype=bool)
        object.__setattr__(self, "allowed", a)
        if not self.check:
            return
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"attention mask must be square, got {a.shape}")
        if not a.diagonal().all():
            raise ValueError("attention mask must allow every token to see itself")
        if np.triu(a, 1).any():
            raise ValueError("attention mask allows attending to a future position")

    @property
    def side(self) -> int:
        return self.allowed.shape[0]

    @classmethod
    def causal(cls, n: int) -> "AttentionMask":
        return cls(np.tri(n, dtype=bool), check=False)


def build_block_mask(layout: PromptLayout) -> AttentionMask:
    """Causal within each block; the final block additionally sees every earlier token."""
    n = layout.total_len
    allowed = np.zeros((n, n), dtype=bool)
    last = len(layout.blocks) - 1
    for i, (start, b) in enumerate(zip(layout.offsets, layout.blocks)):
        stop = start + len(b)
        lo = 0 if i == last else start
        allowed[start:stop, lo:stop] = np.tri(stop - start, stop - lo, k=start - lo, dtype=bool)
    return AttentionMask(allowed, check=False)


@dataclass
class PrefillResult:
    first_token_logits: np.ndarray
    kv: list[LayerKV]
    timing: float  # seconds from prefill start until the logits exist
    blocks_computed: int
    blocks_reused: int
    block_hits: tuple[bool, ...] = ()  # per non-final block: served from cache?


def _check_length(layout: PromptLayout, w: Weights):
    if layout.total_len > w.config.max_positions:
        raise ValueError(
            f"prompt of {layout.total_len} tokens exceeds max_positions {w.config.max_positions}")


def prefill_vanilla(layout: PromptLayout, w: Weights) -> PrefillResult:
    _check_length(layout, w)
    t0 = time.perf_counter()
    n = layout.total_len
    logits, kv = forward(layout.tokens(), np.arange(n), causal_allowed(n), w, logits="last")
    elapsed = time.perf_counter() - t0
    return PrefillResult(logits[0], kv, elapsed, blocks_computed=len(layout.blocks),
                         blocks_reused=0)


def prefill_monolithic_blockmask(layout: PromptLayout, w: Weights) -> PrefillResult:
    _check_length(layout, w)
    t0 = time.perf_counter()
    n = layout.total_len
    mask = build_block_mask(layout)
    logits, kv = forward(layout.tokens(), np.arange(n), mask.allowed, w, logits="last")
    elapsed = time.perf_counter() - t0
    return PrefillResult(logits[0], kv, elapsed, blocks_computed=len(layout.blocks),
                         blocks_reused=0)


def _block_kv(block, w: Weights, cache: KVCache | None) -> tuple[tuple[LayerKV, ...], bool]:
    key = block_key(block)
    if cache is not None:
        entry = cache.get(key)
        if entry is not None:
            return entry.layers, True
    layers = encode_block_kv(block.tokens, w)
    entry = KVEntry(key, len(block), tuple(layers), w.config.fingerprint(), w.fingerprint)
    if cache is not None:
        try:
            cache.put(entry)
        except EntryTooLargeError as exc:
            log.debug("not caching block: %s", exc)
    return entry.layers, False


def prefill_block(layout: PromptLayout, cache: KVCache | None, w: Weights,
                  reencode_positions: bool = True) -> PrefillResult:
    """Block-attention prefill reusing cached block KV.

    Missing blocks are encoded and written through to the cache. With
    ``reencode_positions=False`` cached keys keep their zero-based positions,
    which reproduces the no-re-encoding ablation.
    """
    _check_length(layout, w)
    if cache is not None and (cache.weights_fingerprint != w.fingerprint
                              or cache.config_fingerprint != w.config.fingerprint()):
        raise CacheMismatchError("cache is bound to a different model")
    params = w.config.rope
    t0 = time.perf_counter()
    hits = []
    parts = []
    for idx, block in enumerate(layout.blocks[:-1]):
        layers, hit = _block_kv(block, w, cache)
        hits.append(hit)
        offset = layout.offsets[idx]
        if reencode_positions and offset:
            layers = [LayerKV(rope.rope_shift(l.k, offset, params), l.v) for l in layers]
        parts.append(list(layers))
    prefix = concat_kv(parts) if parts else None
    final = layout.final
    start = layout.offsets[-1]
    n_prefix = start
    logits, kv_final = forward(final.tokens, np.arange(start, start + len(final)),
                               causal_allowed(len(final), n_prefix), w, prefix=prefix,
                               logits="last")
    elapsed = time.perf_counter() - t0
    kv = concat_kv([prefix, kv_final]) if prefix else kv_final
    reused = sum(hits)
    return PrefillResult(logits[0], kv, elapsed, blocks_computed=len(layout.blocks) - reused,
                         blocks_reused=reused, block_hits=tuple(hits))


def prefill(layout: PromptLayout, mode: str, w: Weights, cache: KVCache | None = None,
            reencode_positions: bool = True) -> PrefillResult:
    if mode == "vanilla":
        return prefill_vanilla(layout, w)
    if mode == "block":
        return prefill_block(layout, cache, w, reencode_positions)
    if mode == "monolithic":
        return prefill_monolithic_blockmask(layout, w)
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def decode_greedy(res: PrefillResult, start: int, max_new: int, w: Weights) -> list[int]:
    """Greedy tokens continuing from a prefill whose prompt ended at ``start``."""
    if max_new < 1:
        raise ValueError("max_new must be at least 1")
    out = [int(np.argmax(res.first_token_logits))]
    kv = res.kv
    pos = start
    for _ in range(max_new - 1):
        if pos >= w.config.max_positions:
            raise ValueError(f"decode position {pos} exceeds max_positions "
                             f"{w.config.max_positions}")
        logits, step_kv = forward([out[-1]], [pos], causal_allowed(1, pos), w, prefix=kv,
                                  logits="last")
        kv = concat_kv([kv, step_kv])
        out.append(int(np.argmax(logits[0])))
        pos += 1
    return out


def generate(layout: PromptLayout, max_new: int, mode: str, cache: KVCache | None,
             w: Weights, reencode_positions: bool = True) -> list[int]:
    """Greedy decoding; generated tokens extend the final block causally."""
    if max_new < 1:
        raise ValueError("max_new must be at least 1")
    res = prefill(layout, mode, w, cache, reencode_positions)
    return decode_greedy(res, layout.total_len, max_new, w)


@dataclass(frozen=True)
class TTFTStats:
    samples: tuple[float, ...]  # seconds

    @property
    def min(self) -> float:
        return min(self.samples)

    @property
    def median(self) -> float:
        return statistics.median(self.samples)

    @property
    def mean(self) -> float:
        return statistics.fmean(self.samples)


def measure_ttft(layout: PromptLayout, mode: str, cache: KVCache | None, w: Weights,
                 repeats: int = 3) -> TTFTStats:
    """Time prefill ``repeats`` times after one untimed warm-up.

    In block mode the warm-up fills the cache, so every timed run sees the
    passages pre-computed. The timed span covers cache lookup, key rotation
    and the final-block forward.
    """
    if repeats < 3:
        raise ValueError("repeats must be at least 3")
    prefill(layout, mode, w, cache)
    samples = tuple(prefill(layout, mode, w, cache).timing for _ in range(repeats))
    return TTFTStats(samples)


def bench_layout(length: int, user_len: int = 50, passage_len: int = 256,
                 seed: int = 0) -> PromptLayout:
    """Passages totalling ``length - user_len`` tokens followed by a ``user_len`` query.

    Text is random printable ASCII, so the byte tokenizer gives exact lengths.
    """
    from .blocks import Block, Role

    if not 1 <= user_len <= length:
        raise ValueError(f"need 1 <= user_len <= length, got {user_len}, {length}")
    rng = np.random.default_rng(seed)

    def text(n):
        return rng.integers(32, 127, n, dtype=np.uint8).tobytes().decode()

    blocks, left = [], length - user_len
    while left:
        n = min(passage_len, left)
        blocks.append(Block(Role.PASSAGE, text(n)))
        left -= n
    blocks.append(Block(Role.QUERY, text(user_len)))
    return PromptLayout(tuple(blocks))


@dataclass(frozen=True)
class BenchRow:
    length: int
    vanilla: TTFTStats
    block: TTFTStats

    @property
    def ratio(self) -> float:
        return self.block.median / self.vanilla.median


def ttft_sweep(lengths, w: Weights, user_len: int = 50, repeats: int = 3,
               passage_len: int = 256, seed: int = 0, capacity: int = 1 << 32):
    """Median TTFT of vanilla and warm-cache block prefill at each length.

    Lengths over the model's position limit are skipped with a warning.
    Yields ``BenchRow`` per measured length.
    """
    for n in lengths:
        if n > w.config.max_positions:
            log.warning("skipping length %d: exceeds max_positions %d", n, w.config.max_positions)
            continue
        layout = bench_layout(n, user_len, passage_len, seed)
        cache = KVCache.for_weights(w, capacity)
        van = measure_ttft(layout, "vanilla", None, w, repeats)
        blk = measure_ttft(layout, "block", cache, w, repeats)
        yield BenchRow(n, van, blk)
