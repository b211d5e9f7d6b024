"""Self-checking invariant suite shared by ``blockattn verify`` and the tests.

Each check returns a ``CheckResult`` carrying the measured worst-case
deviation, the threshold it was held to, and whether it passed.
"""

from __future__ import annotations

import string
import time
from dataclasses import dataclass

import numpy as np

from . import rope
from .blocks import Block, PromptLayout, Role
from .engine import prefill_block, prefill_monolithic_blockmask, prefill_vanilla
from .kvcache import KVCache
from .model import ModelConfig, Weights, encode_block_kv, init_weights

_ALPHABET = np.frombuffer((string.ascii_letters + string.digits + " .,").encode(), dtype=np.uint8)
BIG_CAPACITY = 1 << 32


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    measured: float
    threshold: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: measured={self.measured:.3e} "
                f"threshold={self.threshold:.1e} {self.detail} ({self.seconds:.2f}s)").rstrip()


def random_text(rng: np.random.Generator, n: int) -> str:
    return _ALPHABET[rng.integers(0, _ALPHABET.size, n)].tobytes().decode()


def random_layout(rng: np.random.Generator, n_blocks: int, total_len: int) -> PromptLayout:
    """Random ASCII layout: passages then a query, ``total_len`` tokens in ``n_blocks``."""
    if not 1 <= n_blocks <= total_len:
        raise ValueError(f"cannot split {total_len} tokens into {n_blocks} blocks")
    cuts = np.sort(rng.choice(np.arange(1, total_len), n_blocks - 1, replace=False))
    sizes = np.diff(np.concatenate([[0], cuts, [total_len]]))
    blocks = [Block(Role.PASSAGE, random_text(rng, int(s))) for s in sizes[:-1]]
    blocks.append(Block(Role.QUERY, random_text(rng, int(sizes[-1]))))
    return PromptLayout(tuple(blocks))


def sample_layout(rng: np.random.Generator, min_blocks=2, max_blocks=12, min_len=32,
                  max_len=1024) -> PromptLayout:
    n_blocks = int(rng.integers(min_blocks, max_blocks + 1))
    total = int(rng.integers(max(min_len, n_blocks), max_len + 1))
    return random_layout(rng, n_blocks, total)


def _max_diff(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        return CheckResult(res.name, res.passed, res.measured, res.threshold, res.detail,
                           time.perf_counter() - t0)
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def check_segmented_equivalence(config: ModelConfig, seed: int = 0, trials: int = 20,
                                max_len: int = 1024, tol: float = 1e-4) -> CheckResult:
    """E1: cold- and warm-cache block prefill match the monolithic block-masked pass."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(trials):
        w = init_weights(config, seed * 1000 + t)
        layout = sample_layout(rng, max_len=max_len)
        oracle = prefill_monolithic_blockmask(layout, w).first_token_logits
        cache = KVCache.for_weights(w, BIG_CAPACITY)
        cold = prefill_block(layout, cache, w).first_token_logits
        warm = prefill_block(layout, cache, w).first_token_logits
        worst = max(worst, _max_diff(cold, oracle), _max_diff(warm, oracle))
    return CheckResult("E1 segmented==monolithic", worst <= tol, worst, tol,
                       f"trials={trials}")


@_timed
def check_cache_transparency(config: ModelConfig, seed: int = 0, trials: int = 5) -> CheckResult:
    """E2: warm-cache results are bit-identical to cold-cache results."""
    rng = np.random.default_rng(seed + 1)
    w = init_weights(config, seed)
    mismatches = 0
    for _ in range(trials):
        layout = sample_layout(rng, max_len=512)
        cache = KVCache.for_weights(w, BIG_CAPACITY)
        cold = prefill_block(layout, cache, w)
        warm = prefill_block(layout, cache, w)
        same = np.array_equal(cold.first_token_logits, warm.first_token_logits) and all(
            np.array_equal(a.k, b.k) and np.array_equal(a.v, b.v)
            for a, b in zip(cold.kv, warm.kv))
        reused_ok = cold.blocks_reused == 0 and warm.blocks_reused == len(layout.blocks) - 1
        mismatches += (not same) + (not reused_ok)
    return CheckResult("E2 cache transparency", mismatches == 0, float(mismatches), 0.0,
                       f"trials={trials} (count of non-identical runs)")


def permutation_reuse(w: Weights, seed: int = 0, passage_len=(24, 48)) -> tuple[float, int]:
    """Cache passages under [A, B, C, q], re-serve as [C, A, B, q].

    Returns (max |logit diff| vs the monolithic oracle for the new order,
    blocks_reused on the second prefill).
    """
    rng = np.random.default_rng(seed)
    a, b, c = (Block(Role.PASSAGE, random_text(rng, int(rng.integers(*passage_len))))
               for _ in range(3))
    q = Block(Role.QUERY, random_text(rng, 20))
    cache = KVCache.for_weights(w, BIG_CAPACITY)
    prefill_block(PromptLayout((a, b, c, q)), cache, w)
    permuted = PromptLayout((c, a, b, q))
    res = prefill_block(permuted, cache, w)
    oracle = prefill_monolithic_blockmask(permuted, w)
    return _max_diff(res.first_token_logits, oracle.first_token_logits), res.blocks_reused


@_timed
def check_permutation_reuse(config: ModelConfig, seed: int = 0, trials: int = 5,
                            tol: float = 1e-4) -> CheckResult:
    """E3: cached passages served under a new order still match that order's oracle."""
    worst, reuse_ok = 0.0, True
    for t in range(trials):
        diff, reused = permutation_reuse(init_weights(config, seed + t), seed + t)
        worst = max(worst, diff)
        reuse_ok &= reused == 3
    return CheckResult("E3 permutation reuse", worst <= tol and reuse_ok, worst, tol,
                       f"trials={trials} blocks_reused==3:{reuse_ok}")


def ablation_divergence(w: Weights, layout: PromptLayout) -> float:
    """Max |logit diff| of block prefill without key re-encoding vs the oracle."""
    oracle = prefill_monolithic_blockmask(layout, w).first_token_logits
    ablated = prefill_block(layout, KVCache.for_weights(w, BIG_CAPACITY), w,
                            reencode_positions=False).first_token_logits
    return _max_diff(ablated, oracle)


@_timed
def check_ablation_sensitivity(config: ModelConfig, seed: int = 0, trials: int = 20,
                               min_hits: int = 18, threshold: float = 1e-2,
                               max_len: int = 1024) -> CheckResult:
    """E4: skipping re-encoding diverges from the oracle once a block moves >= 8 positions."""
    rng = np.random.default_rng(seed + 4)
    hits, smallest = 0, float("inf")
    for t in range(trials):
        w = init_weights(config, seed * 1000 + 500 + t)
        while True:
            layout = sample_layout(rng, max_len=max_len)
            if max(layout.offsets[1:-1] + (0,)) >= 8:  # some cached block is displaced
                break
        diff = ablation_divergence(w, layout)
        smallest = min(smallest, diff)
        hits += diff > threshold
    return CheckResult("E4 ablation sensitivity", hits >= min_hits, smallest, threshold,
                       f"diverged {hits}/{trials} (need {min_hits}); measured=smallest diff")


@_timed
def check_degenerate_collapse(config: ModelConfig, seed: int = 0, trials: int = 10) -> CheckResult:
    """E5: a one-block layout makes vanilla, block and monolithic bit-identical."""
    rng = np.random.default_rng(seed + 5)
    worst = 0.0
    identical = True
    for t in range(trials):
        w = init_weights(config, seed + t)
        layout = PromptLayout((Block(Role.QUERY, random_text(rng, int(rng.integers(1, 200)))),))
        van = prefill_vanilla(layout, w).first_token_logits
        blk = prefill_block(layout, KVCache.for_weights(w, BIG_CAPACITY), w).first_token_logits
        mono = prefill_monolithic_blockmask(layout, w).first_token_logits
        identical &= np.array_equal(van, blk) and np.array_equal(van, mono)
        worst = max(worst, _max_diff(van, blk), _max_diff(van, mono))
    return CheckResult("E5 degenerate collapse", identical, worst, 0.0,
                       f"trials={trials} bit-identical={identical}")


@_timed
def check_rope_identities(seed: int = 0, cases: int = 1000, dims=(8, 32, 128),
                          tol: float = 1e-5) -> CheckResult:
    """Zero-then-rotate re-encoding equals direct encoding at the new position."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for d in dims:
        params = rope.RopeParams(d)
        x = rng.standard_normal((cases, d)).astype(np.float32)
        i = rng.integers(0, 4096, cases)
        i_delta = rng.integers(0, 4096, cases)
        encoded = rope.rotate(x, i, params)
        moved = rope.rotate(rope.rotate(encoded, i, params, inverse=True), i_delta, params)
        direct = rope.rotate(x, i_delta, params)
        rel = np.linalg.norm(moved - direct, axis=1) / np.linalg.norm(direct, axis=1)
        worst = max(worst, float(rel.max()))
    return CheckResult("RoPE reposition identity", worst <= tol, worst, tol,
                       f"cases={cases}x{len(dims)} dims={list(dims)} (relative)")


@_timed
def check_cache_entries(cache: KVCache, tol: float = 1e-6) -> CheckResult:
    """Stored keys are self-consistent under unapply/apply at local positions 0..n-1."""
    params = cache.config.rope
    worst = 0.0
    keys = cache.keys()
    for key in keys:
        entry = cache._entries[bytes(key)]
        for lkv in entry.layers:
            pos = np.arange(lkv.n_positions)
            back = rope.rotate(rope.rotate(lkv.k, pos, params, inverse=True), pos, params)
            worst = max(worst, _max_diff(back, lkv.k))
    return CheckResult("cache zero-position convention", worst <= tol, worst, tol,
                       f"entries={len(keys)}")


def run_suite(config: ModelConfig, seed: int = 0, trials: int = 20, no_pos_reencode: bool = False,
              cache: KVCache | None = None, max_len: int = 1024) -> list[CheckResult]:
    """Run every check. With ``no_pos_reencode`` the segmented-path checks are
    replaced by the ablation, whose expected outcome is divergence."""
    results = [check_rope_identities(seed)]
    if no_pos_reencode:
        results.append(check_ablation_sensitivity(config, seed, trials=trials,
                                                  min_hits=int(np.ceil(0.9 * trials)),
                                                  max_len=max_len))
    else:
        results.append(check_segmented_equivalence(config, seed, trials=trials, max_len=max_len))
        results.append(check_cache_transparency(config, seed))
        results.append(check_permutation_reuse(config, seed))
        results.append(check_ablation_sensitivity(config, seed, trials=trials,
                                                  min_hits=int(np.ceil(0.9 * trials)),
                                                  max_len=max_len))
    results.append(check_degenerate_collapse(config, seed))
    if cache is not None:
        results.append(check_cache_entries(cache))
    return results


def encode_matches_entry(w: Weights, block: Block, layers, tol: float = 1e-6) -> float:
    """Max deviation between re-encoding ``block`` and stored ``layers``."""
    fresh = encode_block_kv(block.tokens, w)
    return max(max(_max_diff(a.k, b.k), _max_diff(a.v, b.v)) for a, b in zip(fresh, layers))
