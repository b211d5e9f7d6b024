import numpy as np
import pytest

from blockattn.blocks import Block, PromptLayout, Role, segment_rag_prompt
from blockattn.engine import (AttentionMask, TTFTStats, bench_layout, build_block_mask,
                              decode_greedy, generate, measure_ttft, prefill, prefill_block,
                              prefill_monolithic_blockmask, prefill_vanilla, ttft_sweep)
from blockattn.kvcache import CacheMismatchError, KVCache
from blockattn.model import init_weights
from blockattn.verify import random_layout

from oracle import reference_forward

BIG = 1 << 30


def lengths_layout(*sizes):
    blocks = [Block(Role.PASSAGE, "p" * s) for s in sizes[:-1]]
    return PromptLayout(tuple(blocks) + (Block(Role.QUERY, "q" * sizes[-1]),))


def test_mask_hand_example():
    allowed = build_block_mask(lengths_layout(2, 2, 1)).allowed
    assert set(np.flatnonzero(allowed[2])) == {2}
    assert set(np.flatnonzero(allowed[3])) == {2, 3}
    assert set(np.flatnonzero(allowed[4])) == {0, 1, 2, 3, 4}
    assert set(np.flatnonzero(allowed[1])) == {0, 1}


def test_mask_one_block_is_causal():
    np.testing.assert_array_equal(build_block_mask(lengths_layout(7)).allowed,
                                  np.tri(7, dtype=bool))


def test_mask_matches_rule_enumeration(rng):
    layout = random_layout(rng, 6, 60)
    allowed = build_block_mask(layout).allowed
    owner = np.repeat(np.arange(6), [len(b) for b in layout.blocks])
    for i in range(60):
        for j in range(60):
            expect = j <= i and (owner[i] == owner[j] or owner[i] == 5)
            assert allowed[i, j] == expect
    assert allowed.diagonal().all()


@pytest.mark.parametrize("bad", [np.ones((2, 3)), np.zeros((2, 2)), np.ones((2, 2))])
def test_mask_validation(bad):
    with pytest.raises(ValueError):
        AttentionMask(bad.astype(bool))


def test_monolithic_matches_reference(tiny_weights, rng):
    layout = random_layout(rng, 4, 40)
    mask = build_block_mask(layout).allowed
    ref, _ = reference_forward(layout.tokens(), np.arange(40), mask, tiny_weights)
    got = prefill_monolithic_blockmask(layout, tiny_weights)
    np.testing.assert_allclose(got.first_token_logits, ref[-1], atol=1e-4)
    assert got.blocks_reused == 0


def test_vanilla_matches_reference(tiny_weights, rng):
    layout = random_layout(rng, 3, 30)
    ref, _ = reference_forward(layout.tokens(), np.arange(30), np.tri(30, dtype=bool),
                               tiny_weights)
    np.testing.assert_allclose(prefill_vanilla(layout, tiny_weights).first_token_logits,
                               ref[-1], atol=1e-4)


def test_block_equals_monolithic_cold_and_warm(backend, toy_weights, rng):
    layout = random_layout(rng, 7, 300)
    oracle = prefill_monolithic_blockmask(layout, toy_weights).first_token_logits
    cache = KVCache.for_weights(toy_weights, BIG)
    cold = prefill_block(layout, cache, toy_weights)
    warm = prefill_block(layout, cache, toy_weights)
    np.testing.assert_allclose(cold.first_token_logits, oracle, atol=1e-5)
    np.testing.assert_array_equal(cold.first_token_logits, warm.first_token_logits)
    for a, b in zip(cold.kv, warm.kv):
        np.testing.assert_array_equal(a.k, b.k)
        np.testing.assert_array_equal(a.v, b.v)
    assert (cold.blocks_reused, warm.blocks_reused) == (0, 6)
    assert warm.block_hits == (True,) * 6


def test_block_kv_matches_monolithic_kv(tiny_weights, rng):
    layout = random_layout(rng, 5, 80)
    blk = prefill_block(layout, None, tiny_weights)
    mono = prefill_monolithic_blockmask(layout, tiny_weights)
    for a, b in zip(blk.kv, mono.kv):
        np.testing.assert_allclose(a.k, b.k, atol=1e-5)
        np.testing.assert_allclose(a.v, b.v, atol=1e-5)


def test_permuted_passages(tiny_weights, rng):
    a, b = Block(Role.PASSAGE, "alpha passage text"), Block(Role.PASSAGE, "beta block")
    q = Block(Role.QUERY, "question?")
    cache = KVCache.for_weights(tiny_weights, BIG)
    for order in ((a, b, q), (b, a, q)):
        layout = PromptLayout(order)
        got = prefill_block(layout, cache, tiny_weights).first_token_logits
        oracle = prefill_monolithic_blockmask(layout, tiny_weights).first_token_logits
        np.testing.assert_allclose(got, oracle, atol=1e-5)
    assert cache.stats.hits == 2


def test_one_block_paths_bit_identical(backend, toy_weights):
    layout = lengths_layout(57)
    van = prefill_vanilla(layout, toy_weights).first_token_logits
    blk = prefill_block(layout, KVCache.for_weights(toy_weights, BIG), toy_weights)
    mono = prefill_monolithic_blockmask(layout, toy_weights).first_token_logits
    np.testing.assert_array_equal(van, blk.first_token_logits)
    np.testing.assert_array_equal(van, mono)
    assert blk.blocks_computed == 1 and blk.blocks_reused == 0


def test_editing_one_block_leaves_others_untouched(tiny_weights):
    base = segment_rag_prompt("", ["first block", "second block"], "q")
    edited = segment_rag_prompt("", ["first blocK", "second block"], "q")
    kv_a = prefill_monolithic_blockmask(base, tiny_weights).kv
    kv_b = prefill_monolithic_blockmask(edited, tiny_weights).kv
    s, n = base.offsets[1], len(base.blocks[1])
    for a, b in zip(kv_a, kv_b):
        np.testing.assert_array_equal(a.k[s:s + n], b.k[s:s + n])
        np.testing.assert_array_equal(a.v[s:s + n], b.v[s:s + n])
        assert not np.array_equal(a.k[:s], b.k[:s])


def test_ablation_diverges(toy_weights, rng):
    # the 1e-2 threshold over 20 trials lives in the acceptance suite; one layout
    # only has to sit far above the ~1e-6 equivalence noise
    layout = random_layout(rng, 4, 200)
    oracle = prefill_monolithic_blockmask(layout, toy_weights).first_token_logits
    ablated = prefill_block(layout, None, toy_weights, reencode_positions=False)
    assert np.abs(ablated.first_token_logits - oracle).max() > 1e-4


def test_cache_bound_to_weights(tiny, tiny_weights):
    other = KVCache.for_weights(init_weights(tiny, 99), BIG)
    with pytest.raises(CacheMismatchError):
        prefill_block(lengths_layout(3, 2), other, tiny_weights)


def test_zero_capacity_still_correct(tiny_weights, rng):
    layout = random_layout(rng, 4, 50)
    cache = KVCache.for_weights(tiny_weights, 0)
    first = prefill_block(layout, cache, tiny_weights)
    second = prefill_block(layout, cache, tiny_weights)
    assert second.blocks_reused == 0 and len(cache) == 0
    np.testing.assert_array_equal(first.first_token_logits, second.first_token_logits)


def test_overlong_prompt_rejected(tiny, tiny_weights):
    layout = lengths_layout(tiny.max_positions, 1)
    for mode in ("vanilla", "block", "monolithic"):
        with pytest.raises(ValueError, match="max_positions"):
            prefill(layout, mode, tiny_weights, None)
    with pytest.raises(ValueError, match="unknown mode"):
        prefill(lengths_layout(2), "fast", tiny_weights)


def test_max_new_one_is_argmax(tiny_weights, rng):
    layout = random_layout(rng, 3, 40)
    for mode in ("vanilla", "block", "monolithic"):
        res = prefill(layout, mode, tiny_weights, None)
        assert generate(layout, 1, mode, None, tiny_weights) == [
            int(np.argmax(res.first_token_logits))]


def test_block_and_monolithic_generate_same_tokens(toy_weights):
    rng = np.random.default_rng(7)
    cache = KVCache.for_weights(toy_weights, BIG)
    for _ in range(10):
        layout = random_layout(rng, int(rng.integers(2, 6)), int(rng.integers(20, 120)))
        a = generate(layout, 16, "block", cache, toy_weights)
        b = generate(layout, 16, "monolithic", None, toy_weights)
        assert a == b


def test_decode_matches_full_recompute(tiny_weights, rng):
    # greedy continuation must agree with re-running the oracle on the extended prompt
    layout = random_layout(rng, 3, 30)
    toks = generate(layout, 4, "monolithic", None, tiny_weights)
    mask = build_block_mask(layout).allowed
    seq = list(layout.tokens())
    for t in toks[:-1]:
        seq.append(t)
        n = len(seq)
        big = np.zeros((n, n), bool)
        big[:n - 1, :n - 1] = mask
        big[n - 1, :] = True
        mask = big
    ref, _ = reference_forward(seq, np.arange(len(seq)), mask, tiny_weights)
    assert int(np.argmax(ref[-1])) == toks[-1]


def test_generate_determinism_and_guards(tiny, tiny_weights):
    layout = lengths_layout(5, 3)
    assert generate(layout, 5, "block", None, tiny_weights) == generate(
        layout, 5, "block", None, tiny_weights)
    with pytest.raises(ValueError):
        generate(layout, 0, "block", None, tiny_weights)
    res = prefill(layout, "vanilla", tiny_weights)
    with pytest.raises(ValueError, match="max_positions"):
        decode_greedy(res, tiny.max_positions, 3, tiny_weights)


def test_bench_layout_shapes():
    layout = bench_layout(1000, 50, 256)
    assert layout.total_len == 1000 and len(layout.final) == 50
    assert [len(b) for b in layout.blocks[:-1]] == [256, 256, 256, 182]
    assert len(bench_layout(50, 50).blocks) == 1
    with pytest.raises(ValueError):
        bench_layout(10, 50)


def test_ttft_stats_and_measure(tiny_weights):
    s = TTFTStats((3.0, 1.0, 2.0))
    assert (s.min, s.median, s.mean) == (1.0, 2.0, 2.0)
    stats = measure_ttft(lengths_layout(20, 5), "block", KVCache.for_weights(tiny_weights, BIG),
                         tiny_weights, repeats=3)
    assert len(stats.samples) == 3 and all(t > 0 for t in stats.samples)
    with pytest.raises(ValueError):
        measure_ttft(lengths_layout(3), "vanilla", None, tiny_weights, repeats=2)


def test_ttft_sweep_skips_overflow(tiny_weights, caplog):
    rows = list(ttft_sweep([64, 10**6], tiny_weights, user_len=16, repeats=3))
    assert [r.length for r in rows] == [64]
    assert "skipping length" in caplog.text


@pytest.mark.slow
def test_block_ttft_beats_vanilla_from_2048(toy_weights):
    rows = list(ttft_sweep([512, 2048, 4096], toy_weights, repeats=3))
    medians = [r.vanilla.median for r in rows]
    assert medians == sorted(medians)
    assert all(r.ratio < 1.0 for r in rows if r.length >= 2048)
