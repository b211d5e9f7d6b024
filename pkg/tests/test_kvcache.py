import struct
import threading

import numpy as np
import pytest

from blockattn.blocks import BlockKey
from blockattn.kvcache import (CacheFormatError, CacheMismatchError, EntryTooLargeError, KVCache,
                               KVEntry, entry_nbytes, read_cache_file)
from blockattn.model import LayerKV

WFP = bytes(range(32))


def make_entry(config, name, n=4, seed=0, wfp=WFP):
    rng = np.random.default_rng(seed)
    shape = (n, config.n_kv_heads, config.head_dim)
    layers = tuple(LayerKV(rng.standard_normal(shape).astype(np.float32),
                           rng.standard_normal(shape).astype(np.float32))
                   for _ in range(config.n_layers))
    key = BlockKey(name.encode().ljust(32, b"\0"))
    return KVEntry(key, n, layers, config.fingerprint(), wfp)


def same_arrays(a, b):
    return all(np.array_equal(x.k, y.k) and np.array_equal(x.v, y.v)
               for x, y in zip(a.layers, b.layers))


@pytest.fixture
def cache2(tiny):
    return KVCache(tiny, WFP, 2 * entry_nbytes(tiny, 4))


def test_entry_size(tiny):
    e = make_entry(tiny, "a")
    assert e.nbytes == entry_nbytes(tiny, 4) == 2 * 4 * tiny.n_layers * 4 * tiny.kv_dim


def test_put_get_round_trip(cache2, tiny):
    e = make_entry(tiny, "a")
    cache2.put(e)
    got = cache2.get(e.key)
    assert got is not None and same_arrays(got, e)
    assert cache2.stats.hits == 1 and cache2.stats.lookups == 1


def test_entries_are_read_only(cache2, tiny):
    e = make_entry(tiny, "a")
    cache2.put(e)
    with pytest.raises(ValueError):
        cache2.get(e.key).layers[0].k[0, 0, 0] = 1.0


def test_lru_eviction_trace(cache2, tiny):
    a, b, c = (make_entry(tiny, x) for x in "abc")
    for e in (a, b, c):
        cache2.put(e)
    assert cache2.get(a.key) is None
    assert cache2.get(b.key) is not None and cache2.get(c.key) is not None
    assert cache2.stats.evictions == 1


def test_get_refreshes_recency(cache2, tiny):
    a, b, c = (make_entry(tiny, x) for x in "abc")
    cache2.put(a)
    cache2.put(b)
    cache2.get(a.key)
    cache2.put(c)
    assert a.key in cache2 and b.key not in cache2


def test_put_is_idempotent(cache2, tiny):
    a = make_entry(tiny, "a")
    cache2.put(a)
    cache2.put(a)
    assert len(cache2) == 1
    assert cache2.stats.resident_bytes == a.nbytes


def test_empty_get_is_a_miss(cache2):
    assert cache2.get(b"x" * 32) is None
    s = cache2.stats
    assert (s.lookups, s.hits, s.hit_rate) == (1, 0, 0.0)


def test_interleaved_trace(cache2, tiny):
    a, b = make_entry(tiny, "a"), make_entry(tiny, "b")
    cache2.put(a)
    cache2.get(b.key)
    cache2.put(b)
    cache2.get(a.key)
    cache2.get(b.key)
    assert (cache2.stats.hits, cache2.stats.lookups) == (2, 3)


def test_capacity_guards(tiny):
    small = KVCache(tiny, WFP, 10)
    with pytest.raises(EntryTooLargeError):
        small.put(make_entry(tiny, "a"))
    with pytest.raises(ValueError):
        KVCache(tiny, WFP, -1)


def test_rejects_foreign_entries(cache2, tiny):
    with pytest.raises(CacheMismatchError):
        cache2.put(make_entry(tiny, "a", wfp=bytes(32)))


def test_save_load_fifty_entries(tmp_path, tiny):
    big = KVCache(tiny, WFP, 1 << 30)
    entries = [make_entry(tiny, f"e{i}", n=1 + i % 7, seed=i) for i in range(50)]
    for e in entries:
        big.put(e)
    path = tmp_path / "c.bkv"
    big.save(path)
    fresh = KVCache(tiny, WFP, 1 << 30)
    fresh.load(path)
    assert fresh.keys() == big.keys()
    for e in entries:
        got = fresh._entries[bytes(e.key)]
        assert got.token_count == e.token_count and same_arrays(got, e)


def test_save_preserves_recency(tmp_path, tiny, cache2):
    a, b = make_entry(tiny, "a"), make_entry(tiny, "b")
    cache2.put(a)
    cache2.put(b)
    cache2.get(a.key)  # a is now most recent
    cache2.save(tmp_path / "c.bkv")
    other = KVCache(tiny, WFP, cache2.capacity)
    other.load(tmp_path / "c.bkv")
    other.put(make_entry(tiny, "c"))
    assert a.key in other and b.key not in other


def test_load_wrong_weights_leaves_cache_unchanged(tmp_path, tiny):
    src = KVCache(tiny, bytes(32), 1 << 20)
    src.put(make_entry(tiny, "x", wfp=bytes(32)))
    src.save(tmp_path / "c.bkv")
    dst = KVCache(tiny, WFP, 1 << 20)
    mine = make_entry(tiny, "mine")
    dst.put(mine)
    with pytest.raises(CacheMismatchError, match="weights fingerprint"):
        dst.load(tmp_path / "c.bkv")
    assert dst.keys() == [mine.key]


def test_load_wrong_config(tmp_path, tiny, toy):
    src = KVCache(tiny, WFP, 1 << 20)
    src.put(make_entry(tiny, "x"))
    src.save(tmp_path / "c.bkv")
    with pytest.raises(CacheMismatchError):
        KVCache(toy, WFP, 1 << 20).load(tmp_path / "c.bkv")


def test_empty_round_trip(tmp_path, tiny, cache2):
    cache2.get(b"q" * 32)
    cache2.save(tmp_path / "c.bkv")
    other = KVCache(tiny, WFP, 1 << 20)
    other.load(tmp_path / "c.bkv")
    assert len(other) == 0
    assert other.stats.lookups == 0 and other.stats.resident_bytes == 0
    assert other.lifetime_stats.lookups == 1


def test_file_layout(tmp_path, tiny, cache2):
    e = make_entry(tiny, "a", n=3)
    cache2.put(e)
    cache2.save(tmp_path / "c.bkv")
    data = (tmp_path / "c.bkv").read_bytes()
    magic, cfp, wfp, count = struct.unpack_from("<4s32s32sQ", data)
    assert (magic, cfp, wfp, count) == (b"BKV1", tiny.fingerprint(), WFP, 1)
    key, tc = struct.unpack_from("<32sI", data, 76)
    assert key == bytes(e.key) and tc == 3
    k0 = np.frombuffer(data, "<f4", 3 * tiny.kv_dim, 112).reshape(3, tiny.n_kv_heads, -1)
    np.testing.assert_array_equal(k0, e.layers[0].k)
    assert data[-28:-24] == b"STAT"


@pytest.mark.parametrize("damage", ["magic", "truncate", "trailing"])
def test_corrupt_files(tmp_path, tiny, cache2, damage):
    cache2.put(make_entry(tiny, "a"))
    path = tmp_path / "c.bkv"
    cache2.save(path)
    data = path.read_bytes()
    if damage == "magic":
        data = b"XXXX" + data[4:]
    elif damage == "truncate":
        data = data[:200]
    else:
        data = data + b"junk"
    path.write_bytes(data)
    with pytest.raises(CacheFormatError, match="offset"):
        read_cache_file(path, tiny)


def test_zero_length_file_is_empty_cache(tmp_path, tiny, cache2):
    path = tmp_path / "c.bkv"
    path.write_bytes(b"")
    cache2.put(make_entry(tiny, "a"))
    cache2.load(path)
    assert len(cache2) == 0


def test_load_skips_entries_over_capacity(tmp_path, tiny):
    big = KVCache(tiny, WFP, 1 << 20)
    big.put(make_entry(tiny, "small", n=1))
    big.put(make_entry(tiny, "large", n=64))
    big.save(tmp_path / "c.bkv")
    small = KVCache(tiny, WFP, entry_nbytes(tiny, 8))
    small.load(tmp_path / "c.bkv")
    assert len(small) == 1


def test_concurrent_access(tiny):
    cache = KVCache(tiny, WFP, 8 * entry_nbytes(tiny, 4))
    entries = [make_entry(tiny, f"t{i}", seed=i) for i in range(16)]
    errors = []

    def worker(offset):
        try:
            for step in range(300):
                e = entries[(offset + step) % 16]
                if cache.get(e.key) is None:
                    cache.put(e)
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    s = cache.stats
    assert s.lookups == 1200
    assert s.resident_bytes == sum(e.nbytes for e in cache._entries.values()) <= cache.capacity
