"""Content-addressed LRU store of zero-positioned block KV states.

On-disk layout ("BKV1", all integers little-endian)::

    magic        4 bytes  b"BKV1"
    config fp   32 bytes  SHA-256 of the canonical model config
    weights fp  32 bytes  SHA-256 of the serialized weights
    count        u64
    entries      count x (key 32 bytes, token_count u32,
                          n_layers x (k f32[token_count*n_kv*head_dim],
                                      v f32[token_count*n_kv*head_dim]))
    trailer      optional: b"STAT", lookups u64, hits u64, evictions u64

Entries are written least- to most-recently used, so loading restores the
recency order. The trailer carries lifetime lookup statistics for the CLI;
a zero-length file reads as an empty (purged) cache.
"""

from __future__ import annotations

import os
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blocks import BlockKey
from .model import LayerKV, ModelConfig

MAGIC = b"BKV1"
STAT_MAGIC = b"STAT"
_HEADER = struct.Struct("<4s32s32sQ")
_ENTRY_HEAD = struct.Struct("<32sI")
_STATS = struct.Struct("<4sQQQ")


class CacheError(Exception):
    pass


class CacheMismatchError(CacheError):
    """Entry or file produced by a different model config or weights."""


class CacheFormatError(CacheError):
    """Malformed or truncated cache file."""


class EntryTooLargeError(CacheError):
    pass


@dataclass(frozen=True)
class KVEntry:
    key: BlockKey
    token_count: int
    layers: tuple[LayerKV, ...]
    config_fingerprint: bytes
    weights_fingerprint: bytes

    def __post_init__(self):
        for i, lkv in enumerate(self.layers):
            if lkv.n_positions != self.token_count:
                raise ValueError(
                    f"layer {i} holds {lkv.n_positions} positions, entry says {self.token_count}")
            lkv.k.flags.writeable = False
            lkv.v.flags.writeable = False

    @property
    def nbytes(self) -> int:
        return sum(l.k.nbytes + l.v.nbytes for l in self.layers)


def entry_nbytes(config: ModelConfig, token_count: int) -> int:
    return 2 * 4 * config.n_layers * token_count * config.kv_dim


@dataclass(frozen=True)
class CacheStats:
    lookups: int = 0
    hits: int = 0
    evictions: int = 0
    resident_bytes: int = 0

    @property
    def hit_rate(self) -> float:
        return self.hits / self.lookups if self.lookups else 0.0


class KVCache:
    """LRU cache bounded by resident bytes, bound to one model config and weights.

    All operations hold an internal lock, so concurrent ``get`` calls (which
    update recency) are safe. Returned entries are read-only snapshots.
    """

    def __init__(self, config: ModelConfig, weights_fingerprint: bytes, capacity_bytes: int):
        if capacity_bytes < 0:
            raise ValueError("capacity must be non-negative")
        self.config = config
        self.config_fingerprint = config.fingerprint()
        self.weights_fingerprint = bytes(weights_fingerprint)
        self.capacity = int(capacity_bytes)
        self._entries: OrderedDict[bytes, KVEntry] = OrderedDict()
        self._lock = threading.RLock()
        self._resident = 0
        self._lookups = self._hits = self._evictions = 0
        self._lifetime = (0, 0, 0)

    @classmethod
    def for_weights(cls, weights, capacity_bytes: int) -> "KVCache":
        return cls(weights.config, weights.fingerprint, capacity_bytes)

    def __len__(self):
        with self._lock:
            return len(self._entries)

    def __contains__(self, key):
        with self._lock:
            return bytes(key) in self._entries

    def keys(self) -> list[BlockKey]:
        """Keys from least to most recently used."""
        with self._lock:
            return [BlockKey(k) for k in self._entries]

    @property
    def stats(self) -> CacheStats:
        with self._lock:
            return CacheStats(self._lookups, self._hits, self._evictions, self._resident)

    @property
    def lifetime_stats(self) -> CacheStats:
        """Stats accumulated across every save/load cycle of this cache file."""
        with self._lock:
            lk, ht, ev = self._lifetime
            return CacheStats(lk + self._lookups, ht + self._hits, ev + self._evictions,
                              self._resident)

    def _check(self, entry: KVEntry):
        if entry.config_fingerprint != self.config_fingerprint:
            raise CacheMismatchError("entry was produced under a different model config")
        if entry.weights_fingerprint != self.weights_fingerprint:
            raise CacheMismatchError("entry was produced by different weights")

    def put(self, entry: KVEntry) -> None:
        self._check(entry)
        size = entry.nbytes
        if size > self.capacity:
            raise EntryTooLargeError(
                f"entry of {size} bytes exceeds cache capacity of {self.capacity} bytes")
        key = bytes(entry.key)
        with self._lock:
            if key in self._entries:
                self._entries.move_to_end(key)
                return
            while self._resident + size > self.capacity:
                _, old = self._entries.popitem(last=False)
                self._resident -= old.nbytes
                self._evictions += 1
            self._entries[key] = entry
            self._resident += size

    def get(self, key) -> KVEntry | None:
        """Entry for ``key`` or None on a miss; a hit refreshes recency."""
        key = bytes(key)
        with self._lock:
            self._lookups += 1
            entry = self._entries.get(key)
            if entry is None:
                return None
            self._hits += 1
            self._entries.move_to_end(key)
            return entry

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()
            self._resident = 0

    def reset_stats(self) -> None:
        with self._lock:
            self._lookups = self._hits = self._evictions = 0

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        with self._lock:
            entries = list(self._entries.values())
            lifetime = self.lifetime_stats
        with open(tmp, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, self.config_fingerprint, self.weights_fingerprint,
                                  len(entries)))
            for e in entries:
                fh.write(_ENTRY_HEAD.pack(bytes(e.key), e.token_count))
                for lkv in e.layers:
                    fh.write(np.ascontiguousarray(lkv.k, dtype="<f4").tobytes())
                    fh.write(np.ascontiguousarray(lkv.v, dtype="<f4").tobytes())
            fh.write(_STATS.pack(STAT_MAGIC, lifetime.lookups, lifetime.hits, lifetime.evictions))
        os.replace(tmp, path)

    def load(self, path) -> None:
        """Replace contents with the entries in ``path``.

        The file is parsed and validated in full before anything changes, so a
        mismatch or parse error leaves the cache untouched.
        """
        parsed = read_cache_file(path, self.config)
        if parsed.entries or parsed.config_fingerprint is not None:
            if parsed.config_fingerprint != self.config_fingerprint:
                raise CacheMismatchError(
                    f"{path}: config fingerprint {parsed.config_fingerprint.hex()[:16]} "
                    f"!= expected {self.config_fingerprint.hex()[:16]}")
            if parsed.weights_fingerprint != self.weights_fingerprint:
                raise CacheMismatchError(
                    f"{path}: weights fingerprint {parsed.weights_fingerprint.hex()[:16]} "
                    f"!= expected {self.weights_fingerprint.hex()[:16]}; refusing to reuse KV "
                    "from a different model")
        with self._lock:
            self._entries.clear()
            self._resident = 0
            self._lookups = self._hits = self._evictions = 0
            self._lifetime = parsed.lifetime
            for key, count, layers in parsed.entries:
                entry = KVEntry(BlockKey(key), count, layers, self.config_fingerprint,
                                self.weights_fingerprint)
                if entry.nbytes <= self.capacity:
                    self.put(entry)
            self._evictions = 0


@dataclass(frozen=True)
class CacheFile:
    config_fingerprint: bytes | None
    weights_fingerprint: bytes | None
    entries: list[tuple[bytes, int, tuple[LayerKV, ...]]]
    lifetime: tuple[int, int, int]
    nbytes: int

    @property
    def payload_bytes(self) -> int:
        return sum(l.k.nbytes + l.v.nbytes for _, _, layers in self.entries for l in layers)


def read_cache_file(path, config: ModelConfig) -> CacheFile:
    """Parse a BKV1 file; array shapes come from ``config``."""
    data = Path(path).read_bytes()
    if not data:
        return CacheFile(None, None, [], (0, 0, 0), 0)
    view = memoryview(data)
    off = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal off
        if off + n > len(data):
            raise CacheFormatError(
                f"{path}: truncated at offset {off} reading {what} "
                f"({n} bytes needed, {len(data) - off} left)")
        chunk = view[off:off + n]
        off += n
        return chunk

    magic, cfp, wfp, count = _HEADER.unpack(take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise CacheFormatError(f"{path}: bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if cfp != config.fingerprint():
        raise CacheMismatchError(
            f"{path}: config fingerprint {cfp.hex()[:16]} does not match the selected model")
    shape_tail = (config.n_kv_heads, config.head_dim)
    per_pos = config.kv_dim
    entries = []
    for i in range(count):
        key, tc = _ENTRY_HEAD.unpack(take(_ENTRY_HEAD.size, f"entry {i} header"))
        layers = []
        for li in range(config.n_layers):
            arrs = []
            for part in "kv":
                raw = take(4 * tc * per_pos, f"entry {i} layer {li} {part}")
                arrs.append(np.frombuffer(raw, dtype="<f4").astype(np.float32)
                            .reshape((tc,) + shape_tail))
            layers.append(LayerKV(*arrs))
        entries.append((bytes(key), tc, tuple(layers)))
    lifetime = (0, 0, 0)
    if off < len(data):
        tag, lookups, hits, evictions = _STATS.unpack(take(_STATS.size, "stats trailer"))
        if tag != STAT_MAGIC:
            raise CacheFormatError(f"{path}: unexpected bytes at offset {off - _STATS.size}")
        lifetime = (lookups, hits, evictions)
    if off != len(data):
        raise CacheFormatError(f"{path}: {len(data) - off} trailing bytes at offset {off}")
    return CacheFile(cfp, wfp, entries, lifetime, len(data))
