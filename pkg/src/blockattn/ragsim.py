"""Synthetic RAG workloads and cache-economics simulation.

Passages are drawn per query from a Zipf law over corpus rank, so popular
passages recur and their cached KV gets reused. Every simulated query runs
the real block-attention prefill against one shared cache.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .blocks import segment_rag_prompt
from .engine import prefill_block, prefill_monolithic_blockmask
from .flops import flops_vanilla
from .kvcache import CacheStats, KVCache
from .model import ModelConfig, Weights
from .splitmix import SplitMix64, derive_seed

DEFAULT_INSTRUCTION = ("Write a high-quality answer for the given question using only the "
                       "provided search results.\n")
QUERY_TEMPLATE = "\nQuestion #{index}: which of the documents above answers this?\nAnswer:"
REPORT_FORMAT = "blockattn-sim-report"
REPORT_VERSION = 1
FLOPS_COUNTING = "linear"


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Passage:
    id: str
    text: str


@dataclass(frozen=True)
class Corpus:
    passages: tuple[Passage, ...]

    def __post_init__(self):
        seen = set()
        for p in self.passages:
            if p.id in seen:
                raise ValueError(f"duplicate passage id {p.id!r}")
            if not p.text:
                raise ValueError(f"passage {p.id!r} has empty text")
            seen.add(p.id)

    def __len__(self):
        return len(self.passages)

    def by_id(self) -> dict[str, Passage]:
        return {p.id: p for p in self.passages}


def load_corpus(path) -> Corpus:
    """Read JSON lines of ``{"id": ..., "text": ...}``; blank lines are skipped."""
    passages, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                pid, text = obj["id"], obj["text"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed corpus line ({exc})") from None
            if not isinstance(pid, str) or not isinstance(text, str) or not text:
                raise ValueError(f"{path}:{lineno}: id and text must be strings, text non-empty")
            if pid in seen:
                raise ValueError(f"{path}:{lineno}: duplicate passage id {pid!r}")
            seen.add(pid)
            passages.append(Passage(pid, text))
    return Corpus(tuple(passages))


def write_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in corpus.passages:
            fh.write(json.dumps({"id": p.id, "text": p.text}) + "\n")


_WORDS = ("river valley castle engine protein orbit theorem harbor violin glacier "
          "senate lattice monsoon copper archive falcon mosaic reactor tundra sonnet").split()


def synthetic_corpus(n: int, seed: int = 0, min_words: int = 8, max_words: int = 20) -> Corpus:
    """``n`` passages of pseudo-random words, ids ``p0000``.."""
    rng = SplitMix64(derive_seed(seed, 7))
    passages = []
    for i in range(n):
        words = [_WORDS[rng.below(len(_WORDS))]
                 for _ in range(min_words + rng.below(max_words - min_words + 1))]
        passages.append(Passage(f"p{i:04d}", f"Document [{i}] " + " ".join(words) + "."))
    return Corpus(tuple(passages))


@dataclass(frozen=True)
class Query:
    text: str
    passage_ids: tuple[str, ...]


@dataclass(frozen=True)
class QueryStream:
    queries: tuple[Query, ...]

    def __len__(self):
        return len(self.queries)


def zipf_weights(n: int, s: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    return ranks ** -s


def synth_queries(corpus: Corpus, n_queries: int, k: int, zipf_s: float, seed: int) -> QueryStream:
    """Each query draws ``k`` distinct passages, without replacement, from Zipf(s) over rank.

    Rank 1 is the first corpus entry. Draws consume one splitmix64 uniform
    each, in order, so the stream is fully determined by ``seed``.
    """
    if zipf_s < 0:
        raise ValueError("zipf exponent must be non-negative")
    if k < 1:
        raise ValueError("k must be at least 1")
    if n_queries and len(corpus) == 0:
        raise SimulationError("corpus is empty; nothing to simulate")
    if n_queries and k > len(corpus):
        raise ValueError(f"k={k} exceeds corpus size {len(corpus)}")
    base = zipf_weights(len(corpus), zipf_s)
    rng = SplitMix64(seed)
    ids = [p.id for p in corpus.passages]
    queries = []
    for qi in range(n_queries):
        weights = base.copy()
        picked = []
        for _ in range(k):
            cdf = np.cumsum(weights)
            idx = int(np.searchsorted(cdf, rng.uniform() * cdf[-1], side="right"))
            idx = min(idx, len(weights) - 1)
            while weights[idx] == 0.0:  # guard against landing on a spent slot
                idx -= 1
            picked.append(ids[idx])
            weights[idx] = 0.0
        queries.append(Query(QUERY_TEMPLATE.format(index=qi), tuple(picked)))
    return QueryStream(tuple(queries))


@dataclass
class SimReport:
    n_queries: int
    hit_rate: float
    flops_vanilla_total: int
    flops_block_total: int
    flops_avoided: int  # encode FLOPs of blocks served from cache
    flops_recompute_total: int  # block attention with every block recomputed
    ttft_series: list[float]  # seconds per query
    cache_stats: CacheStats
    sampled_queries: list[int] = field(default_factory=list)
    sample_max_abs_diff: float = 0.0
    sample_tolerance: float = 1e-4

    @property
    def sample_passed(self) -> bool:
        return self.sample_max_abs_diff <= self.sample_tolerance

    @property
    def flops_saved(self) -> int:
        return self.flops_vanilla_total - self.flops_block_total

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cache_stats"] = asdict(self.cache_stats) | {"hit_rate": self.cache_stats.hit_rate}
        d["sample_passed"] = self.sample_passed
        d["flops_saved"] = self.flops_saved
        return {"format": REPORT_FORMAT, "version": REPORT_VERSION} | d

    def write(self, json_path, csv_path) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        with open(csv_path, "w", newline="") as fh:
            fh.write(f"# {REPORT_FORMAT} ttft v{REPORT_VERSION}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["query", "ttft_ms"])
            for i, t in enumerate(self.ttft_series):
                writer.writerow([i, f"{1000 * t:.4f}"])


def _sample_indices(n_queries: int, rate: float, seed: int) -> list[int]:
    if n_queries == 0 or rate <= 0:
        return []
    count = max(1, int(round(n_queries * rate)))
    rng = SplitMix64(derive_seed(seed, 99))
    order = list(range(n_queries))
    for i in range(n_queries - 1, 0, -1):  # Fisher-Yates
        j = rng.below(i + 1)
        order[i], order[j] = order[j], order[i]
    return sorted(order[:count])


def run_sim(corpus: Corpus, stream: QueryStream, config: ModelConfig, weights: Weights,
            cache_capacity: int, instruction: str = DEFAULT_INSTRUCTION,
            sample_rate: float = 0.01, seed: int = 0, tolerance: float = 1e-4) -> SimReport:
    """Serve every query through block prefill with one shared cache.

    FLOPs use the linear convention, so the vanilla cost of a prompt equals
    the sum of its blocks' costs. Per query the block-attention cost counts
    only blocks that missed the cache, plus the final block. A sample of
    ``sample_rate`` of the queries is re-run through the monolithic oracle.
    """
    if weights.config != config:
        raise ValueError("weights were built for a different config")
    if len(corpus) == 0:
        raise SimulationError("corpus is empty; nothing to simulate")
    cache = KVCache.for_weights(weights, cache_capacity)
    passages = corpus.by_id()
    sampled = set(_sample_indices(len(stream), sample_rate, seed))

    def cost(n):
        return flops_vanilla(config, n, FLOPS_COUNTING).total_flops

    vanilla_total = block_total = avoided = recompute = 0
    ttft, worst = [], 0.0
    for qi, q in enumerate(stream.queries):
        try:
            layout = segment_rag_prompt(instruction, [passages[i].text for i in q.passage_ids],
                                        q.text)
            res = prefill_block(layout, cache, weights)
        except Exception as exc:
            raise SimulationError(f"query {qi}: {exc}") from exc
        ttft.append(res.timing)
        vanilla_total += cost(layout.total_len)
        final_cost = cost(len(layout.final))
        block_total += final_cost
        recompute += final_cost
        for b, hit in zip(layout.blocks[:-1], res.block_hits):
            c = cost(len(b))
            recompute += c
            if hit:
                avoided += c
            else:
                block_total += c
        if qi in sampled:
            oracle = prefill_monolithic_blockmask(layout, weights).first_token_logits
            diff = float(np.max(np.abs(oracle.astype(np.float64) - res.first_token_logits)))
            worst = max(worst, diff)

    stats = cache.stats
    return SimReport(
        n_queries=len(stream),
        hit_rate=stats.hit_rate,
        flops_vanilla_total=vanilla_total,
        flops_block_total=block_total,
        flops_avoided=avoided,
        flops_recompute_total=recompute,
        ttft_series=ttft,
        cache_stats=stats,
        sampled_queries=sorted(sampled),
        sample_max_abs_diff=worst,
        sample_tolerance=tolerance,
    )
