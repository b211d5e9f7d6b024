"""Analytic FLOPs-to-first-token for vanilla and block-attention prefill.

A multiply-accumulate counts as 2 FLOPs. Two counting conventions:

``full``
    Projections and FFN for every prompt token, attention scores and value
    mixing at ``4 * n^2 * n_heads * head_dim`` per layer, and the output head
    for the last token only.
``linear``
    Two FLOPs per weight per token: every projection, FFN and the output head
    for every token; attention score/value terms are not counted. This is
    the convention that reproduces the published Llama3-8B table, whose
    vanilla column scales exactly with prompt length.

Block mode ``paper`` charges the final block as if it were the whole prompt;
``exact`` adds ``4 * n_final * n_cached * n_heads * head_dim`` per layer for
the final block's attention over cached keys.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .model import ModelConfig

COMPONENTS = ("qkv", "scores", "values", "out", "ffn", "head")
COUNTINGS = ("full", "linear")
BLOCK_MODES = ("paper", "exact")

TABLE2_LENGTHS = (50, 512, 1024, 2048, 4096, 8192, 16384, 32768)
TABLE2_USER_LEN = 50
CSV_HEADER = "# blockattn table2 v1"


@dataclass(frozen=True)
class FlopsReport:
    mode: str  # vanilla | block_paper | block_exact
    prompt_len: int
    final_block_len: int
    breakdown: dict[str, int]
    counting: str = "full"

    @property
    def total_flops(self) -> int:
        return sum(self.breakdown.values())


def _layer_terms(config: ModelConfig, n: int, counting: str) -> dict[str, int]:
    d, hd = config.d_model, config.head_dim
    L = config.n_layers
    attn = 0 if counting == "linear" else 2 * n * n * config.n_heads * hd
    head_tokens = n if counting == "linear" else 1
    return {
        "qkv": L * 2 * n * d * (d + 2 * config.n_kv_heads * hd),
        "scores": L * attn,
        "values": L * attn,
        "out": L * 2 * n * d * d,
        "ffn": L * 6 * n * d * config.d_ffn,
        "head": 2 * d * config.vocab_size * head_tokens,
    }


def _check_counting(counting: str):
    if counting not in COUNTINGS:
        raise ValueError(f"counting must be one of {COUNTINGS}, got {counting!r}")


def flops_vanilla(config: ModelConfig, n: int, counting: str = "full") -> FlopsReport:
    if n < 1:
        raise ValueError("prompt length must be >= 1")
    _check_counting(counting)
    return FlopsReport("vanilla", n, n, _layer_terms(config, n, counting), counting)


def flops_block(config: ModelConfig, n_final: int, n_cached: int, mode: str = "paper",
                counting: str = "full") -> FlopsReport:
    if n_final < 1 or n_cached < 0:
        raise ValueError("need n_final >= 1 and n_cached >= 0")
    if mode not in BLOCK_MODES:
        raise ValueError(f"mode must be one of {BLOCK_MODES}, got {mode!r}")
    _check_counting(counting)
    terms = _layer_terms(config, n_final, counting)
    if mode == "exact":
        cross = config.n_layers * 2 * n_final * n_cached * config.n_heads * config.head_dim
        terms["scores"] += cross
        terms["values"] += cross
    return FlopsReport(f"block_{mode}", n_final + n_cached, n_final, terms, counting)


@dataclass(frozen=True)
class Table2Row:
    prompt_len: int
    vanilla: int
    block: int

    @property
    def reduction(self) -> float:
        """Fractional FLOPs saved by block attention, 0..1."""
        return 1.0 - self.block / self.vanilla


def table2_report(config: ModelConfig, lengths=TABLE2_LENGTHS, user_len: int = TABLE2_USER_LEN,
                  mode: str = "paper", counting: str = "linear") -> list[Table2Row]:
    """Vanilla vs block FLOPs-to-first-token with the user input fixed at ``user_len``."""
    rows = []
    for n in lengths:
        cached = max(n - user_len, 0)
        final = min(user_len, n)
        rows.append(Table2Row(
            n,
            flops_vanilla(config, n, counting).total_flops,
            flops_block(config, final, cached, mode, counting).total_flops,
        ))
    return rows


def table2_csv(rows: list[Table2Row]) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["prompt_len", "vanilla", "block", "reduction"])
    for r in rows:
        writer.writerow([r.prompt_len, f"{r.vanilla:.6e}", f"{r.block:.6e}",
                         f"{100 * r.reduction:.2f}"])
    return buf.getvalue()


# published values: prompt length -> (vanilla FLOPs, reduction %)
REFERENCE_TABLE2 = {
    50: (7.5e11, None),
    512: (7.6e12, 90.1),
    1024: (1.5e13, 95.0),
    2048: (3.0e13, 97.5),
    4096: (6.1e13, 98.7),
    8192: (1.2e14, 99.3),
    16384: (2.45e14, 99.6),
    32768: (4.9e14, 99.8),
}
REFERENCE_BLOCK_FLOPS = 7.5e11
ABS_TOLERANCE = 0.15  # relative, on absolute FLOPs
REDUCTION_TOLERANCE_PP = 0.5


def table2_deviations(rows: list[Table2Row]) -> list[str]:
    """Descriptions of every cell outside tolerance of the published table; empty if none."""
    problems = []
    for r in rows:
        if r.prompt_len not in REFERENCE_TABLE2:
            continue
        vanilla_ref, red_ref = REFERENCE_TABLE2[r.prompt_len]
        if abs(r.vanilla / vanilla_ref - 1) > ABS_TOLERANCE:
            problems.append(f"len {r.prompt_len}: vanilla {r.vanilla:.3e} vs {vanilla_ref:.3e}")
        if abs(r.block / REFERENCE_BLOCK_FLOPS - 1) > ABS_TOLERANCE:
            problems.append(f"len {r.prompt_len}: block {r.block:.3e} vs {REFERENCE_BLOCK_FLOPS:.3e}")
        if red_ref is not None and abs(100 * r.reduction - red_ref) > REDUCTION_TOLERANCE_PP:
            problems.append(f"len {r.prompt_len}: reduction {100 * r.reduction:.2f}% vs {red_ref}%")
    return problems
