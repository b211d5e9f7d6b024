"""Block-attention inference: independently encoded, position-shifted, reusable prompt blocks."""

__version__ = "0.1.0"

from .blocks import Block, PromptLayout, Role, block_key, parse_prompt_json, segment_rag_prompt
from .engine import (AttentionMask, PrefillResult, build_block_mask, generate, measure_ttft,
                     prefill, prefill_block, prefill_monolithic_blockmask, prefill_vanilla)
from .flops import flops_block, flops_vanilla, table2_report
from .kvcache import CacheStats, KVCache, KVEntry
from .model import ModelConfig, Weights, init_weights, load_weights, profile
from .rope import RopeParams, rope_apply, rope_shift, rope_unapply
from .tensor import backend

__all__ = [
    "AttentionMask", "Block", "CacheStats", "KVCache", "KVEntry", "ModelConfig", "PrefillResult",
    "PromptLayout", "Role", "RopeParams", "Weights", "backend", "block_key", "build_block_mask",
    "flops_block", "flops_vanilla", "generate", "init_weights", "load_weights", "measure_ttft",
    "parse_prompt_json", "prefill", "prefill_block", "prefill_monolithic_blockmask",
    "prefill_vanilla", "profile", "rope_apply", "rope_shift", "rope_unapply",
    "segment_rag_prompt", "table2_report",
]
