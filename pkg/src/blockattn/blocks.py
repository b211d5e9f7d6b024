"""RAG prompt segmentation into blocks with content-addressed keys."""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .model import tokenize

LAYOUT_FORMAT = "blockattn-layout"
LAYOUT_VERSION = 1


class Role(enum.IntEnum):
    INSTRUCTION = 0
    PASSAGE = 1
    QUERY = 2


class BlockKey(bytes):
    """SHA-256 digest identifying a block's content (role and tokens)."""

    def __repr__(self):
        return f"BlockKey({self.hex()[:16]}...)"


@dataclass(frozen=True)
class Block:
    role: Role
    text: str
    tokens: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        toks = tuple(tokenize(self.text))
        if not toks:
            raise ValueError(f"{self.role.name.lower()} block is empty")
        object.__setattr__(self, "tokens", toks)

    def __len__(self):
        return len(self.tokens)


def block_key(b: Block) -> BlockKey:
    """Digest over the role byte followed by little-endian u32 token ids."""
    h = hashlib.sha256()
    h.update(bytes([int(b.role)]))
    h.update(np.asarray(b.tokens, dtype="<u4").tobytes())
    return BlockKey(h.digest())


@dataclass(frozen=True)
class PromptLayout:
    blocks: tuple[Block, ...]
    offsets: tuple[int, ...] = field(init=False)
    total_len: int = field(init=False)

    def __post_init__(self):
        blocks = tuple(self.blocks)
        if not blocks:
            raise ValueError("layout needs at least one block")
        if blocks[-1].role is not Role.QUERY:
            raise ValueError("the final block must be the query")
        if any(b.role is Role.QUERY for b in blocks[:-1]):
            raise ValueError("only the final block may be a query")
        offsets, pos = [], 0
        for b in blocks:
            offsets.append(pos)
            pos += len(b)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "offsets", tuple(offsets))
        object.__setattr__(self, "total_len", pos)

    def __len__(self):
        return len(self.blocks)

    @property
    def final(self) -> Block:
        return self.blocks[-1]

    def tokens(self) -> np.ndarray:
        return np.fromiter((t for b in self.blocks for t in b.tokens), dtype=np.int64,
                           count=self.total_len)

    def to_json(self) -> str:
        return json.dumps({
            "format": LAYOUT_FORMAT,
            "version": LAYOUT_VERSION,
            "blocks": [{"role": b.role.name.lower(), "text": b.text} for b in self.blocks],
        })

    @classmethod
    def from_json(cls, text: str) -> "PromptLayout":
        data = json.loads(text)
        if data.get("format") != LAYOUT_FORMAT or data.get("version") != LAYOUT_VERSION:
            raise ValueError("not a version-1 blockattn layout")
        return cls(tuple(Block(Role[b["role"].upper()], b["text"]) for b in data["blocks"]))


def positions_of(layout: PromptLayout, block_index: int) -> range:
    if not 0 <= block_index < len(layout.blocks):
        raise IndexError(f"block index {block_index} out of range for {len(layout.blocks)} blocks")
    start = layout.offsets[block_index]
    return range(start, start + len(layout.blocks[block_index]))


def segment_rag_prompt(instruction: str, passages, query: str,
                       merge_instruction: bool = False) -> PromptLayout:
    """Instruction block, one block per passage in the given order, then the query.

    Passages are expected in ascending retrieval score, so the most relevant
    one sits next to the query; they are never reordered here. With
    ``merge_instruction`` the instruction is prefixed to the query block
    instead of getting its own cacheable block.
    """
    if not query:
        raise ValueError("query must be non-empty")
    blocks = []
    if instruction and not merge_instruction:
        blocks.append(Block(Role.INSTRUCTION, instruction))
    blocks.extend(Block(Role.PASSAGE, p) for p in passages)
    if instruction and merge_instruction:
        query = instruction + query
    blocks.append(Block(Role.QUERY, query))
    return PromptLayout(tuple(blocks))


def parse_prompt_json(text: str, merge_instruction: bool = False) -> PromptLayout:
    """Build a layout from ``{"instruction", "passages": [...], "query"}``.

    Raises ``json.JSONDecodeError`` (which carries the position) on malformed input.
    """
    data = json.loads(text)
    if not isinstance(data, dict):
        raise ValueError("prompt JSON must be an object")
    passages = data.get("passages", [])
    if not isinstance(passages, list) or not all(isinstance(p, str) for p in passages):
        raise ValueError("'passages' must be a list of strings")
    return segment_rag_prompt(data.get("instruction", ""), passages, data.get("query", ""),
                              merge_instruction=merge_instruction)
