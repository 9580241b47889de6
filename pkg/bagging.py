"""
Bagging layer: vocabulary -> bagging helper (trie) -> segmentation -> bag sums.

Token ids are plain integers; tokenizer training is not part of this module.
A vocabulary file holds one entry per line as whitespace-separated token ids,
and lines starting with '#' are comments.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from embedding_core import EmbeddingMatrix, l2_normalize_rows
from errors import (
    CoverageMismatchError,
    DuplicateEntryError,
    EmptyEntryError,
    EmptyInputError,
    EmptyVocabularyError,
    FormatError,
)

logger = logging.getLogger(__name__)

HELPER_FORMAT = "bagrank-helper"
HELPER_VERSION = 1

TokenSeq = Tuple[int, ...]


@dataclass(frozen=True)
class Vocabulary:
    """Entity/phrase lexicon, stored pre-tokenized."""
    entries: Tuple[str, ...]
    token_sequences: Tuple[TokenSeq, ...]

    def __post_init__(self):
        if len(self.entries) != len(self.token_sequences):
            raise EmptyEntryError("entries and token_sequences differ in length")
        seen = set()
        for entry, seq in zip(self.entries, self.token_sequences):
            if not entry.strip() or not seq:
                raise EmptyEntryError(f"empty vocabulary entry {entry!r}")
            if seq in seen:
                raise DuplicateEntryError(f"duplicate token sequence {list(seq)}")
            seen.add(seq)

    @classmethod
    def from_token_sequences(cls, sequences: Iterable[Sequence[int]],
                             entries: Optional[Sequence[str]] = None) -> "Vocabulary":
        seqs = tuple(tuple(int(t) for t in seq) for seq in sequences)
        if entries is None:
            entries = [" ".join(str(t) for t in seq) for seq in seqs]
        return cls(tuple(entries), seqs)

    def __len__(self) -> int:
        return len(self.token_sequences)


def load_vocabulary(path: str) -> Vocabulary:
    """Read a vocabulary file (UTF-8, one entry of token ids per line)."""
    sequences: List[TokenSeq] = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, 1):
                text = line.strip()
                if not text or text.startswith("#"):
                    continue
                try:
                    sequences.append(tuple(int(tok) for tok in text.split()))
                except ValueError:
                    raise FormatError(f"{path}:{line_no}: expected integer token ids, got {text!r}")
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: not UTF-8 ({e.reason} at byte {e.start})")
    return Vocabulary.from_token_sequences(sequences)


def save_vocabulary(vocab: Vocabulary, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for seq in vocab.token_sequences:
            f.write(" ".join(str(t) for t in seq) + "\n")


class _TrieNode:
    __slots__ = ("children", "terminal")

    def __init__(self):
        self.children: Dict[int, _TrieNode] = {}
        self.terminal = False


class BaggingHelper:
    """
    Trie over the vocabulary's token sequences.

    Built once by ``build_helper`` and never mutated afterwards, so a single
    helper can be shared between threads.
    """

    def __init__(self, root: _TrieNode, vocab_size: int, max_depth: int,
                 sequences: Tuple[TokenSeq, ...]):
        self._root = root
        self.vocab_size = vocab_size
        self.max_depth = max_depth
        self._sequences = sequences

    def __contains__(self, seq: Sequence[int]) -> bool:
        node = self._root
        for token in seq:
            node = node.children.get(int(token))
            if node is None:
                return False
        return node.terminal and len(seq) > 0

    def longest_match(self, tokens: Sequence[int], start: int) -> int:
        """Length of the longest vocabulary entry starting at ``start`` (0 if none)."""
        node = self._root
        best = 0
        for offset in range(start, len(tokens)):
            node = node.children.get(int(tokens[offset]))
            if node is None:
                break
            if node.terminal:
                best = offset - start + 1
        return best

    def sequences(self) -> Iterator[TokenSeq]:
        return iter(self._sequences)

    def save(self, path: str) -> None:
        payload = {
            "format": HELPER_FORMAT,
            "version": HELPER_VERSION,
            "sequences": [list(seq) for seq in self._sequences],
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f)
            f.write("\n")

    @classmethod
    def load(cls, path: str) -> "BaggingHelper":
        try:
            with open(path, "r", encoding="utf-8") as f:
                payload = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: not a helper file ({e})")
        if payload.get("format") != HELPER_FORMAT or payload.get("version") != HELPER_VERSION:
            raise FormatError(f"{path}: unsupported helper format/version")
        return build_helper(Vocabulary.from_token_sequences(payload["sequences"]))

    def __repr__(self) -> str:
        return f"BaggingHelper(vocab_size={self.vocab_size}, max_depth={self.max_depth})"


def build_helper(vocab: Vocabulary) -> BaggingHelper:
    """Compile a vocabulary into a trie."""
    if len(vocab) == 0:
        raise EmptyVocabularyError("cannot build a bagging helper from an empty vocabulary")
    root = _TrieNode()
    max_depth = 0
    for seq in vocab.token_sequences:
        node = root
        for token in seq:
            node = node.children.setdefault(token, _TrieNode())
        if node.terminal:
            raise DuplicateEntryError(f"duplicate token sequence {list(seq)}")
        node.terminal = True
        max_depth = max(max_depth, len(seq))
    logger.debug("built bagging helper: %d entries, max depth %d", len(vocab), max_depth)
    return BaggingHelper(root, len(vocab), max_depth, vocab.token_sequences)


@dataclass(frozen=True)
class BagSegmentation:
    """
    Partition of a token-index range [0, total) into contiguous bags.

    ``offsets[j]`` is the start of bag j, as fed to an embedding-bag sum.
    """
    spans: Tuple[Tuple[int, int], ...]
    total: int
    offsets: Tuple[int, ...] = field(init=False)

    def __post_init__(self):
        cursor = 0
        for start, stop in self.spans:
            if start != cursor or stop <= start:
                raise CoverageMismatchError(f"span ({start}, {stop}) breaks contiguity at {cursor}")
            cursor = stop
        if cursor != self.total:
            raise CoverageMismatchError(f"spans cover [0, {cursor}) but total is {self.total}")
        object.__setattr__(self, "offsets", tuple(start for start, _ in self.spans))

    @classmethod
    def from_offsets(cls, offsets: Sequence[int], total: int) -> "BagSegmentation":
        bounds = list(offsets) + [total]
        return cls(tuple((bounds[j], bounds[j + 1]) for j in range(len(offsets))), total)

    @classmethod
    def empty(cls) -> "BagSegmentation":
        return cls((), 0)

    @classmethod
    def singletons(cls, total: int) -> "BagSegmentation":
        return cls(tuple((i, i + 1) for i in range(total)), total)

    @property
    def k(self) -> int:
        return len(self.spans)

    @property
    def bags(self) -> List[range]:
        return [range(start, stop) for start, stop in self.spans]

    def bag_tokens(self, tokens: Sequence[int]) -> List[List[int]]:
        return [list(tokens[start:stop]) for start, stop in self.spans]


def segment(tokens: Sequence[int], helper: BaggingHelper) -> BagSegmentation:
    """
    Split a token sequence into bags by greedy left-to-right longest match.

    Tokens that start no vocabulary entry become singleton bags.

    Args:
        tokens (Sequence[int]): Token ids to segment.
        helper (BaggingHelper): Trie built from the phrase vocabulary.

    Returns:
        BagSegmentation: Contiguous spans covering every token exactly once.
    """
    if len(tokens) == 0:
        raise EmptyInputError("cannot segment an empty token sequence")
    spans = []
    i = 0
    n = len(tokens)
    while i < n:
        length = helper.longest_match(tokens, i) or 1
        spans.append((i, i + length))
        i += length
    return BagSegmentation(tuple(spans), n)


def aggregate_bags(token_embs: EmbeddingMatrix, seg: BagSegmentation,
                   renormalize: bool = True) -> EmbeddingMatrix:
    """Sum token rows per bag (embedding-bag with offsets), optionally renormalizing."""
    if token_embs.rows != seg.total:
        raise CoverageMismatchError(
            f"segmentation covers {seg.total} tokens but the matrix has {token_embs.rows} rows")
    if seg.k == 0:
        return EmbeddingMatrix.empty(token_embs.dim)
    bags = EmbeddingMatrix(np.add.reduceat(token_embs.data, np.asarray(seg.offsets), axis=0))
    return l2_normalize_rows(bags) if renormalize else bags


def bag_cls_passthrough(token_embs: EmbeddingMatrix, seg: BagSegmentation,
                        renormalize: bool = True) -> Tuple[np.ndarray, EmbeddingMatrix]:
    """Split off row 0 as b_cls and bag the remaining rows."""
    if token_embs.rows == 0:
        raise EmptyInputError("token matrix has no CLS row")
    cls = np.array(token_embs.data[0])
    return cls, aggregate_bags(token_embs.take(1), seg, renormalize)
