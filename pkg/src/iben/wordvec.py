"""Pretrained word-vector tables and the unified L x D embedding matrix.

Several tables (e.g. three 300-dimensional models) are stacked side by
side: a token's unified vector is the concatenation of its per-table
lookups, so the matrix width is the sum of the table dimensions.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from .corpus import PAD_TOKEN, TokenSequence
from .errors import DataFormatError

log = logging.getLogger(__name__)


class WordVectorTable:
    """Immutable word -> vector map of one fixed dimension."""

    def __init__(self, dim: int, entries: dict, name: str = "", duplicates: int = 0):
        self.dim = dim
        self.entries = entries
        self.name = name
        self.duplicates = duplicates

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, word: str):
        return self.entries.get(word)


def load_text_vectors(path, format: str = "glove_text", name: str = "") -> WordVectorTable:
    """Parse a text vector file.

    ``glove_text`` is one ``word v1 .. vD`` line per entry; ``w2v_text``
    is the same preceded by a ``count dim`` header line.  Duplicate words
    keep their first occurrence.
    """
    if format not in ("glove_text", "w2v_text"):
        raise ValueError(f"unknown vector format {format!r}")
    entries: dict[str, np.ndarray] = {}
    dim = None
    duplicates = 0
    with open(path, encoding="utf-8") as fh:
        lineno = 0
        if format == "w2v_text":
            header = fh.readline()
            lineno = 1
            parts = header.split()
            if len(parts) != 2:
                raise DataFormatError(f"{path} line 1: expected 'count dim' header")
            try:
                dim = int(parts[1])
            except ValueError:
                raise DataFormatError(f"{path} line 1: bad header dim {parts[1]!r}") from None
            if dim < 1:
                raise DataFormatError(f"{path} line 1: dim must be positive")
        for line in fh:
            lineno += 1
            parts = line.rstrip("\n").split(" ")
            if parts == [""]:
                continue
            word, rest = parts[0], parts[1:]
            if dim is None:
                dim = len(rest)
                if dim == 0:
                    raise DataFormatError(f"{path} line {lineno}: no vector components")
            if len(rest) != dim:
                raise DataFormatError(
                    f"{path} line {lineno}: expected {dim} components, found {len(rest)}"
                )
            try:
                vec = np.array([float(v) for v in rest], dtype=np.float64)
            except ValueError:
                raise DataFormatError(f"{path} line {lineno}: non-numeric component") from None
            if not np.isfinite(vec).all():
                raise DataFormatError(f"{path} line {lineno}: non-finite component")
            if word in entries:
                duplicates += 1
            else:
                entries[word] = vec
    if not entries:
        raise DataFormatError(f"{path}: no vector entries")
    if duplicates:
        log.warning("%s: %d duplicate entries ignored (first occurrence kept)", path, duplicates)
    return WordVectorTable(dim, entries, name=name or str(path), duplicates=duplicates)


@dataclass(frozen=True)
class OovPolicy:
    """Fill rule for tokens missing from a table."""

    kind: str = "zeros"  # zeros | seeded_uniform
    low: float = -0.25
    high: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("zeros", "seeded_uniform"):
            raise ValueError(f"unknown OOV policy {self.kind!r}")
        if self.high < self.low:
            raise ValueError("OOV range is empty")


def _oov_fill(policy: OovPolicy, table_index: int, token: str, dim: int) -> np.ndarray:
    if policy.kind == "zeros":
        return np.zeros(dim, dtype=np.float64)
    key = f"{policy.seed}|{table_index}|{token}".encode("utf-8")
    digest = hashlib.blake2b(key, digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return rng.uniform(policy.low, policy.high, dim)


@dataclass(frozen=True)
class EmbeddingMatrix:
    """L x D matrix of stacked token vectors; pad rows are all zero."""

    data: np.ndarray

    def __post_init__(self) -> None:
        if self.data.ndim != 2:
            raise ValueError(f"expected a 2-D matrix, got ndim={self.data.ndim}")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


class UnifiedEmbedder:
    """Ordered stack of vector tables plus an out-of-vocabulary policy."""

    def __init__(self, tables, oov_policy: OovPolicy | None = None):
        self.tables = list(tables)
        if not self.tables:
            raise ValueError("embedder needs at least one table")
        self.oov_policy = oov_policy or OovPolicy()
        self.total_dim = sum(t.dim for t in self.tables)

    @property
    def table_offsets(self) -> list[int]:
        """Column offset of each table's block, plus the total width."""
        offsets = [0]
        for t in self.tables:
            offsets.append(offsets[-1] + t.dim)
        return offsets

    def embed_token(self, token: str) -> np.ndarray:
        """Unified vector: per-table lookups concatenated in table order."""
        if token == PAD_TOKEN:
            return np.zeros(self.total_dim, dtype=np.float64)
        blocks = []
        for i, table in enumerate(self.tables):
            vec = table.get(token)
            if vec is None:
                vec = _oov_fill(self.oov_policy, i, token, table.dim)
            blocks.append(vec)
        return np.concatenate(blocks)

    def build_matrix(self, seq: TokenSequence) -> EmbeddingMatrix:
        data = np.zeros((seq.max_len, self.total_dim), dtype=np.float64)
        for t, token in enumerate(seq.tokens):
            if token != PAD_TOKEN:
                data[t] = self.embed_token(token)
        return EmbeddingMatrix(data)


def coverage_report(table: WordVectorTable, tokens) -> tuple[int, int, list[str]]:
    """Count how many of the tokens the table knows; list the misses."""
    hits = 0
    misses: list[str] = []
    for token in tokens:
        if token in table:
            hits += 1
        else:
            misses.append(token)
    return hits, len(misses), misses
