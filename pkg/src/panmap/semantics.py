"""Per-instance semantic embedding banks.

Each tracked object keeps a small bank of unit-norm feature vectors with
accumulated confidences instead of a single running mean. A new observation
either merges into the most similar stored vector (when similar enough) or is
kept as a separate entry, so an object seen from genuinely different sides
can hold onto multimodal appearance without unbounded memory.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

UNIT_TOL = 1e-6
_EMB_MAGIC = b"EMB1"


@dataclass(frozen=True)
class SemanticsConfig:
    """Bank behaviour knobs.

    sigma_sim: cosine similarity at or above which a new vector merges into
        an existing entry rather than occupying a new slot.
    capacity: maximum number of entries per bank.
    emb_dim: expected embedding dimensionality (validated on every update).
    """

    sigma_sim: float = 0.85
    capacity: int = 3
    emb_dim: int = 512

    def __post_init__(self):
        if not (0.0 < self.sigma_sim <= 1.0):
            raise ValueError("sigma_sim must be in (0, 1]")
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if self.emb_dim < 1:
            raise ValueError("emb_dim must be >= 1")


@dataclass
class BankEntry:
    embedding: np.ndarray
    confidence: float


@dataclass
class EmbeddingBank:
    entries: list[BankEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


def _check_embedding(e: np.ndarray, dim: int) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (dim,):
        raise ValueError(f"embedding has shape {e.shape}, expected ({dim},)")
    if not np.all(np.isfinite(e)):
        raise ValueError("embedding has non-finite entries")
    n = float(np.linalg.norm(e))
    if abs(n - 1.0) > UNIT_TOL:
        raise ValueError(f"embedding norm {n} is not 1")
    return e


def pool_embedding(features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Average per-pixel features over a mask and renormalize to unit length."""
    feats = np.asarray(features, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if feats.shape[:2] != m.shape:
        raise ValueError("feature map and mask shapes disagree")
    if not m.any():
        raise ValueError("mask selects no pixels")
    mean = feats[m].mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < 1e-12:
        raise ValueError("pooled feature is numerically zero")
    return mean / norm


def bank_update(bank: EmbeddingBank, e_new: np.ndarray, c_new: float, cfg: SemanticsConfig) -> None:
    """Fold one observed embedding into a bank, in place.

    If the best cosine similarity against the stored entries exceeds
    sigma_sim, the new vector merges into that entry by confidence-weighted
    averaging (renormalized) and the entry absorbs the new confidence.
    Otherwise it opens a new slot while capacity remains; once full, it
    replaces the lowest-confidence entry only when strictly more confident.
    """
    e_new = _check_embedding(e_new, cfg.emb_dim)
    if not (np.isfinite(c_new) and c_new > 0.0):
        raise ValueError("confidence must be positive and finite")

    if bank.entries:
        sims = [float(np.dot(entry.embedding, e_new)) for entry in bank.entries]
        j = int(np.argmax(sims))
        if sims[j] > cfg.sigma_sim:
            entry = bank.entries[j]
            merged = entry.confidence * entry.embedding + c_new * e_new
            norm = float(np.linalg.norm(merged))
            if norm < 1e-12:
                raise ValueError("merged embedding is numerically zero")
            entry.embedding = merged / norm
            entry.confidence += c_new
            return

    if len(bank.entries) < cfg.capacity:
        bank.entries.append(BankEntry(e_new.copy(), c_new))
        return

    weakest = min(range(len(bank.entries)), key=lambda i: bank.entries[i].confidence)
    if c_new > bank.entries[weakest].confidence:
        bank.entries[weakest] = BankEntry(e_new.copy(), c_new)


def bank_similarity(bank: EmbeddingBank, query: np.ndarray) -> float:
    """Best cosine similarity between a query vector and any bank entry."""
    if not bank.entries:
        raise ValueError("bank is empty")
    q = np.asarray(query, dtype=np.float64)
    return max(float(np.dot(entry.embedding, q)) for entry in bank.entries)


def bank_confidence(bank: EmbeddingBank) -> float:
    """Squashed confidence in [0, 1): c / (c + 1) of the strongest entry."""
    if not bank.entries:
        return 0.0
    c = max(entry.confidence for entry in bank.entries)
    return c / (c + 1.0)


def write_embeddings(path, vectors: np.ndarray) -> None:
    """Write a (count, dim) float array as a little-endian binary table."""
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a (count, dim) array, got shape {arr.shape}")
    count, dim = arr.shape
    with open(path, "wb") as f:
        f.write(_EMB_MAGIC)
        f.write(struct.pack("<IQ", dim, count))
        f.write(arr.astype("<f4").tobytes())


def read_embeddings(path) -> np.ndarray:
    """Read a table written by write_embeddings; returns (count, dim) float64."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _EMB_MAGIC:
            raise ValueError(f"bad embedding file magic {magic!r}")
        dim, count = struct.unpack("<IQ", f.read(12))
        payload = f.read(4 * dim * count)
    if len(payload) != 4 * dim * count:
        raise ValueError("embedding file truncated")
    return np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float64)
