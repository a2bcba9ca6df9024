"""Single-modal momentum contrast: encoder pair, FIFO memory bank, InfoNCE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncoderConfig, EncoderParams, copy_params, init
from .errors import DimensionError, ParameterError, UsageError


def _unit_tol(dtype) -> float:
    return 1e-6 if np.dtype(dtype) == np.float64 else 1e-4


def check_unit_rows(arr: np.ndarray, what: str) -> None:
    norms = np.sqrt((arr.astype(np.float64) ** 2).sum(axis=-1))
    if np.any(np.abs(norms - 1.0) > _unit_tol(arr.dtype)):
        raise ParameterError(f"{what} rows must be unit-norm (max deviation {np.abs(norms - 1).max():.2e})")


class MemoryBank:
    """Fixed-capacity ring buffer of key embeddings.

    Rows are written at ``cursor`` and wrap around, so once full the oldest
    entry is overwritten first.  Until the first wrap the valid rows are
    ``entries[:filled]``.  ``sources`` optionally records which dataset
    sample produced each row (-1 for empty slots) so that banks of different
    modalities can be checked for index alignment.
    """

    def __init__(self, capacity: int, dim: int, dtype="float64", track_sources: bool = False):
        if capacity < 1 or dim < 1:
            raise ParameterError("capacity and dim must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.entries = np.zeros((capacity, dim), dtype=dtype)
        self.cursor = 0
        self.filled = 0
        self.sources = np.full(capacity, -1, dtype=np.int64) if track_sources else None

    @property
    def full(self) -> bool:
        return self.filled == self.capacity

    def active(self) -> np.ndarray:
        """Valid rows, ``filled x dim``."""
        return self.entries if self.full else self.entries[: self.filled]

    def enqueue(self, keys, sources=None) -> None:
        keys = np.asarray(keys.data if isinstance(keys, Tensor) else keys)
        if keys.ndim == 1:
            keys = keys[None, :]
        b = keys.shape[0]
        if keys.shape[1] != self.dim:
            raise DimensionError(f"bank stores {self.dim}-d keys, got {keys.shape}")
        if b > self.capacity:
            raise ParameterError(f"batch of {b} exceeds bank capacity {self.capacity}")
        slots = (self.cursor + np.arange(b)) % self.capacity
        self.entries[slots] = keys
        if self.sources is not None:
            self.sources[slots] = -1 if sources is None else np.asarray(sources)
        self.cursor = int((self.cursor + b) % self.capacity)
        self.filled = min(self.filled + b, self.capacity)

    def copy(self) -> "MemoryBank":
        out = MemoryBank.__new__(MemoryBank)
        out.capacity, out.dim = self.capacity, self.dim
        out.entries = self.entries.copy()
        out.cursor, out.filled = self.cursor, self.filled
        out.sources = None if self.sources is None else self.sources.copy()
        return out

    def permuted(self, perm) -> "MemoryBank":
        """Copy with rows relabelled by ``perm`` (full banks only)."""
        out = self.copy()
        out.entries = self.entries[perm]
        if out.sources is not None:
            out.sources = self.sources[perm]
        return out

    @classmethod
    def from_entries(cls, entries, sources=None) -> "MemoryBank":
        entries = np.asarray(entries)
        bank = cls(entries.shape[0], entries.shape[1], dtype=entries.dtype, track_sources=sources is not None)
        bank.enqueue(entries, sources)
        return bank


def enqueue(bank: MemoryBank, z_k, sources=None) -> MemoryBank:
    bank.enqueue(z_k, sources)
    return bank


@dataclass
class EncoderPair:
    """Gradient-trained query encoder and its momentum-averaged key copy."""

    query: EncoderParams
    key: EncoderParams
    alpha: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must lie in [0, 1], got {self.alpha}")
        if [t.shape for t in self.query.tensors()] != [t.shape for t in self.key.tensors()]:
            raise DimensionError("query and key encoders differ in shape")
        self.key.requires_grad_(False)

    @classmethod
    def create(cls, cfg: EncoderConfig, rng_seed: int, alpha: float = 0.999) -> "EncoderPair":
        query = init(cfg, rng_seed)
        return cls(query, copy_params(query), alpha)


def momentum_update(pair: EncoderPair) -> EncoderParams:
    """In place: ``key <- alpha * key + (1 - alpha) * query`` for every parameter.

    Batch-norm running statistics are not averaged; the key encoder keeps
    its own, refreshed by its train-mode forward passes.
    """
    a = pair.alpha
    for name, kt in pair.key.params.items():
        q = pair.query.params[name].data
        if q.shape != kt.shape:
            raise DimensionError(f"{name}: query {q.shape} vs key {kt.shape}")
        kt.data = a * kt.data + (1.0 - a) * q
    return pair.key


def contrastive_logits(z_q: Tensor, z_k, negatives: np.ndarray) -> Tensor:
    """``B x (1+N)`` similarities: positive first, then the bank rows."""
    k = ad.Tensor(np.asarray(z_k.data if isinstance(z_k, Tensor) else z_k, dtype=z_q.dtype))
    pos = (z_q * k).sum(axis=1).reshape(-1, 1)
    neg = z_q @ ad.Tensor(negatives.T.astype(z_q.dtype, copy=False))
    return ad.concat([pos, neg], axis=1)


def info_nce(z_q: Tensor, z_k, bank: MemoryBank, tau_c: float = 0.07) -> Tensor:
    """Batch-mean InfoNCE with one positive key per query and bank negatives.

    ``z_k`` and the bank are constants; only ``z_q`` receives a gradient.
    """
    if bank.filled < 1:
        raise UsageError("InfoNCE needs at least one negative in the memory bank")
    if tau_c <= 0:
        raise ParameterError(f"tau_c must be > 0, got {tau_c}")
    if z_q.ndim == 1:
        z_q = z_q.reshape(1, -1)
    logits = contrastive_logits(z_q, z_k, bank.active())
    logp = ad.log_softmax(logits, tau_c, axis=1)
    return -(logp[:, 0].mean())
