"""Cross-modal mutual distillation over neighbouring similarity distributions.

For a teacher key embedding the K most similar bank entries become anchors;
similarities to those anchors, softened by a temperature, form a
distribution.  The student (a query embedding from another modality) is
scored against the *same* anchor indices in its own bank, and the KL
divergence from teacher to student is minimized in both directions.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParameterError, UsageError
from .moco import MemoryBank, contrastive_logits, info_nce


@dataclass(frozen=True)
class CmdConfig:
    K: int = 32
    tau_t: float = 0.05
    tau_s: float = 0.1
    pairs: tuple[tuple[str, str], ...] = (("joint", "motion"),)
    weight: float = 1.0

    def __post_init__(self):
        if self.K < 1:
            raise ParameterError("K must be >= 1")
        if self.tau_s <= 0:
            raise ParameterError("tau_s must be > 0")
        if self.tau_t < 0:
            raise ParameterError("tau_t must be >= 0 (0 selects the one-hot teacher)")
        object.__setattr__(self, "pairs", tuple(tuple(p) for p in self.pairs))


def all_pairs(modalities: Sequence[str]) -> tuple[tuple[str, str], ...]:
    """Every unordered modality pair, each distilled in both directions."""
    return tuple(combinations(modalities, 2))


@dataclass
class SimilarityDistribution:
    anchor_indices: np.ndarray  # B x K
    logits: Tensor  # B x K
    temperature: float
    log_probs: Tensor  # B x K; -inf outside the support of a one-hot teacher

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)


@dataclass
class ModalityView:
    """One modality's query embeddings, key embeddings and memory bank."""

    z_q: Tensor
    z_k: np.ndarray
    bank: MemoryBank

    def __post_init__(self):
        if isinstance(self.z_k, Tensor):
            self.z_k = self.z_k.data
        if self.z_q.ndim == 1:
            self.z_q = self.z_q.reshape(1, -1)
        if self.z_k.ndim == 1:
            self.z_k = self.z_k[None, :]


def _rows(z) -> np.ndarray:
    arr = np.asarray(z.data if isinstance(z, Tensor) else z)
    return arr[None, :] if arr.ndim == 1 else arr


def teacher_distribution(z_k, bank: MemoryBank, K: int, tau_t: float) -> SimilarityDistribution:
    """Top-K neighbours of the key embedding(s) and their softened similarities.

    The result is a constant (no graph).  ``tau_t == 0`` gives an exact
    one-hot at the most similar anchor; ties go to the smaller bank index.
    """
    if K > bank.filled:
        raise UsageError(f"K={K} exceeds the {bank.filled} entries in the bank")
    if tau_t < 0:
        raise ParameterError("tau_t must be >= 0")
    zk = _rows(z_k)
    sims = zk @ bank.active().T.astype(zk.dtype, copy=False)
    top_vals, top_idx = ad.topk(sims, K)
    if tau_t == 0:
        log_probs = np.full(top_vals.shape, -np.inf, dtype=top_vals.dtype)
        log_probs[:, 0] = 0.0
    else:
        with ad.no_grad():
            log_probs = ad.log_softmax(Tensor(top_vals), tau_t, axis=-1).data
    return SimilarityDistribution(top_idx, Tensor(top_vals), tau_t, Tensor(log_probs))


def student_distribution(z_q: Tensor, bank: MemoryBank, anchor_indices: np.ndarray, tau_s: float) -> SimilarityDistribution:
    """Similarities of ``z_q`` to its own bank, gathered at the teacher's anchors."""
    if z_q.ndim == 1:
        z_q = z_q.reshape(1, -1)
    idx = np.asarray(anchor_indices)
    if idx.ndim == 1:
        idx = idx[None, :]
    if idx.size and (idx.min() < 0 or idx.max() >= bank.filled):
        raise UsageError(f"anchor index out of range for a bank with {bank.filled} entries")
    if idx.shape[0] != z_q.shape[0]:
        idx = np.broadcast_to(idx, (z_q.shape[0], idx.shape[1]))
    sims = z_q @ Tensor(bank.active().T.astype(z_q.dtype, copy=False))
    logits = ad.gather(sims, idx, axis=-1)
    return SimilarityDistribution(idx, logits, tau_s, ad.log_softmax(logits, tau_s, axis=-1))


def distribution_kl(teacher: SimilarityDistribution, student: SimilarityDistribution) -> Tensor:
    """Batch-mean KL(teacher || student) on the shared anchor support."""
    if not np.array_equal(teacher.anchor_indices, student.anchor_indices):
        raise UsageError("student was gathered at different anchors than the teacher")
    p = np.exp(teacher.log_probs.data)
    support = p > 0
    log_p = np.where(support, teacher.log_probs.data, 0.0)
    entropy_term = (p * log_p).sum(axis=-1)  # sum p log p, constant
    cross = (Tensor(p.astype(student.log_probs.dtype)) * student.log_probs).sum(axis=-1)
    return (Tensor(entropy_term.astype(student.log_probs.dtype)) - cross).mean()


def cmd_direction_loss(teacher: ModalityView, student: ModalityView, K: int, tau_t: float, tau_s: float):
    """KL from ``teacher``'s key distribution to ``student``'s query distribution.

    Returns ``(loss, teacher_dist, student_dist)``.
    """
    if teacher.bank.sources is not None and student.bank.sources is not None:
        if not np.array_equal(teacher.bank.sources, student.bank.sources):
            raise UsageError("memory banks are not index-aligned across modalities")
    t = teacher_distribution(teacher.z_k, teacher.bank, K, tau_t)
    s = student_distribution(student.z_q, student.bank, t.anchor_indices, tau_s)
    return distribution_kl(t, s), t, s


def cmd_pair_loss(mod_a: ModalityView, mod_b: ModalityView, cfg: CmdConfig) -> Tensor:
    """Bidirectional distillation loss between two modalities."""
    if not (mod_a.bank.filled and mod_b.bank.filled):
        raise UsageError("distillation needs filled memory banks")
    if mod_a.z_q.shape[0] != mod_b.z_q.shape[0]:
        raise UsageError("modalities must share the batch")
    a_to_b, _, _ = cmd_direction_loss(mod_a, mod_b, cfg.K, cfg.tau_t, cfg.tau_s)
    b_to_a, _, _ = cmd_direction_loss(mod_b, mod_a, cfg.K, cfg.tau_t, cfg.tau_s)
    return a_to_b + b_to_a


def cmd_losses(views: Mapping[str, ModalityView], cfg: CmdConfig) -> dict[str, Tensor]:
    """One bidirectional term per configured pair, keyed ``"a-b"``."""
    return {f"{a}-{b}": cmd_pair_loss(views[a], views[b], cfg) for a, b in cfg.pairs}


def total_loss(scl_losses, cmd_losses=(), cmd_weight: float = 1.0) -> Tensor:
    """Sum of every contrastive term plus ``cmd_weight`` times every pair term."""
    scl = list(scl_losses.values() if isinstance(scl_losses, Mapping) else scl_losses)
    cmd = list(cmd_losses.values() if isinstance(cmd_losses, Mapping) else cmd_losses)
    if not scl:
        raise ParameterError("at least one modality is required")
    total = scl[0]
    for term in scl[1:]:
        total = total + term
    for term in cmd:
        total = total + (term if cmd_weight == 1.0 else term * cmd_weight)
    return total


# -- positive mining reference --------------------------------------------------


def mined_positive_term(z_q: Tensor, z_k, bank: MemoryBank, u, tau: float, include_key: bool = True) -> Tensor:
    """Batch mean of ``-log exp(q.m_u/tau) / denominator``.

    The denominator sums over all bank rows and, if ``include_key``, also
    over the query's own positive key.
    """
    if z_q.ndim == 1:
        z_q = z_q.reshape(1, -1)
    u = np.atleast_1d(np.asarray(u))
    if u.size and (u.min() < 0 or u.max() >= bank.filled):
        raise UsageError(f"mined index out of range for a bank with {bank.filled} entries")
    u = np.broadcast_to(u, (z_q.shape[0],))
    if include_key:
        logits = contrastive_logits(z_q, z_k, bank.active())
        cols = u + 1
    else:
        logits = z_q @ Tensor(bank.active().T.astype(z_q.dtype, copy=False))
        cols = u
    logp = ad.log_softmax(logits, tau, axis=1)
    picked = ad.gather(logp, cols.reshape(-1, 1), axis=1)
    return -(picked.mean())


def cpm_loss(z_q_b: Tensor, z_k_b, bank_b: MemoryBank, u, tau_c: float = 0.07) -> Tensor:
    """Contrastive loss with an extra positive ``m_u`` mined in another modality."""
    return info_nce(z_q_b, z_k_b, bank_b, tau_c) + mined_positive_term(z_q_b, z_k_b, bank_b, u, tau_c)


def mine_index(z_k_a, bank_a: MemoryBank) -> np.ndarray:
    """Most similar bank entry per key; ties go to the smaller index."""
    sims = _rows(z_k_a) @ bank_a.active().T
    return ad.topk(sims, 1)[1][:, 0]


@dataclass
class DegeneracyReport:
    passed: bool
    cmd_loss: float
    closed_form: float
    mined_term: float
    dev_closed_form: float
    dev_mined_term: float
    mined_index: int
    teacher_mass_at_u: float
    tolerance: float = 1e-10

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"{verdict} u={self.mined_index} cmd={self.cmd_loss:.12g} "
            f"closed={self.closed_form:.12g} (dev {self.dev_closed_form:.2e}) "
            f"mined={self.mined_term:.12g} (dev {self.dev_mined_term:.2e})"
        )


@dataclass
class DegeneracyInstance:
    """One direction (A teaches B) of a distillation problem, all fp64."""

    z_k_a: np.ndarray
    bank_a: np.ndarray
    z_q_b: np.ndarray
    z_k_b: np.ndarray
    bank_b: np.ndarray
    tau_t: float = 0.0
    tau_s: float = 0.1
    K: int | None = None

    @classmethod
    def random(cls, rng: np.random.Generator, n: int = 32, d: int = 8, tau_t: float = 0.0, tau_s: float = 0.1):
        def unit(*shape):
            v = rng.normal(size=shape)
            return v / np.linalg.norm(v, axis=-1, keepdims=True)

        return cls(unit(d), unit(n, d), unit(d), unit(d), unit(n, d), tau_t, tau_s)


def degeneracy_check(inst: DegeneracyInstance, tol: float = 1e-10) -> DegeneracyReport:
    """Compare one-directional distillation with its positive-mining limit.

    With a zero teacher temperature and K equal to the bank size the
    distillation loss should reduce to ``-log p_u`` of the student at the
    teacher's most similar index ``u``, which is also the mined-positive
    contrastive term evaluated at the student temperature with the query's
    own key left out of the denominator.
    """
    bank_a = MemoryBank.from_entries(inst.bank_a)
    bank_b = MemoryBank.from_entries(inst.bank_b)
    n = bank_a.capacity
    K = n if inst.K is None else inst.K
    teacher = ModalityView(Tensor(inst.z_k_a), inst.z_k_a, bank_a)
    student = ModalityView(Tensor(inst.z_q_b), inst.z_k_b, bank_b)
    with ad.no_grad():
        loss, t, _ = cmd_direction_loss(teacher, student, K, inst.tau_t, inst.tau_s)
        u = int(mine_index(inst.z_k_a, bank_a)[0])
        mined = mined_positive_term(Tensor(inst.z_q_b), inst.z_k_b, bank_b, u, inst.tau_s, include_key=False).item()

    # closed form written out directly
    s = inst.bank_b @ inst.z_q_b / inst.tau_s
    closed = float(np.log(np.exp(s - s.max()).sum()) + s.max() - s[u])

    cmd = loss.item()
    pos = np.flatnonzero(t.anchor_indices[0] == u)
    mass = float(t.probs[0][pos[0]]) if pos.size else 0.0
    dev_c, dev_m = abs(cmd - closed), abs(cmd - mined)
    return DegeneracyReport(
        passed=dev_c <= tol and dev_m <= tol,
        cmd_loss=cmd,
        closed_form=closed,
        mined_term=mined,
        dev_closed_form=dev_c,
        dev_mined_term=dev_m,
        mined_index=u,
        teacher_mass_at_u=mass,
        tolerance=tol,
    )
