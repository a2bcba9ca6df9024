"""Self-checks run by ``cmdskel verify``.

Each check compares a library path against an independent oracle (finite
differences, full sorts, plain-list ring buffers, closed forms) and returns
a :class:`Check` with the worst deviation observed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .distill import CmdConfig, DegeneracyInstance, ModalityView, cmd_pair_loss, degeneracy_check, teacher_distribution
from .encoder import EncoderConfig, encode, init
from .moco import EncoderPair, MemoryBank, info_nce, momentum_update


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``, 0 when both vanish."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return 0.0 if denom == 0 else float(np.linalg.norm(analytic - numeric) / denom)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, coords=None, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``arr`` (modified in place, restored)."""
    out = np.zeros_like(arr)
    coords = list(np.ndindex(arr.shape)) if coords is None else coords
    for i in coords:
        orig = arr[i]
        arr[i] = orig + h
        fp = f()
        arr[i] = orig - h
        fm = f()
        arr[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out


def unit_rows(rng: np.random.Generator, *shape) -> np.ndarray:
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# -- gradient instance ---------------------------------------------------------


@dataclass
class GradInstance:
    """Two-modality loss over tiny fp64 encoders with pre-filled banks."""

    pairs: dict
    x_q: dict
    x_k: dict
    banks: dict
    cfg: CmdConfig
    tau_c: float = 0.07

    @classmethod
    def build(cls, seed: int = 0, B: int = 4, d: int = 8, N: int = 32, K: int = 8, T: int = 5, hidden: int = 4):
        rng = np.random.default_rng(seed)
        ecfg = EncoderConfig(input_dim=6, hidden_dim=hidden, embedding_dim=d, num_layers=3, dtype="float64")
        pairs, x_q, x_k, banks = {}, {}, {}, {}
        for i, m in enumerate(("joint", "motion")):
            pair = EncoderPair.create(ecfg, seed * 10 + i, alpha=0.9)
            # distinct key weights so the stop-gradient check is not vacuous
            for t in pair.key.params.values():
                t.data = t.data + rng.normal(0, 0.05, t.shape)
            for t in pair.query.params.values():
                t.data = t.data + rng.normal(0, 0.05, t.shape)
            pairs[m] = pair
            x_q[m] = rng.normal(size=(B, T, 6))
            x_k[m] = rng.normal(size=(B, T, 6))
            banks[m] = MemoryBank.from_entries(unit_rows(rng, N, d))
        return cls(pairs, x_q, x_k, banks, CmdConfig(K=K, tau_t=0.05, tau_s=0.1, pairs=(("joint", "motion"),)))

    def keys(self, record: bool = False) -> dict:
        out = {}
        for m, pair in self.pairs.items():
            if record:
                out[m] = encode(pair.key, self.x_k[m], "train")
            else:
                with ad.no_grad():
                    out[m] = encode(pair.key, self.x_k[m], "train").data
        return out

    def loss_from_embeddings(self, z_q: dict, z_k: dict) -> ad.Tensor:
        views = {m: ModalityView(z_q[m], z_k[m], self.banks[m]) for m in self.pairs}
        scl = [info_nce(z_q[m], z_k[m], self.banks[m], self.tau_c) for m in self.pairs]
        return scl[0] + scl[1] + cmd_pair_loss(views["joint"], views["motion"], self.cfg)

    def loss(self, z_k: dict | None = None) -> ad.Tensor:
        z_k = self.keys() if z_k is None else z_k
        z_q = {m: encode(p.query, self.x_q[m], "train") for m, p in self.pairs.items()}
        return self.loss_from_embeddings(z_q, z_k)


def check_gradients(seed: int = 0, coords_per_tensor: int | None = 6) -> Check:
    """Analytic vs central-difference gradients of SCL + CMD.

    Covers the query embeddings and every query-encoder parameter tensor
    (``coords_per_tensor`` random entries each, all entries if ``None``).
    """
    t0 = time.perf_counter()
    inst = GradInstance.build(seed)
    rng = np.random.default_rng(seed + 100)
    z_k = inst.keys()
    worst = 0.0
    worst_name = ""

    # embeddings as leaves
    with ad.no_grad():
        zq0 = {m: encode(p.query, inst.x_q[m], "train").data.copy() for m, p in inst.pairs.items()}
    leaves = {m: ad.Tensor(zq0[m].copy(), requires_grad=True) for m in zq0}
    inst.loss_from_embeddings(leaves, z_k).backward()
    for m, leaf in leaves.items():
        arr = leaf.data

        def f():
            with ad.no_grad():
                return inst.loss_from_embeddings({k: ad.Tensor(v.data) for k, v in leaves.items()}, z_k).item()

        err = rel_error(leaf.grad, numeric_grad(f, arr))
        if err > worst:
            worst, worst_name = err, f"z_q[{m}]"

    # encoder parameters
    for p in inst.pairs.values():
        p.query.zero_grad()
    inst.loss(z_k).backward()
    for m, pair in inst.pairs.items():
        for name, t in pair.query.params.items():
            if coords_per_tensor is None or t.size <= coords_per_tensor:
                coords = list(np.ndindex(t.shape))
            else:
                flat = rng.choice(t.size, coords_per_tensor, replace=False)
                coords = [np.unravel_index(i, t.shape) for i in flat]

            def f():
                with ad.no_grad():
                    return inst.loss(z_k).item()

            num = numeric_grad(f, t.data, coords)
            ana = np.array([t.grad[c] for c in coords])
            err = rel_error(ana, np.array([num[c] for c in coords]))
            if err > worst:
                worst, worst_name = err, f"{m}.{name}"
    return Check("gradient vs finite differences", worst < 1e-4, f"max rel err {worst:.2e} at {worst_name}", time.perf_counter() - t0)


def check_stop_gradient(seed: int = 0) -> Check:
    t0 = time.perf_counter()
    inst = GradInstance.build(seed)
    for pair in inst.pairs.values():
        pair.key.requires_grad_(True)
    z_k = inst.keys(record=True)
    inst.loss(z_k).backward()
    total = 0.0
    for pair in inst.pairs.values():
        for t in pair.key.params.values():
            if t.grad is not None:
                total += float(np.abs(t.grad).sum())
        pair.key.requires_grad_(False)
    return Check("stop-gradient on key encoders", total == 0.0, f"sum |grad| = {total}", time.perf_counter() - t0)


def check_degeneracy(instances: int = 100, seed: int = 0) -> list[Check]:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    ok = True
    for _ in range(instances):
        rep = degeneracy_check(DegeneracyInstance.random(rng, n=int(rng.integers(3, 64)), d=8))
        ok &= rep.passed and rep.teacher_mass_at_u == 1.0
        worst = max(worst, rep.dev_closed_form, rep.dev_mined_term)
    pos = Check("tau_t=0, K=N reduces to mined positive", ok, f"{instances} instances, max dev {worst:.2e}", time.perf_counter() - t0)

    t0 = time.perf_counter()
    caught = 0
    for _ in range(instances):
        rep = degeneracy_check(DegeneracyInstance.random(rng, n=int(rng.integers(3, 64)), d=8, tau_t=0.05))
        caught += not rep.passed
    neg = Check("negative control at tau_t=0.05", caught == instances, f"{caught}/{instances} flagged", time.perf_counter() - t0)
    return [pos, neg]


def check_distributions(seed: int = 0, trials: int = 60) -> Check:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst_sum = 0.0
    ok = True
    for _ in range(trials):
        n = int(rng.integers(1, 1025))
        bank = MemoryBank.from_entries(unit_rows(rng, n, 8))
        z = unit_rows(rng, 3, 8)
        for k in {1, min(8, n), n}:
            dist = teacher_distribution(z, bank, k, 0.05)
            worst_sum = max(worst_sum, float(np.abs(dist.probs.sum(axis=1) - 1).max()))
            sims = z @ bank.entries.T
            for row in range(3):
                ref = sorted(range(n), key=lambda i: (-sims[row, i], i))[:k]
                ok &= list(dist.anchor_indices[row]) == ref
    ok &= worst_sum <= 1e-6
    return Check("distributions and top-K selection", bool(ok), f"max |sum-1| {worst_sum:.1e}", time.perf_counter() - t0)


def check_queue(seed: int = 0, steps: int = 300) -> Check:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    cap = 17
    bank = MemoryBank(cap, 2, track_sources=True)
    ring: list = [None] * cap
    cursor = 0
    counter = 0
    ok = True
    for _ in range(steps):
        b = int(rng.integers(1, cap + 1))
        rows = unit_rows(rng, b, 2)
        src = np.arange(counter, counter + b)
        counter += b
        bank.enqueue(rows, src)
        for r, s in zip(rows, src):
            ring[cursor] = (tuple(r), int(s))
            cursor = (cursor + 1) % cap
        filled = sum(x is not None for x in ring)
        ok &= bank.cursor == cursor and bank.filled == filled
        for i, item in enumerate(ring):
            if item is not None:
                ok &= tuple(bank.entries[i]) == item[0] and bank.sources[i] == item[1]
    return Check("memory bank ring-buffer semantics", bool(ok), f"{steps} random enqueues", time.perf_counter() - t0)


def check_momentum(seed: int = 0) -> Check:
    t0 = time.perf_counter()
    cfg = EncoderConfig(input_dim=6, hidden_dim=4, embedding_dim=3, dtype="float64")
    worst = 0.0
    exact = True
    for alpha in (0.0, 0.999, 1.0):
        q = init(cfg, seed)
        k = init(cfg, seed + 1)
        before = {n: t.data.copy() for n, t in k.params.items()}
        pair = EncoderPair(q, k, alpha)
        momentum_update(pair)
        for n, t in k.params.items():
            want = before[n] if alpha == 1.0 else q.params[n].data if alpha == 0.0 else alpha * before[n] + (1 - alpha) * q.params[n].data
            dev = float(np.abs(t.data - want).max())
            worst = max(worst, dev)
            if alpha in (0.0, 1.0):
                exact &= dev == 0.0
    return Check("momentum update", exact and worst <= 1e-12, f"max dev {worst:.1e}", time.perf_counter() - t0)


def run_all(quick: bool = False) -> list[Check]:
    checks = [check_gradients(coords_per_tensor=3 if quick else 6), check_stop_gradient()]
    checks += check_degeneracy(20 if quick else 100)
    checks += [check_distributions(trials=10 if quick else 60), check_queue(), check_momentum()]
    return checks
