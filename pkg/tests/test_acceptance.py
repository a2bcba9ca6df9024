"""Acceptance checks; each prints a single PASS/FAIL line.

Run directly (``python tests/test_acceptance.py``) or through pytest.  The
desk benchmark takes several minutes on one core.
"""

import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from cmdskel import verify
from cmdskel.benchmark import BenchmarkSpec, make_data, run
from cmdskel.skeleton import synth_generate
from cmdskel.trainer import TrainConfig, fit, load_checkpoint


def gradients():
    t0 = time.perf_counter()
    check = verify.check_gradients(coords_per_tensor=None)
    dt = time.perf_counter() - t0
    return check.passed and dt < 30, f"{check.detail}, h=1e-5, fp64, B=4 d=8 N=32 K=8, {dt:.1f}s"


def degeneracy():
    pos, neg = verify.check_degeneracy(100)
    return pos.passed and neg.passed, f"{pos.detail}; control {neg.detail}"


def distributions():
    check = verify.check_distributions(trials=60)
    return check.passed, f"{check.detail}, N<=1024, K in {{1,8,N}}"


def stop_gradient():
    check = verify.check_stop_gradient()
    return check.passed, check.detail


def memory_bank():
    ring = verify.check_queue(steps=1000)
    cfg = TrainConfig(
        modalities=("joint", "motion", "bone"), joints=5, target_frames=8, hidden_dim=4, embedding_dim=4,
        num_layers=1, N=24, K=4, batch_size=5, epochs=125, lr_drop_epoch=100, debug=True, dtype="float64",
    )  # fmt: skip
    data = synth_generate(4, 10, T=10, J=5, rng_seed=0)
    checked = []

    def on_step(state, metrics):
        srcs = [b.sources for b in state.banks.values()]
        filled = state.banks["joint"].filled
        checked.append(all(np.array_equal(s, srcs[0]) for s in srcs[1:]) and bool((srcs[0][:filled] >= 0).all()))

    fit(cfg, data, on_step=on_step)
    aligned = len(checked) == 1000 and all(checked)
    return ring.passed and aligned, f"{ring.detail} vs ring oracle; {sum(checked)}/{len(checked)} training steps index-aligned"


def momentum():
    check = verify.check_momentum()
    return check.passed, f"{check.detail}, alpha in {{0, 0.999, 1}}"


def desk_benchmark():
    res = run(BenchmarkSpec())
    base, cmd = res.baseline_median, res.cmd_median
    ok = cmd >= base and base >= 0.6 and cmd >= 0.6 and res.seconds < 20 * 60
    per_seed = ", ".join(f"seed {b.seed}: {b.knn:.3f}/{c.knn:.3f}" for b, c in zip(res.baseline, res.cmd))
    return ok, f"joint 1-NN median baseline {base:.3f}, with distillation {cmd:.3f} ({per_seed}); {res.seconds / 60:.1f} min"


def determinism():
    tmp = Path(tempfile.mkdtemp())
    train, _ = make_data(BenchmarkSpec())

    # desk configuration; 7 steps per epoch, so two epochs cover the first 10
    runs = []
    for _ in range(2):
        losses = []
        fit(TrainConfig(epochs=2, lr_drop_epoch=1), train, on_step=lambda s, m: losses.append(m["loss_total"]))
        runs.append(np.array(losses[:10]))
    identical = len(runs[0]) == 10 and runs[0].tobytes() == runs[1].tobytes()

    cfg = TrainConfig(N=128, epochs=4, lr_drop_epoch=3, checkpoint_every=2)
    subset = train[:192]
    full, full_rows = fit(cfg, subset, out_dir=tmp / "full")
    resumed, rows = fit(cfg, subset, out_dir=tmp / "resumed", resume=load_checkpoint(tmp / "full" / "checkpoint-epoch002"))
    same_params = all(
        full.encoders[m].query[n].data.tobytes() == resumed.encoders[m].query[n].data.tobytes()
        and full.encoders[m].key[n].data.tobytes() == resumed.encoders[m].key[n].data.tobytes()
        for m in cfg.modalities
        for n in full.encoders[m].query.names()
    )
    same_losses = [r["loss_total"] for r in rows] == [r["loss_total"] for r in full_rows[2:]]
    resumed_ok = same_params and same_losses
    return identical and resumed_ok, f"first 10 losses bit-identical: {identical}; resume from epoch 2 matches: {resumed_ok}"


CRITERIA = [
    (1, "gradients", gradients),
    (2, "degeneracy", degeneracy),
    (3, "distributions/top-K", distributions),
    (4, "stop-gradient", stop_gradient),
    (5, "memory bank", memory_bank),
    (6, "momentum update", momentum),
    (7, "desk benchmark", desk_benchmark),
    (8, "determinism", determinism),
]


def line(number, title, ok, detail):
    return f"[{'PASS' if ok else 'FAIL'}] criterion {number} ({title}): {detail}"


@pytest.mark.parametrize("number,title,fn", CRITERIA, ids=[c[1] for c in CRITERIA])
def test_criterion(number, title, fn, capsys):
    ok, detail = fn()
    with capsys.disabled():
        print("\n" + line(number, title, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    import sys

    failed = 0
    for number, title, fn in CRITERIA:
        ok, detail = fn()
        failed += not ok
        print(line(number, title, ok, detail), flush=True)
    sys.exit(1 if failed else 0)
