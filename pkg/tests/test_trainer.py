import csv
import math

import numpy as np
import pytest

from cmdskel.errors import ParameterError, ParseError, UsageError
from cmdskel.skeleton import synth_generate
from cmdskel.trainer import (
    TrainConfig,
    epoch_batches,
    fit,
    init_state,
    load_checkpoint,
    lr_at,
    parse_config_values,
    prepare_batch,
    read_config_file,
    save_checkpoint,
    scaled_drop_epoch,
    sgd_update,
    train_step,
    write_config_file,
)


def tiny(**kw):
    base = dict(
        joints=5, target_frames=12, hidden_dim=6, embedding_dim=8, num_layers=1,
        N=16, K=4, batch_size=8, epochs=3, lr_drop_epoch=2, lr=0.05, dtype="float64",
    )  # fmt: skip
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return synth_generate(4, 6, T=16, J=5, noise=0.05, rng_seed=0)


class TestSGD:
    def test_scalar_oracle_ten_steps(self):
        p = np.array([1.5])
        v = np.zeros(1)
        lr, mom, wd = 0.1, 0.9, 0.01
        ref_p, ref_v = 1.5, 0.0
        for step in range(10):
            g = 2.0 * p[0] - 1.0  # gradient of (p - 0.5)^2 + const
            sgd_update({"w": p}, {"w": np.array([g])}, {"w": v}, lr, mom, wd)
            ref_v = mom * ref_v + (2.0 * ref_p - 1.0) + wd * ref_p
            ref_p = ref_p - lr * ref_v
            assert p[0] == pytest.approx(ref_p, abs=1e-15)

    def test_one_step_from_rest(self, rng):
        p = rng.normal(size=5)
        g = rng.normal(size=5)
        want = p - 0.1 * (g + 0.01 * p)
        sgd_update({"w": p}, {"w": g}, {"w": np.zeros(5)}, 0.1, 0.9, 0.01)
        np.testing.assert_allclose(p, want, atol=1e-15)

    def test_zero_grad_no_decay(self, rng):
        p = rng.normal(size=3)
        before = p.copy()
        sgd_update({"w": p}, {"w": np.zeros(3)}, {"w": np.zeros(3)}, 0.1, 0.9, 0.0)
        assert np.array_equal(p, before)

    def test_zero_lr_is_noop(self, rng):
        p = rng.normal(size=4)
        before = p.copy()
        sgd_update({"w": p}, {"w": rng.normal(size=4)}, {"w": np.zeros(4)}, 0.0, 0.9, 1e-4)
        assert np.array_equal(p, before)


class TestSchedule:
    def test_drop(self):
        cfg = TrainConfig(lr=0.01, epochs=50, lr_drop_epoch=39)
        assert lr_at(cfg, 38) == 0.01
        assert lr_at(cfg, 39) == pytest.approx(0.001)

    def test_scaled_drop(self):
        assert scaled_drop_epoch(450) == 350
        assert scaled_drop_epoch(50) == 39
        assert scaled_drop_epoch(1) == 0


class TestConfig:
    def test_defaults_are_desk_scale(self):
        cfg = TrainConfig()
        assert (cfg.N, cfg.K, cfg.hidden_dim, cfg.epochs) == (512, 32, 64, 50)
        full = TrainConfig.full_scale()
        assert (full.N, full.K, full.hidden_dim, full.epochs) == (16384, 8192, 1024, 450)

    def test_validation(self):
        with pytest.raises(ParameterError):
            TrainConfig(K=600)
        with pytest.raises(ParameterError):
            TrainConfig(modalities=("joint", "depth"))
        with pytest.raises(ParameterError):
            TrainConfig(tau_c=0.0)

    def test_file_round_trip(self, tmp_path):
        cfg = tiny(modalities=("joint", "bone"), cmd_weight=0.5, debug=True)
        p = tmp_path / "c.txt"
        write_config_file(p, cfg)
        again = TrainConfig(**parse_config_values(read_config_file(p)))
        assert again == cfg and again.hash() == cfg.hash()

    def test_comments_and_errors(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("# header\nK = 8  # neighbours\n\nN=64\n")
        assert parse_config_values(read_config_file(p)) == {"K": 8, "N": 64}
        p.write_text("K = 8\nnonsense\n")
        with pytest.raises(ParseError, match="line 2"):
            read_config_file(p)
        with pytest.raises(ParameterError):
            parse_config_values({"kappa": "1"})
        with pytest.raises(ParameterError):
            parse_config_values({"K": "eight"})


class TestBatches:
    def test_epoch_batches_cover_without_repeats(self, rng):
        batches = epoch_batches(23, 5, rng)
        flat = np.concatenate(batches)
        assert len(batches) == 4 and len(set(flat)) == 20

    def test_small_dataset_single_batch(self, rng):
        assert [len(b) for b in epoch_batches(3, 8, rng)] == [3]

    def test_modalities_share_augmentation(self, data, rng):
        cfg = tiny(modalities=("joint", "motion"))
        st = init_state(cfg)
        b = prepare_batch(data, [0, 5, 9], cfg, st.topology, rng)
        assert np.array_equal(b["joint"].sources, b["motion"].sources)
        joint = b["joint"].x_q.reshape(3, 12, 2, 5, 3)
        motion = b["motion"].x_q.reshape(3, 12, 2, 5, 3)
        np.testing.assert_allclose(motion[:, :-1], np.diff(joint, axis=1), atol=1e-12)


class TestTrainStep:
    def test_warmup_then_all_terms(self, data):
        cfg = tiny()
        st = init_state(cfg)
        seen = []
        for i in range(4):
            idx = np.arange(8) + (i % 3) * 8
            m = train_step(st, prepare_batch(data, idx, cfg, st.topology, st.rng))
            seen.append(m)
        assert math.isnan(seen[0]["loss_total"])
        assert not math.isnan(seen[1]["loss_scl_joint"]) and math.isnan(seen[1]["loss_cmd_joint-motion"])
        assert all(not math.isnan(v) for v in seen[3].values())
        assert st.step == 4 and st.banks["joint"].full

    def test_single_modality(self, data):
        cfg = tiny(modalities=("joint",))
        state, rows = fit(cfg, data)
        assert set(state.encoders) == {"joint"}
        assert list(rows[0]) == ["epoch", "step", "lr", "loss_total", "loss_scl_joint"]

    def test_zero_lr_keeps_query_fixed(self, data):
        cfg = tiny(lr=0.0, epochs=1, lr_drop_epoch=0)
        init = init_state(cfg)
        state, _ = fit(cfg, data)
        for m in cfg.modalities:
            for n in init.encoders[m].query.names():
                assert np.array_equal(init.encoders[m].query[n].data, state.encoders[m].query[n].data)
            assert state.banks[m].filled == 16

    def test_metrics_rows_per_epoch(self, data, tmp_path):
        fit(tiny(epochs=3), data, out_dir=tmp_path)
        with open(tmp_path / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3
        assert all(math.isfinite(float(v)) for r in rows for v in r.values())

    def test_modalities_independent_without_cmd(self, data):
        both, _ = fit(tiny(cmd_enabled=False), data)
        alone, _ = fit(tiny(cmd_enabled=False, modalities=("joint",)), data)
        for n in alone.encoders["joint"].query.names():
            assert both.encoders["joint"].query[n].data.tobytes() == alone.encoders["joint"].query[n].data.tobytes()

    def test_key_is_geometric_average_of_queries(self, data):
        cfg = tiny(alpha=0.7, epochs=1, lr_drop_epoch=0)
        st = init_state(cfg)
        k0 = st.encoders["joint"].key["proj.w"].data.copy()
        history = []
        for i in range(3):
            batch = prepare_batch(data, np.arange(8) + 8 * i, cfg, st.topology, st.rng)
            train_step(st, batch)
            history.append(st.encoders["joint"].query["proj.w"].data.copy())
        ref = 0.7**3 * k0
        for i, h in enumerate(history):
            ref = ref + 0.3 * 0.7 ** (2 - i) * h
        np.testing.assert_allclose(st.encoders["joint"].key["proj.w"].data, ref, atol=1e-12)

    def test_debug_catches_misaligned_batch(self, data):
        cfg = tiny(debug=True)
        st = init_state(cfg)
        batch = prepare_batch(data, np.arange(8), cfg, st.topology, st.rng)
        batch["motion"].sources = batch["motion"].sources[::-1].copy()
        with pytest.raises(UsageError):
            train_step(st, batch)

    def test_loss_decreases(self):
        clean = synth_generate(4, 6, T=16, J=5, noise=0.0, rng_seed=0)
        drops = []
        for seed in range(3):
            losses = []
            cfg = tiny(seed=seed, epochs=67, lr_drop_epoch=60)
            fit(cfg, clean, on_step=lambda s, m: losses.append(m["loss_total"]))
            # from the first step with every term active
            losses = losses[2:202]
            drops.append(np.mean(losses[:20]) - np.mean(losses[-20:]))
        assert np.median(drops) > 0


class TestCheckpoint:
    def test_round_trip(self, data, tmp_path):
        cfg = tiny(epochs=1, lr_drop_epoch=0)
        state, _ = fit(cfg, data)
        save_checkpoint(state, tmp_path / "ck")
        back = load_checkpoint(tmp_path / "ck")
        assert (back.epoch, back.step) == (state.epoch, state.step)
        for m in cfg.modalities:
            a, b = state.encoders[m], back.encoders[m]
            for n in a.query.names():
                assert a.query[n].data.tobytes() == b.query[n].data.tobytes()
                assert a.key[n].data.tobytes() == b.key[n].data.tobytes()
            assert np.array_equal(state.banks[m].entries, back.banks[m].entries)
            assert state.banks[m].cursor == back.banks[m].cursor
        assert state.rng.integers(1 << 30) == back.rng.integers(1 << 30)

    def test_resume_matches_uninterrupted(self, data, tmp_path):
        cfg = tiny(epochs=4, lr_drop_epoch=3, checkpoint_every=2)
        full, full_rows = fit(cfg, data, out_dir=tmp_path / "full")
        mid = load_checkpoint(tmp_path / "full" / "checkpoint-epoch002")
        assert mid.epoch == 2
        resumed, rows = fit(cfg, data, out_dir=tmp_path / "b", resume=mid)
        for m in cfg.modalities:
            for n in full.encoders[m].query.names():
                assert full.encoders[m].query[n].data.tobytes() == resumed.encoders[m].query[n].data.tobytes()
            assert full.banks[m].entries.tobytes() == resumed.banks[m].entries.tobytes()
        assert [r["loss_total"] for r in rows] == [r["loss_total"] for r in full_rows[2:]]

    def test_resume_appends_metrics(self, data, tmp_path):
        cfg = tiny(epochs=2, lr_drop_epoch=1, checkpoint_every=1)
        fit(cfg, data, out_dir=tmp_path)
        fit(cfg.replace(epochs=3), data, out_dir=tmp_path, resume=load_checkpoint(tmp_path / "checkpoint"))
        with open(tmp_path / "metrics.csv") as fh:
            assert [int(r["epoch"]) for r in csv.DictReader(fh)] == [0, 1, 2]

    def test_periodic_checkpoints(self, data, tmp_path):
        fit(tiny(epochs=2, lr_drop_epoch=1, checkpoint_every=1), data, out_dir=tmp_path)
        assert (tmp_path / "checkpoint-epoch001" / "manifest.json").exists()
        assert (tmp_path / "checkpoint-epoch002" / "arrays.bin").exists()

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "manifest.json").write_text('{"format": "other"}')
        (tmp_path / "arrays.bin").write_bytes(b"")
        with pytest.raises(ParseError):
            load_checkpoint(tmp_path)


def test_determinism(data):
    a, b = [], []
    fit(tiny(), data, on_step=lambda s, m: a.append(m["loss_total"]))
    fit(tiny(), data, on_step=lambda s, m: b.append(m["loss_total"]))
    assert np.array_equal(np.array(a[:10]), np.array(b[:10]), equal_nan=True)
