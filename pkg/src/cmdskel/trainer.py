"""Multi-modality pre-training loop.

Each step augments a mini-batch twice (query and key views), derives every
configured modality from the same augmented clips, encodes them, and
minimizes the sum of per-modality InfoNCE terms and pairwise distillation
terms.  Query encoders take one SGD step; key encoders follow by momentum;
key embeddings are pushed into each modality's memory bank.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .distill import CmdConfig, ModalityView, all_pairs, cmd_losses, total_loss
from .encoder import EncoderConfig, encode
from .errors import CmdError, ParameterError, ParseError, UsageError
from .moco import EncoderPair, MemoryBank, info_nce, momentum_update
from .skeleton import (
    MODALITIES,
    AugmentConfig,
    SkeletonSequence,
    SkeletonTopology,
    augment_array,
    default_topology,
    derive,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Every pre-training knob.

    Defaults are desk scale (small encoder, N=512, K=32) so a run finishes on
    a CPU; :meth:`full_scale` returns the full-scale values.
    """

    modalities: tuple[str, ...] = ("joint", "motion")
    tau_c: float = 0.07
    tau_t: float = 0.05
    tau_s: float = 0.1
    K: int = 32
    N: int = 512
    alpha: float = 0.999
    batch_size: int = 64
    lr: float = 0.01
    sgd_momentum: float = 0.9
    weight_decay: float = 0.0001
    epochs: int = 50
    lr_drop_epoch: int = 39
    lr_drop_factor: float = 0.1
    seed: int = 0
    cmd_enabled: bool = True
    cmd_weight: float = 1.0
    shared_aug_seed: bool = True
    hidden_dim: int = 64
    embedding_dim: int = 32
    num_layers: int = 3
    pooling: str = "mean"
    dtype: str = "float32"
    joints: int = 25
    target_frames: int = 64
    crop_min: float = 0.5
    crop_max: float = 1.0
    rotate_prob: float = 0.5
    rotate_deg: float = 17.0
    jitter_prob: float = 0.5
    jitter_std: float = 0.01
    shear_prob: float = 0.5
    shear: float = 0.3
    checkpoint_every: int = 0
    debug: bool = False

    def __post_init__(self):
        if isinstance(self.modalities, str):
            self.modalities = tuple(m.strip() for m in self.modalities.split(",") if m.strip())
        self.modalities = tuple(self.modalities)
        self.validate()

    def validate(self) -> None:
        if not self.modalities:
            raise ParameterError("at least one modality is required")
        for m in self.modalities:
            if m not in MODALITIES:
                raise ParameterError(f"unknown modality {m!r}")
        if len(set(self.modalities)) != len(self.modalities):
            raise ParameterError("modalities must be distinct")
        for name in ("tau_c", "tau_s", "N", "batch_size", "K", "joints", "target_frames"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if self.tau_t < 0 or self.lr < 0 or self.weight_decay < 0 or self.epochs < 0:
            raise ParameterError("tau_t, lr, weight_decay and epochs must be non-negative")
        if not 0 <= self.alpha <= 1:
            raise ParameterError("alpha must lie in [0, 1]")
        if self.K > self.N:
            raise ParameterError(f"K={self.K} must not exceed N={self.N}")
        if self.epochs and not self.lr_drop_epoch < self.epochs:
            raise ParameterError("lr_drop_epoch must be smaller than epochs")

    @classmethod
    def full_scale(cls, **kw) -> "TrainConfig":
        base = dict(
            K=8192, N=16384, epochs=450, lr_drop_epoch=350, hidden_dim=1024,
            modalities=("joint", "motion", "bone"),
        )  # fmt: skip
        base.update(kw)
        return cls(**base)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            input_dim=2 * self.joints * 3,
            hidden_dim=self.hidden_dim,
            embedding_dim=self.embedding_dim,
            num_layers=self.num_layers,
            pooling=self.pooling,
            dtype=self.dtype,
        )

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            target_frames=self.target_frames, crop_min=self.crop_min, crop_max=self.crop_max,
            rotate_prob=self.rotate_prob, rotate_deg=self.rotate_deg,
            jitter_prob=self.jitter_prob, jitter_std=self.jitter_std,
            shear_prob=self.shear_prob, shear=self.shear,
        )  # fmt: skip

    def cmd_config(self) -> CmdConfig:
        return CmdConfig(
            K=self.K, tau_t=self.tau_t, tau_s=self.tau_s,
            pairs=all_pairs(self.modalities), weight=self.cmd_weight,
        )  # fmt: skip

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["modalities"] = list(self.modalities)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        if "modalities" in kw and not isinstance(kw["modalities"], str):
            kw["modalities"] = tuple(kw["modalities"])
        return cls(**kw)


def scaled_drop_epoch(epochs: int, full_epochs: int = 450, full_drop: int = 350) -> int:
    """LR drop epoch scaled from the full schedule to ``epochs``."""
    return max(0, min(epochs - 1, int(round(full_drop * epochs / full_epochs))))


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * (cfg.lr_drop_factor if epoch >= cfg.lr_drop_epoch else 1.0)


# -- config files --------------------------------------------------------------


def _coerce(name: str, raw: str, default: Any) -> Any:
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ParameterError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        return tuple(m.strip() for m in raw.split(",") if m.strip())
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ParameterError(f"{name}: cannot parse {raw!r}") from None
    return raw


def config_field_defaults() -> dict[str, Any]:
    return {f.name: getattr(TrainConfig(), f.name) for f in fields(TrainConfig)}


def parse_config_values(pairs: Mapping[str, str]) -> dict[str, Any]:
    defaults = config_field_defaults()
    out = {}
    for k, v in pairs.items():
        if k not in defaults:
            raise ParameterError(f"unknown config key {k!r}")
        out[k] = _coerce(k, v, defaults[k])
    return out


def read_config_file(path: str | Path) -> dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError("expected 'key = value'", line=lineno)
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
    return values


def write_config_file(path: str | Path, cfg: TrainConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in cfg.to_dict().items():
            if isinstance(v, list):
                v = ",".join(v)
            fh.write(f"{k} = {v}\n")


# -- state -------------------------------------------------------------------------


@dataclass
class TrainState:
    config: TrainConfig
    encoders: dict[str, EncoderPair]
    banks: dict[str, MemoryBank]
    velocity: dict[str, dict[str, np.ndarray]]
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    topology: SkeletonTopology = field(default_factory=lambda: default_topology(25))

    @property
    def modalities(self) -> tuple[str, ...]:
        return self.config.modalities


def init_state(cfg: TrainConfig) -> TrainState:
    """Fresh encoders (one seed per modality), empty banks, zero momenta."""
    ecfg = cfg.encoder_config()
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(cfg.modalities) + 1)
    encoders, banks, velocity = {}, {}, {}
    for m, ss in zip(cfg.modalities, seeds[1:]):
        pair = EncoderPair.create(ecfg, int(ss.generate_state(1)[0]), cfg.alpha)
        encoders[m] = pair
        banks[m] = MemoryBank(cfg.N, cfg.embedding_dim, dtype=cfg.dtype, track_sources=True)
        velocity[m] = {k: np.zeros_like(t.data) for k, t in pair.query.params.items()}
    return TrainState(
        config=cfg,
        encoders=encoders,
        banks=banks,
        velocity=velocity,
        rng=np.random.default_rng(seeds[0]),
        topology=default_topology(cfg.joints),
    )


# -- batches -----------------------------------------------------------------------


@dataclass
class AugmentedPair:
    query_view: np.ndarray
    key_view: np.ndarray
    source_index: int


@dataclass
class ModalityBatch:
    x_q: np.ndarray  # B x T x F
    x_k: np.ndarray
    sources: np.ndarray


def prepare_batch(
    seqs: Sequence[SkeletonSequence],
    indices: Sequence[int],
    cfg: TrainConfig,
    topo: SkeletonTopology,
    rng: np.random.Generator,
) -> dict[str, ModalityBatch]:
    """Augmented query/key views for every modality, index-aligned.

    With ``shared_aug_seed`` each sample is augmented once per view and every
    modality is derived from that same clip; otherwise each modality draws
    its own augmentation.
    """
    acfg = cfg.augment_config()
    n_draw = 2 if cfg.shared_aug_seed else 2 * len(cfg.modalities)
    seeds = rng.integers(0, 2**63 - 1, size=(len(indices), n_draw))
    xq = {m: [] for m in cfg.modalities}
    xk = {m: [] for m in cfg.modalities}
    for row, i in enumerate(indices):
        frames = seqs[i].frames
        views: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for mi, m in enumerate(cfg.modalities):
            base = 0 if cfg.shared_aug_seed else 2 * mi
            if base not in views:
                views[base] = (
                    augment_array(frames, np.random.default_rng(seeds[row, base]), acfg),
                    augment_array(frames, np.random.default_rng(seeds[row, base + 1]), acfg),
                )
            q, k = views[base]
            xq[m].append(derive(q, m, topo).reshape(acfg.target_frames, -1))
            xk[m].append(derive(k, m, topo).reshape(acfg.target_frames, -1))
    src = np.asarray(indices, dtype=np.int64)
    return {m: ModalityBatch(np.stack(xq[m]), np.stack(xk[m]), src.copy()) for m in cfg.modalities}


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing partial batch is dropped unless it is the only one."""
    perm = rng.permutation(n)
    b = min(batch_size, n)
    return [perm[s : s + b] for s in range(0, n - b + 1, b)]


# -- optimisation ------------------------------------------------------------------


def sgd_update(params, grads, velocity, lr: float, momentum: float, weight_decay: float) -> None:
    """In place: ``v <- momentum*v + grad + wd*param``; ``param <- param - lr*v``.

    ``params`` and ``velocity`` are mappings name -> array (or Tensor);
    ``grads`` maps the same names to arrays.
    """
    for name, p in params.items():
        arr = p.data if isinstance(p, ad.Tensor) else p
        g = grads[name]
        v = velocity[name]
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * arr
        new = arr - lr * v
        if isinstance(p, ad.Tensor):
            p.data = new
        else:
            arr[...] = new


def _cmd_active(state: TrainState) -> bool:
    cfg = state.config
    return (
        cfg.cmd_enabled
        and len(cfg.modalities) > 1
        and all(b.full for b in state.banks.values())
    )


def check_alignment(batch: Mapping[str, ModalityBatch]) -> None:
    srcs = [b.sources for b in batch.values()]
    for s in srcs[1:]:
        if not np.array_equal(s, srcs[0]):
            raise UsageError("modality batches are built from different samples")


def train_step(state: TrainState, batch: Mapping[str, ModalityBatch], lr: float | None = None) -> dict[str, float]:
    """One optimisation step over all modalities; returns per-term losses.

    Terms that are inactive this step (empty bank, distillation warm-up)
    are reported as ``nan``.
    """
    cfg = state.config
    if lr is None:
        lr = lr_at(cfg, state.epoch)
    if cfg.debug:
        check_alignment(batch)
        banks = list(state.banks.values())
        for b in banks[1:]:
            if not np.array_equal(b.sources, banks[0].sources):
                raise UsageError("memory banks lost index alignment")

    views: dict[str, ModalityView] = {}
    scl: dict[str, ad.Tensor] = {}
    for m in cfg.modalities:
        pair = state.encoders[m]
        pair.query.zero_grad()
        z_q = encode(pair.query, batch[m].x_q, "train")
        with ad.no_grad():
            z_k = encode(pair.key, batch[m].x_k, "train").data
        views[m] = ModalityView(z_q, z_k, state.banks[m])
        if state.banks[m].filled:
            scl[m] = info_nce(z_q, z_k, state.banks[m], cfg.tau_c)

    cmd: dict[str, ad.Tensor] = {}
    if _cmd_active(state):
        cmd = cmd_losses(views, cfg.cmd_config())

    metrics: dict[str, float] = {"lr": lr}
    if scl:
        total = total_loss(scl, cmd, cfg.cmd_weight)
        total.backward()
        for m in cfg.modalities:
            q = state.encoders[m].query
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in q.params.items()}
            sgd_update(q.params, grads, state.velocity[m], lr, cfg.sgd_momentum, cfg.weight_decay)
            q.zero_grad()
        metrics["loss_total"] = total.item()
    else:
        metrics["loss_total"] = math.nan

    for m in cfg.modalities:
        momentum_update(state.encoders[m])
        state.banks[m].enqueue(views[m].z_k, batch[m].sources)
        metrics[f"loss_scl_{m}"] = scl[m].item() if m in scl else math.nan
    for a, b in cfg.cmd_config().pairs:
        key = f"{a}-{b}"
        metrics[f"loss_cmd_{key}"] = cmd[key].item() if key in cmd else math.nan
    state.step += 1
    return metrics


# -- checkpoints --------------------------------------------------------------------


def _state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for m in state.modalities:
        pair = state.encoders[m]
        for k, v in pair.query.arrays().items():
            out[f"{m}/query/{k}"] = v
        for k, v in pair.key.arrays().items():
            out[f"{m}/key/{k}"] = v
        for k, v in state.velocity[m].items():
            out[f"{m}/velocity/{k}"] = v
        bank = state.banks[m]
        out[f"{m}/bank/entries"] = bank.entries
        if bank.sources is not None:
            out[f"{m}/bank/sources"] = bank.sources
    return out


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    """Write ``manifest.json`` plus ``arrays.bin`` (little-endian) into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    arrays = _state_arrays(state)
    with open(path / "arrays.bin", "wb") as fh:
        for name, arr in arrays.items():
            le = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes()
            index.append(
                {"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
            )
            fh.write(raw)
            offset += len(raw)
    manifest = {
        "format": "cmd-ckpt",
        "version": CHECKPOINT_VERSION,
        "config_hash": state.config.hash(),
        "config": state.config.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "rng_state": state.rng.bit_generator.state,
        "banks": {m: {"cursor": b.cursor, "filled": b.filled} for m, b in state.banks.items()},
        "arrays": index,
    }
    with open(path / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    return path


def load_checkpoint(path: str | Path) -> TrainState:
    path = Path(path)
    try:
        with open(path / "manifest.json", encoding="utf-8") as fh:
            manifest = json.load(fh)
        blob = (path / "arrays.bin").read_bytes()
    except OSError as exc:
        raise CmdError(f"cannot read checkpoint at {path}: {exc}") from exc
    if manifest.get("format") != "cmd-ckpt" or manifest.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    cfg = TrainConfig.from_dict(manifest["config"])
    state = init_state(cfg)
    arrays = {}
    for entry in manifest["arrays"]:
        arr = np.frombuffer(blob, dtype=np.dtype(entry["dtype"]), count=int(np.prod(entry["shape"], dtype=np.int64)),
                            offset=entry["offset"]).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    for m in cfg.modalities:
        pair = state.encoders[m]
        for role, params in (("query", pair.query), ("key", pair.key)):
            for k, t in params.params.items():
                t.data = arrays[f"{m}/{role}/{k}"]
            for k in params.buffers:
                params.buffers[k] = arrays[f"{m}/{role}/buf:{k}"]
        for k in state.velocity[m]:
            state.velocity[m][k] = arrays[f"{m}/velocity/{k}"]
        bank = state.banks[m]
        bank.entries = arrays[f"{m}/bank/entries"]
        if f"{m}/bank/sources" in arrays:
            bank.sources = arrays[f"{m}/bank/sources"]
        bank.cursor = manifest["banks"][m]["cursor"]
        bank.filled = manifest["banks"][m]["filled"]
    state.epoch = manifest["epoch"]
    state.step = manifest["step"]
    state.rng.bit_generator.state = manifest["rng_state"]
    return state


def checkpoint_hash(path: str | Path) -> str:
    """Content hash of a checkpoint's arrays."""
    h = hashlib.sha256((Path(path) / "arrays.bin").read_bytes())
    return h.hexdigest()[:16]


# -- fit ------------------------------------------------------------------------------


def metric_columns(cfg: TrainConfig) -> list[str]:
    cols = ["epoch", "step", "lr", "loss_total"]
    cols += [f"loss_scl_{m}" for m in cfg.modalities]
    cols += [f"loss_cmd_{a}-{b}" for a, b in cfg.cmd_config().pairs]
    return cols


def _epoch_row(epoch: int, state: TrainState, lr: float, steps: list[dict[str, float]], cols: list[str]) -> dict:
    row = {"epoch": epoch, "step": state.step, "lr": lr}
    for c in cols[3:]:
        vals = [s[c] for s in steps if not math.isnan(s[c])]
        # terms never active in this epoch (warm-up) are reported as 0
        row[c] = float(np.mean(vals)) if vals else 0.0
    return row


def fit(
    cfg: TrainConfig,
    dataset: Sequence[SkeletonSequence],
    out_dir: str | Path | None = None,
    resume: TrainState | None = None,
    on_step: Callable[[TrainState, dict[str, float]], None] | None = None,
) -> tuple[TrainState, list[dict]]:
    """Run the epoch loop from scratch or from ``resume``.

    Writes ``metrics.csv`` and a final ``checkpoint`` directory into
    ``out_dir`` when given, plus ``checkpoint-epochNNN`` every
    ``checkpoint_every`` epochs.
    """
    if not dataset:
        raise ParameterError("dataset is empty")
    frames_per = {s.num_joints for s in dataset}
    if frames_per != {cfg.joints}:
        raise ParameterError(f"dataset joint counts {sorted(frames_per)} do not match config joints={cfg.joints}")
    if resume is not None:
        state = resume
        state.config = cfg
    else:
        state = init_state(cfg)
    cols = metric_columns(cfg)
    rows: list[dict] = []
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        append = resume is not None and metrics_path.exists()
        fh = open(metrics_path, "a" if append else "w", newline="", encoding="utf-8")
        writer = csv.DictWriter(fh, fieldnames=cols)
        if not append:
            writer.writeheader()
    try:
        while state.epoch < cfg.epochs:
            lr = lr_at(cfg, state.epoch)
            steps = []
            for idx in epoch_batches(len(dataset), cfg.batch_size, state.rng):
                batch = prepare_batch(dataset, idx, cfg, state.topology, state.rng)
                metrics = train_step(state, batch, lr)
                steps.append(metrics)
                if on_step is not None:
                    on_step(state, metrics)
            row = _epoch_row(state.epoch, state, lr, steps, cols)
            rows.append(row)
            log.info("epoch %d step %d loss %.4f", state.epoch, state.step, row["loss_total"])
            state.epoch += 1
            if writer is not None:
                writer.writerow(row)
                fh.flush()
            if out is not None and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                save_checkpoint(state, out / f"checkpoint-epoch{state.epoch:03d}")
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        save_checkpoint(state, out / "checkpoint")
    return state, rows
