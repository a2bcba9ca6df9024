"""Evaluation of frozen representations: 1-NN, linear probe, ensembling."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .encoder import EncoderParams, encode
from .errors import DimensionError, ParameterError, ParseError, SchemaError, UsageError
from .skeleton import SkeletonSequence, SkeletonTopology, derive, resize_array

FEATURE_FORMAT = "cmd-feat"


@dataclass
class FeatureSet:
    features: np.ndarray  # M x d, unit rows
    labels: np.ndarray  # M
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            self.features = self.features.reshape(len(self.labels), -1)
        if len(self.features) != len(self.labels):
            raise SchemaError(f"{len(self.features)} feature rows but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def params_hash(params: EncoderParams) -> str:
    h = hashlib.sha256()
    for name, arr in params.arrays().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def sequence_features(
    seqs: Sequence[SkeletonSequence], modality: str, topo: SkeletonTopology, target_frames: int
) -> np.ndarray:
    """Un-augmented ``B x T x F`` encoder input for ``modality``."""
    rows = [derive(resize_array(s.frames, target_frames), modality, topo).reshape(target_frames, -1) for s in seqs]
    return np.stack(rows)


def embed(params: EncoderParams, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode embeddings in chunks; never touches the parameters."""
    out = []
    with ad.no_grad():
        for s in range(0, len(x), batch_size):
            out.append(encode(params, x[s : s + batch_size], "eval").data.astype(np.float64))
    if not out:
        return np.zeros((0, params.config.embedding_dim))
    return np.concatenate(out)


def extract_features(state, dataset: Sequence[SkeletonSequence], modality: str, batch_size: int = 256) -> FeatureSet:
    """Query-encoder embeddings of ``dataset`` in ``modality`` (eval mode).

    ``state`` is a :class:`~cmdskel.trainer.TrainState` (for instance one
    returned by ``load_checkpoint``).  Unlabelled samples get label -1.
    """
    if modality not in state.encoders:
        raise UsageError(f"modality {modality!r} is not in the checkpoint (has {list(state.encoders)})")
    params = state.encoders[modality].query
    cfg = state.config
    labels = np.array([-1 if s.label is None else s.label for s in dataset], dtype=np.int64)
    if not dataset:
        return FeatureSet(np.zeros((0, cfg.embedding_dim)), labels, {"modality": modality})
    x = sequence_features(dataset, modality, state.topology, cfg.target_frames)
    feats = embed(params, x, batch_size)
    return FeatureSet(feats, labels, {"modality": modality, "encoder": params_hash(params)})


def knn_predict(train: FeatureSet, test: FeatureSet) -> np.ndarray:
    """Label of the most cosine-similar training row; ties -> lowest index."""
    if len(train) == 0 or len(test) == 0:
        raise ParameterError("KNN needs non-empty train and test sets")
    if train.dim != test.dim:
        raise SchemaError(f"feature dims differ: train {train.dim}, test {test.dim}")
    sims = test.features @ train.features.T
    return train.labels[np.argmax(sims, axis=1)]


def knn_eval(train: FeatureSet, test: FeatureSet) -> float:
    """Top-1 accuracy of 1-nearest-neighbour classification.

    No sample is excluded from the training set, so evaluating a set
    against itself scores 1.0.
    """
    pred = knn_predict(train, test)
    return float(np.mean(pred == test.labels))


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 80
    lr: float = 0.1
    milestones: tuple[int, ...] = (50, 70)
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    seed: int = 0


@dataclass
class ProbeResult:
    top1: float
    scores: np.ndarray  # n_test x classes
    weight: np.ndarray
    bias: np.ndarray


def train_linear_probe(train: FeatureSet, test: FeatureSet, cfg: ProbeConfig = ProbeConfig(), num_classes: int | None = None) -> ProbeResult:
    """Softmax-regression classifier on frozen features, SGD with step decay."""
    if np.any(train.labels < 0) or np.any(test.labels < 0):
        raise UsageError("linear probe needs labels on every sample")
    if train.dim != test.dim:
        raise DimensionError(f"feature dims differ: train {train.dim}, test {test.dim}")
    if num_classes is None:
        num_classes = int(max(train.labels.max(initial=0), test.labels.max(initial=0))) + 1
    rng = np.random.default_rng(cfg.seed)
    W = ad.Tensor(np.zeros((train.dim, num_classes)), requires_grad=True)
    b = ad.Tensor(np.zeros(num_classes), requires_grad=True)
    vel = {"W": np.zeros_like(W.data), "b": np.zeros_like(b.data)}
    n = len(train)
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.gamma ** sum(epoch >= m for m in cfg.milestones)
        perm = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            logits = ad.Tensor(train.features[idx]) @ W + b
            logp = ad.log_softmax(logits, 1.0, axis=1)
            loss = -ad.gather(logp, train.labels[idx][:, None], axis=1).mean()
            loss.backward()
            for name, p in (("W", W), ("b", b)):
                v = vel[name]
                v *= cfg.momentum
                v += p.grad + cfg.weight_decay * p.data
                p.data = p.data - lr * v
                p.grad = None
    scores = test.features @ W.data + b.data
    top1 = float(np.mean(np.argmax(scores, axis=1) == test.labels)) if len(test) else 0.0
    return ProbeResult(top1, scores, W.data, b.data)


def linear_probe(state, train_set, test_set, modality: str = "joint", cfg: ProbeConfig = ProbeConfig()) -> ProbeResult:
    """Extract frozen features from ``state`` and fit a linear classifier."""
    if any(s.label is None for s in list(train_set) + list(test_set)):
        raise UsageError("linear probe needs labels on every sample")
    tr = extract_features(state, train_set, modality)
    te = extract_features(state, test_set, modality)
    return train_linear_probe(tr, te, cfg)


def ensemble_scores(scores: Sequence[np.ndarray], labels: Sequence[np.ndarray] | None = None) -> np.ndarray:
    """Argmax of the summed per-modality class scores.

    ``labels`` (one array per modality) are checked for equality to catch
    test sets that are not aligned sample by sample.
    """
    if not scores:
        raise ParameterError("no score matrices given")
    shape = np.shape(scores[0])
    for s in scores[1:]:
        if np.shape(s) != shape:
            raise UsageError(f"score matrices are not aligned: {shape} vs {np.shape(s)}")
    if labels is not None:
        for lab in labels[1:]:
            if not np.array_equal(lab, labels[0]):
                raise UsageError("test sets differ in sample order")
    return np.argmax(np.sum(scores, axis=0), axis=1)


# -- feature files -------------------------------------------------------------


def save_features(path: str | Path, fs: FeatureSet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": FEATURE_FORMAT, "version": 1, "dim": fs.dim}) + "\n")
        for vec, lab in zip(fs.features, fs.labels):
            fh.write(json.dumps({"label": int(lab), "vec": vec.tolist()}) + "\n")


def load_features(path: str | Path) -> FeatureSet:
    feats, labels = [], []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line=lineno) from None
            if dim is None:
                if obj.get("format") != FEATURE_FORMAT:
                    raise ParseError(f"expected {FEATURE_FORMAT!r} header", line=lineno)
                dim = int(obj["dim"])
                continue
            vec = obj.get("vec")
            if not isinstance(vec, list) or len(vec) != dim:
                raise SchemaError(f"line {lineno}: expected a {dim}-d 'vec'")
            feats.append(vec)
            labels.append(obj.get("label", -1))
    if dim is None:
        raise ParseError("missing header")
    return FeatureSet(np.asarray(feats, dtype=np.float64).reshape(-1, dim), np.asarray(labels, dtype=np.int64))
