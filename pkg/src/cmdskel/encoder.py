"""Bidirectional GRU sequence encoder producing unit-norm embeddings.

Pipeline: per-frame features -> batch norm -> stacked BiGRU layers ->
temporal pooling -> linear projection -> L2 normalization.

Each GRU direction runs as one fused graph node whose backward pass is
hand-written backpropagation through time; this keeps the Python-level
graph small (a few dozen nodes per encode) regardless of sequence length.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _sigmoid, make_node
from .errors import ParameterError, SchemaError

POOLING = ("mean", "max", "last")


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dim: int = 64
    embedding_dim: int = 32
    num_layers: int = 3
    pooling: str = "mean"
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "embedding_dim", "num_layers"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.pooling not in POOLING:
            raise ParameterError(f"pooling must be one of {POOLING}, got {self.pooling!r}")
        if not 0 <= self.bn_momentum <= 1:
            raise ParameterError("bn_momentum must lie in [0, 1]")
        np.dtype(self.dtype)

    @classmethod
    def for_joints(cls, joints: int, **kw) -> "EncoderConfig":
        return cls(input_dim=2 * joints * 3, **kw)


class EncoderParams:
    """Trainable tensors plus batch-norm running statistics.

    ``params`` maps names to leaf tensors in a fixed order; ``buffers``
    holds the running mean/variance, which are never differentiated.
    """

    def __init__(self, config: EncoderConfig, params: dict[str, Tensor], buffers: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.buffers = buffers

    def names(self) -> list[str]:
        return list(self.params)

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def requires_grad_(self, flag: bool) -> "EncoderParams":
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None
        return self

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        """Parameters and buffers as plain arrays (buffers prefixed ``buf:``)."""
        out = {k: t.data for k, t in self.params.items()}
        out.update({f"buf:{k}": v for k, v in self.buffers.items()})
        return out

    def astype(self, dtype) -> "EncoderParams":
        cfg = replace(self.config, dtype=np.dtype(dtype).name)
        params = {
            k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad) for k, t in self.params.items()
        }
        buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return EncoderParams(cfg, params, buffers)


def init(cfg: EncoderConfig, rng_seed: int) -> EncoderParams:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights, zero biases, identity batch norm."""
    rng = np.random.default_rng(rng_seed)
    dtype = np.dtype(cfg.dtype)
    h = cfg.hidden_dim
    bound = 1.0 / np.sqrt(h)

    def weight(*shape):
        return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    params: dict[str, Tensor] = {
        "bn.gamma": Tensor(np.ones(cfg.input_dim, dtype=dtype), requires_grad=True),
        "bn.beta": zeros(cfg.input_dim),
    }
    for layer in range(cfg.num_layers):
        d_in = cfg.input_dim if layer == 0 else 2 * h
        for direction in ("fwd", "bwd"):
            p = f"gru{layer}.{direction}."
            params[p + "w_ih"] = weight(d_in, 3 * h)
            params[p + "w_hh"] = weight(h, 3 * h)
            params[p + "b_ih"] = zeros(3 * h)
            params[p + "b_hh"] = zeros(3 * h)
    params["proj.w"] = weight(2 * h, cfg.embedding_dim)
    params["proj.b"] = zeros(cfg.embedding_dim)
    buffers = {
        "bn.running_mean": np.zeros(cfg.input_dim, dtype=dtype),
        "bn.running_var": np.ones(cfg.input_dim, dtype=dtype),
    }
    return EncoderParams(cfg, params, buffers)


def copy_params(src: EncoderParams) -> EncoderParams:
    """Deep value copy; the result shares no arrays with ``src``."""
    params = {k: Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in src.params.items()}
    buffers = {k: v.copy() for k, v in src.buffers.items()}
    return EncoderParams(src.config, params, buffers)


# -- GRU -----------------------------------------------------------------------


def gru_cell(x: np.ndarray, h: np.ndarray, w_ih, w_hh, b_ih, b_hh) -> np.ndarray:
    """One GRU step on plain arrays (gate order: reset, update, candidate)."""
    hd = h.shape[-1]
    gx = x @ w_ih + b_ih
    gh = h @ w_hh + b_hh
    rz = _sigmoid(gx[:, : 2 * hd] + gh[:, : 2 * hd])
    r, z = rz[:, :hd], rz[:, hd:]
    n = np.tanh(gx[:, 2 * hd :] + r * gh[:, 2 * hd :])
    return (1.0 - z) * n + z * h


def gru_direction(x: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor, reverse: bool = False) -> Tensor:
    """Run a GRU over ``x`` (``B x T x D``) from a zero state.

    Returns all hidden states ``B x T x H`` in input time order.  With
    ``reverse`` the recurrence starts at the last frame.
    """
    xd = x.data
    B, T, D = xd.shape
    H = w_hh.shape[0]
    if w_ih.shape != (D, 3 * H):
        raise SchemaError(f"GRU input weight {w_ih.shape} does not fit input width {D}")
    wi, wh, bh = w_ih.data, w_hh.data, b_hh.data
    # time-major internally so per-step slices are contiguous
    xt = np.ascontiguousarray(xd.transpose(1, 0, 2))
    if reverse:
        xt = xt[::-1]
    gx = (xt.reshape(T * B, D) @ wi + b_ih.data).reshape(T, B, 3 * H)

    hs = np.empty((T + 1, B, H), dtype=xd.dtype)  # hs[t] is the state before step t
    hs[0] = 0.0
    rz_all = np.empty((T, B, 2 * H), dtype=xd.dtype)
    n_all = np.empty((T, B, H), dtype=xd.dtype)
    ghn_all = np.empty((T, B, H), dtype=xd.dtype)
    for t in range(T):
        h = hs[t]
        gh = h @ wh
        gh += bh
        g = gx[t]
        rz = rz_all[t]
        np.add(g[:, : 2 * H], gh[:, : 2 * H], out=rz)
        _sigmoid_(rz)
        ghn = gh[:, 2 * H :]
        ghn_all[t] = ghn
        n = n_all[t]
        np.multiply(rz[:, :H], ghn, out=n)
        n += g[:, 2 * H :]
        np.tanh(n, out=n)
        # h' = n + z * (h - n)
        nxt = hs[t + 1]
        np.subtract(h, n, out=nxt)
        nxt *= rz[:, H:]
        nxt += n

    out_t = hs[1:][::-1] if reverse else hs[1:]
    out = np.ascontiguousarray(out_t.transpose(1, 0, 2))

    def bw(dout: np.ndarray):
        dt = np.ascontiguousarray(dout.transpose(1, 0, 2))
        if reverse:
            dt = dt[::-1]
        # dgh[t] = d(loss)/d(h_{t-1} @ w_hh + b_hh); the first two gate blocks
        # equal those of the input projection, the candidate block differs by r
        dgh = np.empty_like(gx)
        dn_all = np.empty((T, B, H), dtype=dout.dtype)
        dh = np.zeros((B, H), dtype=dout.dtype)
        wh_t = np.ascontiguousarray(wh.T)
        tmp = np.empty((B, H), dtype=dout.dtype)
        for t in range(T - 1, -1, -1):
            dh += dt[t]
            rz = rz_all[t]
            r, z = rz[:, :H], rz[:, H:]
            n = n_all[t]
            d = dgh[t]
            dn = dn_all[t]
            np.multiply(n, n, out=dn)
            np.subtract(1.0, dn, out=dn)
            dn *= dh
            np.subtract(1.0, z, out=tmp)
            dn *= tmp
            dz = d[:, H : 2 * H]
            tmp *= z
            np.subtract(hs[t], n, out=dz)
            dz *= dh
            dz *= tmp
            dr = d[:, :H]
            np.multiply(dn, ghn_all[t], out=dr)
            np.subtract(1.0, r, out=tmp)
            tmp *= r
            dr *= tmp
            np.multiply(dn, r, out=d[:, 2 * H :])
            dh *= z
            dh += d @ wh_t
        flat_h = dgh.reshape(T * B, 3 * H)
        flat_x = flat_h.copy()
        flat_x[:, 2 * H :] = dn_all.reshape(T * B, H)
        dx = None
        if x.requires_grad:
            dxt = (flat_x @ wi.T).reshape(T, B, D)
            if reverse:
                dxt = dxt[::-1]
            dx = np.ascontiguousarray(dxt.transpose(1, 0, 2))
        dwi = xt.reshape(T * B, D).T @ flat_x
        dbi = flat_x.sum(axis=0)
        dwh = hs[:T].reshape(T * B, H).T @ flat_h
        dbh = flat_h.sum(axis=0)
        return dx, dwi, dwh, dbi, dbh

    return make_node(out, (x, w_ih, w_hh, b_ih, b_hh), bw)


def _sigmoid_(a: np.ndarray) -> None:
    a *= 0.5
    np.tanh(a, out=a)
    a += 1.0
    a *= 0.5


# -- encoder -------------------------------------------------------------------


def batch_norm(x: Tensor, params: EncoderParams, train: bool) -> Tensor:
    """Normalize each feature over batch and time.

    Train mode uses batch statistics and folds them into the running
    estimates (``running = m * running + (1 - m) * batch``); eval mode uses
    the running estimates only.
    """
    cfg = params.config
    gamma, beta = params["bn.gamma"], params["bn.beta"]
    if train:
        mu = x.mean(axis=(0, 1), keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=(0, 1), keepdims=True)
        xhat = centered / ad.sqrt(var + cfg.bn_eps)
        count = x.shape[0] * x.shape[1]
        unbiased = var.data.reshape(-1) * (count / max(count - 1, 1))
        m = cfg.bn_momentum
        params.buffers["bn.running_mean"] = (
            m * params.buffers["bn.running_mean"] + (1 - m) * mu.data.reshape(-1)
        ).astype(x.dtype)
        params.buffers["bn.running_var"] = (
            m * params.buffers["bn.running_var"] + (1 - m) * unbiased
        ).astype(x.dtype)
    else:
        rm = params.buffers["bn.running_mean"]
        rv = params.buffers["bn.running_var"]
        xhat = Tensor((x.data - rm) / np.sqrt(rv + cfg.bn_eps))
    return xhat * gamma + beta


def _pool(h: Tensor, how: str, hidden: int) -> Tensor:
    if how == "mean":
        return h.mean(axis=1)
    if how == "max":
        idx = np.argmax(h.data, axis=1)[:, None, :]
        return ad.gather(h, idx, axis=1).reshape(h.shape[0], h.shape[2])
    # final state of each direction: last frame forward, first frame backward
    return ad.concat([h[:, -1, :hidden], h[:, 0, hidden:]], axis=-1)


def encode(params: EncoderParams, batch, mode: str = "train") -> Tensor:
    """Embed a ``B x T x F`` feature batch into ``B x E`` unit vectors.

    ``mode`` is ``"train"`` (batch statistics, running stats updated) or
    ``"eval"``.  Graph recording follows the parameters' ``requires_grad``.
    """
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = params.config
    arr = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    if arr.ndim != 3 or arr.shape[2] != cfg.input_dim:
        raise SchemaError(f"expected B x T x {cfg.input_dim} input, got {arr.shape}")
    if arr.shape[1] < 1:
        raise SchemaError("sequence length must be >= 1")
    dtype = np.dtype(cfg.dtype)
    x = batch if isinstance(batch, Tensor) and batch.dtype == dtype else Tensor(arr.astype(dtype, copy=False))
    h = batch_norm(x, params, train=(mode == "train"))
    for layer in range(cfg.num_layers):
        p = f"gru{layer}."
        fwd = gru_direction(h, *(params[p + "fwd." + k] for k in ("w_ih", "w_hh", "b_ih", "b_hh")))
        bwd = gru_direction(h, *(params[p + "bwd." + k] for k in ("w_ih", "w_hh", "b_ih", "b_hh")), reverse=True)
        h = ad.concat([fwd, bwd], axis=-1)
    pooled = _pool(h, cfg.pooling, cfg.hidden_dim)
    z = pooled @ params["proj.w"] + params["proj.b"]
    return ad.l2_normalize(z, axis=-1)
