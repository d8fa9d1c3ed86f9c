"""Tiny MLP score network trained by denoising score matching.

The net predicts the noise: ``score(x, t) = net(x, t) / sigma(t)``.  With
the weighting ``lambda(t) = sigma(t)**2`` the DSM objective collapses to
``||net(x_t, t) + eps||**2``, which stays bounded all the way down to t0.
Time enters through the features (t, sin 2*pi*t, cos 2*pi*t) appended to
the input of the first layer.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .sde import SubVpSde

_MAGIC = b"PFLABSN1"
_VERSION = 1


class TrainingDiverged(RuntimeError):
    """DSM loss went non-finite; message carries the step index."""


class CheckpointError(ValueError):
    pass


def _time_features(t: float) -> np.ndarray:
    return np.array([t, math.sin(2.0 * math.pi * t), math.cos(2.0 * math.pi * t)])


class TinyScoreNet:
    """2-hidden-layer tanh MLP with a noise-prediction head.

    Parameters are plain float64 arrays in the order
    (Wx1, Wt1, b1, W2, b2, W3, b3, wg, bg); Wx1 consumes the sample and Wt1
    the three time features, so no concatenation primitive is needed.  The
    last two parameterize a time-dependent scalar-gain skip connection,
    ``gain(t) * x``: the conditional noise target is dominated by a term
    proportional to the input itself, which no narrow bottleneck can
    represent, so the skip carries it and the MLP models the remainder.
    """

    N_TIME_FEATURES = 3

    def __init__(self, dim, hidden=(48, 48), sde=None, shape=None, seed=0):
        if len(hidden) != 2:
            raise ValueError("TinyScoreNet uses exactly two hidden layers")
        self.dim = int(dim)
        self.hidden = (int(hidden[0]), int(hidden[1]))
        self.sde = sde if sde is not None else SubVpSde()
        self.shape = tuple(shape) if shape is not None else (self.dim,)
        if int(np.prod(self.shape)) != self.dim:
            raise ValueError(f"shape {self.shape} does not match dim {self.dim}")
        h1, h2 = self.hidden
        rng = np.random.Generator(np.random.Philox(seed))

        def layer(n_out, n_in):
            return rng.normal(0.0, math.sqrt(1.0 / n_in), size=(n_out, n_in))

        self.params = [
            layer(h1, self.dim),
            layer(h1, self.N_TIME_FEATURES),
            np.zeros(h1),
            layer(h2, h1),
            np.zeros(h2),
            layer(self.dim, h2),
            np.zeros(self.dim),
            np.zeros(self.N_TIME_FEATURES),
            np.zeros(()),
        ]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "TinyScoreNet":
        dup = TinyScoreNet(self.dim, self.hidden, self.sde, self.shape, seed=0)
        dup.params = [p.copy() for p in self.params]
        return dup

    def raw(self, x, t: float, params=None):
        """Noise-prediction output before the 1/sigma(t) scaling."""
        ps = params if params is not None else self.params
        wx1, wt1, b1, w2, b2, w3, b3, wg, bg = ps
        tau = _time_features(t)
        bias1 = ad.add(ad.matvec(wt1, tau), b1)
        h = ad.tanh(ad.add(ad.matvec(wx1, x), bias1))
        h = ad.tanh(ad.affine(w2, h, b2))
        mlp = ad.affine(w3, h, b3)
        gain = ad.add(ad.dot(wg, tau), bg)
        return ad.add(mlp, ad.scale(gain, x))

    def score(self, x, t: float, params=None):
        _, sigma = self.sde.kernel_moments(t)
        if sigma <= 0.0:
            raise ValueError(f"score undefined at t={t}: sigma(t) = 0")
        out = ad.scale(1.0 / sigma, self.raw(x, t, params))
        return out if isinstance(x, ad.Var) else out.value

    def raw_batch(self, x_rows, t_feats, params):
        """Batched noise prediction: constant (B, dim) inputs, taped params."""
        wx1, wt1, b1, w2, b2, w3, b3, wg, bg = params
        batch = np.shape(x_rows)[0]
        ones = np.ones(batch)
        pre = ad.add(
            ad.add(
                ad.matmul(x_rows, ad.transpose(wx1)),
                ad.matmul(t_feats, ad.transpose(wt1)),
            ),
            ad.outer(ones, b1),
        )
        h = ad.tanh(pre)
        h = ad.tanh(ad.add(ad.matmul(h, ad.transpose(w2)), ad.outer(ones, b2)))
        mlp = ad.add(ad.matmul(h, ad.transpose(w3)), ad.outer(ones, b3))
        gains = ad.add(ad.matvec(t_feats, wg), ad.expand(bg, batch))
        return ad.add(mlp, ad.mul(ad.expand(gains, self.dim), x_rows))


@dataclass
class TrainResult:
    net: TinyScoreNet
    losses: list
    snapshots: list


def dsm_loss_batch(net: TinyScoreNet, param_vars, x0_batch, ts, eps):
    """Mean per-dimension noise-prediction error over one batch (taped)."""
    moments = np.array([net.sde.kernel_moments(float(t)) for t in ts])
    xt = moments[:, :1] * x0_batch + moments[:, 1:] * eps
    feats = np.stack([_time_features(float(t)) for t in ts])
    pred = net.raw_batch(xt, feats, param_vars)
    residual = ad.add(pred, eps)
    total = ad.vsum(ad.vsum(ad.square(residual)))
    return ad.mul(total, 1.0 / (len(ts) * net.dim))


def train_dsm(
    dataset,
    net: TinyScoreNet,
    steps: int,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
    t0: float = 1e-5,
    snapshot_every: int = 0,
    lr_decay: bool = True,
) -> TrainResult:
    """Denoising score matching with Adam; updates ``net`` in place.

    t is drawn uniformly on [t0, 1].  With ``lr_decay`` the learning rate
    follows a cosine ramp down to lr/10, which settles the late snapshots.
    Snapshots (parameter copies) are taken every ``snapshot_every`` steps
    when requested, plus one at the end.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("dataset must be a nonempty (n, dim) array")
    if data.shape[1] != net.dim:
        raise ValueError(f"dataset dim {data.shape[1]} != net dim {net.dim}")
    rng = np.random.Generator(np.random.Philox(seed))
    states = [ad.adam_init(p) for p in net.params]
    losses: list[float] = []
    snapshots: list[list[np.ndarray]] = []

    for step in range(steps):
        idx = rng.integers(0, data.shape[0], size=batch_size)
        ts = rng.uniform(t0, 1.0, size=batch_size)
        eps = rng.standard_normal((batch_size, net.dim))
        try:
            with ad.Tape() as tape:
                param_vars = [tape.leaf(p) for p in net.params]
                loss = dsm_loss_batch(net, param_vars, data[idx], ts, eps)
                grads = ad.gradient(loss, param_vars)
        except ad.NonFiniteError as err:
            # Parameters still hold the last finite state at this point.
            exc = TrainingDiverged(f"non-finite DSM loss at step {step}")
            exc.losses = losses
            raise exc from err
        losses.append(float(loss.value))
        step_lr = lr
        if lr_decay and steps > 1:
            step_lr = lr * (0.1 + 0.45 * (1.0 + math.cos(math.pi * step / (steps - 1))))
        for i, (p, g) in enumerate(zip(net.params, grads)):
            net.params[i], states[i] = ad.adam_step(
                p, np.asarray(g.value), states[i], step_lr
            )
        if snapshot_every and (step + 1) % snapshot_every == 0:
            snapshots.append([p.copy() for p in net.params])
    if snapshot_every and (not snapshots or len(losses) % snapshot_every != 0):
        snapshots.append([p.copy() for p in net.params])
    return TrainResult(net, losses, snapshots)


# ---------------------------------------------------------------------------
# Checkpoint serialization: magic, version, shape header, little-endian
# float64 parameter block.


def save_checkpoint(path, net: TinyScoreNet) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", net.dim))
        fh.write(struct.pack("<II", *net.hidden))
        fh.write(struct.pack("<I", len(net.shape)))
        fh.write(struct.pack(f"<{len(net.shape)}I", *net.shape))
        fh.write(struct.pack("<Q", net.n_params))
        flat = np.concatenate([p.ravel() for p in net.params])
        fh.write(flat.astype("<f8").tobytes())


def load_checkpoint(path, sde=None) -> TinyScoreNet:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (dim,) = struct.unpack("<I", fh.read(4))
        hidden = struct.unpack("<II", fh.read(8))
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        (n_params,) = struct.unpack("<Q", fh.read(8))
        flat = np.frombuffer(fh.read(8 * n_params), dtype="<f8").astype(np.float64)
    net = TinyScoreNet(dim, hidden, sde=sde, shape=shape, seed=0)
    if net.n_params != n_params:
        raise CheckpointError(
            f"{path}: parameter count {n_params} does not match architecture"
        )
    offset = 0
    for i, p in enumerate(net.params):
        net.params[i] = flat[offset : offset + p.size].reshape(p.shape)
        offset += p.size
    return net
