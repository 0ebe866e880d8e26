"""Contrastive metric learning for the perceptual encoder.

The encoder is trained so that embedding distance falls under ``d_p``
exactly for pairs the frozen Q-function rates as reachable within ``c_Q``.
Three auxiliary heads share the encoder: a forward model (z_t, a_t) -> z_{t+1},
an inverse model (z_t, z_g) -> a_t and a time-to-goal classifier
(z_t, z_g) -> T bin. Gradients are written out by hand and checked against
finite differences in the tests.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import serialize
from .buffer import TrajectoryLog, sample_hindsight
from .nn import MLP, Adam, cross_entropy, softmax
from .qlearn import d_q_keys

log_ = logging.getLogger(__name__)

TERMS = ("q", "time", "inv", "fwd")


class EmbedDivergenceError(RuntimeError):
    pass


class DegenerateEncoderError(ValueError):
    pass


@dataclass
class EmbedTrainConfig:
    latent_dim: int = 16
    d_p: float = 1.0
    c_q: float = 1.0
    w_q: float = 1.0
    w_time: float = 1.0
    w_inv: float = 1.0
    w_fwd: float = 1.0
    steps: int = 3000
    batch: int = 256
    lr: float = 1e-3
    t_max: int = 10
    arch: str = "mlp"
    hidden: int = 64
    head_hidden: int = 64
    margin: float = 0.0

    def __post_init__(self):
        if self.d_p <= 0 or self.c_q <= 0:
            raise ValueError("d_p and c_Q must be positive")
        if min(self.w_q, self.w_time, self.w_inv, self.w_fwd) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.arch not in ("identity", "linear", "mlp"):
            raise ValueError(f"unknown encoder architecture {self.arch!r}")

    def weights(self) -> dict[str, float]:
        return {"q": self.w_q, "time": self.w_time, "inv": self.w_inv, "fwd": self.w_fwd}


class Encoder:
    """Observation -> R^d. ``identity`` has no parameters and returns the input."""

    def __init__(self, arch: str, obs_dim: int, latent_dim: int, hidden: int = 64, seed: int = 0):
        self.arch, self.obs_dim = arch, int(obs_dim)
        rng = np.random.default_rng(seed)
        if arch == "identity":
            self.latent_dim = self.obs_dim
            self.net = None
        else:
            self.latent_dim = int(latent_dim)
            sizes = [obs_dim, latent_dim] if arch == "linear" else [obs_dim, hidden, hidden, latent_dim]
            self.net = MLP(sizes, rng)
        self.hidden = hidden

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params if self.net is not None else []

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.net is None:
            return x, None
        return self.net.forward(x)

    def backward(self, cache, grad_z) -> list[np.ndarray]:
        if self.net is None:
            return []
        return self.net.backward(cache, grad_z)[0]

    def __call__(self, x) -> np.ndarray:
        return self.forward(np.atleast_2d(x))[0]


@dataclass
class EmbedModel:
    encoder: Encoder
    fwd: MLP
    inv: MLP
    time: MLP
    n_actions: int
    t_max: int
    cfg: EmbedTrainConfig = field(default_factory=EmbedTrainConfig)

    @classmethod
    def create(cls, obs_dim: int, n_actions: int, cfg: EmbedTrainConfig, seed: int = 0) -> "EmbedModel":
        enc = Encoder(cfg.arch, obs_dim, cfg.latent_dim, cfg.hidden, seed)
        d, h = enc.latent_dim, cfg.head_hidden
        rng = np.random.default_rng(seed + 1)
        return cls(enc, MLP([d + n_actions, h, d], rng), MLP([2 * d, h, n_actions], rng),
                   MLP([2 * d, h, cfg.t_max + 1], rng), n_actions, cfg.t_max, cfg)

    @property
    def params(self) -> list[np.ndarray]:
        return self.encoder.params + self.fwd.params + self.inv.params + self.time.params

    def save(self, path) -> None:
        meta = {"cfg": asdict(self.cfg), "obs_dim": self.encoder.obs_dim, "n_actions": self.n_actions}
        serialize.save_arrays(path, "embed", meta, {f"p{k}": p for k, p in enumerate(self.params)})

    @classmethod
    def load(cls, path) -> "EmbedModel":
        _, meta, arrays = serialize.load_arrays(path, "embed")
        m = cls.create(meta["obs_dim"], meta["n_actions"], EmbedTrainConfig(**meta["cfg"]))
        for k, p in enumerate(m.params):
            p[...] = arrays[f"p{k}"]
        return m


@dataclass
class EmbedBatch:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    g: np.ndarray
    offset: np.ndarray
    d_q: np.ndarray


def hinge(x):
    return np.maximum(x, 0.0)


def loss_lq(d_phi, d_q, d_p: float, c_q: float, margin: float = 0.0) -> np.ndarray:
    """Per-pair reachability-gated hinge: pull inside ``d_p`` when d_Q <= c_Q, push out when d_Q >= c_Q."""
    d_phi, d_q = np.asarray(d_phi, float), np.asarray(d_q, float)
    near, far = d_q <= c_q, d_q >= c_q
    return hinge(d_phi - d_p + margin) * near + hinge(d_p - d_phi + margin) * far


def _pair_input(z_a, z_b):
    return np.concatenate([z_a, z_b], axis=1)


def loss_and_grads(model: EmbedModel, batch: EmbedBatch, weights: dict[str, float] | None = None,
                   fwd_target: np.ndarray | None = None):
    """Weighted total loss, per-term losses and gradients for ``model.params``.

    ``fwd_target`` overrides the (constant) forward-model target; by default it is
    the current embedding of ``s_next``.
    """
    cfg = model.cfg
    w = cfg.weights() if weights is None else {**{t: 0.0 for t in TERMS}, **weights}
    n = len(batch.a)
    z_all, enc_cache = model.encoder.forward(np.concatenate([batch.s, batch.g, batch.s_next]))
    z_t, z_g, z_n = z_all[:n], z_all[n:2 * n], z_all[2 * n:]
    grad_z = np.zeros_like(z_all)
    terms = {}

    diff = z_t - z_g
    d_phi = np.linalg.norm(diff, axis=1)
    per = loss_lq(d_phi, batch.d_q, cfg.d_p, cfg.c_q, cfg.margin)
    terms["q"] = float(per.mean())
    near = (batch.d_q <= cfg.c_q) & (d_phi - cfg.d_p + cfg.margin > 0)
    far = (batch.d_q >= cfg.c_q) & (cfg.d_p - d_phi + cfg.margin > 0)
    g_d = (near.astype(float) - far.astype(float)) / n
    unit = diff / np.maximum(d_phi, 1e-12)[:, None]
    grad_z[:n] += w["q"] * g_d[:, None] * unit
    grad_z[n:2 * n] -= w["q"] * g_d[:, None] * unit

    head_grads = {}
    pair = _pair_input(z_t, z_g)
    for name, head, labels in (("inv", model.inv, batch.a), ("time", model.time, np.minimum(batch.offset, model.t_max))):
        logits, cache = head.forward(pair)
        terms[name], g_logits = cross_entropy(logits, labels)
        grads, g_in = head.backward(cache, w[name] * g_logits)
        head_grads[name] = grads
        grad_z[:n] += g_in[:, :z_t.shape[1]]
        grad_z[n:2 * n] += g_in[:, z_t.shape[1]:]

    target = z_n if fwd_target is None else fwd_target
    onehot = np.eye(model.n_actions)[batch.a]
    pred, cache = model.fwd.forward(np.concatenate([z_t, onehot], axis=1))
    err = pred - target
    terms["fwd"] = float(np.mean(np.sum(err ** 2, axis=1)))
    grads, g_in = model.fwd.backward(cache, w["fwd"] * 2.0 * err / n)
    head_grads["fwd"] = grads
    grad_z[:n] += g_in[:, :z_t.shape[1]]
    # no gradient into z_n: the forward target is held constant

    enc_grads = model.encoder.backward(enc_cache, grad_z)
    total = sum(w[t] * terms[t] for t in TERMS)
    return total, terms, enc_grads + head_grads["fwd"] + head_grads["inv"] + head_grads["time"]


def loss_aux(model: EmbedModel, batch: EmbedBatch) -> tuple[float, float, float]:
    """(forward-model MSE, inverse-model CE, time CE) on one batch."""
    _, terms, _ = loss_and_grads(model, batch)
    return terms["fwd"], terms["inv"], terms["time"]


def make_batch(q, log: TrajectoryLog, rng: np.random.Generator, size: int, t_max: int) -> EmbedBatch:
    hb = sample_hindsight(log, size, rng, "encoder", t_max=t_max)
    keys = q.log_keys(log)
    obs = log.obs
    dq = d_q_keys(q, keys[hb.t], keys[hb.goal])
    return EmbedBatch(obs[hb.t].astype(float), hb.action, obs[hb.t_next].astype(float), obs[hb.goal].astype(float),
                      hb.offset, dq)


def train_encoder(log: TrajectoryLog, q, cfg: EmbedTrainConfig, rng: np.random.Generator, seed: int = 0,
                  progress_every: int = 100):
    """Joint Adam training of encoder and heads; returns ``(model, curve)``.

    ``curve`` rows are ``(step, total, L_Q, L_T, L_inv, L_fwd)`` averaged over
    each reporting window.
    """
    model = EmbedModel.create(log.obs_dim, log.n_actions, cfg, seed)
    opt = Adam(model.params, cfg.lr)
    curve, window = [], []
    for step in range(1, cfg.steps + 1):
        batch = make_batch(q, log, rng, cfg.batch, cfg.t_max)
        total, terms, grads = loss_and_grads(model, batch)
        if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads):
            raise EmbedDivergenceError(f"encoder loss became non-finite at step {step}")
        opt.step(grads)
        window.append([total] + [terms[t] for t in TERMS])
        if step % progress_every == 0 or step == cfg.steps:
            curve.append((step, *np.mean(window, axis=0).tolist()))
            window = []
    return model, curve


def consecutive_distances(encoder: Encoder, log: TrajectoryLog) -> np.ndarray:
    """Embedding distance across every transition whose observation actually changed."""
    t = log.transition_indices()
    moved = ~np.all(log.obs[t] == log.obs[t + 1], axis=1)
    t = t[moved]
    z = encoder(log.obs)
    return np.linalg.norm(z[t] - z[t + 1], axis=1)


def calibrate_dp(encoder: Encoder, log: TrajectoryLog, fraction: float = 1.0, tol: float = 1e-9) -> float:
    """``fraction`` times the mean embedding step length; collisions are excluded."""
    if log.total_steps == 0:
        raise ValueError("cannot calibrate d_p on an empty log")
    d = consecutive_distances(encoder, log)
    if d.size == 0:
        raise ValueError("log has no transitions between distinct observations")
    dp = float(fraction * d.mean())
    if dp <= tol:
        log_.warning("encoder maps consecutive states to the same point (d_p=%g)", dp)
        raise DegenerateEncoderError(f"degenerate encoder: calibrated d_p = {dp:g}")
    return dp


@dataclass(frozen=True)
class EmbeddingIndex:
    """Embeddings of every buffer state, row-aligned with global indices."""

    z: np.ndarray
    d_p: float
    encoder: Encoder | None = None
    step_scale: float = 0.0

    def __len__(self) -> int:
        return self.z.shape[0]

    def embed(self, obs) -> np.ndarray:
        if self.encoder is None:
            raise ValueError("index was built without an encoder")
        return self.encoder(np.atleast_2d(obs))


def embed_all(encoder: Encoder, log: TrajectoryLog, d_p: float = 0.0) -> EmbeddingIndex:
    """Embed every buffer state; ``step_scale`` is the largest embedding step across a transition."""
    if log.n_states == 0:
        return EmbeddingIndex(np.zeros((0, encoder.latent_dim)), d_p, encoder, 0.0)
    z = encoder(log.obs)
    t = log.transition_indices()
    scale = float(np.max(np.linalg.norm(z[t] - z[t + 1], axis=1))) if t.size else 0.0
    return EmbeddingIndex(z, d_p, encoder, scale)


def time_head_mode(model: EmbedModel, s_obs, g_obs) -> np.ndarray:
    """Most likely time-to-goal bin for each (state, goal) row."""
    zs, zg = model.encoder(s_obs), model.encoder(g_obs)
    return np.argmax(softmax(model.time(_pair_input(zs, zg))), axis=1)
