"""Momentum-contrast learner with temporal positives.

A query encoder ``f_q`` and a momentum encoder ``f_k`` share one
architecture: a small conv backbone, a two-layer projection head and L2
normalisation. Only ``f_q`` receives gradients; ``f_k`` tracks it through an
exponential moving average.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import nn

INPUT_MEAN = 0.5
INPUT_STD = 0.25
_EPS_NORM = 1e-12


class DegenerateEmbedding(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int = 32
    backbone: tuple[str, ...] = ("conv:16", "relu", "avgpool:2",
                                 "conv:32", "relu", "avgpool:2",
                                 "conv:64", "relu", "gap")
    hidden: int = 4096
    out_dim: int = 256
    predictor_hidden: int = 0  # 0 disables the query-side prediction head

    def __post_init__(self):
        if self.hidden <= 0 or self.out_dim <= 0:
            raise ValueError("projection widths must be positive")

    def descriptor(self) -> str:
        return json.dumps({
            "input_size": self.input_size, "backbone": list(self.backbone),
            "hidden": self.hidden, "out_dim": self.out_dim,
            "predictor_hidden": self.predictor_hidden,
        }, sort_keys=True)

    @classmethod
    def from_descriptor(cls, text: str) -> "EncoderConfig":
        d = json.loads(text)
        d["backbone"] = tuple(d["backbone"])
        return cls(**d)

    @classmethod
    def desk(cls, input_size: int = 32) -> "EncoderConfig":
        return cls(input_size=input_size, hidden=128, out_dim=32)


def _head(prefix, hidden, out_dim):
    return [nn.Dense(f"{prefix}.0", hidden), nn.ReLU(f"{prefix}.1"),
            nn.Dense(f"{prefix}.2", out_dim)]


class Encoder:
    """Backbone + projector (+ optional predictor) over a flat parameter dict."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        s = config.input_size
        layers = [nn.parse_layer(tok, f"backbone.{i}") for i, tok in enumerate(config.backbone)]
        self.backbone = nn.Sequential(layers, (s, s, 3))
        if len(self.backbone.out_shape) != 1:
            raise ValueError("backbone must end in a flat feature vector (gap or flatten)")
        self.feature_dim = self.backbone.out_shape[0]
        self.projector = nn.Sequential(_head("projector", config.hidden, config.out_dim),
                                       self.backbone.out_shape)
        self.predictor = None
        if config.predictor_hidden:
            self.predictor = nn.Sequential(
                _head("predictor", config.predictor_hidden, config.out_dim), (config.out_dim,))

    def init(self, rng: np.random.Generator) -> nn.Params:
        params = self.backbone.init(rng)
        params.update(self.projector.init(rng))
        if self.predictor is not None:
            params.update(self.predictor.init(rng))
        return params

    def _check(self, x):
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (s, s, 3):
            raise ValueError(f"expected images (B, {s}, {s}, 3), got {x.shape}")

    def features(self, params, x, chunk: int = 256) -> np.ndarray:
        """Backbone features, no caches kept."""
        x = np.asarray(x, dtype=np.float64)
        self._check(x)
        out = []
        for i in range(0, len(x), chunk):
            h, _ = self.backbone.forward(params, (x[i:i + chunk] - INPUT_MEAN) / INPUT_STD,
                                         keep=False)
            out.append(h)
        return np.concatenate(out) if out else np.zeros((0, self.feature_dim))

    def forward(self, params, x, query: bool = False, keep: bool = True):
        """Pre-normalisation output ``z`` and the caches needed by ``backward``."""
        x = np.asarray(x, dtype=np.float64)
        self._check(x)
        h, c1 = self.backbone.forward(params, (x - INPUT_MEAN) / INPUT_STD, keep)
        z, c2 = self.projector.forward(params, h, keep)
        c3 = None
        if query and self.predictor is not None:
            z, c3 = self.predictor.forward(params, z, keep)
        return z, (c1, c2, c3)

    def backward(self, params, caches, dz) -> nn.Params:
        c1, c2, c3 = caches
        grads: nn.Params = {}
        if c3 is not None:
            dz, g = self.predictor.backward(params, c3, dz)
            grads.update(g)
        dh, g = self.projector.backward(params, c2, dz)
        grads.update(g)
        _, g = self.backbone.backward(params, c1, dh)
        grads.update(g)
        return grads

    def key_params(self, params) -> nn.Params:
        return {k: v for k, v in params.items() if not k.startswith("predictor.")}


def normalize_rows(z: np.ndarray):
    """Unit-normalise rows; zero rows stay zero and are flagged."""
    norm = np.linalg.norm(z, axis=1, keepdims=True)
    degenerate = norm[:, 0] <= _EPS_NORM
    e = np.where(degenerate[:, None], 0.0, z / np.where(degenerate[:, None], 1.0, norm))
    return e, norm, degenerate


def normalize_backward(e, norm, de):
    return (de - e * np.sum(e * de, axis=1, keepdims=True)) / norm


@dataclass
class Embedding:
    vectors: np.ndarray
    degenerate: np.ndarray  # bool per row


def embed(encoder: Encoder, params, images, query: bool = False) -> Embedding:
    z, _ = encoder.forward(params, images, query=query, keep=False)
    e, _, deg = normalize_rows(z)
    return Embedding(e, deg)


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= _EPS_NORM or nb <= _EPS_NORM:
        raise DegenerateEmbedding("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class LossReport:
    loss_value: float
    positive_similarity_mean: float
    negative_similarity_mean: float
    temperature: float
    lr: float = float("nan")


def _logsumexp(x, axis=1):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)))[:, 0]


def info_nce_logits(logits: np.ndarray, include_positive: bool = True):
    """Mean loss and ``dL/dlogits`` for a square logit matrix with positives on the diagonal."""
    b = logits.shape[0]
    eye = np.eye(b, dtype=bool)
    if not include_positive:
        if b < 2:
            raise ValueError("excluding the positive needs at least two keys")
        masked = np.where(eye, -np.inf, logits)
    else:
        masked = logits
    lse = _logsumexp(masked)
    loss = float(np.mean(lse - np.diag(logits)))
    soft = np.exp(masked - lse[:, None])
    grad = (soft - eye) / b
    return loss, grad


def info_nce(q_batch, k_batch, tau: float, include_positive: bool = True,
             return_grad: bool = False):
    """InfoNCE over in-batch keys; key ``i`` is the positive for query ``i``.

    With ``return_grad`` also returns the exact gradient with respect to
    ``q_batch`` (keys are constants).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    q = np.asarray(q_batch, dtype=np.float64)
    k = np.asarray(k_batch, dtype=np.float64)
    if q.shape != k.shape:
        raise ValueError(f"query/key batch shapes differ: {q.shape} vs {k.shape}")
    qn, qnorm, qdeg = normalize_rows(q)
    kn, _, kdeg = normalize_rows(k)
    if qdeg.any() or kdeg.any():
        raise DegenerateEmbedding("zero embedding in batch")
    sims = qn @ kn.T
    if not np.all(np.isfinite(sims)):
        raise NonFiniteError("non-finite similarity")
    loss, dlogits = info_nce_logits(sims / tau, include_positive)
    b = len(q)
    pos = float(np.mean(np.diag(sims)))
    neg = float((sims.sum() - np.trace(sims)) / (b * (b - 1))) if b > 1 else float("nan")
    report = LossReport(loss, pos, neg, tau)
    if not return_grad:
        return report
    dq = normalize_backward(qn, qnorm, dlogits @ kn / tau)
    return report, dq


def backward(encoder: Encoder, params, q_inputs, k_embeddings, tau: float,
             include_positive: bool = True):
    """Gradient of the mean InfoNCE loss with respect to the query parameters."""
    z, caches = encoder.forward(params, q_inputs, query=True)
    e, norm, deg = normalize_rows(z)
    if deg.any():
        raise DegenerateEmbedding("zero query embedding")
    report, de = info_nce(e, k_embeddings, tau, include_positive, return_grad=True)
    grads = encoder.backward(params, caches, normalize_backward(e, norm, de))
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NonFiniteError("non-finite gradient; step rejected")
    return grads, report


@dataclass
class EncoderState:
    theta_q: nn.Params
    theta_k: nn.Params
    step: int = 0

    @classmethod
    def create(cls, encoder: Encoder, rng: np.random.Generator) -> "EncoderState":
        q = encoder.init(rng)
        return cls(q, {k: v.copy() for k, v in encoder.key_params(q).items()})


def ema_update(state: EncoderState, m: float) -> EncoderState:
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum {m} outside [0, 1]")
    new_k = {}
    for name, k in state.theta_k.items():
        q = state.theta_q[name]
        if q.shape != k.shape:
            raise ValueError(f"shape mismatch for {name}: {q.shape} vs {k.shape}")
        new_k[name] = m * k + (1.0 - m) * q
    return EncoderState(state.theta_q, new_k, state.step)


@dataclass
class Batch:
    views_q: np.ndarray
    views_k: np.ndarray

    def __post_init__(self):
        if len(self.views_q) != len(self.views_k):
            raise ValueError("views_q and views_k differ in length")


@dataclass
class TrainOptions:
    tau: float = 0.1
    momentum: float = 0.996
    include_positive: bool = True
    symmetric: bool = False


def train_step(encoder: Encoder, batch: Batch, state: EncoderState, optimizer,
               opts: TrainOptions | None = None):
    """Forward both encoders, backprop into ``theta_q``, optimiser step, then EMA."""
    opts = opts or TrainOptions()
    if opts.symmetric:
        k2 = embed(encoder, state.theta_k, batch.views_k).vectors
        k1 = embed(encoder, state.theta_k, batch.views_q).vectors
        g1, r1 = backward(encoder, state.theta_q, batch.views_q, k2, opts.tau,
                          opts.include_positive)
        g2, r2 = backward(encoder, state.theta_q, batch.views_k, k1, opts.tau,
                          opts.include_positive)
        grads = {k: 0.5 * (g1[k] + g2[k]) for k in g1}
        report = LossReport(0.5 * (r1.loss_value + r2.loss_value),
                            0.5 * (r1.positive_similarity_mean + r2.positive_similarity_mean),
                            0.5 * (r1.negative_similarity_mean + r2.negative_similarity_mean),
                            opts.tau)
    else:
        k = embed(encoder, state.theta_k, batch.views_k).vectors
        grads, report = backward(encoder, state.theta_q, batch.views_q, k, opts.tau,
                                 opts.include_positive)
    new_q, lr = optimizer.step(state.theta_q, grads)
    report.lr = lr
    new_state = ema_update(EncoderState(new_q, state.theta_k, state.step + 1), opts.momentum)
    return new_state, report
