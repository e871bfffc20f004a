"""Cross-modal contrastive heads, alignment training and embedding fusion.

The heads take raw (un-normalised) sequence and text matrices whose row i
belongs to the same client, L2-normalise rows internally, and return the loss
together with gradients for every input. Temperatures are parameterised by
their logarithm, so gradients are reported with respect to ``log_tau``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from .data import EventSequence
from .encoder import (
    EncoderConfig,
    GRUEncoder,
    TrainingError,
    l2_normalize,
    load_checkpoint,
    normalize_backward,
    save_checkpoint,
)
from .optim import make_optimizer

log = logging.getLogger(__name__)

HEADS = ("softmax", "sigmoid", "ortho")


class AlignmentError(ValueError):
    pass


class DegenerateProjectionError(AlignmentError):
    pass


@dataclass
class HeadOutput:
    loss: float
    d_seq: np.ndarray
    d_text: np.ndarray
    d_log_tau: float
    d_bias: float = 0.0
    d_proj_w: np.ndarray | None = None
    d_proj_b: np.ndarray | None = None
    parts: dict[str, float] = field(default_factory=dict)


def _normalized_pair(z_seq, z_text):
    z_seq = np.asarray(z_seq, dtype=np.float64)
    z_text = np.asarray(z_text, dtype=np.float64)
    if z_seq.shape != z_text.shape:
        raise AlignmentError(f"sequence batch {z_seq.shape} and text batch {z_text.shape} differ")
    if len(z_seq) == 0:
        raise AlignmentError("empty batch")
    U, nu = l2_normalize(z_seq, "sequence embedding")
    V, nv = l2_normalize(z_text, "text embedding")
    S = U @ V.T
    if not np.all(np.isfinite(S)):
        raise AlignmentError("non-finite similarity")
    return U, nu, V, nv, S


def _grads_from_similarity(U, nu, V, nv, dS):
    return normalize_backward(U, nu, dS @ V), normalize_backward(V, nv, dS.T @ U)


def softmax_head_loss(z_seq: np.ndarray, z_text: np.ndarray, tau: float) -> HeadOutput:
    """Symmetric InfoNCE: mean of the seq->text and text->seq cross-entropies."""
    U, nu, V, nv, S = _normalized_pair(z_seq, z_text)
    N = len(S)
    logits = S / tau
    diag = np.diagonal(logits)
    loss_st = float(np.mean(logsumexp(logits, axis=1) - diag))
    loss_ts = float(np.mean(logsumexp(logits, axis=0) - diag))
    eye = np.eye(N)
    d_logits = (softmax(logits, axis=1) - eye + softmax(logits, axis=0) - eye) / (2 * N)
    d_seq, d_text = _grads_from_similarity(U, nu, V, nv, d_logits / tau)
    return HeadOutput(
        loss=0.5 * (loss_st + loss_ts),
        d_seq=d_seq,
        d_text=d_text,
        d_log_tau=float(-np.sum(d_logits * logits)),
        parts={"seq_to_text": loss_st, "text_to_seq": loss_ts},
    )


def sigmoid_head_loss(z_seq: np.ndarray, z_text: np.ndarray, tau: float, bias: float) -> HeadOutput:
    """Pairwise binary loss: -log sigmoid(y_ij (tau s_ij - b)) summed over pairs, over N."""
    U, nu, V, nv, S = _normalized_pair(z_seq, z_text)
    N = len(S)
    y = 2.0 * np.eye(N) - 1.0
    logits = tau * S - bias
    loss = float(np.sum(np.logaddexp(0.0, -y * logits)) / N)
    # d/dlogit softplus(-y logit) = -y sigmoid(-y logit)
    g = -y * 0.5 * (1.0 + np.tanh(-0.5 * y * logits)) / N
    d_seq, d_text = _grads_from_similarity(U, nu, V, nv, g * tau)
    return HeadOutput(
        loss=loss,
        d_seq=d_seq,
        d_text=d_text,
        d_log_tau=float(np.sum(g * S) * tau),
        d_bias=float(-np.sum(g)),
    )


def ortho_penalty(z_shared: np.ndarray, z_spec: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Squared Frobenius norm of shared^T spec, with gradients for both blocks."""
    C = z_shared.T @ z_spec
    return float(np.sum(C * C)), 2.0 * z_spec @ C.T, 2.0 * z_shared @ C


def ortho_head_loss(
    z_seq: np.ndarray,
    z_text: np.ndarray,
    proj_w: np.ndarray,
    proj_b: np.ndarray,
    tau: float,
    lambda_ortho: float,
    d_shared: int | None = None,
) -> HeadOutput:
    """Softmax alignment of the shared block plus an orthogonality penalty.

    The projection head splits each sequence embedding into a shared block
    (aligned with text) and a modality-specific block; the penalty is taken
    on the raw projections.
    """
    if lambda_ortho < 0:
        raise AlignmentError("lambda_ortho must be >= 0")
    z_seq = np.asarray(z_seq, dtype=np.float64)
    d_shared = d_shared or proj_w.shape[1] // 2
    P = z_seq @ proj_w + proj_b
    z_sh, z_sp = P[:, :d_shared], P[:, d_shared:]
    head = softmax_head_loss(z_sh, z_text, tau)
    penalty, d_sh, d_sp = ortho_penalty(z_sh, z_sp)
    dP = np.concatenate([head.d_seq + lambda_ortho * d_sh, lambda_ortho * d_sp], axis=1)
    return HeadOutput(
        loss=head.loss + lambda_ortho * penalty,
        d_seq=dP @ proj_w.T,
        d_text=head.d_text,
        d_log_tau=head.d_log_tau,
        d_proj_w=z_seq.T @ dP,
        d_proj_b=dP.sum(axis=0),
        parts={"softmax": head.loss, "ortho": penalty},
    )


def text_projection(z_text: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map of frozen text embeddings into the shared space, L2-normalised."""
    z_text = np.asarray(z_text, dtype=np.float64)
    single = z_text.ndim == 1
    Z = np.atleast_2d(z_text)
    if Z.shape[1] != w.shape[0]:
        raise AlignmentError(f"text embedding has dimension {Z.shape[1]}, projection expects {w.shape[0]}")
    if not np.all(np.isfinite(Z)):
        raise AlignmentError("non-finite text embedding")
    P = Z @ w + b
    norms = np.linalg.norm(P, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateProjectionError("text projection collapsed to the zero vector")
    P = P / norms
    return P[0] if single else P


def fuse_embeddings(z_seq: np.ndarray, z_text: np.ndarray | None, mode: str) -> np.ndarray:
    """Structural-only (mode "S") or concatenated block-normalised (mode "full") embeddings."""
    z_seq = np.asarray(z_seq, dtype=np.float64)
    if mode == "S":
        return z_seq.copy()
    if mode != "full":
        raise ValueError(f"unknown fusion mode {mode!r}")
    if z_text is None:
        raise AlignmentError("full fusion needs a text embedding")
    blocks = []
    for block, what in ((z_seq, "sequence"), (np.asarray(z_text, dtype=np.float64), "text")):
        norms = np.linalg.norm(block, axis=-1, keepdims=True)
        if np.any(norms == 0):
            raise DegenerateProjectionError(f"cannot normalise an all-zero {what} block")
        blocks.append(block / norms)
    return np.concatenate(blocks, axis=-1)


@dataclass(frozen=True)
class AlignConfig:
    head: str = "softmax"
    epochs: int = 10
    batch_size: int = 64
    optimizer: str = "momentum"
    lr: float = 1e-3
    momentum: float = 0.9
    clip: float = 5.0
    tau_init: float | None = None
    bias_init: float | None = None
    learn_tau: bool = True
    lambda_ortho: float = 0.1
    export_block: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.lambda_ortho < 0:
            raise ValueError("lambda_ortho must be >= 0")
        if self.export_block not in ("full", "shared", "spec"):
            raise ValueError("export_block must be full, shared or spec")

    @property
    def initial_tau(self) -> float:
        if self.tau_init is not None:
            return self.tau_init
        return 10.0 if self.head == "sigmoid" else 0.07

    @property
    def initial_bias(self) -> float:
        # logit = tau*s - b, so b = +10 starts every pair near "negative"
        return 10.0 if self.bias_init is None else self.bias_init


class AlignmentModel:
    """Sequence encoder plus the trainable pieces of one contrastive head."""

    def __init__(self, encoder: GRUEncoder, head_params: dict[str, np.ndarray], config: AlignConfig):
        self.encoder = encoder
        self.head_params = head_params
        self.config = config

    @classmethod
    def create(cls, encoder: GRUEncoder, text_dim: int, config: AlignConfig) -> "AlignmentModel":
        rng = np.random.default_rng([config.seed, 1])
        d_out = encoder.config.d_out
        shared = d_out // 2 if config.head == "ortho" else d_out
        bound = 1.0 / np.sqrt(text_dim)
        head = {
            "text_w": rng.uniform(-bound, bound, size=(text_dim, shared)),
            "text_b": np.zeros(shared),
            "log_tau": np.array([np.log(config.initial_tau)]),
        }
        if config.head == "sigmoid":
            head["bias"] = np.array([config.initial_bias])
        if config.head == "ortho":
            pb = 1.0 / np.sqrt(d_out)
            head["proj_w"] = rng.uniform(-pb, pb, size=(d_out, d_out))
            head["proj_b"] = np.zeros(d_out)
        return cls(encoder, head, config)

    @property
    def tau(self) -> float:
        return float(np.exp(self.head_params["log_tau"][0]))

    @property
    def d_shared(self) -> int:
        return self.head_params["text_w"].shape[1]

    def parameters(self) -> dict[str, np.ndarray]:
        params = {f"enc.{k}": v for k, v in self.encoder.params.items()}
        return params | self.head_params

    def head_loss(self, z_seq: np.ndarray, z_text_proj: np.ndarray) -> HeadOutput:
        c, p = self.config, self.head_params
        if c.head == "softmax":
            return softmax_head_loss(z_seq, z_text_proj, self.tau)
        if c.head == "sigmoid":
            return sigmoid_head_loss(z_seq, z_text_proj, self.tau, float(p["bias"][0]))
        return ortho_head_loss(z_seq, z_text_proj, p["proj_w"], p["proj_b"], self.tau, c.lambda_ortho, self.d_shared)

    def loss_and_grads(self, seqs: Sequence[EventSequence], text: np.ndarray) -> tuple[HeadOutput, dict[str, np.ndarray]]:
        p = self.head_params
        z_seq, cache = self.encoder.forward(seqs)
        proj = text @ p["text_w"] + p["text_b"]
        out = self.head_loss(z_seq, proj)
        grads = {f"enc.{k}": g for k, g in self.encoder.backward(cache, out.d_seq).items()}
        grads["text_w"] = text.T @ out.d_text
        grads["text_b"] = out.d_text.sum(axis=0)
        grads["log_tau"] = np.array([out.d_log_tau if self.config.learn_tau else 0.0])
        if "bias" in p:
            grads["bias"] = np.array([out.d_bias])
        if out.d_proj_w is not None:
            grads["proj_w"], grads["proj_b"] = out.d_proj_w, out.d_proj_b
        return out, grads

    # -- inference -----------------------------------------------------------

    def project_text(self, text: np.ndarray) -> np.ndarray:
        return text_projection(text, self.head_params["text_w"], self.head_params["text_b"])

    def sequence_embeddings(self, seqs: Sequence[EventSequence], block: str | None = None) -> np.ndarray:
        """Aligned embeddings used downstream (LATTE-S)."""
        z = self.encoder.embed(seqs)
        block = block or self.config.export_block
        if self.config.head != "ortho" or block == "full":
            return z
        P = z @ self.head_params["proj_w"] + self.head_params["proj_b"]
        return P[:, : self.d_shared] if block == "shared" else P[:, self.d_shared :]

    def retrieval_space(self, seqs: Sequence[EventSequence]) -> np.ndarray:
        """Sequence side of the shared space the head compares against projected text."""
        z = self.sequence_embeddings(seqs, block="shared")
        return l2_normalize(z)[0]

    def fused(self, seqs: Sequence[EventSequence], text: np.ndarray) -> np.ndarray:
        return fuse_embeddings(self.sequence_embeddings(seqs), self.project_text(text), "full")


def retrieval_accuracy(seq_space: np.ndarray, text_space: np.ndarray) -> float:
    """Top-1 sequence->text retrieval by cosine.

    A hit is retrieving the client's own text vector; candidates with an
    identical text vector (identical descriptions) count as the same item.
    """
    U = l2_normalize(np.asarray(seq_space, dtype=np.float64))[0]
    V = l2_normalize(np.asarray(text_space, dtype=np.float64))[0]
    best = np.argmax(U @ V.T, axis=1)
    hits = np.all(V[best] == V, axis=1)
    return float(np.mean(hits))


def train_alignment(
    sequences: Sequence[EventSequence],
    text_embeddings: Mapping[str, np.ndarray],
    encoder: GRUEncoder,
    config: AlignConfig = AlignConfig(),
) -> tuple[AlignmentModel, list[float]]:
    """Fine-tune a copy of ``encoder`` against frozen text embeddings."""
    usable = []
    for s in sorted(sequences, key=lambda s: s.client_id):
        if s.client_id in text_embeddings:
            usable.append(s)
        else:
            log.warning("client %s has no text embedding; excluded from alignment", s.client_id)
    if not usable:
        raise AlignmentError("no client has a text embedding")
    text = np.stack([np.asarray(text_embeddings[s.client_id], dtype=np.float64) for s in usable])

    model = AlignmentModel.create(encoder.copy(), text.shape[1], config)
    params = model.parameters()
    opt = make_optimizer(config.optimizer, config.lr, config.clip, config.momentum)
    batch = min(config.batch_size, len(usable))
    losses: list[float] = []
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(usable))
        for start in range(0, len(order) - batch + 1, batch):
            chunk = order[start : start + batch]
            out, grads = model.loss_and_grads([usable[i] for i in chunk], text[chunk])
            if not np.isfinite(out.loss):
                raise TrainingError(f"alignment loss diverged at step {len(losses)}")
            opt.step(params, grads)
            losses.append(out.loss)
        log.info("align[%s] epoch %d: last loss %.4f tau %.4f", config.head, epoch, losses[-1], model.tau)
    return model, losses


def save_alignment(path: str | Path, model: AlignmentModel) -> None:
    meta = {"encoder_config": asdict(model.encoder.config), "align_config": asdict(model.config)}
    save_checkpoint(path, model.parameters(), meta)


def load_alignment(path: str | Path) -> AlignmentModel:
    params, meta = load_checkpoint(path)
    enc_cfg = EncoderConfig(**meta["encoder_config"])
    encoder = GRUEncoder(enc_cfg, {k[4:]: v for k, v in params.items() if k.startswith("enc.")})
    head = {k: v for k, v in params.items() if not k.startswith("enc.")}
    return AlignmentModel(encoder, head, AlignConfig(**meta["align_config"]))
