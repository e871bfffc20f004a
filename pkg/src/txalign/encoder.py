"""GRU event-sequence encoder with hand-written backpropagation and CoLES pretraining.

All training math runs in float64. Parameters live in a flat ``dict`` of
named arrays so optimizers, checkpoints and gradient checks treat every
group the same way.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import CATEGORICAL_FIELDS, SECONDS_PER_DAY, Dataset, EventRecord, EventSequence
from .optim import make_optimizer

log = logging.getLogger(__name__)

N_NUMERIC = 3  # sign(amount), scaled log-magnitude, log1p(days since previous event)

CHECKPOINT_MAGIC = b"LTCK"
CHECKPOINT_VERSION = 1


class EncoderError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class EncoderConfig:
    vocab_sizes: dict[str, int]
    d_emb: int = 16
    hidden: int = 1024
    d_out: int = 256
    pooling: str = "last"
    amount_scale: float = 1.0

    def __post_init__(self):
        if self.pooling not in ("last", "mean"):
            raise ValueError(f"pooling must be 'last' or 'mean', got {self.pooling!r}")
        missing = set(CATEGORICAL_FIELDS) - set(self.vocab_sizes)
        if missing:
            raise ValueError(f"vocab_sizes missing {sorted(missing)}")

    @property
    def d_in(self) -> int:
        return len(CATEGORICAL_FIELDS) * self.d_emb + N_NUMERIC

    def shapes(self) -> dict[str, tuple[int, ...]]:
        H, d_in = self.hidden, self.d_in
        shapes = {f"emb_{name}": (self.vocab_sizes[name], self.d_emb) for name in CATEGORICAL_FIELDS}
        shapes |= {"num_w": (N_NUMERIC, N_NUMERIC), "num_b": (N_NUMERIC,)}
        for gate in "zrh":
            shapes |= {f"W_{gate}": (d_in, H), f"U_{gate}": (H, H), f"b_{gate}": (H,)}
        shapes |= {"out_w": (H, self.d_out), "out_b": (self.d_out,)}
        return shapes

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes().values())


def init_params(config: EncoderConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in config.shapes().items():
        if name.startswith("emb_"):
            params[name] = rng.uniform(-np.sqrt(3), np.sqrt(3), size=shape)
        elif name == "num_w":
            params[name] = np.eye(N_NUMERIC)
        elif len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


@dataclass
class GRUEncoder:
    config: EncoderConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, config: EncoderConfig, seed: int = 0) -> "GRUEncoder":
        return cls(config, init_params(config, seed))

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "GRUEncoder":
        return GRUEncoder(self.config, {k: v.copy() for k, v in self.params.items()})

    # -- featurization ---------------------------------------------------

    def numeric_features(self, seq: EventSequence) -> np.ndarray:
        """Raw numeric inputs, before the learnable affine map."""
        dt = np.zeros(len(seq))
        dt[1:] = np.diff(seq.timestamps) / SECONDS_PER_DAY
        return np.stack(
            [
                np.sign(seq.amounts),
                np.log1p(np.abs(seq.amounts)) / self.config.amount_scale,
                np.log1p(dt),
            ],
            axis=1,
        )

    def featurize(self, event: EventRecord, prev_timestamp: int | None = None) -> np.ndarray:
        for name in CATEGORICAL_FIELDS:
            idx = getattr(event, name)
            if not 0 <= idx < self.config.vocab_sizes[name]:
                raise EncoderError(f"{name} index {idx} outside vocabulary")
        dt = 0.0 if prev_timestamp is None else (event.timestamp - prev_timestamp) / SECONDS_PER_DAY
        num = np.array(
            [np.sign(event.amount), np.log1p(abs(event.amount)) / self.config.amount_scale, np.log1p(dt)]
        )
        p = self.params
        return np.concatenate(
            [p["emb_mcc"][event.mcc], p["emb_tx_type"][event.tx_type], num @ p["num_w"] + p["num_b"]]
        )

    def _batch_inputs(self, seqs: Sequence[EventSequence]):
        if any(len(s) == 0 for s in seqs):
            raise EncoderError("cannot encode an empty sequence")
        B, T = len(seqs), max(len(s) for s in seqs)
        idx = {name: np.zeros((T, B), dtype=np.int64) for name in CATEGORICAL_FIELDS}
        num = np.zeros((T, B, N_NUMERIC))
        mask = np.zeros((T, B), dtype=bool)
        for b, s in enumerate(seqs):
            n = len(s)
            for name in CATEGORICAL_FIELDS:
                col = getattr(s, name)
                if col.min() < 0 or col.max() >= self.config.vocab_sizes[name]:
                    raise EncoderError(f"client {s.client_id}: {name} index outside vocabulary")
                idx[name][:n, b] = col
            num[:n, b] = self.numeric_features(s)
            mask[:n, b] = True
        return idx, num, mask

    # -- forward / backward ------------------------------------------------

    def forward(self, seqs: Sequence[EventSequence]):
        """Encode a batch; returns (B x d_out outputs, cache for `backward`)."""
        p, H = self.params, self.config.hidden
        idx, num, mask = self._batch_inputs(seqs)
        T, B = mask.shape
        X = np.concatenate(
            [p[f"emb_{name}"][idx[name]] for name in CATEGORICAL_FIELDS] + [num @ p["num_w"] + p["num_b"]],
            axis=2,
        )
        W = np.concatenate([p["W_z"], p["W_r"], p["W_h"]], axis=1)
        b = np.concatenate([p["b_z"], p["b_r"], p["b_h"]])
        U_zr = np.concatenate([p["U_z"], p["U_r"]], axis=1)
        U_h = p["U_h"]
        XW = X @ W + b

        Hprev = np.empty((T, B, H))
        Z = np.empty((T, B, H))
        R = np.empty((T, B, H))
        N = np.empty((T, B, H))
        h = np.zeros((B, H))
        pooled_sum = np.zeros((B, H)) if self.config.pooling == "mean" else None
        for t in range(T):
            Hprev[t] = h
            a_zr = XW[t, :, : 2 * H] + h @ U_zr
            z = sigmoid(a_zr[:, :H])
            r = sigmoid(a_zr[:, H:])
            n = np.tanh(XW[t, :, 2 * H :] + (r * h) @ U_h)
            Z[t], R[t], N[t] = z, r, n
            h = np.where(mask[t, :, None], h + z * (n - h), h)
            if pooled_sum is not None:
                pooled_sum += np.where(mask[t, :, None], h, 0.0)
        lengths = mask.sum(axis=0)
        pooled = h if pooled_sum is None else pooled_sum / lengths[:, None]
        out = pooled @ p["out_w"] + p["out_b"]
        cache = dict(idx=idx, num=num, mask=mask, X=X, W=W, U_zr=U_zr, Hprev=Hprev, Z=Z, R=R, N=N,
                     pooled=pooled, lengths=lengths)
        return out, cache

    def backward(self, cache: dict, d_out: np.ndarray) -> dict[str, np.ndarray]:
        p, H = self.params, self.config.hidden
        mask, X, W, U_zr = cache["mask"], cache["X"], cache["W"], cache["U_zr"]
        Hprev, Z, R, N = cache["Hprev"], cache["Z"], cache["R"], cache["N"]
        T, B = mask.shape
        U_h = p["U_h"]
        grads = {"out_w": cache["pooled"].T @ d_out, "out_b": d_out.sum(axis=0)}
        d_pooled = d_out @ p["out_w"].T

        mean_pool = self.config.pooling == "mean"
        if mean_pool:
            d_step = d_pooled / cache["lengths"][:, None]
            dh = np.zeros((B, H))
        else:
            dh = d_pooled
        dA = np.zeros((T, B, 3 * H))
        RH = R * Hprev
        for t in range(T - 1, -1, -1):
            m = mask[t, :, None]
            if mean_pool:
                dh = dh + np.where(m, d_step, 0.0)
            dhn = np.where(m, dh, 0.0)
            dh_prev = np.where(m, 0.0, dh)
            z, r, n, hp = Z[t], R[t], N[t], Hprev[t]
            dz = dhn * (n - hp)
            dh_prev += dhn * (1.0 - z)
            da_n = dhn * z * (1.0 - n * n)
            d_rh = da_n @ U_h.T
            dh_prev += d_rh * r
            dA[t, :, :H] = dz * z * (1.0 - z)
            dA[t, :, H : 2 * H] = d_rh * hp * r * (1.0 - r)
            dA[t, :, 2 * H :] = da_n
            dh = dh_prev + dA[t, :, : 2 * H] @ U_zr.T

        flat_A = dA.reshape(T * B, 3 * H)
        dW = X.reshape(T * B, -1).T @ flat_A
        db = flat_A.sum(axis=0)
        dU_zr = Hprev.reshape(T * B, H).T @ flat_A[:, : 2 * H]
        grads["U_h"] = RH.reshape(T * B, H).T @ flat_A[:, 2 * H :]
        for k, gate in enumerate("zrh"):
            grads[f"W_{gate}"] = dW[:, k * H : (k + 1) * H]
            grads[f"b_{gate}"] = db[k * H : (k + 1) * H]
        grads["U_z"], grads["U_r"] = dU_zr[:, :H], dU_zr[:, H:]

        dX = (dA @ W.T).reshape(T * B, -1)
        d_emb = self.config.d_emb
        for k, name in enumerate(CATEGORICAL_FIELDS):
            g = np.zeros_like(p[f"emb_{name}"])
            np.add.at(g, cache["idx"][name].reshape(-1), dX[:, k * d_emb : (k + 1) * d_emb])
            grads[f"emb_{name}"] = g
        d_num = dX[:, len(CATEGORICAL_FIELDS) * d_emb :]
        grads["num_w"] = cache["num"].reshape(T * B, N_NUMERIC).T @ d_num
        grads["num_b"] = d_num.sum(axis=0)
        return grads

    def embed(self, seqs: Sequence[EventSequence], batch_size: int = 64) -> np.ndarray:
        """Encode many sequences, batching similar lengths together."""
        order = np.argsort([len(s) for s in seqs], kind="stable")
        out = np.empty((len(seqs), self.config.d_out))
        for start in range(0, len(seqs), batch_size):
            chunk = order[start : start + batch_size]
            out[chunk], _ = self.forward([seqs[i] for i in chunk])
        return out


def encode(seq: EventSequence, encoder: GRUEncoder) -> np.ndarray:
    out, _ = encoder.forward([seq])
    return out[0]


def dataset_amount_scale(dataset: Dataset) -> float:
    mags = np.concatenate([np.log1p(np.abs(s.amounts)) for s in dataset.sequences])
    std = float(mags.std())
    return std if std > 0 else 1.0


# -- CoLES ------------------------------------------------------------------


def coles_sample(
    seq: EventSequence,
    n_slices: int,
    len_range: tuple[int, int],
    rng: np.random.Generator | int,
) -> list[EventSequence] | None:
    """Random contiguous sub-sequences of one client; None when it is too short."""
    lo, hi = len_range
    if n_slices < 2:
        raise ValueError("n_slices must be >= 2")
    if not 1 <= lo <= hi:
        raise ValueError("need 1 <= min length <= max length")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    n = len(seq)
    if n < lo:
        return None
    slices = []
    for _ in range(n_slices):
        length = min(int(rng.integers(lo, hi + 1)), n)
        start = int(rng.integers(0, n - length + 1))
        slices.append(seq.slice(start, start + length))
    return slices


def l2_normalize(E: np.ndarray, what: str = "embedding") -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(E, axis=1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise EncoderError(f"degenerate {what}: zero or non-finite norm")
    return E / norms, norms


def normalize_backward(U: np.ndarray, norms: np.ndarray, dU: np.ndarray) -> np.ndarray:
    """Gradient through row-wise u = e / |e|."""
    return (dU - U * np.sum(U * dU, axis=1, keepdims=True)) / norms


def coles_loss(embeddings: np.ndarray, client_ids: Sequence[str], tau: float = 0.1) -> tuple[float, np.ndarray]:
    """Multi-positive InfoNCE over slice embeddings; returns (loss, d loss / d embeddings)."""
    ids = np.asarray(client_ids)
    if len(set(ids.tolist())) < 2:
        raise ValueError("CoLES batch needs at least two distinct clients")
    M = len(ids)
    U, norms = l2_normalize(np.asarray(embeddings, dtype=np.float64))
    S = U @ U.T / tau
    same = ids[:, None] == ids[None, :]
    eye = np.eye(M, dtype=bool)
    pos = same & ~eye
    if not np.all(pos.any(axis=1)):
        raise ValueError("every client needs at least two slices")

    logits = np.where(eye, -np.inf, S)
    shift = logits.max(axis=1, keepdims=True)
    e_all = np.exp(logits - shift)
    e_pos = np.where(pos, e_all, 0.0)
    sum_all = e_all.sum(axis=1)
    sum_pos = e_pos.sum(axis=1)
    loss = float(np.mean(np.log(sum_all) - np.log(sum_pos)))

    G = (e_all / sum_all[:, None] - e_pos / sum_pos[:, None]) / M
    dU = (G + G.T) @ U / tau
    return loss, normalize_backward(U, norms, dU)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 5
    batch_size: int = 64
    n_slices: int = 5
    min_len: int = 15
    max_len: int = 150
    tau: float = 0.1
    optimizer: str = "momentum"
    lr: float = 1e-3
    momentum: float = 0.9
    clip: float = 5.0
    seed: int = 0


def pretrain_coles(
    dataset: Dataset | Sequence[EventSequence],
    encoder_config: EncoderConfig,
    config: PretrainConfig = PretrainConfig(),
    encoder: GRUEncoder | None = None,
) -> tuple[GRUEncoder, list[float]]:
    seqs = list(dataset.sequences if isinstance(dataset, Dataset) else dataset)
    seqs = sorted((s for s in seqs if len(s) >= config.min_len), key=lambda s: s.client_id)
    if len(seqs) < 2:
        raise TrainingError("not enough clients long enough for CoLES slices")
    batch = min(config.batch_size, len(seqs))
    encoder = encoder.copy() if encoder else GRUEncoder.create(encoder_config, config.seed)
    opt = make_optimizer(config.optimizer, config.lr, config.clip, config.momentum)
    losses: list[float] = []
    step = 0
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(seqs))
        # full batches only: the InfoNCE loss scale depends on how many negatives a batch has
        for start in range(0, len(order) - batch + 1, batch):
            chunk = order[start : start + batch]
            slices, ids = [], []
            for i in chunk:
                part = coles_sample(seqs[i], config.n_slices, (config.min_len, config.max_len), rng)
                slices += part
                ids += [seqs[i].client_id] * len(part)
            out, cache = encoder.forward(slices)
            if not np.all(np.isfinite(out)):
                raise TrainingError(f"encoder output diverged at step {step}")
            loss, d_out = coles_loss(out, ids, config.tau)
            if not np.isfinite(loss):
                raise TrainingError(f"CoLES loss diverged at step {step}")
            opt.step(encoder.params, encoder.backward(cache, d_out))
            losses.append(loss)
            step += 1
        log.info("coles epoch %d: mean loss %.4f", epoch, np.mean(losses[-(len(order) // batch):]))
    return encoder, losses


def smooth(values: Sequence[float], window: int = 10) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        return values.copy()
    return np.convolve(values, np.ones(window) / window, mode="valid")


# -- persistence ------------------------------------------------------------

_CK_HEADER = struct.Struct("<4sII")


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Header (magic, version, JSON shape table) then float64 little-endian payload."""
    names = sorted(params)
    header = json.dumps(
        {"shapes": [[n, list(params[n].shape)] for n in names], "meta": meta or {}}, sort_keys=True
    ).encode()
    with Path(path).open("wb") as fh:
        fh.write(_CK_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    magic, version, hlen = _CK_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    header = json.loads(raw[_CK_HEADER.size : _CK_HEADER.size + hlen])
    offset = _CK_HEADER.size + hlen
    params = {}
    for name, shape in header["shapes"]:
        count = int(np.prod(shape))
        params[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    return params, header["meta"]


def save_encoder(path: str | Path, encoder: GRUEncoder, extra_meta: dict | None = None) -> None:
    meta = {"encoder_config": asdict(encoder.config)} | (extra_meta or {})
    save_checkpoint(path, encoder.params, meta)


def load_encoder(path: str | Path) -> GRUEncoder:
    params, meta = load_checkpoint(path)
    config = EncoderConfig(**meta["encoder_config"])
    return GRUEncoder(config, {k: v for k, v in params.items() if k in config.shapes()})


def write_loss_log(path: str | Path, losses: Sequence[float]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(losses):
            writer.writerow([i, repr(float(loss))])
