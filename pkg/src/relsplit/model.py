"""Logistic relevance head trained with binary cross-entropy, plus checkpoints.

The classifier is ``p = sigmoid(w . x + b)`` over hashed feature vectors.
Training is plain mini-batch SGD or AdamW with a deterministic per-epoch
shuffle. Two-stage training (auxiliary task first, then the target task)
hands parameters over through a :class:`Checkpoint`, which also records
which data and settings produced them.

Checkpoint file layout (all integers little-endian)::

    8 bytes   magic b"RLSPCKPT"
    uint32    format version
    uint32    dims
    float32   weights[dims]
    float64   bias
    uint32    metadata length N
    N bytes   UTF-8 JSON: {"featurizer": {...}, "provenance": [...]}
    uint32    CRC32 of everything above
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .encode import EncodedDataset, FeatureVector, FeaturizerConfig, stack
from .errors import CheckpointFormatError, ConfigMismatch, DimMismatch, EmptyBatch, NonFiniteLoss

PROB_EPS = 1e-12
MAGIC = b"RLSPCKPT"
FORMAT_VERSION = 1

_LOG_LO = float(np.log(PROB_EPS))
_LOG_HI = float(np.log1p(-PROB_EPS))

OPTIMIZERS = ("sgd", "adamw")
DEFAULT_LR = {"sgd": 0.1, "adamw": 1e-3}


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    ``learning_rate=None`` resolves to 0.1 for SGD and 1e-3 for AdamW.
    ``l2`` is a coupled penalty added to the loss; ``weight_decay`` is the
    decoupled AdamW decay and is ignored by SGD.
    """

    optimizer: str = "adamw"
    learning_rate: float | None = None
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    l2: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.learning_rate is None:
            object.__setattr__(self, "learning_rate", DEFAULT_LR[self.optimizer])
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValueError("learning_rate must be positive and finite")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not (np.isfinite(self.l2) and self.l2 >= 0 and np.isfinite(self.weight_decay) and self.weight_decay >= 0):
            raise ValueError("l2 and weight_decay must be finite and non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("need 0 <= beta1, beta2 < 1 and eps > 0")

    def to_obj(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class ModelParams:
    w: np.ndarray
    b: float

    @classmethod
    def zeros(cls, dims: int) -> "ModelParams":
        return cls(np.zeros(dims), 0.0)

    @property
    def dims(self) -> int:
        return self.w.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return np.array_equal(self.w, other.w) and self.b == other.b


@dataclass(frozen=True)
class StageRecord:
    dataset_fingerprint: str
    n_examples: int
    config: dict
    final_loss: float
    loss_history: list[float] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class Checkpoint:
    params: ModelParams
    featurizer: FeaturizerConfig
    provenance: tuple[StageRecord, ...] = ()
    format_version: int = FORMAT_VERSION

    def to_bytes(self) -> bytes:
        w32 = np.ascontiguousarray(self.params.w, dtype="<f4")
        meta = json.dumps(
            {"featurizer": self.featurizer.to_obj(), "provenance": [asdict(s) for s in self.provenance]},
            sort_keys=True,
            separators=(",", ":"),
            ensure_ascii=False,
            allow_nan=False,
        ).encode("utf-8")
        body = b"".join(
            [
                MAGIC,
                struct.pack("<II", self.format_version, w32.shape[0]),
                w32.tobytes(),
                struct.pack("<d", self.params.b),
                struct.pack("<I", len(meta)),
                meta,
            ]
        )
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < len(MAGIC) + 12 or data[: len(MAGIC)] != MAGIC:
            raise CheckpointFormatError("not a checkpoint file (bad magic)")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise CheckpointFormatError("checkpoint CRC mismatch")
        off = len(MAGIC)
        version, dims = struct.unpack_from("<II", body, off)
        off += 8
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        try:
            w = np.frombuffer(body, dtype="<f4", count=dims, offset=off).astype(np.float64)
            off += 4 * dims
            (b,) = struct.unpack_from("<d", body, off)
            off += 8
            (n,) = struct.unpack_from("<I", body, off)
            off += 4
            meta = json.loads(body[off : off + n].decode("utf-8"))
        except (ValueError, struct.error, UnicodeDecodeError) as exc:
            raise CheckpointFormatError(f"truncated or corrupt checkpoint: {exc}") from None
        if off + n != len(body):
            raise CheckpointFormatError("trailing bytes after checkpoint metadata")
        return cls(
            ModelParams(w, b),
            FeaturizerConfig(**meta["featurizer"]),
            tuple(StageRecord(**s) for s in meta["provenance"]),
            version,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# loss and gradient

Batch = Sequence[tuple[FeatureVector, int]]


def _as_arrays(batch: Batch) -> tuple[sp.csr_matrix, np.ndarray]:
    if len(batch) == 0:
        raise EmptyBatch("batch is empty")
    dims = batch[0][0].dims
    X = stack([x for x, _ in batch], dims)
    y = np.array([label for _, label in batch], dtype=np.float64)
    return X, y


def _check_dims(params: ModelParams, dims: int) -> None:
    if params.dims != dims:
        raise DimMismatch(f"model has {params.dims} dims, features have {dims}")


def _loss_and_grad(w: np.ndarray, b: float, X, y: np.ndarray, l2: float, want_grad: bool = True):
    z = X @ w + b
    # log p and log(1 - p), clamped as if p were clipped to [eps, 1 - eps]
    log_p = np.clip(-np.logaddexp(0.0, -z), _LOG_LO, _LOG_HI)
    log_q = np.clip(-np.logaddexp(0.0, z), _LOG_LO, _LOG_HI)
    loss = float(-np.mean(y * log_p + (1.0 - y) * log_q))
    if l2 > 0:
        loss += 0.5 * l2 * float(w @ w)
    if not want_grad:
        return loss, None, None
    r = (expit(z) - y) / y.shape[0]
    gw = X.T @ r
    if l2 > 0:
        gw = gw + l2 * w
    return loss, np.asarray(gw).ravel(), float(r.sum())


def _proba(z):
    # sigmoid saturates to exactly 0.0/1.0 in float64 near |z| = 37; keep outputs inside (0, 1)
    return np.clip(expit(z), PROB_EPS, 1.0 - PROB_EPS)


def predict_proba(params: ModelParams, x: FeatureVector) -> float:
    """``sigmoid(w . x + b)``, clamped to [1e-12, 1 - 1e-12] like the loss."""
    _check_dims(params, x.dims)
    return float(_proba(x.dot(params.w) + params.b))


def batch_loss(params: ModelParams, batch: Batch, l2: float = 0.0) -> float:
    """Mean binary cross-entropy (probabilities clamped to [1e-12, 1 - 1e-12]) plus ``l2/2 |w|^2``."""
    X, y = _as_arrays(batch)
    _check_dims(params, X.shape[1])
    return _loss_and_grad(params.w, params.b, X, y, l2, want_grad=False)[0]


def batch_grad(params: ModelParams, batch: Batch, l2: float = 0.0) -> tuple[np.ndarray, float]:
    """Analytic gradient of :func:`batch_loss` (unclamped probabilities)."""
    X, y = _as_arrays(batch)
    _check_dims(params, X.shape[1])
    _, gw, gb = _loss_and_grad(params.w, params.b, X, y, l2)
    return gw, gb


def dataset_loss(params: ModelParams, ds: EncodedDataset, l2: float = 0.0) -> float:
    _check_dims(params, ds.dims)
    return _loss_and_grad(params.w, params.b, ds.X, ds.labels.astype(np.float64), l2, want_grad=False)[0]


# ---------------------------------------------------------------------------
# training

def _labeled(ds: EncodedDataset) -> EncodedDataset:
    if (ds.labels < 0).any():
        keep = [rid for rid, lab in zip(ds.ids, ds.labels) if lab >= 0]
        return ds.rows(keep)
    return ds


def _round_params(w: np.ndarray, b: float) -> ModelParams:
    # weights live as float32 in checkpoint files; keep memory and disk identical
    return ModelParams(w.astype(np.float32).astype(np.float64), float(b))


def train(ds: EncodedDataset, cfg: TrainConfig = TrainConfig(), init: Checkpoint | None = None) -> Checkpoint:
    """Fit the classifier on ``ds``, starting from ``init`` when given.

    Unlabeled rows are ignored. The returned checkpoint carries ``init``'s
    provenance plus one new stage entry.
    """
    ds = _labeled(ds)
    if init is not None:
        if init.featurizer != ds.featurizer:
            raise ConfigMismatch(f"init checkpoint featurizer {init.featurizer} != dataset featurizer {ds.featurizer}")
        _check_dims(init.params, ds.dims)
        w, b = init.params.w.copy(), init.params.b
    else:
        w, b = np.zeros(ds.dims), 0.0

    X, y = ds.X, ds.labels.astype(np.float64)
    n = len(ds)
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.learning_rate
    m_w = np.zeros_like(w)
    v_w = np.zeros_like(w)
    m_b = v_b = 0.0
    step = 0
    history: list[float] = []

    for epoch in range(cfg.epochs if n else 0):
        perm = rng.permutation(n)
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            loss, gw, gb = _loss_and_grad(w, b, X[idx], y[idx], cfg.l2)
            if not (np.isfinite(loss) and np.isfinite(gb) and np.all(np.isfinite(gw))):
                raise NonFiniteLoss(bi, epoch)
            if cfg.optimizer == "sgd":
                w -= lr * gw
                b -= lr * gb
            else:
                step += 1
                m_w = cfg.beta1 * m_w + (1 - cfg.beta1) * gw
                v_w = cfg.beta2 * v_w + (1 - cfg.beta2) * gw * gw
                m_b = cfg.beta1 * m_b + (1 - cfg.beta1) * gb
                v_b = cfg.beta2 * v_b + (1 - cfg.beta2) * gb * gb
                c1 = 1 - cfg.beta1**step
                c2 = 1 - cfg.beta2**step
                if cfg.weight_decay:
                    w -= lr * cfg.weight_decay * w
                w -= lr * (m_w / c1) / (np.sqrt(v_w / c2) + cfg.eps)
                b -= lr * (m_b / c1) / (np.sqrt(v_b / c2) + cfg.eps)
        epoch_loss = _loss_and_grad(w, b, X, y, cfg.l2, want_grad=False)[0]
        if not np.isfinite(epoch_loss):
            raise NonFiniteLoss(-1, epoch)
        history.append(epoch_loss)

    params = _round_params(w, b)
    final = _loss_and_grad(params.w, params.b, X, y, cfg.l2, want_grad=False)[0] if n else 0.0
    stage = StageRecord(ds.fingerprint(), n, cfg.to_obj(), final, history)
    prior = init.provenance if init is not None else ()
    return Checkpoint(params, ds.featurizer, prior + (stage,))


def tapt_train(
    aux: EncodedDataset,
    target: EncodedDataset,
    cfg_stage1: TrainConfig = TrainConfig(),
    cfg_stage2: TrainConfig = TrainConfig(),
) -> Checkpoint:
    """Train on the auxiliary task, then continue on the target task."""
    if aux.featurizer != target.featurizer:
        raise ConfigMismatch("auxiliary and target datasets use different featurizers")
    return train(target, cfg_stage2, init=train(aux, cfg_stage1))


# ---------------------------------------------------------------------------
# inference

def predict_dataset(ckpt: Checkpoint, ds: EncodedDataset) -> np.ndarray:
    if ckpt.featurizer != ds.featurizer:
        raise ConfigMismatch(f"checkpoint featurizer {ckpt.featurizer} != dataset featurizer {ds.featurizer}")
    _check_dims(ckpt.params, ds.dims)
    return _proba(ds.X @ ckpt.params.w + ckpt.params.b)


def classify(ckpt: Checkpoint, ds: EncodedDataset, threshold: float = 0.5) -> list[tuple[str, int, float]]:
    """``(record_id, label, probability)`` with label 1 iff probability >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    probs = predict_dataset(ckpt, ds)
    return [(rid, int(p >= threshold), float(p)) for rid, p in zip(ds.ids, probs)]


def tune_threshold(probs: Sequence[float], labels: Sequence[int]) -> float:
    """Threshold maximizing positive-class F1 on held-out data (ties: higher threshold).

    Off by default everywhere; a tuned threshold is only meaningful when
    chosen on data the reported metrics are not computed on.
    """
    from .metrics import ConfusionCounts, f1_positive

    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    best_t, best_f1 = 0.5, -1.0
    for t in sorted(set(p.tolist()), reverse=True):
        if not 0.0 < t < 1.0:
            continue
        pred = p >= t
        c = ConfusionCounts(
            int(np.sum(pred & (y == 1))), int(np.sum(pred & (y == 0))),
            int(np.sum(~pred & (y == 0))), int(np.sum(~pred & (y == 1))),
        )
        f1 = f1_positive(c).f1
        if f1 > best_f1:
            best_t, best_f1 = t, f1
    return best_t


def loss_trend_ok(history: Sequence[float], window: int = 3, tol: float = 1e-12) -> bool:
    """True when the trailing ``window``-epoch moving average of the loss never rises."""
    h = np.asarray(history, dtype=np.float64)
    if h.size <= window:
        return True
    ma = np.convolve(h, np.ones(window) / window, mode="valid")
    return bool(np.all(np.diff(ma) <= tol * np.maximum(1.0, np.abs(ma[:-1]))))
