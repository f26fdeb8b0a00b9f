"""Grid descriptors, linear encoders and InfoNCE training.

A branch encoder is a single linear projection plus bias followed by L2
normalization; the same encoder embeds both the query image and the overhead
reference of that branch. Temperature is learned as ``log_tau``.
"""

from __future__ import annotations

import csv
import math
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .imaging import ImageBuffer, _atomic_write

N_ORIENTATION_BINS = 8
DEFAULT_TAU = 0.07


class DegenerateEmbeddingWarning(UserWarning):
    """Raised when a projection is exactly zero and e1 is substituted."""


def descriptor_length(grid: int, channels: int) -> int:
    return grid * grid * (channels + N_ORIENTATION_BINS)


def extract_descriptor(img: ImageBuffer, grid: int = 4) -> np.ndarray:
    """Per-cell mean color and magnitude-weighted orientation histogram.

    The image is split into ``grid`` x ``grid`` cells. Each cell contributes
    its per-channel mean followed by 8 orientation bins of the luminance
    gradient (bin 0 centered on +x, counter-clockwise in image coordinates
    with rows pointing down), normalized by the cell's pixel count.
    """
    if img.height < grid or img.width < grid:
        raise ValueError(f"image {img.height}x{img.width} is smaller than a {grid}x{grid} grid")
    px = img.pixels
    gray = px.mean(axis=2)
    if gray.shape[0] > 1:
        gy = np.gradient(gray, axis=0)
    else:
        gy = np.zeros_like(gray)
    gx = np.gradient(gray, axis=1) if gray.shape[1] > 1 else np.zeros_like(gray)
    mag = np.hypot(gx, gy)
    angle = np.arctan2(-gy, gx)
    bins = np.floor((angle + math.pi / N_ORIENTATION_BINS) / (2 * math.pi / N_ORIENTATION_BINS))
    bins = np.mod(bins.astype(np.int64), N_ORIENTATION_BINS)

    row_edges = np.linspace(0, img.height, grid + 1).astype(int)
    col_edges = np.linspace(0, img.width, grid + 1).astype(int)
    parts = []
    for r in range(grid):
        rs = slice(row_edges[r], row_edges[r + 1])
        for c in range(grid):
            cs = slice(col_edges[c], col_edges[c + 1])
            cell = px[rs, cs]
            count = cell.shape[0] * cell.shape[1]
            hist = np.bincount(
                bins[rs, cs].ravel(), weights=mag[rs, cs].ravel(), minlength=N_ORIENTATION_BINS
            )
            parts.append(cell.reshape(-1, img.channels).mean(axis=0))
            parts.append(hist / count)
    return np.concatenate(parts)


@dataclass
class EncoderParams:
    projection: np.ndarray  # (descriptor_len, d)
    bias: np.ndarray  # (d,)
    log_tau: float = math.log(DEFAULT_TAU)

    def __post_init__(self):
        self.projection = np.asarray(self.projection, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.log_tau = float(self.log_tau)
        if self.projection.ndim != 2 or self.projection.shape[1] < 2:
            raise ValueError("projection must be a (descriptor_len, d>=2) matrix")
        if self.bias.shape != (self.projection.shape[1],):
            raise ValueError("bias length must equal the embedding dimension")

    @property
    def tau(self) -> float:
        return math.exp(self.log_tau)

    @property
    def dim(self) -> int:
        return self.projection.shape[1]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.projection.copy(), self.bias.copy(), self.log_tau)

    @classmethod
    def initialize(cls, descriptor_len: int, dim: int, seed: int) -> "EncoderParams":
        """Glorot-uniform projection, zero bias, tau = 0.07."""
        rng = np.random.default_rng(seed)
        a = math.sqrt(6.0 / (descriptor_len + dim))
        return cls(rng.uniform(-a, a, size=(descriptor_len, dim)), np.zeros(dim))


def _normalize_rows(z: np.ndarray):
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    degenerate = norms[:, 0] == 0
    safe = np.where(norms == 0, 1.0, norms)
    y = z / safe
    if degenerate.any():
        y[degenerate] = 0.0
        y[degenerate, 0] = 1.0
    return y, norms, degenerate


def encode_many(descs: np.ndarray, params: EncoderParams) -> tuple[np.ndarray, np.ndarray]:
    """Embed a stack of descriptors; returns unit rows and a degenerate-row mask."""
    descs = np.atleast_2d(np.asarray(descs, dtype=np.float64))
    if descs.shape[1] != params.projection.shape[0]:
        raise ValueError(
            f"descriptor length {descs.shape[1]} does not match projection "
            f"input {params.projection.shape[0]}"
        )
    y, _, degenerate = _normalize_rows(descs @ params.projection + params.bias)
    return y, degenerate


def encode(desc: np.ndarray, params: EncoderParams) -> np.ndarray:
    y, degenerate = encode_many(desc, params)
    if degenerate[0]:
        warnings.warn("zero projection; substituting e1", DegenerateEmbeddingWarning, stacklevel=2)
    return y[0]


# --- InfoNCE ----------------------------------------------------------------


def _logsumexp(z: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(z, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(z - m), axis=axis))


def info_nce_loss(q: np.ndarray, refs: np.ndarray, positive: int, tau: float) -> float:
    """-log softmax(q . refs / tau)[positive]."""
    q = np.asarray(q, dtype=np.float64)
    refs = np.atleast_2d(np.asarray(refs, dtype=np.float64))
    if refs.shape[0] < 2:
        raise ValueError("InfoNCE needs at least one negative reference")
    if not 0 <= positive < refs.shape[0]:
        raise ValueError(f"positive index {positive} out of range")
    if not (tau > 0 and math.isfinite(tau)):
        raise ValueError(f"temperature must be positive and finite, got {tau}")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(refs))):
        raise ValueError("non-finite embedding")
    logits = refs @ q / tau
    return float(_logsumexp(logits, axis=0) - logits[positive])


def info_nce_batch(
    queries: np.ndarray,
    refs: np.ndarray,
    log_tau: float,
    symmetric: bool = True,
):
    """Mean in-batch InfoNCE with gradients.

    Row k of ``refs`` is the positive for query k; every other row is a
    negative. With ``symmetric`` the query->reference and reference->query
    losses are averaged.

    Returns:
        (loss, d_queries, d_refs, d_log_tau)
    """
    queries = np.asarray(queries, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    n = queries.shape[0]
    if n < 2 or refs.shape != queries.shape:
        raise ValueError("need row-aligned query/reference batches of size >= 2")
    if not (np.all(np.isfinite(queries)) and np.all(np.isfinite(refs)) and math.isfinite(log_tau)):
        raise ValueError("non-finite input")

    inv_tau = math.exp(-log_tau)
    logits = queries @ refs.T * inv_tau
    diag = np.diagonal(logits)
    eye = np.eye(n)

    row_lse = _logsumexp(logits, axis=1)
    loss = np.mean(row_lse - diag)
    grad = np.exp(logits - row_lse[:, None]) - eye
    if symmetric:
        col_lse = _logsumexp(logits, axis=0)
        loss = 0.5 * (loss + np.mean(col_lse - diag))
        grad = 0.5 * (grad + np.exp(logits - col_lse[None, :]) - eye)
    grad /= n

    d_queries = grad @ refs * inv_tau
    d_refs = grad.T @ queries * inv_tau
    d_log_tau = -float(np.sum(grad * logits))
    return float(loss), d_queries, d_refs, d_log_tau


def _normalize_backward(y: np.ndarray, norms: np.ndarray, dy: np.ndarray) -> np.ndarray:
    safe = np.where(norms == 0, 1.0, norms)
    return (dy - y * np.sum(y * dy, axis=1, keepdims=True)) / safe


def branch_loss_and_grads(
    params: EncoderParams,
    query_desc: np.ndarray,
    ref_desc: np.ndarray,
    symmetric: bool = True,
):
    """Batch loss of a branch encoder and gradients w.r.t. its parameters."""
    zq = query_desc @ params.projection + params.bias
    zr = ref_desc @ params.projection + params.bias
    yq, nq, _ = _normalize_rows(zq)
    yr, nr, _ = _normalize_rows(zr)
    loss, dyq, dyr, dlt = info_nce_batch(yq, yr, params.log_tau, symmetric)
    dzq = _normalize_backward(yq, nq, dyq)
    dzr = _normalize_backward(yr, nr, dyr)
    grads = EncoderParams(
        query_desc.T @ dzq + ref_desc.T @ dzr,
        dzq.sum(axis=0) + dzr.sum(axis=0),
        dlt,
    )
    return loss, grads


# --- training ------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 40
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    branch: Literal["street", "bev"] = "street"
    dim: int = 64
    symmetric: bool = True
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 (InfoNCE needs a negative)")
        if self.epochs < 0 or self.lr < 0 or self.weight_decay < 0:
            raise ValueError("epochs, lr and weight decay must be non-negative")
        if self.branch not in ("street", "bev"):
            raise ValueError(f"unknown branch {self.branch!r}")
        if self.dim < 2:
            raise ValueError("embedding dimension must be >= 2")


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam over EncoderParams.

    Weight decay touches only the projection; bias and temperature are
    left undecayed.
    """

    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    _m: list = field(default_factory=list)
    _v: list = field(default_factory=list)

    def step(self, params: EncoderParams, grads: EncoderParams) -> None:
        values = [params.projection, params.bias, np.array(params.log_tau)]
        gvals = [grads.projection, grads.bias, np.array(grads.log_tau)]
        if not self._m:
            self._m = [np.zeros_like(g) for g in gvals]
            self._v = [np.zeros_like(g) for g in gvals]
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.step_count
        c2 = 1 - b2**self.step_count
        updated = []
        for k, (p, g) in enumerate(zip(values, gvals)):
            self._m[k] = b1 * self._m[k] + (1 - b1) * g
            self._v[k] = b2 * self._v[k] + (1 - b2) * g * g
            update = (self._m[k] / c1) / (np.sqrt(self._v[k] / c2) + self.eps)
            if k == 0 and self.weight_decay:
                update = update + self.weight_decay * p
            updated.append(p - self.lr * update)
        params.projection, params.bias = updated[0], updated[1]
        params.log_tau = float(updated[2])


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    chunks = [order[s : s + batch_size] for s in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


@dataclass
class LossCurve:
    epochs: list[int] = field(default_factory=list)
    mean_loss: list[float] = field(default_factory=list)
    tau: list[float] = field(default_factory=list)

    def append(self, epoch: int, loss: float, tau: float) -> None:
        self.epochs.append(epoch)
        self.mean_loss.append(loss)
        self.tau.append(tau)

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "mean_loss", "tau"])
            for row in zip(self.epochs, self.mean_loss, self.tau):
                writer.writerow([row[0], repr(row[1]), repr(row[2])])


def train_branch(
    query_desc: np.ndarray,
    ref_desc: np.ndarray,
    config: TrainConfig,
    init: EncoderParams | None = None,
) -> tuple[EncoderParams, LossCurve]:
    """Fit one branch encoder on row-aligned query/reference descriptors.

    Epoch 0 of the returned curve is the loss before any update. Shuffling
    and initialization both derive from ``config.seed``.
    """
    query_desc = np.asarray(query_desc, dtype=np.float64)
    ref_desc = np.asarray(ref_desc, dtype=np.float64)
    n = query_desc.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 training pairs, got {n}")
    if ref_desc.shape != query_desc.shape:
        raise ValueError("query and reference descriptors must be row-aligned")

    params = init.copy() if init is not None else EncoderParams.initialize(
        query_desc.shape[1], config.dim, config.seed
    )
    opt = AdamW(config.lr, config.betas, config.eps, config.weight_decay)
    rng = np.random.default_rng([config.seed, 1])
    batch = min(config.batch_size, n)

    def epoch_loss() -> float:
        chunks = _batches(np.arange(n), batch)
        losses = [branch_loss_and_grads(params, query_desc[c], ref_desc[c], config.symmetric)[0] for c in chunks]
        return float(np.mean(losses))

    curve = LossCurve()
    curve.append(0, epoch_loss(), params.tau)
    for epoch in range(1, config.epochs + 1):
        losses = []
        for chunk in _batches(rng.permutation(n), batch):
            loss, grads = branch_loss_and_grads(params, query_desc[chunk], ref_desc[chunk], config.symmetric)
            opt.step(params, grads)
            losses.append(loss)
        curve.append(epoch, float(np.mean(losses)), params.tau)
    return params, curve


# --- embedding containers and files -----------------------------------------


@dataclass(eq=False)
class EmbeddingMatrix:
    vectors: np.ndarray
    ids: list[str]

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        self.ids = [str(i) for i in self.ids]
        if len(self.ids) != self.vectors.shape[0]:
            raise ValueError("one id per embedding row is required")

    def __len__(self) -> int:
        return len(self.ids)

    def check_unit_norm(self, tol: float = 1e-6) -> None:
        norms = np.linalg.norm(self.vectors, axis=1)
        bad = [self.ids[k] for k in np.flatnonzero(np.abs(norms - 1.0) > tol)]
        if bad:
            raise ValueError(f"{len(bad)} rows are not unit-norm, e.g. {bad[:5]}")

    def subset(self, ids: Sequence[str]) -> "EmbeddingMatrix":
        pos = {k: n for n, k in enumerate(self.ids)}
        missing = [i for i in ids if i not in pos]
        if missing:
            raise KeyError(f"ids not in embedding matrix: {missing[:5]}")
        return EmbeddingMatrix(self.vectors[[pos[i] for i in ids]], list(ids))


PARAMS_MAGIC = b"EPBE"
MATRIX_MAGIC = b"EPBM"
FORMAT_VERSION = 1


def save_params(params: EncoderParams, path: str | os.PathLike) -> None:
    rows, dim = params.projection.shape
    blob = PARAMS_MAGIC + struct.pack("<3I", FORMAT_VERSION, rows, dim)
    blob += params.projection.astype("<f8").tobytes()
    blob += params.bias.astype("<f8").tobytes()
    blob += struct.pack("<d", params.log_tau)
    _atomic_write(Path(path), blob)


def load_params(path: str | os.PathLike) -> EncoderParams:
    raw = Path(path).read_bytes()
    if raw[:4] != PARAMS_MAGIC:
        raise ValueError(f"{path}: not an encoder parameter file")
    version, rows, dim = struct.unpack_from("<3I", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 16
    proj = np.frombuffer(raw, "<f8", rows * dim, off).reshape(rows, dim)
    off += 8 * rows * dim
    bias = np.frombuffer(raw, "<f8", dim, off)
    (log_tau,) = struct.unpack_from("<d", raw, off + 8 * dim)
    return EncoderParams(proj.copy(), bias.copy(), log_tau)


def save_embeddings(emb: EmbeddingMatrix, path: str | os.PathLike) -> None:
    n, d = emb.vectors.shape
    parts = [MATRIX_MAGIC, struct.pack("<3I", FORMAT_VERSION, n, d), emb.vectors.astype("<f4").tobytes()]
    for ident in emb.ids:
        encoded = ident.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
    _atomic_write(Path(path), b"".join(parts))


def load_embeddings(path: str | os.PathLike) -> EmbeddingMatrix:
    raw = Path(path).read_bytes()
    if raw[:4] != MATRIX_MAGIC:
        raise ValueError(f"{path}: not an embedding matrix file")
    version, n, d = struct.unpack_from("<3I", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 16
    vectors = np.frombuffer(raw, "<f4", n * d, off).reshape(n, d).astype(np.float64)
    off += 4 * n * d
    ids = []
    for _ in range(n):
        (length,) = struct.unpack_from("<I", raw, off)
        off += 4
        ids.append(raw[off : off + length].decode("utf-8"))
        off += length
    return EmbeddingMatrix(vectors, ids)
