"""Frozen-model evaluation: linear probing, caption-tile retrieval and masked
reconstruction error."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .model import JointModel, masked_positions
from .train import PatchDataset, mask_seed
from .masking import make_masks
from .tiles import MODALITY_BY_NAME


class EvaluationError(ValueError):
    pass


def _chunks(n: int, size: int):
    for i in range(0, n, size):
        yield np.arange(i, min(i + size, n))


def embed_tiles(model: JointModel, data: PatchDataset, chunk: int = 64) -> np.ndarray:
    """Mean-pooled encoder latents of every full (unmasked) tile, shape (T, d)."""
    n = model.cfg.n_patches
    out = []
    with ag.no_grad():
        for idx in _chunks(len(data), chunk):
            pos = np.broadcast_to(np.arange(n), (len(idx), n))
            out.append(model.encode_visible(data.s2[idx], pos).data.mean(axis=1))
    return np.concatenate(out)


def project_tiles(model: JointModel, data: PatchDataset, chunk: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm shared-space embeddings (v', t') for every tile and its caption."""
    n = model.cfg.n_patches
    vs, ts = [], []
    with ag.no_grad():
        for idx in _chunks(len(data), chunk):
            pos = np.broadcast_to(np.arange(n), (len(idx), n))
            z = model.encode_visible(data.s2[idx], pos)
            v, t = model.pool_and_project(z, model.encode_caption(data.tokens[idx]))
            vs.append(v.data)
            ts.append(t.data)
    return np.concatenate(vs), np.concatenate(ts)


def raw_pixel_features(data: PatchDataset) -> np.ndarray:
    """Per-band means of the normalised optical input: the baseline probe features."""
    t, n, _ = data.s2.shape
    return data.s2.reshape(t, n, MODALITY_BY_NAME["s2"].channels, -1).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class ProbeResult:
    accuracy: float
    chance: float
    n_classes: int
    n_train: int
    n_test: int
    baseline_accuracy: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def fit_softmax_probe(x_train: np.ndarray, y_train: np.ndarray, n_classes: int, epochs: int = 300,
                      lr: float = 0.5, weight_decay: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch gradient descent on multinomial cross-entropy; deterministic (zero init)."""
    w = np.zeros((x_train.shape[1], n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y_train]
    n = len(y_train)
    for _ in range(epochs):
        logits = x_train @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (x_train.T @ g + weight_decay * w)
        b -= lr * g.sum(axis=0)
    return w, b


def probe_accuracy(x_train, y_train, x_test, y_test, epochs: int = 300, lr: float = 0.5) -> tuple[float, int]:
    y_train = np.asarray(y_train)
    y_test = np.asarray(y_test)
    if len(np.unique(y_train)) < 2 or len(np.unique(y_test)) < 2:
        raise EvaluationError("linear probe needs at least two classes in both splits")
    classes = np.unique(np.concatenate([y_train, y_test]))
    remap = {c: i for i, c in enumerate(classes)}
    ytr = np.array([remap[c] for c in y_train])
    yte = np.array([remap[c] for c in y_test])
    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0) + 1e-8
    xtr = (x_train - mu) / sd
    xte = (x_test - mu) / sd
    w, b = fit_softmax_probe(xtr, ytr, len(classes), epochs, lr)
    pred = np.argmax(xte @ w + b, axis=1)
    return float(np.mean(pred == yte)), len(classes)


def linear_probe(model: JointModel, train: PatchDataset, test: PatchDataset,
                 train_labels=None, test_labels=None, epochs: int = 300, lr: float = 0.5,
                 baseline: bool = True) -> ProbeResult:
    """Train a softmax layer on frozen pooled features; labels default to each tile's dominant class."""
    y_train = train.dominant if train_labels is None else np.asarray(train_labels)
    y_test = test.dominant if test_labels is None else np.asarray(test_labels)
    acc, n_classes = probe_accuracy(embed_tiles(model, train), y_train, embed_tiles(model, test), y_test,
                                    epochs, lr)
    base = None
    if baseline:
        base, _ = probe_accuracy(raw_pixel_features(train), y_train, raw_pixel_features(test), y_test,
                                 epochs, lr)
    return ProbeResult(acc, 1.0 / n_classes, n_classes, len(y_train), len(y_test), base)


# ---------------------------------------------------------------------------
# retrieval


@dataclass
class RetrievalResult:
    direction: str  # "image_to_text" | "text_to_image"
    k: int
    hits: int
    queries: int

    @property
    def recall(self) -> float:
        return self.hits / self.queries

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recall"] = self.recall
        return d


def recall_at_k(sim: np.ndarray, k: int, direction: str = "image_to_text") -> RetrievalResult:
    """Row i of ``sim`` scores query i against every gallery item; the true match
    of query i is gallery item i. Equal scores rank by lower gallery index."""
    sim = np.asarray(sim, dtype=np.float64)
    n, m = sim.shape
    if n != m:
        raise EvaluationError(f"similarity matrix must be square, got {sim.shape}")
    if not 1 <= k <= m:
        raise EvaluationError(f"k={k} must lie in [1, gallery size {m}]")
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    hits = int(np.sum(order == np.arange(n)[:, None]))
    return RetrievalResult(direction, k, hits, n)


def retrieval_recall(model: JointModel, data: PatchDataset, k: int = 5) -> tuple[RetrievalResult, RetrievalResult]:
    if len(data) < k:
        raise EvaluationError(f"gallery of {len(data)} is smaller than k={k}")
    if len(set(data.captions)) < len(data.captions):
        warnings.warn("duplicate captions in the gallery; matches are counted by index", stacklevel=2)
    v, t = project_tiles(model, data)
    sim = v @ t.T
    return recall_at_k(sim, k, "image_to_text"), recall_at_k(sim.T, k, "text_to_image")


# ---------------------------------------------------------------------------
# reconstruction


def reconstruction_report(model: JointModel, data: PatchDataset, seeds=(0, 1, 2),
                          mask_ratio: float = 0.70, chunk: int = 64) -> dict[str, dict[str, float]]:
    """Masked l1 (continuous) or masked patch accuracy (categorical) per modality,
    averaged over tiles and fixed mask seeds."""
    n = model.cfg.n_patches
    sums = {m: 0.0 for m in model.decoders}
    count = 0
    with ag.no_grad():
        for seed in seeds:
            for idx in _chunks(len(data), chunk):
                ctx = np.stack([make_masks(model.cfg.grid, mask_ratio, min(0.25, mask_ratio),
                                           mask_seed(seed, 0, int(i))).ctx_visible for i in idx])
                hidden = masked_positions(ctx, n)
                rows = np.arange(len(idx))[:, None]
                z = model.encode_visible(data.s2[idx][rows, ctx], ctx)
                for name in model.decoders:
                    out = model.decode(z, ctx, name).data[rows, hidden]
                    target = data.targets[name][idx][rows, hidden]
                    if model.modalities[name].categorical:
                        sums[name] += float(np.sum(out.argmax(axis=-1) == target))
                    else:
                        sums[name] += float(np.sum(np.abs(out - target).mean(axis=-1)))
                count += hidden.size
    report = {}
    for name, total in sums.items():
        key = "accuracy" if model.modalities[name].categorical else "l1"
        report[name] = {key: total / count}
    return report
