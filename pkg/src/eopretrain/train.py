"""Pretraining loop: batching, masking, all three objectives, AdamW with a
warmup+cosine schedule, EMA target updates, checkpoints and a JSON-lines
metrics log."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .captions import encode_text
from .losses import (DEFAULT_TEMPERATURE, DEFAULT_ALPHA, DEFAULT_BETA, LossReport, loss_itc,
                     loss_jepa, loss_rec_ce, loss_rec_l1, loss_total)
from .masking import make_masks, patchify
from .model import JointModel, ModelConfig, masked_positions, save_checkpoint
from .tiles import MODALITIES, ConfigurationError, TileSample, load_dataset, read_index, read_tile

log = logging.getLogger(__name__)

DEFAULT_WEIGHT_DECAY = 0.05
DEFAULT_EMA = 0.996
DEFAULT_MASK_RATIO = 0.70


class DataError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


class NonFiniteGradientError(NumericError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    manifest: str = ""
    out_dir: str = ""
    epochs: int = 13
    steps: int = 200  # 0 means epochs * batches-per-epoch
    batch_size: int = 32
    lr_base: float = 5e-4
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_steps: int = -1  # -1 means 5% of the total
    grad_clip: float = 0.0  # 0 disables clipping
    mask_ratio: float = DEFAULT_MASK_RATIO
    target_fraction: float = 0.25
    ema_momentum: float = DEFAULT_EMA
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    temperature: float = DEFAULT_TEMPERATURE
    lambdas: dict = field(default_factory=lambda: {m.name: m.loss_weight for m in MODALITIES})
    normalize_targets: bool = False
    compute_skipped_branches: bool = False
    seed: int = 0
    failure_budget: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.steps >= 0, "steps must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.lr_base > 0, "lr_base must be positive"),
            (self.weight_decay >= 0, "weight_decay must be >= 0"),
            (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "Adam betas must lie in [0, 1)"),
            (self.adam_eps > 0, "adam_eps must be positive"),
            (0 < self.mask_ratio < 1, "mask_ratio must lie in (0, 1)"),
            (0 < self.target_fraction <= self.mask_ratio, "target_fraction must lie in (0, mask_ratio]"),
            (0 <= self.ema_momentum <= 1, "ema_momentum must lie in [0, 1]"),
            (self.alpha >= 0 and self.beta >= 0, "alpha and beta must be >= 0"),
            (self.temperature > 0, "temperature must be positive"),
            (self.grad_clip >= 0, "grad_clip must be >= 0"),
            (self.failure_budget >= 0, "failure_budget must be >= 0"),
            (all(w >= 0 for w in self.lambdas.values()), "modality weights must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigurationError(msg)
        unknown = set(self.lambdas) - {m.name for m in MODALITIES}
        if unknown:
            raise ConfigurationError(f"unknown modality weight {sorted(unknown)[0]!r}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"}
        d["lambdas"] = dict(self.lambdas)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        return cls(model=model, **d)


# ---------------------------------------------------------------------------
# optimisation primitives


def cosine_lr(step: int, total_steps: int, lr_base: float, warmup_steps: int = 0) -> float:
    """Linear warmup reaching ``lr_base`` at ``warmup_steps``, then cosine decay to 0 at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return lr_base * (step + 1) / (warmup_steps + 1)
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return lr_base * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([float(self.t)])}
        out.update({f"m.{k}": a for k, a in self.m.items()})
        out.update({f"v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict) -> "AdamState":
        st = cls(t=int(arrays["t"][0]) if "t" in arrays else 0)
        for k, a in arrays.items():
            if k.startswith("m."):
                st.m[k[2:]] = np.array(a)
            elif k.startswith("v."):
                st.v[k[2:]] = np.array(a)
        return st


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, wd: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place AdamW update. ``params`` maps names to Tensors or arrays;
    names absent from ``grads`` are left untouched. Raises before touching
    anything if a gradient is non-finite."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {k}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, g in grads.items():
        p = params[k]
        w = p.data if isinstance(p, ag.Tensor) else p
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(w)
            state.v[k] = np.zeros_like(w)
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if wd:
            w -= lr * wd * w
        w -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# data


def patch_mode(labels: np.ndarray, patch: int, n_classes: int) -> np.ndarray:
    """Most frequent class in every patch (lowest id on ties)."""
    p = patchify(labels[None].astype(np.int64), patch)
    counts = np.zeros((p.shape[0], n_classes), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(p.shape[0]), p.shape[1]), p.reshape(-1)), 1)
    return counts.argmax(axis=1)


@dataclass
class PatchDataset:
    """Tiles converted once into normalised patch arrays."""
    tile_ids: list[str]
    s2: np.ndarray                    # (T, N, C*p*p) normalised encoder input
    targets: dict[str, np.ndarray]    # continuous: (T, N, C*p*p); categorical: (T, N) labels
    tokens: np.ndarray                # (T, L)
    dominant: np.ndarray              # (T,)
    captions: list[str]

    def __len__(self) -> int:
        return len(self.tile_ids)

    def subset(self, idx) -> "PatchDataset":
        idx = np.asarray(idx)
        return PatchDataset([self.tile_ids[i] for i in idx], self.s2[idx],
                            {k: v[idx] for k, v in self.targets.items()}, self.tokens[idx],
                            self.dominant[idx], [self.captions[i] for i in idx])


def prepare_dataset(tiles: list[TileSample], cfg: ModelConfig) -> PatchDataset:
    if not tiles:
        raise DataError("no tiles to train on")
    p = cfg.patch
    s2, tokens, dom, caps = [], [], [], []
    targets = {m.name: [] for m in MODALITIES}
    for t in tiles:
        if t.geometry != (cfg.image_size, cfg.image_size):
            raise DataError(f"tile {t.tile_id} is {t.geometry}, model expects {cfg.image_size}x{cfg.image_size}")
        for m in MODALITIES:
            raster = t.raster(m.name)
            if m.categorical:
                targets[m.name].append(patch_mode(raster, p, m.channels))
            else:
                targets[m.name].append(patchify(m.normalize(raster), p))
        s2.append(targets["s2"][-1])
        tokens.append(encode_text(t.caption, cfg.text_max_len))
        dom.append(t.attributes.dominant_class if t.attributes else -1)
        caps.append(t.caption)
    return PatchDataset([t.tile_id for t in tiles], np.stack(s2),
                        {k: np.stack(v) for k, v in targets.items()},
                        np.asarray(tokens, dtype=np.int64), np.asarray(dom), caps)


def load_tiles(manifest, failure_budget: int = 0) -> list[TileSample]:
    """Read tiles from an index file (or its directory), skipping unreadable
    ones until more than ``failure_budget`` have failed."""
    path = Path(manifest)
    if path.is_dir():
        path = path / "index.tsv"
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    entries = read_index(path)
    if not entries:
        raise DataError(f"manifest {path} lists no tiles")
    tiles, failures = [], 0
    for e in entries:
        p = Path(e.path)
        try:
            tiles.append(read_tile(p if p.is_absolute() else path.parent / p))
        except Exception as exc:  # any unreadable tile counts against the budget
            failures += 1
            log.warning("skipping tile %s: %s", e.tile_id, exc)
            if failures > failure_budget:
                raise DataError(f"{failures} unreadable tiles exceed the failure budget "
                                f"of {failure_budget}; last: {e.path}: {exc}") from exc
    return tiles


def mask_seed(seed: int, step: int, slot: int) -> int:
    return int(np.random.SeedSequence([seed, step, slot]).generate_state(1)[0])


def batch_masks(cfg: TrainConfig, step: int, batch: int):
    pairs = [make_masks(cfg.model.grid, cfg.mask_ratio, cfg.target_fraction, mask_seed(cfg.seed, step, i))
             for i in range(batch)]
    ctx = np.stack([m.ctx_visible for m in pairs])
    tgt = np.stack([m.tgt_visible for m in pairs])
    return ctx, tgt


# ---------------------------------------------------------------------------
# one step


def forward_parts(model: JointModel, data: PatchDataset, idx: np.ndarray, ctx: np.ndarray,
                  tgt: np.ndarray, cfg: TrainConfig):
    """Build the graph for one batch: (per-modality reconstruction losses, jepa, itc).
    A branch whose weight is zero is returned as None unless
    ``cfg.compute_skipped_branches`` is set."""
    rows = np.arange(len(idx))[:, None]
    s2 = data.s2[idx]
    z = model.encode_visible(s2[rows, ctx], ctx)
    hidden = masked_positions(ctx, model.cfg.n_patches)
    rec = {}
    for name in cfg.lambdas:
        out = model.decode(z, ctx, name)
        target = data.targets[name][idx]
        if model.modalities[name].categorical:
            rec[name] = loss_rec_ce(out, target, hidden)
        else:
            rec[name] = loss_rec_l1(out, target, hidden, cfg.normalize_targets)
    jepa = itc = None
    if cfg.alpha > 0 or cfg.compute_skipped_branches:
        z_tgt = model.encode_target(s2[rows, tgt], tgt)
        jepa = loss_jepa(model.jepa_predict(z, ctx, tgt), z_tgt)
    if cfg.beta > 0 or cfg.compute_skipped_branches:
        v, t = model.pool_and_project(z, model.encode_caption(data.tokens[idx]))
        itc = loss_itc(v, t, cfg.temperature)
    return rec, jepa, itc


def forward_losses(model: JointModel, data: PatchDataset, idx: np.ndarray, ctx: np.ndarray,
                   tgt: np.ndarray, cfg: TrainConfig):
    """Build the graph for one batch and return (total, report)."""
    rec, jepa, itc = forward_parts(model, data, idx, ctx, tgt, cfg)
    return loss_total(rec, jepa, itc, cfg.lambdas, cfg.alpha, cfg.beta, cfg.temperature)


def clip_gradients(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class TrainResult:
    model: JointModel
    optimizer: AdamState
    reports: list[LossReport]
    checkpoint: Path | None
    metrics: Path | None
    seconds: float

    @property
    def totals(self) -> list[float]:
        return [r.total for r in self.reports]


def total_steps(cfg: TrainConfig, n_tiles: int) -> tuple[int, int]:
    per_epoch = max(n_tiles // cfg.batch_size, 1)
    if cfg.steps:
        return cfg.steps, per_epoch
    return cfg.epochs * per_epoch, per_epoch


def train(cfg: TrainConfig, tiles: list[TileSample] | None = None,
          data: PatchDataset | None = None, progress=None) -> TrainResult:
    """Pretrain from scratch. Data come from ``data``, ``tiles`` or ``cfg.manifest``,
    in that order of preference. With an empty ``out_dir`` nothing is written."""
    t0 = time.perf_counter()
    if data is None:
        if tiles is None:
            if not cfg.manifest:
                raise ConfigurationError("missing field: manifest")
            tiles = load_tiles(cfg.manifest, cfg.failure_budget)
        data = prepare_dataset(tiles, cfg.model)
    model = JointModel(cfg.model)
    opt = AdamState()
    n_steps, per_epoch = total_steps(cfg, len(data))
    warmup = cfg.warmup_steps if cfg.warmup_steps >= 0 else int(round(0.05 * n_steps))
    batch = min(cfg.batch_size, len(data))

    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    metrics_path = ckpt_path = None
    fh = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        fh = open(metrics_path, "w", encoding="utf-8")
    reports: list[LossReport] = []
    params = model.parameters()
    # where the run is written is not part of its result
    meta = {"train": {k: v for k, v in cfg.to_dict().items() if k != "out_dir"}}
    try:
        step = 0
        epoch = 0
        while step < n_steps:
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data))
            for b in range(per_epoch):
                if step >= n_steps:
                    break
                idx = order[b * batch:(b + 1) * batch]
                ctx, tgt = batch_masks(cfg, step, len(idx))
                lr = cosine_lr(step, n_steps, cfg.lr_base, warmup)
                model.zero_grad()
                total, report = forward_losses(model, data, idx, ctx, tgt, cfg)
                if not np.isfinite(report.total):
                    raise NumericError(f"non-finite loss at step {step + 1}")
                total.backward()
                grads = {k: p.grad for k, p in params.items() if p.grad is not None}
                clip_gradients(grads, cfg.grad_clip)
                adamw_step(params, grads, opt, lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps)
                model.ema_update(cfg.ema_momentum)
                step += 1
                reports.append(report)
                if fh:
                    rec = {"step": step, "epoch": epoch, "lr": lr, "rec": report.rec, "jepa": report.jepa,
                           "itc": report.itc, "total": report.total,
                           "wall_time": round(time.perf_counter() - t0, 3)}
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if progress:
                    progress(step, n_steps, report)
            epoch += 1
            if out_dir:
                fh.flush()
                ckpt_path = save_checkpoint(out_dir / "last.ckpt", model, opt.to_arrays(), step,
                                            {"epoch": epoch, **meta})
        if out_dir:
            ckpt_path = save_checkpoint(out_dir / "final.ckpt", model, opt.to_arrays(), step,
                                        {"epoch": epoch, **meta})
    finally:
        if fh:
            fh.close()
    return TrainResult(model, opt, reports, ckpt_path, metrics_path, time.perf_counter() - t0)
