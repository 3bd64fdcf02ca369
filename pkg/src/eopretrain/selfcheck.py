"""Fast internal verification: gradient oracles, mask invariants, closed-form
loss values and the caption verifier injection suite."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import losses
from .captions import caption_tile, find_conflicts, inject_contradiction, verify_and_revise
from .masking import make_masks
from .model import JointModel, ModelConfig, ema_update
from .synth import generate_tile
from .train import (AdamState, TrainConfig, adamw_step, batch_masks, cosine_lr, forward_parts,
                    prepare_dataset)

FAULTS = ("loss",)


@dataclass
class SuiteResult:
    name: str
    passed: int = 0
    failed: int = 0
    failures: list[str] = field(default_factory=list)
    seconds: float = 0.0

    def check(self, ok: bool, label: str) -> None:
        if ok:
            self.passed += 1
        else:
            self.failed += 1
            self.failures.append(label)


# ---------------------------------------------------------------------------
# tiny end-to-end setup shared by the gradient oracles


TINY_MODEL = dict(image_size=16, patch=8, dim=8, depth=1, heads=2, mlp_ratio=2.0, pred_dim=8, pred_depth=1,
                  dec_dim=8, text_width=8, text_depth=1, text_heads=2, text_max_len=12, text_dim=8,
                  proj_dim=8)


def tiny_setup(seed: int = 0, batch: int = 3):
    """A small random model plus one batch of real synthetic tiles."""
    mcfg = ModelConfig(init_seed=seed, **TINY_MODEL)
    cfg = TrainConfig(model=mcfg, batch_size=batch, seed=seed, temperature=0.5)
    tiles = [generate_tile(f"oracle{seed}-{i}", (16, 16), seed=seed) for i in range(batch)]
    data = prepare_dataset(tiles, mcfg)
    model = JointModel(mcfg)
    # move every parameter off its structured init so no gradient vanishes by symmetry
    rng = np.random.default_rng(seed + 1)
    for p in model.parameters().values():
        p.data = p.data + rng.normal(0.0, 0.3, p.shape)
    idx = np.arange(batch)
    ctx, tgt = batch_masks(cfg, 0, batch)
    return model, data, idx, ctx, tgt, cfg


def component_fn(component: str, model, data, idx, ctx, tgt, cfg, itc_fn=losses.loss_itc):
    """Scalar objective ``component`` (mpmae | jepa | itc | total) as a function
    for finite_diff_check (the argument is the perturbed parameter itself)."""
    def f(_):
        rec, jepa, itc = forward_parts(model, data, idx, ctx, tgt, cfg)
        if itc_fn is not losses.loss_itc:
            v, t = model.pool_and_project(
                model.encode_visible(data.s2[idx][np.arange(len(idx))[:, None], ctx], ctx),
                model.encode_caption(data.tokens[idx]))
            itc = itc_fn(v, t, cfg.temperature)
        if component == "mpmae":
            return losses.loss_mpmae(rec, cfg.lambdas)
        if component == "jepa":
            return jepa
        if component == "itc":
            return itc
        total, _ = losses.loss_total(rec, jepa, itc, cfg.lambdas, cfg.alpha, cfg.beta, cfg.temperature)
        return total
    return f


ORACLE_PARAMS = {
    "mpmae": ("encoder.embed.weight", "encoder.blocks.0.attn.qkv.weight", "decoders.s2.head.fc2.weight",
              "decoders.dw.block.mlp.fc1.weight", "decoders.canopy.mask_token"),
    "jepa": ("encoder.pos", "encoder.blocks.0.mlp.fc1.weight", "predictor.query",
             "predictor.blocks.0.attn.proj.weight", "predictor.out_proj.weight"),
    "itc": ("encoder.norm.gamma", "text.tok", "text.blocks.0.attn.qkv.weight", "proj_v.fc1.weight",
            "proj_t.fc2.weight"),
    "total": ("encoder.embed.bias", "encoder.blocks.0.norm1.gamma", "decoders.esa.in_proj.weight",
              "predictor.in_proj.weight", "text.out.weight"),
}


def gradient_oracle(component: str, seed: int = 0, coords: int = 6, itc_fn=losses.loss_itc,
                    eps: float = 1e-4) -> float:
    """Largest relative finite-difference error over a sample of coordinates of
    several parameters feeding ``component``."""
    model, data, idx, ctx, tgt, cfg = tiny_setup(seed)
    params = model.parameters()
    f = component_fn(component, model, data, idx, ctx, tgt, cfg, itc_fn)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in ORACLE_PARAMS[component]:
        p = params[name]
        picks = rng.choice(p.size, size=min(coords, p.size), replace=False)
        worst = max(worst, ag.finite_diff_check(f, p, eps=eps, indices=picks))
    return worst


def _corrupted_itc(v, t, temperature=losses.DEFAULT_TEMPERATURE):
    # test hook: a deliberately wrong objective (off by a constant and with a skewed gradient)
    return losses.loss_itc(v, t, temperature) * 1.05 + 0.01


# ---------------------------------------------------------------------------
# suites


def suite_gradients(itc_fn=losses.loss_itc) -> SuiteResult:
    r = SuiteResult("gradient oracles")
    for component in ("mpmae", "jepa", "itc", "total"):
        for seed in (0, 1):
            err = gradient_oracle(component, seed, itc_fn=itc_fn)
            r.check(err < 1e-3, f"{component} seed {seed}: max relative error {err:.2e}")
    # the analytic gradient must match a reference objective, not just itself
    if itc_fn is not losses.loss_itc:
        model, data, idx, ctx, tgt, cfg = tiny_setup(0)
        good = component_fn("itc", model, data, idx, ctx, tgt, cfg)(None).item()
        bad = component_fn("itc", model, data, idx, ctx, tgt, cfg, itc_fn)(None).item()
        r.check(abs(good - bad) < 1e-12, f"itc objective deviates from reference by {abs(good - bad):.3g}")
    return r


def suite_masks(draws: int = 1000) -> SuiteResult:
    r = SuiteResult("mask invariants")
    grid = (8, 8)
    n = 64
    want = round(0.30 * n)
    for seed in range(draws):
        m = make_masks(grid, 0.70, 0.25, seed)
        ok = (len(np.intersect1d(m.ctx_visible, m.tgt_visible)) == 0 and len(m.ctx_visible) == want
              and len(np.unique(m.ctx_visible)) == want)
        r.check(ok, f"draw {seed}")
    return r


def suite_closed_form(itc_fn=losses.loss_itc) -> SuiteResult:
    r = SuiteResult("closed-form oracles")
    e = np.eye(2)
    val = itc_fn(ag.Tensor(e), ag.Tensor(e), 1.0).item()
    r.check(abs(val - math.log1p(math.exp(-1.0))) < 1e-9, f"itc B=2 orthonormal: {val}")
    one = ag.Tensor(np.array([[0.6, 0.8]]))
    val = itc_fn(one, one, 0.07).item()
    r.check(val == 0.0, f"itc B=1: {val}")
    pred = np.random.default_rng(0).normal(size=(2, 4, 3))
    val = losses.loss_rec_l1(ag.Tensor(pred + 0.25), pred, np.array([[0, 2], [1, 3]])).item()
    r.check(abs(val - 0.25) < 1e-12, f"l1 constant offset: {val}")
    val = losses.loss_rec_ce(ag.Tensor(np.zeros((2, 4, 7))), np.zeros((2, 4), int), np.array([[0], [3]])).item()
    r.check(abs(val - math.log(7)) < 1e-12, f"ce uniform logits: {val}")
    total, rep = losses.loss_total({"s2": ag.Tensor(1.0)}, ag.Tensor(1.0), ag.Tensor(1.0), {"s2": 1.0}, 0.5, 0.4)
    r.check(abs(total.item() - 1.9) < 1e-12, f"weighted total: {total.item()}")
    p = {"w": np.array([0.0])}
    adamw_step(p, {"w": np.array([1.0])}, AdamState(), 0.1, 0.0)
    r.check(abs(p["w"][0] + 0.1) < 1e-6, f"adamw first step: {p['w'][0]}")
    r.check(cosine_lr(10, 100, 1e-4, 10) == 1e-4 and cosine_lr(100, 100, 1e-4, 10) == 0.0, "cosine endpoints")
    target = {"a": ag.Tensor(np.array([0.0]))}
    ema_update({"a": ag.Tensor(np.array([1.0]))}, target, 0.996)
    r.check(abs(target["a"].data[0] - 0.004) < 1e-15, f"ema scalar: {target['a'].data[0]}")
    return r


def suite_captions(n: int = 100) -> SuiteResult:
    r = SuiteResult("caption verifier")
    for i in range(n):
        tile = generate_tile(f"selfcheck-{i:03d}", (16, 16), seed=7)
        audit = caption_tile(tile)
        bad = inject_contradiction(tile, audit.final_caption, i)
        revised, conflicts = verify_and_revise(tile, bad)
        ok = bool(conflicts) and not find_conflicts(revised, tile) and verify_and_revise(tile, revised) == (revised, [])
        r.check(ok, f"tile {i}: {bad!r}")
    return r


def run_selfcheck(fault: str | None = None) -> list[SuiteResult]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; known: {FAULTS}")
    itc_fn = _corrupted_itc if fault == "loss" else losses.loss_itc
    results = []
    for fn in (lambda: suite_gradients(itc_fn), suite_masks, lambda: suite_closed_form(itc_fn), suite_captions):
        t0 = time.perf_counter()
        res = fn()
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results
