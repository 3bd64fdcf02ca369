"""Command-line entry point: ``eopretrain <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (including a failed self-check).
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import logging
import subprocess
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from .captions import DEFAULT_K, CaptionError, caption_tile
from .config import ConfigParseError, config_reference, format_config, load_config
from .model import CheckpointError, load_checkpoint
from .synth import generate_tile
from .tiles import (INDEX_NAME, ConfigurationError, TileFormatError, index_entry, load_dataset,
                    write_index, write_tile)
from .train import DataError, NumericError, forward_losses, batch_masks, load_tiles, prepare_dataset, train

log = logging.getLogger("eopretrain")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# run manifest


def version_string() -> str:
    try:
        base = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        base = "0+unknown"
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{base}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return base


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str
    started: str
    finished: str = ""
    outputs: list[str] = dataclasses.field(default_factory=list)

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        tmp.replace(path)
        return path


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _start(command: str, config: dict, seed: int) -> RunManifest:
    return RunManifest(command, config, seed, version_string(), _now())


def _finish(man: RunManifest, out_dir: Path, outputs) -> None:
    man.finished = _now()
    man.outputs = sorted(str(p) for p in outputs)
    man.write(out_dir)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    out = Path(args.out_dir)
    (out / "tiles").mkdir(parents=True, exist_ok=True)
    man = _start("gen-data", {"n": args.n, "size": args.size, "patch": args.patch, "k": args.k,
                              "seed": args.seed, "out_dir": str(out)}, args.seed)
    entries, audits, failures = [], [], 0
    for i in range(args.n):
        tile_id = f"tile-{args.seed}-{i:05d}"
        try:
            tile = generate_tile(tile_id, (args.size, args.size), seed=args.seed, patch=args.patch, caption=False)
            audit = caption_tile(tile, args.k)
            tile.caption = audit.final_caption
            rel = f"tiles/{tile_id}.eot"
            write_tile(tile, out / rel)
        except (CaptionError, TileFormatError, OSError, ValueError) as exc:
            failures += 1
            log.warning("tile %s failed: %s", tile_id, exc)
            continue
        entries.append(index_entry(tile, rel))
        audits.append(audit.to_record())
    write_index(entries, out / INDEX_NAME)
    (out / "captions.jsonl").write_text("".join(a + "\n" for a in audits), encoding="utf-8")
    _finish(man, out, [out / INDEX_NAME, out / "captions.jsonl", out / "tiles"])
    print(f"wrote {len(entries)} tiles to {out} ({failures} failed)")
    return EXIT_OK if entries else EXIT_DATA


def cmd_caption(args) -> int:
    tiles = load_dataset(args.data)
    out = Path(args.out_dir) if args.out_dir else Path(args.data)
    out.mkdir(parents=True, exist_ok=True)
    man = _start("caption", {"data": str(args.data), "k": args.k}, 0)
    lines, revised, fallbacks = [], 0, 0
    for tile in tiles:
        audit = caption_tile(tile, args.k)
        revised += audit.revised
        fallbacks += audit.fallback
        lines.append(audit.to_record() + "\n")
    path = out / "caption_audit.jsonl"
    path.write_text("".join(lines), encoding="utf-8")
    _finish(man, out, [path])
    print(f"audited {len(tiles)} captions: {revised} revised, {fallbacks} fell back")
    return EXIT_OK


def _ablate(cfg_overrides: dict, ablations) -> dict:
    for a in ablations or []:
        if a == "mp":
            cfg_overrides["lambdas"] = {k: 0.0 for k in ("s2", "s1", "dem", "canopy", "dw", "esa")}
        elif a == "jepa":
            cfg_overrides["alpha"] = 0.0
        elif a == "itc":
            cfg_overrides["beta"] = 0.0
    return cfg_overrides


def cmd_pretrain(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    cfg = load_config(args.config, _ablate(overrides, args.ablate))
    if args.dry_run:
        tiles = load_tiles(cfg.manifest, cfg.failure_budget)
        data = prepare_dataset(tiles[:cfg.batch_size], cfg.model)
        from .model import JointModel
        model = JointModel(cfg.model)
        idx = np.arange(len(data))
        ctx, tgt = batch_masks(cfg, 0, len(idx))
        total, report = forward_losses(model, data, idx, ctx, tgt, cfg)
        total.backward()
        print(json.dumps({"dry_run": True, "total": report.total, "rec": report.rec,
                          "jepa": report.jepa, "itc": report.itc}, sort_keys=True))
        return EXIT_OK
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    man = _start("pretrain", cfg.to_dict(), cfg.seed)

    def progress(step, total, report):
        if step == 1 or step % max(total // 20, 1) == 0 or step == total:
            log.info("step %d/%d total %.4f", step, total, report.total)

    res = train(cfg, progress=progress)
    _finish(man, out, [res.checkpoint, res.metrics, out / "final.ckpt", out / "config.txt"])
    print(f"trained {len(res.reports)} steps in {res.seconds:.1f}s; "
          f"total {res.reports[0].total:.4f} -> {res.reports[-1].total:.4f}; checkpoint {out / 'final.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import linear_probe, reconstruction_report, retrieval_recall
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    tiles = load_tiles(args.data)
    data = prepare_dataset(tiles, model.cfg)
    order = np.random.default_rng(args.seed).permutation(len(data))
    n_train = int(round(args.train_fraction * len(data)))
    train_set, test_set = data.subset(order[:n_train]), data.subset(order[n_train:])
    gallery = test_set.subset(np.arange(min(args.gallery, len(test_set))))
    probe = linear_probe(model, train_set, test_set)
    i2t, t2i = retrieval_recall(model, gallery, args.k)
    recon = reconstruction_report(model, test_set, seeds=(args.seed, args.seed + 1, args.seed + 2))
    report = {"checkpoint": str(args.checkpoint), "step": ckpt.step, "seed": args.seed,
              "probe": probe.to_dict(), "retrieval": [i2t.to_dict(), t2i.to_dict()],
              "reconstruction": recon}
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = _start("eval", {k: str(v) for k, v in vars(args).items() if k != "func"}, args.seed)
    (out / "eval_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    lines = [f"linear probe accuracy {probe.accuracy:.4f} (chance {probe.chance:.4f}, "
             f"raw-pixel baseline {probe.baseline_accuracy:.4f}, {probe.n_classes} classes)",
             f"R@{args.k} image->text {i2t.recall:.4f} ({i2t.hits}/{i2t.queries})",
             f"R@{args.k} text->image {t2i.recall:.4f} ({t2i.hits}/{t2i.queries})"]
    for name, vals in recon.items():
        lines += [f"reconstruction {name} {k} {v:.4f}" for k, v in vals.items()]
    (out / "eval_report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _finish(man, out, [out / "eval_report.json", out / "eval_report.txt"])
    print("\n".join(lines))
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck
    t0 = time.perf_counter()
    results = run_selfcheck(args.inject_fault)
    failed = 0
    for r in results:
        print(f"{r.name}: {r.passed} passed, {r.failed} failed ({r.seconds:.1f}s)")
        for f in r.failures[:5]:
            print(f"  FAIL {f}")
        failed += r.failed
    print(f"selfcheck {'FAILED' if failed else 'passed'} in {time.perf_counter() - t0:.1f}s")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_config_reference(args) -> int:
    text = "# Pretraining config keys\n\n" + config_reference()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eopretrain", description="synthetic multimodal tiles, pretraining and evaluation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate synthetic tiles with verified captions")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", type=int, default=32, help="tile side in pixels")
    g.add_argument("--patch", type=int, default=4)
    g.add_argument("--k", type=int, default=DEFAULT_K, help="caption candidates per tile")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("caption", help="re-run and audit the caption pipeline over a dataset")
    c.add_argument("--data", required=True)
    c.add_argument("--k", type=int, default=DEFAULT_K)
    c.add_argument("--out-dir")
    c.set_defaults(func=cmd_caption)

    t = sub.add_parser("pretrain", help="pretrain from a key=value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--ablate", action="append", choices=("mp", "jepa", "itc"),
                   help="zero the weight of one objective (repeatable)")
    t.add_argument("--dry-run", action="store_true", help="build one step's graph and exit")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--out-dir")
    t.set_defaults(func=cmd_pretrain)

    e = sub.add_parser("eval", help="linear probe, retrieval and reconstruction report for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--k", type=int, default=5)
    e.add_argument("--gallery", type=int, default=64)
    e.add_argument("--train-fraction", type=float, default=0.8)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out-dir", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("selfcheck", help="run internal oracles; nonzero exit on failure")
    s.add_argument("--inject-fault", choices=("loss",), help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_selfcheck)

    r = sub.add_parser("config-reference", help="print the config key reference")
    r.add_argument("--out")
    r.set_defaults(func=cmd_config_reference)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigParseError, ConfigurationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, TileFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
