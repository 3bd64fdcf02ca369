import json
from pathlib import Path

import pytest

from eopretrain.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, MANIFEST_NAME, main
from eopretrain.tiles import DW_WATER, ESA_WATER, read_index, read_tile

TINY_KEYS = """\
model.image_size = 16
model.patch = 4
model.dim = 16
model.depth = 1
model.heads = 2
model.pred_dim = 8
model.pred_depth = 1
model.dec_dim = 8
model.text_width = 8
model.text_depth = 1
model.text_heads = 2
model.text_max_len = 16
model.text_dim = 16
model.proj_dim = 8
batch_size = 4
steps = 3
"""


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--n", "8", "--size", "16", "--seed", "3", "--out-dir", str(out)]) == EXIT_OK
    return out


def write_config(tmp_path, dataset, extra=""):
    path = tmp_path / "run.cfg"
    path.write_text(f"manifest = {dataset}\nout_dir = {tmp_path / 'run'}\n" + TINY_KEYS + extra)
    return path


def test_gen_data_writes_tiles_and_index(dataset):
    assert len(list((dataset / "tiles").glob("*.eot"))) == 8
    assert len(read_index(dataset / "index.tsv")) == 8
    assert len((dataset / "captions.jsonl").read_text().splitlines()) == 8
    man = json.loads((dataset / MANIFEST_NAME).read_text())
    assert man["command"] == "gen-data" and man["seed"] == 3 and man["finished"]


def test_gen_data_rerun_is_byte_identical(dataset, tmp_path):
    assert main(["gen-data", "--n", "8", "--size", "16", "--seed", "3", "--out-dir", str(tmp_path)]) == EXIT_OK
    for f in sorted((dataset / "tiles").iterdir()):
        assert (tmp_path / "tiles" / f.name).read_bytes() == f.read_bytes()
    assert (tmp_path / "index.tsv").read_bytes() == (dataset / "index.tsv").read_bytes()


def test_index_water_fraction_matches_recount(dataset):
    for e in read_index(dataset / "index.tsv"):
        t = read_tile(dataset / e.path)
        assert e.water_fraction == ((t.dw == DW_WATER) & (t.esa == ESA_WATER)).mean()


def test_caption_audit(dataset, tmp_path):
    assert main(["caption", "--data", str(dataset), "--out-dir", str(tmp_path)]) == EXIT_OK
    records = [json.loads(l) for l in (tmp_path / "caption_audit.jsonl").read_text().splitlines()]
    assert len(records) == 8 and all(len(r["candidates"]) == 4 for r in records)


def test_missing_config_field_is_named(dataset, tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text(f"manifest = {dataset}\n")
    assert main(["pretrain", "--config", str(path)]) == EXIT_USAGE
    assert "out_dir" in capsys.readouterr().err


def test_dry_run(dataset, tmp_path, capsys):
    assert main(["pretrain", "--config", str(write_config(tmp_path, dataset)), "--dry-run"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["dry_run"] and out["total"] > 0
    assert not (tmp_path / "run").exists()


@pytest.mark.parametrize("ablate,zeroed", [("jepa", "jepa"), ("itc", "itc")])
def test_ablate_zeroes_one_objective(dataset, tmp_path, ablate, zeroed):
    assert main(["pretrain", "--config", str(write_config(tmp_path, dataset)), "--ablate", ablate]) == EXIT_OK
    lines = [json.loads(l) for l in (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()]
    assert len(lines) == 3 and all(l[zeroed] == 0.0 for l in lines)
    man = json.loads((tmp_path / "run" / MANIFEST_NAME).read_text())
    assert man["config"]["alpha" if zeroed == "jepa" else "beta"] == 0.0


def test_ablate_mp_keeps_the_other_objectives(dataset, tmp_path):
    assert main(["pretrain", "--config", str(write_config(tmp_path, dataset)), "--ablate", "mp"]) == EXIT_OK
    line = json.loads((tmp_path / "run" / "metrics.jsonl").read_text().splitlines()[0])
    assert line["jepa"] > 0 and line["itc"] > 0
    assert line["total"] == pytest.approx(0.5 * line["jepa"] + 0.4 * line["itc"], abs=1e-10)


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("train")
    assert main(["pretrain", "--config", str(write_config(tmp, dataset))]) == EXIT_OK
    return tmp / "run" / "final.ckpt"


def test_pretrain_outputs(checkpoint):
    run = checkpoint.parent
    assert checkpoint.exists() and (run / "config.txt").exists() and (run / MANIFEST_NAME).exists()
    assert len((run / "metrics.jsonl").read_text().splitlines()) == 3


def test_eval_report_is_reproducible(checkpoint, dataset, tmp_path):
    reports = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["eval", "--checkpoint", str(checkpoint), "--data", str(dataset), "--k", "1",
                     "--train-fraction", "0.5", "--out-dir", str(out)]) == EXIT_OK
        reports.append((out / "eval_report.json").read_text())
    assert reports[0] == reports[1]
    rep = json.loads(reports[0])
    assert {r["direction"] for r in rep["retrieval"]} == {"image_to_text", "text_to_image"}


def test_eval_default_k_is_five():
    from eopretrain.cli import build_parser
    args = build_parser().parse_args(["eval", "--checkpoint", "c", "--data", "d", "--out-dir", "o"])
    assert args.k == 5


def test_absent_checkpoint_is_named(dataset, tmp_path, capsys):
    missing = tmp_path / "nope.ckpt"
    assert main(["eval", "--checkpoint", str(missing), "--data", str(dataset), "--out-dir", str(tmp_path)]) == EXIT_DATA
    assert str(missing) in capsys.readouterr().err


def test_usage_errors():
    assert main(["pretrain"]) == EXIT_USAGE
    assert main(["no-such-command"]) == EXIT_USAGE


def test_selfcheck_passes():
    assert main(["selfcheck"]) == EXIT_OK


def test_selfcheck_catches_an_injected_fault(capsys):
    assert main(["selfcheck", "--inject-fault", "loss"]) == EXIT_NUMERIC
    assert "FAIL" in capsys.readouterr().out


def test_config_reference(tmp_path):
    out = tmp_path / "ref.md"
    assert main(["config-reference", "--out", str(out)]) == EXIT_OK
    assert "`lr_base`" in out.read_text()
