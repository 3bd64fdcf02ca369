import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eopretrain.config import ConfigParseError, config_reference, format_config, load_config, parse_config
from eopretrain.train import TrainConfig

BASE = "manifest = data/index.tsv\nout_dir = runs/a\n"


def test_minimal_config_uses_defaults():
    cfg = parse_config(BASE)
    assert cfg.manifest == "data/index.tsv" and cfg.batch_size == TrainConfig().batch_size


def test_values_comments_and_nested_keys():
    cfg = parse_config(BASE + "alpha = 0.25  # weaker\nmodel.depth = 2\nlambda.dw = 0.5\nnormalize_targets = yes\n")
    assert cfg.alpha == 0.25 and cfg.model.depth == 2 and cfg.lambdas["dw"] == 0.5 and cfg.normalize_targets


@pytest.mark.parametrize("missing", ["manifest", "out_dir"])
def test_missing_required_field_is_named(missing):
    text = "\n".join(l for l in BASE.splitlines() if not l.startswith(missing))
    with pytest.raises(ConfigParseError, match=f"field '{missing}'"):
        parse_config(text)


@pytest.mark.parametrize("line,needle", [
    ("batch_size = many", "line 3, field 'batch_size'"),
    ("colour = blue", "unknown field"),
    ("model.width = 3", "unknown model field"),
    ("lambda.lidar = 1", "unknown modality"),
    ("just words", "line 3"),
    ("manifest = again", "duplicate"),
])
def test_parse_errors_name_line_and_field(line, needle):
    with pytest.raises(ConfigParseError, match=needle):
        parse_config(BASE + line + "\n")


def test_invalid_value_range():
    with pytest.raises(ConfigParseError, match="mask_ratio"):
        parse_config(BASE + "mask_ratio = 1.5\n")


def test_overrides_win():
    cfg = parse_config(BASE + "seed = 1\n", {"seed": 9, "lambdas": {"s1": 0.0}})
    assert cfg.seed == 9 and cfg.lambdas["s1"] == 0.0


@settings(max_examples=40, deadline=None)
@given(alpha=st.floats(0, 5), beta=st.floats(0, 5), seed=st.integers(0, 2**31), steps=st.integers(0, 10_000),
       depth=st.integers(1, 8))
def test_canonical_form_round_trips(alpha, beta, seed, steps, depth):
    cfg = parse_config(BASE + f"alpha = {alpha!r}\nbeta = {beta!r}\nseed = {seed}\nsteps = {steps}\n"
                              f"model.depth = {depth}\n")
    assert parse_config(format_config(cfg)) == cfg


def test_load_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(BASE)
    assert load_config(path).out_dir == "runs/a"
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "none.cfg")


def test_reference_lists_every_key():
    ref = config_reference()
    for key in ("manifest", "lr_base", "lambda.esa", "model.text_dim"):
        assert f"`{key}`" in ref
