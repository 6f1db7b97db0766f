import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protoshot.augment import AugPolicy, HorizontalFlip, VerticalFlip
from protoshot.config import (
    ConfigError,
    EvalConfig,
    ExperimentConfig,
    bundled_config_path,
    dumps,
    load_config,
    loads,
    parse_cell,
)
from protoshot.regimes import RegimeConfig

MINIMAL = """
[dataset]
kind = "synthetic"

[dataset.target]
num_classes = 4
head = 40
decay = 0.5
tail_min = 10
feature_dim = 4
class_separation = 2.0
noise_sigma = 0.5
seed = 1

[regimes.FEL]

[eval]
cells = ["2w1s"]
"""


def test_bundled_config_loads_with_four_regimes_and_cells():
    cfg = load_config(bundled_config_path())
    assert list(cfg.regimes) == ["FEL", "FETL", "DTL", "DL"]
    assert cfg.eval.cells == ("2w1s", "2w5s", "5w1s", "5w5s")
    assert cfg.regimes["FETL"].init == "pretrained" and cfg.regimes["FEL"].init == "random"


def test_bundled_config_round_trips():
    cfg = load_config(bundled_config_path())
    again = loads(dumps(cfg), base_dir=cfg.base_dir)
    assert again == cfg
    assert dumps(again) == dumps(cfg)


def test_minimal_config_defaults():
    cfg = loads(MINIMAL)
    assert cfg.regimes["FEL"] == RegimeConfig("FEL", seed=0)
    assert cfg.eval.episodes == 1000 and cfg.eval.n_query == 5
    assert cfg.dataset.novel_max == 20 and cfg.dataset.val_max == 30


def test_regime_name_can_differ_from_type():
    text = MINIMAL.replace("[regimes.FEL]", '[regimes.FEL]\n[regimes."DTL-MixUp"]\nregime = "DTL"\naug = { mix = "mixup", alpha = 1.0 }\n')
    text += '\n[pretrain]\npretrained = "missing.psck"\n'
    with pytest.raises(ConfigError, match="pretrain.pretrained not found"):
        loads(text)
    cfg = loads(text, check_paths=False)
    assert cfg.regimes["DTL-MixUp"].aug == AugPolicy(mix="mixup")


@pytest.mark.parametrize(
    "edit, line, message",
    [
        (("seed = 1", "seed = 1\nbogus = 3"), 14, "unknown key 'dataset.target.bogus'"),
        (('cells = ["2w1s"]', 'cells = ["2x1s"]'), 18, "2x1s"),
        (('cells = ["2w1s"]', "cells = []"), 18, "at least one cell"),
        (('kind = "synthetic"', 'kind = "lmdb"'), 3, "dataset.kind"),
        (("[regimes.FEL]", "[regimes.FEL]\ninit = \"pretrained\""), 15, "FEL trains from random"),
        (("[regimes.FEL]", "[regimes.Foo]"), 15, "needs regime"),
    ],
)
def test_diagnostics_carry_line_numbers(edit, line, message):
    with pytest.raises(ConfigError) as info:
        loads(MINIMAL.replace(*edit), source="exp.toml")
    assert message in str(info.value)
    assert info.value.line == line
    assert str(info.value).startswith(f"exp.toml:{line}:")


def test_syntax_error_line():
    with pytest.raises(ConfigError) as info:
        loads("[eval]\ncells = [\n\n= 3\n")
    assert info.value.line is not None


def test_needs_at_least_one_regime():
    with pytest.raises(ConfigError, match="at least one"):
        loads(MINIMAL.replace("[regimes.FEL]", ""))


def test_transfer_regimes_need_a_source():
    with pytest.raises(ConfigError, match="dataset.source"):
        loads(MINIMAL.replace("[regimes.FEL]", "[regimes.DL]"))


def test_manifest_paths_resolve_against_config_dir(tmp_path):
    (tmp_path / "m.csv").write_text("source_id,path,label\n")
    text = '[dataset]\nkind = "manifest"\nmanifest = "m.csv"\n[regimes.FEL]\n'
    (tmp_path / "exp.toml").write_text(text)
    cfg = load_config(tmp_path / "exp.toml")
    assert cfg.resolve(cfg.dataset.manifest) == tmp_path / "m.csv"
    (tmp_path / "m.csv").unlink()
    with pytest.raises(ConfigError, match="dataset.manifest not found"):
        load_config(tmp_path / "exp.toml")


def test_parse_cell():
    assert parse_cell("5w10s") == (5, 10)
    with pytest.raises(ValueError):
        parse_cell("5-way")


ops = st.lists(
    st.one_of(st.builds(HorizontalFlip, st.floats(0, 1)), st.builds(VerticalFlip, st.floats(0, 1))), max_size=3
).map(tuple)


@settings(max_examples=40, deadline=None)
@given(
    episodes=st.integers(1, 5000),
    seed=st.integers(0, 2**63 - 1),
    mode=st.sampled_from(["per-class", "pooled"]),
    cells=st.lists(st.tuples(st.integers(2, 9), st.integers(1, 20)), min_size=1, max_size=5, unique=True),
    aug_ops=ops,
    mix=st.sampled_from(["none", "mixup", "cutmix", "resizemix", "all-augment"]),
    lr=st.floats(1e-5, 1.0),
)
def test_round_trip_property(episodes, seed, mode, cells, aug_ops, mix, lr):
    from dataclasses import replace

    from protoshot.regimes import OptimizerConfig

    base = loads(MINIMAL)
    reg = replace(base.regimes["FEL"], aug=AugPolicy(aug_ops, mix), optimizer=OptimizerConfig(lr, 0.5))
    cfg = replace(
        base,
        regimes={"FEL": reg, "FEL-b": replace(reg, seed=0)},
        eval=EvalConfig(tuple(f"{n}w{k}s" for n, k in cells), 3, episodes, seed, mode),
    )
    assert loads(dumps(cfg)) == cfg
