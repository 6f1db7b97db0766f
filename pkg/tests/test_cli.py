import json
import subprocess
import sys

import pytest

from protoshot.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from protoshot.config import bundled_config_path
from protoshot.dataset import save_manifest

from conftest import sized_dataset

BUNDLED = bundled_config_path().read_text(encoding="utf-8")


def small_config(tmp_path, cells='["2w1s", "5w5s"]', episodes=50, regimes=None):
    text = BUNDLED.replace("episodes_per_epoch = 100, epochs = 5", "episodes_per_epoch = 20, epochs = 2")
    text = text.replace('cells = ["2w1s", "2w5s", "5w1s", "5w5s"]', f"cells = {cells}")
    text = text.replace("episodes = 1000", f"episodes = {episodes}")
    if regimes is not None:
        head, _, tail = text.partition("[regimes.FEL]")
        text = head + regimes + "\n[eval]" + tail.partition("[eval]")[2]
    path = tmp_path / "exp.toml"
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def bundled_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    code = main(["sweep", "--config", str(bundled_config_path()), "--out", str(out)])
    return code, out


def test_sweep_on_bundled_config_writes_sixteen_reports_and_a_table(bundled_sweep):
    code, out = bundled_sweep
    assert code == EXIT_OK
    reports = sorted(out.glob("*/*.json"))
    assert len(reports) == 16
    assert {p.parent.name for p in reports} == {"FEL", "FETL", "DTL", "DL"}
    assert (out / "table.csv").is_file() and (out / "table.md").is_file() and (out / "curves.csv").is_file()
    assert len((out / "table.csv").read_text().splitlines()) == 1 + 16


def test_sweep_columns_see_the_same_episodes(bundled_sweep):
    _, out = bundled_sweep
    for cell in ("2w1s", "2w5s", "5w1s", "5w5s"):
        digests = {json.loads((out / r / f"{cell}.json").read_text())["body"]["episode_digest"] for r in ("FEL", "FETL", "DTL", "DL")}
        assert len(digests) == 1


def test_report_subcommand_reassembles_table(bundled_sweep, capsys):
    _, out = bundled_sweep
    before = (out / "table.md").read_text()
    assert main(["report", "--dir", str(out), "--format", "md"]) == EXIT_OK
    assert capsys.readouterr().out == before
    assert main(["report", "--dir", str(out), "--format", "json"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["columns"] == ["FEL", "FETL", "DTL", "DL"]


def test_split_one_class_per_bucket(tmp_path):
    save_manifest(sized_dataset([19, 25, 40]), tmp_path / "m.csv")
    out = tmp_path / "part.json"
    code = main(["split", "--manifest", str(tmp_path / "m.csv"), "--novel-max", "20", "--val-max", "30", "--out", str(out)])
    assert code == EXIT_OK
    part = json.loads(out.read_text())
    assert (part["novel"], part["base_val"], part["base_train"]) == (["c0"], ["c1"], ["c2"])


def test_split_exclude(tmp_path):
    save_manifest(sized_dataset([19, 25, 40]), tmp_path / "m.csv")
    out = tmp_path / "part.json"
    assert main(["split", "--manifest", str(tmp_path / "m.csv"), "--exclude", "c1", "--out", str(out)]) == EXIT_OK
    part = json.loads(out.read_text())
    assert part["base_val"] == [] and part["excluded"] == ["c1"]


def test_synth_writes_manifest(tmp_path):
    spec = tmp_path / "spec.toml"
    spec.write_text(
        "[synthetic]\nnum_classes = 4\nhead = 30\ndecay = 0.5\ntail_min = 5\nfeature_dim = 3\n"
        "class_separation = 4.0\nnoise_sigma = 1.0\nseed = 3\n"
    )
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "d")]) == EXIT_OK
    lines = (tmp_path / "d" / "manifest.csv").read_text().splitlines()
    assert len(lines) == 1 + 30 + 15 + 7 + 5
    spec.write_text("num_classes = 4\nbogus = 1\n")
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "d")]) == EXIT_CONFIG


def test_pretrain_train_eval_chain_is_deterministic(tmp_path):
    cfg = small_config(tmp_path)
    pre = tmp_path / "pre.psck"
    assert main(["pretrain", "--config", str(cfg), "--out", str(pre)]) == EXIT_OK
    ckpt = tmp_path / "fetl.psck"
    assert main(["train", "--config", str(cfg), "--regime", "FETL", "--pretrained", str(pre), "--out", str(ckpt)]) == EXIT_OK
    assert (tmp_path / "fetl.jsonl").is_file()
    bodies = []
    for i in range(2):
        out = tmp_path / f"r{i}.json"
        assert main(["eval", "--ckpt", str(ckpt), "--config", str(cfg), "--cell", "5w5s", "--out", str(out)]) == EXIT_OK
        obj = json.loads(out.read_text())
        assert obj["body"]["regime"] == "FETL"
        obj.pop("timing")
        bodies.append(json.dumps(obj, sort_keys=True))
    assert bodies[0] == bodies[1]


def test_partial_sweep_failure_keeps_completed_cells(tmp_path, capsys):
    # only 5 novel classes exist, so every 9-way cell must fail
    cfg = small_config(tmp_path, cells='["2w1s", "9w1s"]', regimes='[regimes.FEL]\nepisodic = { episodes_per_epoch = 5, epochs = 1 }\n')
    out = tmp_path / "out"
    assert main(["sweep", "--config", str(cfg), "--out", str(out)]) == EXIT_RUNTIME
    assert (out / "FEL" / "2w1s.json").is_file()
    assert not (out / "FEL" / "9w1s.json").exists()
    assert "FAILED FEL 9w1s" in capsys.readouterr().err
    meta = json.loads((out / "sweep.json").read_text())
    assert [f["cell"] for f in meta["failures"]] == ["9w1s"]
    assert (out / "table.md").is_file()


def test_usage_errors_exit_1(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["split", "--manifest", "m.csv"]) == EXIT_USAGE
    assert main(["report", "--dir", ".", "--format", "xlsx"]) == EXIT_USAGE
    assert "usage:" in capsys.readouterr().err


def test_bad_cell_is_usage_error(tmp_path):
    cfg = small_config(tmp_path)
    assert main(["eval", "--ckpt", "x.psck", "--config", str(cfg), "--cell", "five", "--out", "r.json"]) == EXIT_USAGE


def test_config_errors_exit_2_with_line_number(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text(BUNDLED.replace("episodes = 1000", "episodes = 1000\nwarmup = 3"))
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    line = BUNDLED.splitlines().index("episodes = 1000") + 2
    assert f"bad.toml:{line}: unknown key 'eval.warmup'" in err
    assert main(["train", "--config", str(small_config(tmp_path)), "--regime", "XYZ", "--out", "x.psck"]) == EXIT_CONFIG


def test_runtime_errors_exit_3(tmp_path):
    cfg = small_config(tmp_path)
    assert main(["eval", "--ckpt", str(tmp_path / "missing.psck"), "--config", str(cfg), "--cell", "2w1s", "--out", "r.json"]) == EXIT_RUNTIME
    (tmp_path / "junk.psck").write_bytes(b"JUNK" + bytes(40))
    assert main(["eval", "--ckpt", str(tmp_path / "junk.psck"), "--config", str(cfg), "--cell", "2w1s", "--out", "r.json"]) == EXIT_RUNTIME
    assert main(["split", "--manifest", str(tmp_path / "none.csv"), "--out", "p.json"]) == EXIT_RUNTIME


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "protoshot.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("synth", "split", "pretrain", "train", "eval", "sweep", "report"):
        assert sub in res.stdout
