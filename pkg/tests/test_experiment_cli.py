import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from dnfeat import ParameterError, StageError
from dnfeat.cli import main
from dnfeat.experiment import load_config, run_experiment

FIXTURE = Path(__file__).parent / "fixtures" / "eval"

SMALL = {
    "seed": 3,
    "resolution": 8,
    "data": {"n_train": 12, "n_val": 6, "n_test": 6, "sampler_steps": 5},
    "predictor": {"kind": "analytic", "sigma2": 0.2},
    "dnf": {"n_steps": 4, "strategies": ["first", "avg"]},
    "baselines": ["raw"],
    "detector": {"width": 4, "n_blocks": 1, "max_epochs": 2, "batch_size": 8},
    "perturbations": [{"kind": "blur", "param": 0}, {"kind": "jpeg", "param": 30}],
}


def test_eval_fixture_matches_golden_bytes(tmp_path):
    run_experiment(FIXTURE / "config.json", tmp_path / "out")
    out = tmp_path / "out"
    assert (out / "report.json").read_bytes() == (FIXTURE / "expected_report.json").read_bytes()
    assert (out / "run_manifest.json").read_bytes() == (FIXTURE / "expected_run_manifest.json").read_bytes()
    assert (out / "eval" / "fixture.json").read_bytes() == (FIXTURE / "expected_fixture.json").read_bytes()


def test_eval_fixture_through_cli(tmp_path):
    code = main(["eval", "--out", str(tmp_path), "--model", str(FIXTURE / "model"),
                 "--features", str(FIXTURE / "features.dnft"), "--labels", str(FIXTURE / "labels.json")])
    assert code == 0
    assert (tmp_path / "eval.json").read_bytes() == (FIXTURE / "expected_fixture.json").read_bytes()


def test_small_run_is_reproducible_and_worker_independent(tmp_path):
    r1 = run_experiment(SMALL, tmp_path / "a", workers=1)
    run_experiment(SMALL, tmp_path / "b", workers=4)
    run_experiment(SMALL, tmp_path / "a", workers=1)  # rerun over a warm cache
    for name in ("report.json", "run_manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    cache_a = {p.name: p.read_bytes() for p in (tmp_path / "a" / "cache").iterdir()}
    cache_b = {p.name: p.read_bytes() for p in (tmp_path / "b" / "cache").iterdir()}
    assert cache_a == cache_b
    assert set(r1["eval"]) == {"first", "avg", "raw"}
    assert len(r1["perturb-sweep"]["rows"]) == 2
    assert r1["perturb-sweep"]["rows"][0]["accuracy"] == r1["eval"]["first"]["accuracy"]
    assert not (tmp_path / "a" / "failures.log").exists()


def test_seed_changes_the_run(tmp_path):
    a = run_experiment({**SMALL, "stages": ["gen-data"]}, tmp_path / "a")
    b = run_experiment({**SMALL, "stages": ["gen-data"]}, tmp_path / "b", overrides={"seed": 4})
    assert a == b  # same counts
    img_a = (tmp_path / "a" / "data" / "test" / "real" / "real_00000.png").read_bytes()
    img_b = (tmp_path / "b" / "data" / "test" / "real" / "real_00000.png").read_bytes()
    assert img_a != img_b


def test_empty_test_set_fails_with_log(tmp_path):
    cfg = {**SMALL, "data": {**SMALL["data"], "n_test": 0}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    with pytest.raises(StageError, match="test set is empty"):
        run_experiment(cfg, tmp_path / "out")
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["failed_stage"] == "eval"
    assert "test set is empty" in (tmp_path / "out" / "failures.log").read_text()
    assert main(["run", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "cli")]) != 0


@pytest.mark.parametrize("bad", [
    {"detectr": {}},
    {"dnf": {"n_step": 4}},
    {"seed": "zero"},
    {"dnf": {"strategies": ["median"]}},
    {"stages": ["bake"]},
])
def test_invalid_configs_are_rejected(bad, tmp_path):
    with pytest.raises(ParameterError):
        load_config(bad)
    (tmp_path / "cfg.json").write_text(json.dumps(bad))
    assert main(["run", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "o")]) == 1


def test_relative_paths_resolve_against_config_dir(tmp_path):
    shutil.copytree(FIXTURE, tmp_path / "fx")
    cfg = load_config(tmp_path / "fx" / "config.json")
    assert Path(cfg["eval"]["model"]) == tmp_path / "fx" / "model"


def _cli(*argv):
    assert main([str(a) for a in argv]) == 0


def test_every_subcommand(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"resolution": 8, "detector": {"width": 4, "n_blocks": 1, "max_epochs": 2},
                               "perturbations": [{"kind": "blur", "param": 1}]}))
    pred = ["--predictor", "analytic:0:0.2"]
    for split, seed in (("train", 1), ("val", 2), ("test", 3)):
        d = tmp_path / split
        _cli("gen-data", "--config", cfg, "--out", d, "--n", 8, "--kind", "real", "--seed", seed)
        _cli("gen-data", "--config", cfg, "--out", d, "--n", 8, "--kind", "generated", "--sampler-steps", 4,
             "--seed", seed, *pred)
    _cli("train-predictor", "--config", cfg, "--out", tmp_path / "pred", "--data", tmp_path / "train",
         "--steps", 3)
    assert (tmp_path / "pred" / "predictor.json").exists()
    _cli("extract", "--config", cfg, "--out", tmp_path / "ext", "--data", tmp_path / "train", *pred)
    assert len(json.loads((tmp_path / "ext" / "extract.json").read_text())["keys"]) == 16
    _cli("train-detector", "--config", cfg, "--out", tmp_path / "det", "--data", tmp_path / "train",
         "--val", tmp_path / "val", *pred)
    _cli("eval", "--config", cfg, "--out", tmp_path / "ev", "--model", tmp_path / "det",
         "--data", tmp_path / "test", *pred)
    assert json.loads((tmp_path / "ev" / "eval.json").read_text())["n"] == 16
    _cli("perturb-sweep", "--config", cfg, "--out", tmp_path / "sw", "--model", tmp_path / "det",
         "--data", tmp_path / "test", *pred)
    assert len(json.loads((tmp_path / "sw" / "sweep.json").read_text())["rows"]) == 1
    _cli("spectrum", "--config", cfg, "--out", tmp_path / "sp", "--data", tmp_path / "test", *pred)
    assert (tmp_path / "sp" / "real.png").exists() and (tmp_path / "sp" / "generated.mean.dnft").exists()
    _cli("embed", "--config", cfg, "--out", tmp_path / "em", "--data", tmp_path / "test", "--k", 2, "--raw")
    assert len(json.loads((tmp_path / "em" / "embedding.json").read_text())["points"]) == 16
    _cli("train-detector", "--config", cfg, "--out", tmp_path / "det_raw", "--data", tmp_path / "train",
         "--val", tmp_path / "val", "--raw")
    # same seed, same bytes
    _cli("gen-data", "--config", cfg, "--out", tmp_path / "again", "--n", 8, "--kind", "real", "--seed", 1)
    a = sorted((tmp_path / "train" / "real").iterdir())
    b = sorted((tmp_path / "again" / "real").iterdir())
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    assert main(["eval", "--out", str(tmp_path), "--model", str(tmp_path / "none"),
                 "--features", str(FIXTURE / "features.dnft"), "--labels", str(FIXTURE / "labels.json")]) == 1
    assert "error" in capsys.readouterr().err
    assert main(["extract", "--out", str(tmp_path), "--data", str(tmp_path / "missing"),
                 "--predictor", "analytic"]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["gen-data"])
    assert exc.value.code == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dnfeat", "eval", "--out", str(tmp_path),
                           "--model", str(FIXTURE / "model"), "--features", str(FIXTURE / "features.dnft"),
                           "--labels", str(FIXTURE / "labels.json")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "accuracy: 1.0" in proc.stdout
