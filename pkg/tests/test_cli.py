import json

import numpy as np
import pytest

from v1mt import cli, metrics
from v1mt.stage2 import Stage2


def run(*args):
    return cli.run([str(a) for a in args])


def test_synth_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run("synth", "--stimulus", "plaid", "--frames", 4, "--height", 16, "--width", 16,
                   "--out", tmp_path / d) == 0
    fa = sorted((tmp_path / "a" / "frames").iterdir())
    fb = sorted((tmp_path / "b" / "frames").iterdir())
    assert len(fa) == 4
    assert [p.read_bytes() for p in fa] == [p.read_bytes() for p in fb]
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["config"]["out"] != mb["config"]["out"]
    ma["config"].pop("out"), mb["config"].pop("out")
    assert ma == mb


@pytest.mark.parametrize("stimulus", ["grating", "gabor", "missing_fundamental", "barber_pole", "gabor_array",
                                      "texture"])
def test_synth_all_generators(tmp_path, stimulus):
    assert run("synth", "--stimulus", stimulus, "--frames", 3, "--height", 24, "--width", 24,
               "--aperture-h", 8, "--aperture-w", 16, "--out", tmp_path) == 0
    assert len(list((tmp_path / "frames").iterdir())) == 3


def test_manifest_echoes_full_config(tmp_path):
    (tmp_path / "c.cfg").write_text("# comment\nframes = 5\nsf = 0.2  # inline\n")
    assert run("synth", "--config", tmp_path / "c.cfg", "--frames", 2, "--height", 8, "--width", 8,
               "--out", tmp_path / "o") == 0
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["schema"] == cli.MANIFEST_SCHEMA and man["command"] == "synth"
    assert man["config"]["frames"] == 2  # flag beats file
    assert man["config"]["sf"] == 0.2  # file beats default
    assert set(man["config"]) == set(cli.COMMON) | set(cli.SCHEMAS["synth"])
    assert len(man["outputs"]) == 2


def test_unknown_config_key_is_validation_error(tmp_path, capsys):
    (tmp_path / "c.cfg").write_text("colour = red\n")
    assert run("synth", "--config", tmp_path / "c.cfg", "--out", tmp_path) == 1
    assert "colour" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["nonsense"], ["synth", "--bogus", "1"], ["synth", "--frames", "many"],
                                  ["synth", "--stimulus", "spiral"], ["eval"], ["--threads", "0", "eval"]])
def test_validation_errors_exit_1(tmp_path, argv):
    assert cli.run(argv + ["--out", str(tmp_path)] if argv[0] != "nonsense" else argv) == 1


def test_eval_identical_flows(tmp_path, capsys):
    rng = np.random.default_rng(0)
    f = rng.standard_normal((6, 7, 2))
    metrics.write_flo(f, tmp_path / "a.flo")
    metrics.write_flo(f, tmp_path / "b.flo")
    assert run("eval", "--model", tmp_path / "a.flo", "--reference", tmp_path / "b.flo", "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["epe"] == 0.0
    assert rep["r_uv"] == pytest.approx(1.0, abs=1e-12)


def test_infer_writes_flow_per_iteration(tmp_path, bank):
    Stage2(channels=256, iterations=2).save(tmp_path / "p.npz")
    bank.save(tmp_path / "bank.json")
    assert run("synth", "--stimulus", "texture", "--frames", bank.t_window, "--height", 16, "--width", 16,
               "--out", tmp_path / "s") == 0
    assert run("infer", "--input", tmp_path / "s" / "frames", "--params", tmp_path / "p.npz",
               "--bank", tmp_path / "bank.json", "--out", tmp_path / "o") == 0
    flo = sorted((tmp_path / "o").glob("*.flo"))
    assert [p.name for p in flo] == ["flow_iter01.flo", "flow_iter02.flo"]
    assert metrics.read_flo(flo[0]).shape == (16, 16, 2)
    assert len(list((tmp_path / "o").glob("*.png"))) == 2


def test_infer_over_node_budget_exits_2(tmp_path, bank):
    Stage2(channels=256, iterations=1, node_budget=4).save(tmp_path / "p.npz")
    assert run("synth", "--stimulus", "texture", "--frames", bank.t_window, "--height", 32, "--width", 32,
               "--out", tmp_path / "s") == 0
    assert run("infer", "--input", tmp_path / "s" / "frames", "--params", tmp_path / "p.npz",
               "--out", tmp_path / "o") == 2


def test_infer_requires_stage2_params(tmp_path):
    assert run("synth", "--frames", 2, "--height", 8, "--width", 8, "--out", tmp_path / "s") == 0
    assert run("infer", "--input", tmp_path / "s" / "frames", "--out", tmp_path / "o") == 1


def test_psycho_missing_fundamental_reversed(tmp_path):
    assert run("psycho", "--out", tmp_path) == 0
    res = {r["test"]: r for r in json.loads((tmp_path / "battery.json").read_text())}
    assert res["missing_fundamental"]["verdict"] == "reversed"
    assert res["plaid"]["verdict"] == "skipped"


def test_neuro_stage1_outputs(tmp_path):
    assert run("neuro", "--units", "0,17", "--k-dirs", 8, "--rf-units", 1, "--rf-grid", 3, "--size", 32,
               "--out", tmp_path) == 0
    for name in ("tuning.csv", "classification.csv", "rf.csv", "fits.csv", "census.json", "parameters.csv"):
        assert (tmp_path / name).exists(), name
    census = json.loads((tmp_path / "census.json").read_text())
    assert census["n_units"] == 2 and census["meta"]["k_dirs"] == 8


def test_fit_writes_loadable_checkpoint(tmp_path):
    from v1mt import train

    assert run("fit", "--stage", "2", "--steps", 1, "--size", 16, "--iterations", 1, "--batch-size", 2,
               "--pool-size", 2, "--out", tmp_path) == 0
    bank, model, meta = train.load_checkpoint(tmp_path / "checkpoint")
    assert meta["config"]["steps"] == 1 and model.iterations == 1
    assert (tmp_path / "stage2_log.csv").read_text().startswith("step,loss,phase")


def test_fit_adam_and_renormalisation_keys(tmp_path):
    from v1mt import train

    assert run("fit", "--stage", "2", "--steps", 1, "--size", 16, "--iterations", 1, "--batch-size", 2,
               "--pool-size", 2, "--optimizer", "adam", "--step-size", 1e-3, "--K2", 64, "--sigma2", 4,
               "--out", tmp_path) == 0
    _, model, meta = train.load_checkpoint(tmp_path / "checkpoint")
    assert meta["config"]["optimizer"] == "adam" and meta["conventions"]["optimizer"] == "Adam"
    assert float(model.K2) == 64 and float(model.sigma2) == 4


def test_fit_rejects_unknown_optimizer(tmp_path):
    assert run("fit", "--stage", "2", "--steps", 1, "--optimizer", "lbfgs", "--out", tmp_path) == 1


def test_inputs_not_mutated(tmp_path):
    f = np.ones((3, 3, 2))
    metrics.write_flo(f, tmp_path / "a.flo")
    before = (tmp_path / "a.flo").read_bytes()
    run("eval", "--model", tmp_path / "a.flo", "--reference", tmp_path / "a.flo", "--out", tmp_path / "o")
    assert (tmp_path / "a.flo").read_bytes() == before
