import json
import math

import pytest

from modalsim import status_flag as flag
from modalsim.app import App, _as_tuple
from modalsim.exceptions import ConfigurationError, StepSizeError
from modalsim.runman import (
    DECOMPOSITION_FILE,
    FAITHFULNESS_FILE,
    SUMMARY_FILE,
    VERIFY_FILE,
    RunConfig,
    RunMan,
    read_decompositions,
    read_trajectory_csv,
    read_trajectory_json,
)
from modalsim.utils import read_json


@pytest.fixture
def app(monkeypatch):
    monkeypatch.setenv("MODALSIM_THREADS", "1")
    app = App()
    app._prepare()
    return app


@pytest.fixture
def runman(app):
    return app.runman


def _config(command, tmp_path, **kw):
    kw.setdefault("scenario_path", str(tmp_path / "missing.json"))
    return RunConfig(command, out=str(tmp_path / "out"), **kw)


def _w_state_file(tmp_path, n=7):
    amps = [0.0] * 2 ** n
    for k in range(n):
        amps[2 ** k] = 1 / math.sqrt(n)
    path = tmp_path / "w7.json"
    path.write_text(json.dumps({"state": {"amplitudes": amps, "factor_dims": [2] * n}}))
    return str(path)


def test_decompose_preset(runman, tmp_path):
    code = runman.cmd_decompose(_config(flag.CMD_DECOMPOSE, tmp_path, preset="spin_single"))
    assert code == flag.EXIT_OK
    reports = read_decompositions(tmp_path / "out" / DECOMPOSITION_FILE)
    assert [r["label"] for r in reports] == ["stage 0", "stage 1"]
    assert all(r["resolved"] for r in reports)
    final = reports[-1]["result"]
    assert final.method == flag.METHOD_PRODUCT_CUT
    assert sorted(final.decomposition.coefficients ** 2) == pytest.approx([0.36, 0.64])


def test_decompose_invalid_json(runman, tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{")
    code = runman.cmd_decompose(_config(flag.CMD_DECOMPOSE, tmp_path, scenario_path=str(path)))
    assert code == flag.EXIT_INVALID_INPUT


def test_decompose_missing_scenario(runman, tmp_path):
    assert runman.cmd_decompose(_config(flag.CMD_DECOMPOSE, tmp_path)) == flag.EXIT_INVALID_INPUT


def test_decompose_unresolved_keeps_candidate(runman, tmp_path):
    config = _config(flag.CMD_DECOMPOSE, tmp_path, scenario_path=_w_state_file(tmp_path))
    assert runman.cmd_decompose(config) == flag.EXIT_UNRESOLVED
    (report,) = read_decompositions(tmp_path / "out" / DECOMPOSITION_FILE)
    assert report["label"] == "state"
    assert not report["resolved"]
    assert report["result"].method == flag.METHOD_BI_ORTHOGONAL


def test_run_csv(runman, tmp_path):
    config = _config(flag.CMD_RUN, tmp_path, preset="spin_single", n_traj=40, seed=7)
    assert runman.cmd_run(config) == flag.EXIT_OK
    rows = read_trajectory_csv(tmp_path / "out" / "trajectories.csv")
    assert len(rows) == 40 * 2
    assert {r["trajectory_id"] for r in rows} == set(range(40))
    start = [r for r in rows if r["time"] == 0.0]
    end = [r for r in rows if r["time"] == 3.0]
    assert all(r["path_index"] == 1 and r["probabilities"] == pytest.approx([1.0]) for r in start)
    assert all(r["path_index"] in (1, 2) for r in end)
    assert sorted(end[0]["probabilities"]) == pytest.approx([0.36, 0.64])

    summary = read_json(tmp_path / "out" / SUMMARY_FILE)
    assert summary["n_traj"] == 40
    assert summary["seed"] == 7
    assert summary["joint"] is None
    final = summary["checkpoints"][-1]
    assert sum(final["counts"]) == 40
    assert sorted(final["targets"]) == pytest.approx([0.36, 0.64])
    assert final["pointer"]["labels"] == ["+z", "-z", "undetermined"]


def test_run_is_reproducible(monkeypatch, tmp_path):
    outputs = []
    for threads in ("1", "4"):
        monkeypatch.setenv("MODALSIM_THREADS", threads)
        app = App()
        assert app.runman.workers == int(threads)
        config = RunConfig(
            flag.CMD_RUN,
            scenario_path=str(tmp_path / "missing.json"),
            preset="spin_single",
            n_traj=9000,
            seed=11,
            out=str(tmp_path / f"threads{threads}"),
        )
        assert app.runman.cmd_run(config) == flag.EXIT_OK
        outputs.append((tmp_path / f"threads{threads}" / "trajectories.csv").read_bytes())
    assert outputs[0] == outputs[1]


def test_run_json(runman, tmp_path):
    config = _config(
        flag.CMD_RUN,
        tmp_path,
        preset="spin_sequence",
        n_traj=30,
        seed=2,
        checkpoints=(0.0, 1.5, 2.5),
        fmt=flag.FORMAT_JSON,
    )
    assert runman.cmd_run(config) == flag.EXIT_OK
    records = read_trajectory_json(tmp_path / "out" / "trajectories.json")
    assert len(records) == 30 * 3
    assert {r["time"] for r in records} == {0.0, 1.5, 2.5}
    summary = read_json(tmp_path / "out" / SUMMARY_FILE)
    assert len(summary["joint"]["counts"]) == 2


def test_run_step_size(runman, tmp_path, monkeypatch):
    def too_fast(*args, **kw):
        raise StepSizeError(0.6, 0.005)

    monkeypatch.setattr("modalsim.runman.run_scenario", too_fast)
    config = _config(flag.CMD_RUN, tmp_path, preset="spin_single")
    assert runman.cmd_run(config) == flag.EXIT_STEP_SIZE


def test_verify_subset(runman, tmp_path):
    config = _config(flag.CMD_VERIFY, tmp_path, quick=True, suites=("prefix_dominance",))
    assert runman.cmd_verify(config) == flag.EXIT_OK
    report = read_json(tmp_path / "out" / VERIFY_FILE)
    assert report["seed"] == 0
    assert report["passed"]
    assert [p["name"] for p in report["properties"]] == ["prefix_dominance"]


def test_faithfulness(runman, tmp_path):
    config = _config(flag.CMD_FAITHFULNESS, tmp_path, preset="spin_fig1", n_traj=200)
    assert runman.cmd_faithfulness(config) == flag.EXIT_OK
    data = read_json(tmp_path / "out" / FAITHFULNESS_FILE)
    assert data["scenario"] == "spin_fig1"
    assert data["report"]["satisfied"]


def test_faithfulness_needs_second_stage(runman, tmp_path):
    config = _config(flag.CMD_FAITHFULNESS, tmp_path, preset="spin_single")
    assert runman.cmd_faithfulness(config) == flag.EXIT_INVALID_INPUT


@pytest.mark.parametrize(
    "kw",
    [
        {"command": "launch"},
        {"command": flag.CMD_RUN, "fmt": "xml"},
        {"command": flag.CMD_RUN, "seed": -1},
        {"command": flag.CMD_RUN, "seed": 2 ** 64},
        {"command": flag.CMD_RUN, "n_traj": 0},
        {"command": flag.CMD_RUN, "dt": 0.0},
        {"command": flag.CMD_RUN, "checkpoints": (1.0, 0.5)},
        {"command": flag.CMD_VERIFY, "suites": ("nope",)},
    ],
)
def test_run_config_rejects(kw):
    with pytest.raises(ConfigurationError):
        RunConfig(**kw)


def test_as_tuple():
    assert _as_tuple(None) is None
    assert _as_tuple(2) == (2.0,)
    assert _as_tuple("0,1.5, 3") == (0.0, 1.5, 3.0)
    assert _as_tuple([0, 1]) == (0.0, 1.0)


def test_app_exit_codes(app, tmp_path):
    with pytest.raises(SystemExit) as e:
        app.verify(quick=True, suites="prefix_dominance", out=str(tmp_path))
    assert e.value.code == flag.EXIT_OK

    with pytest.raises(SystemExit) as e:
        app.run(preset="spin_single", format="xml", out=str(tmp_path))
    assert e.value.code == flag.EXIT_INVALID_INPUT


def test_app_rejects_bad_threads(monkeypatch):
    monkeypatch.setenv("MODALSIM_THREADS", "many")
    with pytest.raises(ConfigurationError):
        App()


def test_runman_defaults():
    runman = RunMan(workers=0, out_dir="elsewhere")
    assert runman.workers == 1
    assert runman.out_dir == "elsewhere"


def test_decompose_environment_sensitivity(runman, tmp_path):
    path = tmp_path / "tilt.json"
    path.write_text(json.dumps({"preset": "spin_single", "sensitivity": [0.0, 0.1]}))
    code = runman.cmd_decompose(_config(flag.CMD_DECOMPOSE, tmp_path, scenario_path=str(path)))
    assert code == flag.EXIT_OK
    data = read_json(tmp_path / "out" / DECOMPOSITION_FILE)
    assert [p["epsilon"] for p in data["sensitivity"]] == [0.0, 0.1]
    assert all(p["method"] == flag.METHOD_PRODUCT_CUT for p in data["sensitivity"])


def test_decompose_sensitivity_needs_model(runman, tmp_path):
    path = tmp_path / "tilt.json"
    path.write_text(json.dumps({"preset": "bell_pairs", "sensitivity": [0.1]}))
    code = runman.cmd_decompose(_config(flag.CMD_DECOMPOSE, tmp_path, scenario_path=str(path)))
    assert code == flag.EXIT_INVALID_INPUT
