import csv
import functools
import logging
import os
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

from modalsim import status_flag as flag
from modalsim.decomp import DecompositionResult, SearchBudget, preferred_decomposition
from modalsim.exceptions import (
    ConfigurationError,
    ModalSimError,
    StepSizeError,
    UnresolvedMinimization,
)
from modalsim.mdb.models import CheckpointRecord, TrajectoryRecord
from modalsim.scenarios import (
    SENSITIVITY_BUDGET,
    Scenario,
    check_faithfulness,
    environment_sensitivity,
    load_scenario,
    run_scenario,
)
from modalsim.utils import read_json, write_json
from modalsim.verify import SUITES, SuiteSizes, run_suites

DECOMPOSITION_FILE = "decomposition.json"
SUMMARY_FILE = "summary.json"
VERIFY_FILE = "verify.json"
FAITHFULNESS_FILE = "faithfulness.json"
TRAJECTORY_FILE = "trajectories"

CSV_PREFIX = ("time", "trajectory_id", "path_index")


@dataclass(frozen=True)
class RunConfig:
    command: str
    scenario_path: str = "scenario.json"
    preset: Optional[str] = None
    seed: Optional[int] = None
    n_traj: Optional[int] = None
    dt: Optional[float] = None
    checkpoints: Optional[Tuple[float, ...]] = None
    out: str = "out"
    fmt: str = flag.FORMAT_CSV
    quick: bool = False
    suites: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.command not in flag.SUPPORT_COMMANDS:
            raise ConfigurationError(f"unknown command {self.command!r}")
        if self.fmt not in flag.SUPPORT_FORMATS:
            raise ConfigurationError(f"format must be one of {flag.SUPPORT_FORMATS}")
        if self.seed is not None and (int(self.seed) != self.seed or not 0 <= self.seed < 2 ** 64):
            raise ConfigurationError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.n_traj is not None and self.n_traj < 1:
            raise ConfigurationError("ntraj must be positive")
        if self.dt is not None and self.dt <= 0:
            raise ConfigurationError("dt must be positive")
        if self.checkpoints is not None:
            cps = tuple(float(c) for c in self.checkpoints)
            if any(b <= a for a, b in zip(cps, cps[1:])):
                raise ConfigurationError(f"checkpoints must be strictly increasing: {cps}")
        unknown = set(self.suites) - set(SUITES)
        if unknown:
            raise ConfigurationError(f"unknown verify suites {sorted(unknown)}")


def exit_code(fn):
    """Map the exception hierarchy to the fixed exit taxonomy"""

    @functools.wraps(fn)
    def wrapper(self, config):
        try:
            return fn(self, config)
        except UnresolvedMinimization as e:
            logging.error(f"unresolved minimization: {e}")
            return flag.EXIT_UNRESOLVED
        except StepSizeError as e:
            logging.error(f"{e} (suggested --dt {e.suggested_dt:.3e})")
            return flag.EXIT_STEP_SIZE
        except ModalSimError as e:
            logging.error(f"invalid input: {e}")
            return flag.EXIT_INVALID_INPUT

    return wrapper


def read_trajectory_csv(path) -> List[Dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            probabilities = [
                float(v) for k, v in row.items() if k.startswith("p_") and v != ""
            ]
            rows.append(
                {
                    "time": float(row["time"]),
                    "trajectory_id": int(row["trajectory_id"]),
                    "path_index": int(row["path_index"]),
                    "probabilities": probabilities,
                }
            )
    return rows


def read_trajectory_json(path) -> List[Dict]:
    return read_json(path)["records"]


def read_decompositions(path) -> List[Dict]:
    """Stage reports with their DecompositionResult rebuilt"""
    reports = read_json(path)["results"]
    for report in reports:
        report["result"] = DecompositionResult.from_dict(report["result"])
    return reports


class RunMan:
    """
    1. 命令的实现都放在这里
    2. 输出文件的读写也放在这里
    app -> runman -> scenarios/dynamics/decomp
    """

    def __init__(self, workers=1, out_dir="out"):
        self.workers = max(1, int(workers))
        self.out_dir = out_dir

    def _out(self, config: RunConfig, name):
        out = config.out or self.out_dir
        os.makedirs(out, exist_ok=True)
        return os.path.join(out, name)

    def load_scenario(self, config: RunConfig) -> Scenario:
        scenario = load_scenario(config.scenario_path, config.preset)
        return scenario.with_overrides(
            seed=config.seed,
            n_traj=config.n_traj,
            dt=config.dt,
            checkpoints=config.checkpoints,
        )

    def _decompose_stages(self, scenario: Scenario):
        exp = scenario.experiment
        if exp is None:
            yield "state", scenario.state
            return
        n_stages = 2 if exp.sequential else 1
        for stage in range(n_stages + 1):
            yield f"stage {stage}", exp.stage_state(stage)

    @exit_code
    def cmd_decompose(self, config: RunConfig) -> int:
        scenario = self.load_scenario(config)
        budget = SearchBudget(workers=self.workers)
        results, code = [], flag.EXIT_OK
        for label, state in self._decompose_stages(scenario):
            try:
                result = preferred_decomposition(state, state.structure, budget)
                resolved = True
            except UnresolvedMinimization as e:
                if e.candidate is None:
                    raise
                logging.warning(f"{label}: {e}")
                result, resolved, code = e.candidate, False, flag.EXIT_UNRESOLVED
            logging.info(
                f"{label}: entropy={result.entropy:.6f} method={result.method} "
                f"terms={len(result.decomposition)} unique={result.unique}"
            )
            results.append({"label": label, "resolved": resolved, "result": result.to_dict()})
        report = {"scenario": scenario.name, "results": results}
        if scenario.sensitivity:
            report["sensitivity"] = self._environment_sensitivity(scenario)
        write_json(self._out(config, DECOMPOSITION_FILE), report)
        return code

    def _environment_sensitivity(self, scenario: Scenario) -> List[Dict]:
        exp = scenario.experiment
        if exp is None:
            raise ConfigurationError("environment tilts need a measurement model")
        budget = replace(SENSITIVITY_BUDGET, workers=self.workers)
        points = environment_sensitivity(exp.first, exp.coefficients, scenario.sensitivity, budget)
        return [p.to_dict() for p in points]

    def _write_trajectories(self, config: RunConfig) -> str:
        width = max((c.n_paths for c in CheckpointRecord.select()), default=0)
        if config.fmt == flag.FORMAT_CSV:
            path = self._out(config, f"{TRAJECTORY_FILE}.csv")
            with open(path, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(CSV_PREFIX + tuple(f"p_{k + 1}" for k in range(width)))
                for record, cp in TrajectoryRecord.iter_rows():
                    padding = [""] * (width - cp.n_paths)
                    writer.writerow(
                        [repr(record.time), record.trajectory_id, record.path_index]
                        + [repr(p) for p in cp.probabilities]
                        + padding
                    )
            return path
        path = self._out(config, f"{TRAJECTORY_FILE}.json")
        records = [
            {
                "time": record.time,
                "trajectory_id": record.trajectory_id,
                "path_index": record.path_index,
                "probabilities": cp.probabilities,
            }
            for record, cp in TrajectoryRecord.iter_rows()
        ]
        write_json(path, {"records": records})
        return path

    @staticmethod
    def _checkpoint_summary(run, index):
        ensemble = run.ensemble
        cp = run.timeline.checkpoints[index]
        counts = TrajectoryRecord.occupation_counts(index)
        observed = [counts.get(k + 1, 0) for k in range(len(cp.probabilities))]
        z = ensemble.z_scores(index)
        summary = {
            "time": cp.time,
            "paths": len(cp.probabilities),
            "targets": cp.probabilities.weights.tolist(),
            "counts": observed,
            "frequencies": [n / ensemble.n_traj for n in observed],
            "z_scores": z.tolist(),
            "max_abs_z": float(abs(z).max()),
            "pointer": run.pointer_statistics(index),
        }
        return summary

    @exit_code
    def cmd_run(self, config: RunConfig) -> int:
        scenario = self.load_scenario(config)
        run = run_scenario(scenario, self.workers)
        TrajectoryRecord.record_ensemble(run.ensemble)
        trajectories = self._write_trajectories(config)
        n_cp = len(run.timeline.checkpoints)
        summary = {
            "scenario": scenario.to_dict(),
            "metadata": run.timeline.metadata,
            "n_traj": run.ensemble.n_traj,
            "seed": run.ensemble.seed,
            "jumps": run.ensemble.jumps,
            "transfers": run.ensemble.transfers,
            "checkpoints": [self._checkpoint_summary(run, i) for i in range(n_cp)],
            "joint": run.joint_table() if scenario.experiment.sequential else None,
        }
        write_json(self._out(config, SUMMARY_FILE), summary)
        logging.info(f"run {scenario.name}: wrote {trajectories} and {SUMMARY_FILE}")
        return flag.EXIT_OK

    @exit_code
    def cmd_verify(self, config: RunConfig) -> int:
        sizes = SuiteSizes.quick() if config.quick else SuiteSizes()
        seed = config.seed if config.seed is not None else 0
        report = run_suites(seed, sizes, names=config.suites or None)
        write_json(self._out(config, VERIFY_FILE), report.to_dict())
        failed = [r.name for r in report.results if not r.passed]
        if failed:
            logging.warning(f"verify failed: {failed}")
        return report.exit_code

    @exit_code
    def cmd_faithfulness(self, config: RunConfig) -> int:
        scenario = self.load_scenario(config)
        if scenario.experiment is None or not scenario.experiment.sequential:
            raise ConfigurationError(f"scenario {scenario.name!r} has no second measurement")
        run = run_scenario(scenario, self.workers)
        report = check_faithfulness(scenario.experiment, run)
        write_json(
            self._out(config, FAITHFULNESS_FILE),
            {"scenario": scenario.name, "report": report.to_dict()},
        )
        logging.info(f"faithfulness {scenario.name}: satisfied={report.satisfied}")
        return flag.EXIT_OK if report.satisfied else flag.EXIT_PROPERTY_FAILED
