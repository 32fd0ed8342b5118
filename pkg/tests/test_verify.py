import numpy as np
import pytest

from modalsim import status_flag as flag
from modalsim.dynamics import excess_rates, minimal_rates
from modalsim.verify import SUITES, PropertyResult, SuiteSizes, run_suites

CHEAP_SUITES = [
    "a_orthogonal_construction",
    "doubly_stochastic_majorization",
    "prefix_dominance",
    "projector_monotonicity",
    "currents_and_rates",
    "ontology_structure",
    "measurement_decompositions",
    "linalg_structure",
    "reductionist_minimality",
    "ensemble_born_statistics",
]


def _faulty_rule(currents, weights, strict=True):
    return 2 * minimal_rates(currents, weights, strict)


def _frozen_rule(currents, weights, strict=True):
    return np.zeros_like(currents)


def _leaky_rule(currents, weights, strict=True):
    # mass flows both ways between every pair, breaking the current balance
    return excess_rates(0.5)(currents, weights, strict) + 0.1


def test_registry():
    assert set(CHEAP_SUITES) | {"schmidt_optimality"} == set(SUITES)


@pytest.mark.parametrize("name", CHEAP_SUITES)
def test_suite_passes(name):
    report = run_suites(seed=0, sizes=SuiteSizes.quick(), names=[name])
    result = report.results[0]
    assert result.cases > 0
    assert result.passed, result.counterexamples
    assert report.exit_code == flag.EXIT_OK


def test_schmidt_optimality_small():
    report = run_suites(seed=1, sizes=SuiteSizes(schmidt=3), names=["schmidt_optimality"])
    assert report.passed
    assert report.results[0].cases == 3


@pytest.mark.parametrize("rule", [_faulty_rule, _leaky_rule])
def test_invalid_rate_rule_fails(rule):
    report = run_suites(
        seed=0, sizes=SuiteSizes.quick(), rate_rule=rule, names=["currents_and_rates"]
    )
    result = report.results[0]
    assert not report.passed
    assert report.exit_code == flag.EXIT_PROPERTY_FAILED
    assert result.counterexamples
    assert all(c["check"] == "rate_consistency" for c in result.counterexamples)


def test_report_is_reproducible():
    names = ["prefix_dominance", "ontology_structure"]
    first = run_suites(seed=42, sizes=SuiteSizes.quick(), names=names).to_dict()
    second = run_suites(seed=42, sizes=SuiteSizes.quick(), names=names).to_dict()
    assert first == second
    assert first["seed"] == 42
    assert [p["name"] for p in first["properties"]] == names


def test_property_result_caps_dumps():
    result = PropertyResult("demo")
    for i in range(10):
        result.check(False, case=i)
    assert result.failures == 10
    assert len(result.counterexamples) == 5
    assert not result.to_dict()["passed"]


def test_quick_sizes_cover_every_suite():
    quick, full = SuiteSizes.quick(), SuiteSizes()
    assert quick.ensemble == 2
    assert quick.linalg < full.linalg
    assert quick.reductionist < full.reductionist


def test_ensemble_suite_catches_frozen_paths():
    report = run_suites(
        seed=3, sizes=SuiteSizes(ensemble=4), rate_rule=_frozen_rule, names=["ensemble_born_statistics"]
    )
    result = report.results[0]
    assert not result.passed
    assert {c["check"] for c in result.counterexamples} == {"born_frequencies"}
