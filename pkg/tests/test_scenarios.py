import json
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from modalsim import status_flag as flag
from modalsim.decomp import SearchBudget, preferred_decomposition
from modalsim.exceptions import ConfigurationError, ModelInconsistencyError, StructuralError
from modalsim.scenarios import (
    INTERACTION_RAMP,
    PROVIDER_CLOSED_FORM,
    SPIN_DOWN_Z,
    SPIN_UP_X,
    SPIN_UP_Z,
    Scenario,
    Timing,
    build_measurement_unitary,
    check_faithfulness,
    environment_sensitivity,
    expected_preferred_decomposition_single,
    final_state_single,
    generalized_born_probability,
    initial_state_single,
    load_scenario,
    measurement_model,
    run_scenario,
    scenario_from_dict,
    sequence_final_states,
    sequential_experiment,
    spin_example,
    spin_microstates,
    spin_sequence,
    spin_single,
    spin_z,
    tilted_final_state,
)

C = (0.6, 0.8)


@pytest.fixture(scope="module")
def fig1_run():
    scenario = scenario_from_dict({"preset": "spin_fig1", "ensemble": {"n_traj": 4000, "seed": 3}})
    return run_scenario(scenario)


def test_model_rejects_non_orthonormal_eigenvectors():
    with pytest.raises(ModelInconsistencyError):
        measurement_model([SPIN_UP_Z, SPIN_UP_X], (0.5, -0.5))


def test_model_rejects_small_apparatus():
    with pytest.raises(ModelInconsistencyError):
        spin_z(apparatus_dim=2)


def test_model_rejects_unnormalized_weights():
    with pytest.raises(ModelInconsistencyError):
        spin_z(microstates=(0.5, 0.5))


def test_spin_z_layout():
    model = spin_z()
    assert model.structure.factor_dims == (2, 3, 3)
    assert model.outcome_labels == ("+z", "-z")
    assert not model.non_orthogonal
    assert_allclose(model.variable.entries, np.diag([0.5, -0.5]))
    assert model.pointer_projector(1).rank == 1


@pytest.mark.parametrize("model", [spin_z(), spin_z(microstates=(math.sqrt(0.7), math.sqrt(0.3)))])
def test_measurement_unitary_maps_initial_to_final(model):
    u = build_measurement_unitary(model)
    assert u.is_unitary()
    out = u.apply(initial_state_single(model, C))
    assert_allclose(out.amplitudes, final_state_single(model, C).amplitudes, atol=1e-10)


@pytest.mark.parametrize("factory", [spin_single, spin_microstates])
def test_single_stage_decomposition_is_preferred(factory):
    exp = factory(C)
    expected = expected_preferred_decomposition_single(exp.first, C)
    found = preferred_decomposition(final_state_single(exp.first, C))
    assert found.method == flag.METHOD_PRODUCT_CUT
    assert found.decomposition.same_terms(expected)


def test_microstate_weights():
    exp = spin_microstates(C)
    expected = expected_preferred_decomposition_single(exp.first, C)
    assert_allclose(
        np.sort(expected.probabilities.weights),
        np.sort([0.36 * 0.7, 0.36 * 0.3, 0.64 * 0.7, 0.64 * 0.3]),
        atol=1e-12,
    )


def test_coefficients_must_be_normalized():
    with pytest.raises(StructuralError):
        initial_state_single(spin_z(), (0.6, 0.6))


@pytest.mark.parametrize("factory", [spin_example, spin_sequence])
def test_two_stage_unitaries(factory):
    exp = factory(C)
    state = exp.initial_state()
    for stage, u in enumerate(exp.stage_unitaries, start=1):
        assert u.is_unitary()
        state = u.apply(state)
        assert_allclose(state.amplitudes, exp.stage_state(stage).amplitudes, atol=1e-10)
        found = preferred_decomposition(state, exp.structure)
        assert found.method == flag.METHOD_PRODUCT_CUT
        assert found.decomposition.same_terms(exp.expected_decomposition(stage))


def test_spin_example_structure():
    exp = spin_example(C)
    assert exp.adaptive
    assert exp.structure.factor_dims == (2, 3, 7, 3, 7)
    assert exp.factors == {"A1": 1, "A2": 2, "E1": 3, "E2": 4}


def test_sequence_final_states_repeatable():
    exp = sequential_experiment(spin_z(), spin_z(), C)
    after_first, after_second = sequence_final_states(exp)
    u1, _ = exp.stage_unitaries
    assert_allclose(after_first.amplitudes, u1.apply(exp.initial_state()).amplitudes, atol=1e-10)
    for k, p in enumerate(exp.first_pointers):
        for j, q in enumerate(exp.second_pointers[k]):
            weight = np.linalg.norm(q.apply(p.apply(after_second))) ** 2
            assert weight == pytest.approx(C[k] ** 2 if j == k else 0.0, abs=1e-10)


def test_sequence_final_states_needs_second_stage():
    with pytest.raises(StructuralError):
        sequence_final_states(spin_single(C))


def test_generalized_born_probability():
    exp = spin_example(C)
    sx = exp.second_for_outcome[1].eigenvectors
    assert generalized_born_probability(exp.first, sx, 1, 0) == pytest.approx(1.0)
    assert generalized_born_probability(exp.first, sx, 0, 0) == pytest.approx(0.5)
    with pytest.raises(StructuralError):
        generalized_born_probability(exp.first, sx, 2, 0)


def test_born_table():
    table = spin_sequence(C).born_table()
    cos2 = math.cos(math.pi / 6) ** 2
    assert_allclose(table, [[0.36 * cos2, 0.36 * (1 - cos2)], [0.64 * (1 - cos2), 0.64 * cos2]])
    assert table.sum() == pytest.approx(1.0)


def test_pointer_reading():
    exp = spin_example(C)
    terms = exp.stage_terms(2)
    for _, vector, label in terms:
        assert exp.pointer_reading(vector) == label
    assert exp.pointer_reading(exp.initial_state().amplitudes) == (None, None)


def test_timing_validation():
    with pytest.raises(ConfigurationError):
        Timing(first=2.0, second=1.0).validate(True, "instant")
    with pytest.raises(ConfigurationError):
        Timing(first=1.0, second=1.1, ramp=0.2).validate(True, INTERACTION_RAMP)


def test_scenario_rejects_closed_form_ramp():
    with pytest.raises(ConfigurationError):
        Scenario("x", experiment=spin_single(C), provider=PROVIDER_CLOSED_FORM, interaction=INTERACTION_RAMP)


def test_scenario_default_checkpoints():
    assert Scenario("x", experiment=spin_example(C)).checkpoints == (0.0, 1.5, 3.0)
    assert Scenario("x", experiment=spin_single(C)).checkpoints == (0.0, 3.0)


def test_scenario_overrides():
    scenario = Scenario("x", experiment=spin_single(C)).with_overrides(n_traj=7, seed=None)
    assert scenario.n_traj == 7
    assert scenario.seed == 0


def test_scenario_from_dict_custom_experiment():
    data = {
        "name": "custom",
        "coefficients": [[0.6, 0.0], [0.0, 0.8]],
        "first": {"eigenvectors": [[1, 0], [0, 1]], "eigenvalues": [1, -1]},
        "second": {"eigenvectors": [[1, 0], [0, 1]], "eigenvalues": [1, -1]},
    }
    scenario = scenario_from_dict(data)
    assert scenario.experiment.sequential
    assert not scenario.experiment.adaptive
    assert_allclose(np.abs(scenario.experiment.coefficients), [0.6, 0.8])


def test_scenario_from_dict_bare_state():
    amps = [[0.5, 0], 0, 0, 0.5, 0, {"re": 0.5}, 0.5, 0, 0, 0, 0, 0, 0, 0, 0, 0]
    scenario = scenario_from_dict({"state": {"amplitudes": amps, "factor_dims": [2, 2, 2, 2]}})
    assert scenario.experiment is None
    assert scenario.target_state.structure.factor_dims == (2, 2, 2, 2)


@pytest.mark.parametrize(
    "data",
    [
        {"preset": "nope"},
        {"state": {"amplitudes": [1, 1], "factor_dims": [2]}},
        {"state": {"amplitudes": [[1, 0, 0]], "factor_dims": [1]}},
        {"preset": "spin_fig1", "timing": {"first": 3.0}},
        {"preset": "spin_fig1", "ensemble": {"n_traj": 0}},
        {"preset": "spin_fig1", "coefficients": [1.0, 0.0]},
    ],
)
def test_invalid_scenarios(data):
    with pytest.raises(ConfigurationError):
        scenario_from_dict(data)


def test_load_scenario(tmp_path):
    missing = tmp_path / "missing.json"
    assert load_scenario(missing, "spin_single").name == "spin_single"
    with pytest.raises(ConfigurationError):
        load_scenario(missing)
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_scenario(broken)
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"preset": "spin_sequence", "ensemble": {"n_traj": 12}}))
    assert load_scenario(good).n_traj == 12
    assert load_scenario(good, "spin_single").name == "spin_single"


def test_run_spin_example(fig1_run):
    final = fig1_run.pointer_statistics(-1)
    assert final["labels"] == ["+z", "-z", "undetermined"]
    assert_allclose(final["targets"], [0.36, 0.64, 0.0], atol=1e-12)
    assert max(abs(z) for z in final["z_scores"]) < 5
    assert sum(final["counts"]) == 4000

    start = fig1_run.pointer_statistics(0)
    assert start["counts"][-1] == 4000

    joint = fig1_run.joint_table()
    assert_allclose(joint["expected_conditional"], [[1.0, 0.0], [1.0, 0.0]], atol=1e-12)
    assert_allclose(joint["conditional"], [[1.0, 0.0], [1.0, 0.0]])
    assert fig1_run.ensemble.jumps == 0


def test_spin_example_is_faithful(fig1_run):
    report = check_faithfulness(fig1_run.scenario.experiment, fig1_run)
    assert report.checkpoint_time == 1.5
    assert report.satisfied
    for outcome in report.outcomes:
        assert outcome.predictable
        assert outcome.conditioned > 0
        assert outcome.fraction == 1.0
    assert [o.required_value for o in report.outcomes] == [0.5, 0.5]


def test_entangled_second_eigenstate_is_flagged_unsatisfiable():
    e00, e11 = np.eye(4)[0], np.eye(4)[3]
    phi_plus, phi_minus = (e00 + e11) / np.sqrt(2), (e00 - e11) / np.sqrt(2)
    first = measurement_model(
        [e00, e11],
        (0.5, -0.5),
        disturbed=[phi_plus, phi_minus],
        object_dims=(2, 2),
        labels=("00", "11"),
    )
    bell = measurement_model([phi_plus, phi_minus], (1.0, -1.0), object_dims=(2, 2), labels=("+", "-"))
    exp = sequential_experiment(first, bell, C, name="bell_second")
    scenario = Scenario("bell_second", exp, provider=PROVIDER_CLOSED_FORM, n_traj=400, seed=2)
    report = check_faithfulness(exp, run_scenario(scenario))
    assert [o.required_value for o in report.outcomes] == [1.0, -1.0]
    for outcome in report.outcomes:
        assert outcome.predictable
        assert not outcome.satisfiable
        assert outcome.conditioned > 0


def test_sequence_joint_frequencies():
    scenario = scenario_from_dict(
        {"preset": "spin_sequence", "ensemble": {"n_traj": 20000, "seed": 9}}
    )
    joint = run_scenario(scenario).joint_table()
    assert_allclose(joint["conditional"], joint["expected_conditional"], atol=0.03)
    counts = np.array(joint["counts"])
    assert_allclose(counts / counts.sum(), joint["expected_joint"], atol=0.02)


def test_closed_form_provider_agrees(fig1_run):
    scenario = fig1_run.scenario.with_overrides(provider=PROVIDER_CLOSED_FORM)
    closed = run_scenario(scenario)
    for a, b in zip(closed.timeline.checkpoints, fig1_run.timeline.checkpoints):
        assert_allclose(np.sort(a.probabilities.weights), np.sort(b.probabilities.weights), atol=1e-10)
    assert closed.pointer_statistics(-1)["targets"] == pytest.approx(
        fig1_run.pointer_statistics(-1)["targets"]
    )


def test_run_needs_experiment():
    with pytest.raises(ConfigurationError):
        run_scenario(scenario_from_dict({"preset": "bell_pairs"}))


def test_outcome_for():
    model = spin_z()
    assert model.outcome_for(SPIN_DOWN_Z) == (1, pytest.approx(1.0))


def test_tilted_environment_keeps_orthogonal_outcomes_resolved():
    points = environment_sensitivity(spin_z(), C, [0.0, 0.1])
    assert [p.method for p in points] == [flag.METHOD_PRODUCT_CUT] * 2
    assert points[0].fidelity == pytest.approx(1.0)
    assert points[1].environment_overlap == pytest.approx(0.01 / 1.01)
    assert points[1].fidelity == pytest.approx(1 / 1.01)
    for p in points:
        assert p.resolved
        assert abs(p.entropy_drift) < 1e-10
        assert p.pointer_weight == pytest.approx(1.0)


def test_tilted_environment_with_disturbance_falls_back():
    model = spin_z(disturbed=[SPIN_UP_Z, SPIN_UP_X])
    budget = SearchBudget(restarts=2, max_iter=300, penalized_restarts=0)
    untilted, tilted = environment_sensitivity(model, C, [0.0, 0.2], budget)
    assert untilted.method == flag.METHOD_PRODUCT_CUT
    assert untilted.fidelity == pytest.approx(1.0)
    assert tilted.method == flag.METHOD_BRUTE_FORCE
    assert tilted.resolved
    assert tilted.entropy >= 0
    assert 0 <= tilted.fidelity <= 1 + 1e-12
    assert tilted.to_dict()["epsilon"] == 0.2


def test_tilted_state_is_normalized():
    model = spin_z(microstates=(math.sqrt(0.7), math.sqrt(0.3)))
    psi = tilted_final_state(model, C, 0.3)
    assert psi.is_normalized()
    with pytest.raises(ConfigurationError):
        tilted_final_state(model, C, -0.1)


def test_scenario_sensitivity_setting():
    scenario = scenario_from_dict({"preset": "spin_single", "sensitivity": [0, 0.05]})
    assert scenario.sensitivity == (0.0, 0.05)
    assert scenario.to_dict()["sensitivity"] == [0.0, 0.05]
    with pytest.raises(ConfigurationError):
        scenario_from_dict({"preset": "spin_single", "sensitivity": [-1]})
