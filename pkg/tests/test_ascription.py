import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modalsim.ascription import (
    INDETERMINATE,
    PropertyAscription,
    ValueReport,
    common_ontology_contradiction,
    functional_relations_hold,
    mutually_exclusive,
    ontologies_identical,
    projector_status,
    sample_determinate,
    subsystem_preferred_projector,
    subsystem_variable_status,
    variable_status,
)
from modalsim.exceptions import ModalSimError, OntologyMismatchError, StructuralError
from modalsim.linalg import (
    LEFT,
    RIGHT,
    CoarseGraining,
    HilbertStructure,
    Operator,
    Projector,
    StateVector,
    embed_projector,
    projector_leq,
)
from modalsim.utils import random_projector, random_state, random_unitary

seeds = st.integers(min_value=0, max_value=2 ** 32 - 1)
E3 = np.eye(3)
SIGMA_Z = np.diag([1.0, -1.0])
SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]])


@pytest.fixture
def ascription():
    return PropertyAscription(Projector.ray(E3[0]), HilbertStructure((3,)))


def test_value_report_invariant():
    with pytest.raises(StructuralError):
        ValueReport(True)
    with pytest.raises(StructuralError):
        ValueReport(False, 1.0)


def test_preferred_projector_needs_rank(ascription):
    with pytest.raises(StructuralError):
        PropertyAscription(Projector.zero(3), ascription.ambient)


def test_projector_status(ascription):
    assert projector_status(Projector.from_vectors([E3[0], E3[1]]), ascription) == ValueReport(
        True, 1.0
    )
    assert projector_status(Projector.ray(E3[2]), ascription) == ValueReport(True, 0.0)
    plus = (E3[0] + E3[1]) / np.sqrt(2)
    assert projector_status(Projector.ray(plus), ascription) == INDETERMINATE
    assert projector_status(Projector.identity(3), ascription).value == 1.0
    assert projector_status(Projector.zero(3), ascription).value == 0.0


def test_projector_status_dimension(ascription):
    with pytest.raises(StructuralError):
        projector_status(Projector.identity(2), ascription)


def test_variable_status(ascription):
    v = Operator.from_matrix(np.diag([1.0, 2.0, 3.0]), hermitian=True)
    assert variable_status(v, ascription) == ValueReport(True, 1.0)
    w = Operator.from_matrix([[0, 1, 0], [1, 0, 0], [0, 0, 1]], hermitian=True)
    assert variable_status(w, ascription) == INDETERMINATE


@settings(max_examples=60, deadline=None)
@given(seed=seeds, inside=st.booleans())
def test_variable_status_follows_spectral_projectors(seed, inside):
    rng = np.random.default_rng(seed)
    u = random_unitary(4, rng)
    cuts = np.sort(rng.choice(np.arange(1, 4), size=int(rng.integers(1, 4)), replace=False))
    blocks = np.split(np.arange(4), cuts)
    values = rng.permutation([-2.0, -1.0, 1.0, 3.0])[: len(blocks)]
    spectral = [Projector.from_vectors(list(u[:, b].T), dim=4) for b in blocks]
    v = Operator.from_matrix(sum(x * p.matrix for x, p in zip(values, spectral)), hermitian=True)
    if inside:
        k = int(rng.integers(len(blocks)))
        home = u[:, blocks[k]]
        preferred = Projector.ray(home @ random_state(home.shape[1], rng))
    else:
        preferred = Projector.ray(random_state(4, rng))
    a = PropertyAscription(preferred, HilbertStructure((4,)))
    above = [k for k, p in enumerate(spectral) if projector_leq(preferred, p)]
    report = variable_status(v, a)
    assert report.determinate == (len(above) == 1)
    if report.determinate:
        assert report.value == pytest.approx(values[above[0]])


def test_disagreeing_ontology_checks_raise(monkeypatch):
    qubit = HilbertStructure((2,))
    up = PropertyAscription(Projector.ray([1, 0]), qubit)
    plus = PropertyAscription(Projector.ray(np.array([1, 1]) / np.sqrt(2)), qubit)
    monkeypatch.setattr("modalsim.ascription.ontologies_identical_closed_form", lambda a1, a2: True)
    with pytest.raises(OntologyMismatchError) as e:
        ontologies_identical(up, plus)
    assert e.value.identical
    assert isinstance(e.value, ModalSimError)


def test_subsystem_variable_status():
    up_down = np.kron([1, 0], [0, 1])
    a = PropertyAscription.from_state(StateVector.from_amplitudes(up_down, (2, 2)))
    assert subsystem_variable_status(SIGMA_Z, (0,), a).value == pytest.approx(1.0)
    assert subsystem_variable_status(SIGMA_Z, (1,), a).value == pytest.approx(-1.0)
    assert not subsystem_variable_status(SIGMA_X, (1,), a).determinate


def test_subsystem_preferred_projector():
    structure = HilbertStructure((2, 2))
    grain = CoarseGraining((0,), (1,))
    bell = Projector.ray(StateVector.from_amplitudes([1, 0, 0, 1], (2, 2), normalize=True))
    reduced = subsystem_preferred_projector(bell, grain, LEFT)
    assert reduced.equals(Projector.identity(2))
    assert reduced.structure.factor_dims == (2,)
    product = Projector.ray(np.kron([1, 0], [0, 1])).with_structure(structure)
    assert subsystem_preferred_projector(product, grain, LEFT).equals(Projector.ray([1, 0]))
    assert subsystem_preferred_projector(product, grain, RIGHT).equals(Projector.ray([0, 1]))


def test_subsystem_preferred_projector_needs_structure():
    with pytest.raises(StructuralError):
        subsystem_preferred_projector(Projector.identity(4), CoarseGraining((0,), (1,)), LEFT)


def test_subsystem_projectors_of_product_preferred_projectors():
    structure = HilbertStructure((2, 2))
    grain = CoarseGraining((0,), (1,))
    a1 = np.array([1, 0])
    a2 = np.array([1, 1]) / np.sqrt(2)
    for a, b in ((a1, np.array([1, 0])), (a2, np.array([0, 1]))):
        p_ab = PropertyAscription(Projector.ray(np.kron(a, b)), structure).preferred
        assert subsystem_preferred_projector(p_ab, grain, LEFT).equals(Projector.ray(a))
        assert subsystem_preferred_projector(p_ab, grain, RIGHT).equals(Projector.ray(b))


@settings(max_examples=100, deadline=None)
@given(seed=seeds, rank=st.integers(min_value=1, max_value=3))
def test_subsystem_preferred_projector_is_smallest(seed, rank):
    rng = np.random.default_rng(seed)
    structure = HilbertStructure((3, 2))
    grain = CoarseGraining((0,), (1,))
    q = random_projector(3, 2, rng)
    box = embed_projector(q, structure, (0,)).matrix
    p_ab = Projector.from_vectors(
        [box @ random_state(6, rng) for _ in range(rank)], dim=6, structure=structure
    )
    s = subsystem_preferred_projector(p_ab, grain, LEFT)
    assert projector_leq(p_ab, embed_projector(s, structure, (0,)))
    assert projector_leq(s, q)
    for r in (q, random_projector(3, 2, rng), random_projector(3, 1, rng), Projector.identity(3)):
        if projector_leq(p_ab, embed_projector(r, structure, (0,))):
            assert projector_leq(s, r)
    smaller = Projector.from_vectors(list(s.basis.T)[1:], dim=3)
    assert not projector_leq(p_ab, embed_projector(smaller, structure, (0,)))


def test_mutually_exclusive():
    s = HilbertStructure((3,))
    a0 = PropertyAscription(Projector.ray(E3[0]), s)
    a01 = PropertyAscription(Projector.from_vectors([E3[0], E3[1]]), s)
    a2 = PropertyAscription(Projector.ray(E3[2]), s)
    assert mutually_exclusive(a0, a2)
    assert not mutually_exclusive(a0, a01)


def test_ontologies_identical():
    qubit = HilbertStructure((2,))
    up = PropertyAscription(Projector.ray([1, 0]), qubit)
    down = PropertyAscription(Projector.ray([0, 1]), qubit)
    plus = PropertyAscription(Projector.ray(np.array([1, 1]) / np.sqrt(2)), qubit)
    assert ontologies_identical(up, down)
    assert ontologies_identical(up, up)
    assert not ontologies_identical(up, plus)

    s = HilbertStructure((3,))
    a0 = PropertyAscription(Projector.ray(E3[0]), s)
    a1 = PropertyAscription(Projector.ray(E3[1]), s)
    assert not ontologies_identical(a0, a1)


@settings(max_examples=40, deadline=None)
@given(seed=seeds, dim=st.integers(min_value=2, max_value=5))
def test_sampled_projectors_are_determinate(seed, dim):
    rng = np.random.default_rng(seed)
    rank = int(rng.integers(1, dim))
    a = PropertyAscription(random_projector(dim, rank, rng), HilbertStructure((dim,)))
    for _ in range(5):
        assert a.is_determinate(sample_determinate(a, rng))


@settings(max_examples=40, deadline=None)
@given(seed=seeds, dim=st.integers(min_value=3, max_value=5))
def test_functional_relations_on_determinate_pairs(seed, dim):
    rng = np.random.default_rng(seed)
    a = PropertyAscription(random_projector(dim, 1, rng), HilbertStructure((dim,)))
    p, q = sample_determinate(a, rng), sample_determinate(a, rng)
    assert functional_relations_hold(p, q, a)


def test_functional_relations_need_determinate(ascription):
    plus = Projector.ray((E3[0] + E3[1]) / np.sqrt(2))
    with pytest.raises(StructuralError):
        functional_relations_hold(plus, Projector.ray(E3[2]), ascription)


def test_common_ontology_contradiction():
    up, plus, down = Projector.ray([1, 0]), Projector.ray(np.array([1, 1]) / np.sqrt(2)), Projector.ray([0, 1])
    chain = common_ontology_contradiction(up, plus)
    assert chain.contradiction
    assert len(chain.steps) >= 3
    assert not common_ontology_contradiction(up, down).contradiction

    e = np.eye(3)
    overlapping = common_ontology_contradiction(
        Projector.from_vectors([e[0], e[1]]), Projector.from_vectors([e[1], e[2]])
    )
    assert not overlapping.contradiction
