import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from modalsim import status_flag as flag
from modalsim.decomp import (
    Decomposition,
    DecompositionResult,
    ProbabilityDistribution,
    SearchBudget,
    a_orthogonal_decomposition,
    apply_doubly_stochastic,
    bi_orthogonal_decomposition,
    brute_force_min_entropy,
    check_prefix_dominance,
    is_product_decomposition,
    is_product_vector,
    iu_entropy,
    majorizes,
    preferred_decomposition,
    shannon_entropy,
)
from modalsim.exceptions import StructuralError, UnresolvedMinimization
from modalsim.linalg import CoarseGraining, HilbertStructure, StateVector, tensor_product
from modalsim.utils import random_probabilities, random_state, random_unitary

seeds = st.integers(min_value=0, max_value=2 ** 32 - 1)
SMALL_BUDGET = SearchBudget(restarts=3, max_iter=300, penalized_restarts=1)


def _basis(dims, *indices):
    structure = HilbertStructure(dims)
    flat = np.ravel_multi_index(indices, dims)
    return StateVector.basis(int(flat), structure).amplitudes


def _w_state(n):
    dims = (2,) * n
    amps = sum(_basis(dims, *[int(i == k) for i in range(n)]) for k in range(n))
    return StateVector.from_amplitudes(amps, dims, normalize=True)


@pytest.fixture
def ghz_like():
    dims = (2, 2, 2)
    amps = 0.6 * _basis(dims, 0, 0, 0) + 0.8 * _basis(dims, 1, 1, 1)
    return StateVector.from_amplitudes(amps, dims)


def test_shannon_entropy_uniform():
    assert shannon_entropy([0.25] * 4) == pytest.approx(math.log(4))
    assert shannon_entropy([1.0, 0.0]) == 0.0


def test_shannon_entropy_rejects_non_distribution():
    with pytest.raises(StructuralError):
        shannon_entropy([0.5, 0.6])
    with pytest.raises(StructuralError):
        ProbabilityDistribution([np.nan, 1.0])


def test_shannon_entropy_pluggable_functional():
    # sum x(1-x), the linear entropy
    value = shannon_entropy([0.5, 0.5], concave=lambda x: x * (1 - x))
    assert value == pytest.approx(0.5)


def test_decomposition_build_canonical():
    dims = (2, 2, 2)
    vectors = [_basis(dims, 0, 0, 0), _basis(dims, 1, 1, 1), _basis(dims, 0, 1, 0)]
    target = StateVector.from_amplitudes(0.6j * vectors[0] + 0.8 * vectors[1], dims)
    d = Decomposition.build([0.6j, 0.8, 0.0], vectors, target)
    assert len(d) == 2
    assert_allclose(d.coefficients, [0.8, 0.6])
    # phase moved into the vector
    assert_allclose(d.vectors[1].amplitudes, 1j * vectors[0])


def test_decomposition_build_rejects_mismatch(ghz_like):
    vectors = [_basis((2, 2, 2), 0, 0, 0), _basis((2, 2, 2), 1, 1, 1)]
    with pytest.raises(StructuralError):
        Decomposition.build([0.8, 0.6], vectors, ghz_like)


def test_bi_orthogonal_bell_is_degenerate():
    bell = StateVector.from_amplitudes([1, 0, 0, 1], (2, 2), normalize=True)
    result = bi_orthogonal_decomposition(bell, CoarseGraining((0,), (1,)))
    assert result.method == flag.METHOD_BI_ORTHOGONAL
    assert not result.unique
    assert result.degeneracy_note
    assert_allclose(result.decomposition.coefficients, [1 / math.sqrt(2)] * 2)
    assert result.entropy == pytest.approx(math.log(2))


@settings(max_examples=25, deadline=None)
@given(seed=seeds)
def test_bi_orthogonal_reconstructs_random_state(seed):
    rng = np.random.default_rng(seed)
    psi = StateVector.from_amplitudes(random_state(12, rng), (2, 3, 2))
    result = bi_orthogonal_decomposition(psi, CoarseGraining((1,), (0, 2)))
    d = result.decomposition
    assert_allclose(d.matrix @ d.coefficients, psi.amplitudes, atol=1e-9)
    assert np.all(np.diff(d.coefficients) <= 1e-12)


def test_preferred_product_state():
    rng = np.random.default_rng(7)
    parts = [StateVector.from_amplitudes(random_state(d, rng)) for d in (2, 3, 2)]
    psi = tensor_product(parts)
    result = preferred_decomposition(psi)
    assert result.method == flag.METHOD_PRODUCT_CUT
    assert len(result.decomposition) == 1
    assert result.entropy == pytest.approx(0.0, abs=1e-12)


def test_preferred_ghz_like(ghz_like):
    result = preferred_decomposition(ghz_like)
    assert result.method == flag.METHOD_PRODUCT_CUT
    assert result.unique
    assert_allclose(result.decomposition.coefficients, [0.8, 0.6], atol=1e-12)
    assert result.entropy == pytest.approx(shannon_entropy([0.64, 0.36]))
    assert is_product_decomposition(result.decomposition)


@pytest.mark.parametrize("dims", [(2, 2, 2), (3, 3, 3), (2, 2, 2, 2)])
def test_preferred_equal_weight_ghz(dims):
    n = dims[0]
    amps = sum(_basis(dims, *[i] * len(dims)) for i in range(n))
    psi = StateVector.from_amplitudes(amps, dims, normalize=True)
    result = preferred_decomposition(psi)
    assert result.method == flag.METHOD_PRODUCT_CUT
    assert not result.heuristic
    assert not result.unique
    assert result.entropy == pytest.approx(math.log(n))
    assert is_product_decomposition(result.decomposition)
    expected = Decomposition.build(
        [1 / math.sqrt(n)] * n, [_basis(dims, *[i] * len(dims)) for i in range(n)], psi
    )
    assert result.decomposition.same_terms(expected)


def test_preferred_needs_two_factors():
    psi = StateVector.from_amplitudes([1, 0, 0])
    with pytest.raises(StructuralError):
        preferred_decomposition(psi)


def test_preferred_rejects_unnormalized():
    psi = StateVector.from_amplitudes([1, 1, 0, 0], (2, 2))
    with pytest.raises(StructuralError):
        preferred_decomposition(psi)


def test_brute_force_w_state():
    psi = _w_state(3)
    result = preferred_decomposition(psi, budget=SMALL_BUDGET)
    assert result.method == flag.METHOD_BRUTE_FORCE
    assert result.heuristic
    assert result.entropy <= math.log(3) + 1e-9
    assert is_product_decomposition(result.decomposition)


def test_brute_force_is_deterministic():
    psi = _w_state(3)
    a = brute_force_min_entropy(psi, budget=SMALL_BUDGET)
    b = brute_force_min_entropy(psi, budget=SMALL_BUDGET)
    assert a.entropy == b.entropy
    assert a.decomposition.same_terms(b.decomposition)


def test_brute_force_dimension_limit():
    with pytest.raises(StructuralError):
        brute_force_min_entropy(_w_state(7))


def test_unresolved_carries_candidate():
    with pytest.raises(UnresolvedMinimization) as e:
        preferred_decomposition(_w_state(7))
    candidate = e.value.candidate
    assert isinstance(candidate, DecompositionResult)
    assert candidate.method == flag.METHOD_BI_ORTHOGONAL


def test_is_product_vector():
    dims = HilbertStructure((2, 2))
    assert is_product_vector(_basis((2, 2), 0, 1), dims)
    assert not is_product_vector(np.array([1, 0, 0, 1]) / math.sqrt(2), dims)


def test_result_dict_restores(ghz_like):
    result = preferred_decomposition(ghz_like)
    restored = DecompositionResult.from_dict(result.to_dict())
    assert restored.decomposition.same_terms(result.decomposition)
    assert restored.method == result.method
    assert restored.grain == result.grain


def test_majorization():
    assert majorizes([1.0, 0.0], [0.5, 0.5])
    assert not majorizes([0.5, 0.5], [0.9, 0.1])
    assert majorizes([0.7, 0.3], [0.4, 0.3, 0.3])


def test_prefix_dominance():
    assert check_prefix_dominance([0.6, 0.3, 0.1], [0.1, 0.3, 0.6])
    assert not check_prefix_dominance([0.1, 0.3, 0.6], [0.6, 0.3, 0.1])
    with pytest.raises(StructuralError):
        check_prefix_dominance([1.0], [0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(seed=seeds, size=st.integers(min_value=2, max_value=6))
def test_doubly_stochastic_is_majorized(seed, size):
    rng = np.random.default_rng(seed)
    p = random_probabilities(size, rng)
    q = apply_doubly_stochastic(p, random_unitary(size, rng))
    assert majorizes(p, q)
    assert shannon_entropy(q) >= shannon_entropy(p) - 1e-10


def test_doubly_stochastic_needs_unitary():
    with pytest.raises(StructuralError):
        apply_doubly_stochastic([0.5, 0.5], [[1, 1], [0, 1]])


def test_a_orthogonal_lowers_entropy():
    dims = (2, 2)
    zero, plus = np.array([1, 0]), np.array([1, 1]) / math.sqrt(2)
    v1 = np.kron(zero, np.array([1, 0]))
    v2 = np.kron(plus, np.array([0, 1]))
    psi = StateVector.from_amplitudes(0.8 * v1 + 0.6 * v2, dims)
    d = Decomposition.build([0.8, 0.6], [v1, v2], psi)
    grain = CoarseGraining((0,), (1,))
    result = a_orthogonal_decomposition(d, grain)
    assert iu_entropy(result) <= iu_entropy(d) + 1e-12
    a_side = [np.linalg.svd(v.tensor())[0][:, 0] for v in result.vectors]
    assert abs(np.vdot(a_side[0], a_side[1])) < 1e-9


def test_a_orthogonal_rejects_entangled_terms():
    bell = StateVector.from_amplitudes([1, 0, 0, 1], (2, 2), normalize=True)
    d = Decomposition.build([1.0], [bell.amplitudes], bell)
    with pytest.raises(StructuralError):
        a_orthogonal_decomposition(d, CoarseGraining((0,), (1,)))
