"""
Measurement models as concrete unitaries and states.

A model maps |phi_k>|A_0>|E_0> to sum_mu f_k,mu |phi~_k>|A_k,mu>|E_k,mu>.
Experiments lay their factors out as S..., A1, A2, E1, E2 (single stage:
S..., A1, E1); every model vector is a product over those factors.

    scenario -> timeline -> ensemble -> pointer tables / faithfulness
"""
from __future__ import annotations

import functools
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg as sla

from modalsim.ascription import (
    PropertyAscription,
    projector_status,
    subsystem_variable_status,
)
from modalsim.decomp import (
    Decomposition,
    SearchBudget,
    is_product_vector,
    iu_entropy,
    preferred_decomposition,
)
from modalsim.dynamics import (
    EnsembleResult,
    InteractionEvent,
    PathFamily,
    Timeline,
    build_timeline,
    sample_ensemble,
)
from modalsim.exceptions import (
    ConfigurationError,
    ModelInconsistencyError,
    StructuralError,
    UnresolvedMinimization,
)
from modalsim.linalg import (
    CONSTRUCT_TOL,
    VERIFY_TOL,
    HilbertStructure,
    Operator,
    Projector,
    StateVector,
    embed_operator,
    embed_projector,
)
from modalsim.utils import parse_amplitudes, read_json

PROVIDER_PREFERRED = "preferred"
PROVIDER_CLOSED_FORM = "closed_form"
SUPPORT_PROVIDERS = (PROVIDER_PREFERRED, PROVIDER_CLOSED_FORM)

INTERACTION_INSTANT = "instant"
INTERACTION_RAMP = "ramp"
SUPPORT_INTERACTIONS = (INTERACTION_INSTANT, INTERACTION_RAMP)

RAMP_BUDGET = SearchBudget(restarts=2, max_iter=500, penalized_restarts=0)
SENSITIVITY_BUDGET = SearchBudget(restarts=4, max_iter=2000, penalized_restarts=2)

SPIN_UP_Z = np.array([1, 0], dtype=complex)
SPIN_DOWN_Z = np.array([0, 1], dtype=complex)
SPIN_UP_X = np.array([1, 1], dtype=complex) / math.sqrt(2)
SPIN_DOWN_X = np.array([1, -1], dtype=complex) / math.sqrt(2)
SPIN_HALF = (0.5, -0.5)


def _e(dim: int, index: int) -> np.ndarray:
    vec = np.zeros(dim, dtype=complex)
    vec[index] = 1
    return vec


def _kron(*vectors) -> np.ndarray:
    return functools.reduce(np.kron, vectors)


def _columns(vectors, dim=None) -> np.ndarray:
    arr = np.array([np.asarray(v, dtype=complex).reshape(-1) for v in vectors]).T
    if dim is not None and arr.shape[0] != dim:
        raise ModelInconsistencyError(f"vectors of length {arr.shape[0]}, expected {dim}")
    return arr


def _require_orthonormal(cols: np.ndarray, what: str, tol=CONSTRUCT_TOL):
    gram = cols.conj().T @ cols
    err = float(np.max(np.abs(gram - np.eye(cols.shape[1])), initial=0))
    if err > tol:
        raise ModelInconsistencyError(f"{what} are not orthonormal (error {err:.3e})")


@dataclass(frozen=True, eq=False)
class MeasurementModel:
    object_dims: Tuple[int, ...]
    eigenvectors: np.ndarray  # dS x m
    eigenvalues: np.ndarray
    disturbed: np.ndarray  # dS x m, normalized, possibly non-orthogonal
    weights: np.ndarray  # m x M, f_k,mu
    apparatus_ready: np.ndarray
    apparatus_states: np.ndarray  # m x M x dA
    environment_ready: np.ndarray
    environment_states: np.ndarray  # m x M x dE
    outcome_labels: Tuple[str, ...] = ()
    name: str = ""

    def __post_init__(self):
        for name in (
            "eigenvectors",
            "disturbed",
            "weights",
            "apparatus_ready",
            "apparatus_states",
            "environment_ready",
            "environment_states",
        ):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=complex))
        ds = int(np.prod(self.object_dims))
        phi, tilde, f = self.eigenvectors, self.disturbed, self.weights
        m = phi.shape[1]
        if phi.shape[0] != ds or tilde.shape != phi.shape:
            raise ModelInconsistencyError("eigenvectors and disturbed states must be dS x m")
        if len(self.eigenvalues) != m or f.shape[0] != m:
            raise ModelInconsistencyError(f"{m} eigenvectors need {m} eigenvalues and weight rows")
        _require_orthonormal(phi, "object eigenvectors")
        if np.max(np.abs(np.linalg.norm(tilde, axis=0) - 1)) > CONSTRUCT_TOL:
            raise ModelInconsistencyError("disturbed states must be normalized")
        if np.max(np.abs(np.sum(np.abs(f) ** 2, axis=1) - 1)) > CONSTRUCT_TOL:
            raise ModelInconsistencyError("microstate weights of each outcome must have unit norm")
        for kind in ("apparatus", "environment"):
            ready = getattr(self, f"{kind}_ready")
            states = getattr(self, f"{kind}_states")
            if states.shape[:2] != f.shape or states.shape[2] != ready.size:
                raise ModelInconsistencyError(f"{kind} states do not match the weights")
            _require_orthonormal(
                _columns([ready] + list(states.reshape(-1, ready.size))), f"{kind} states"
            )
        labels = tuple(self.outcome_labels) or tuple(str(k + 1) for k in range(m))
        if len(labels) != m:
            raise ModelInconsistencyError(f"{len(labels)} labels for {m} outcomes")
        object.__setattr__(self, "outcome_labels", labels)
        object.__setattr__(self, "object_dims", tuple(int(d) for d in self.object_dims))
        object.__setattr__(self, "eigenvalues", np.asarray(self.eigenvalues, dtype=float))

    @property
    def n_outcomes(self) -> int:
        return self.eigenvectors.shape[1]

    @property
    def n_micro(self) -> int:
        return self.weights.shape[1]

    @property
    def object_dim(self) -> int:
        return self.eigenvectors.shape[0]

    @property
    def apparatus_dim(self) -> int:
        return self.apparatus_ready.size

    @property
    def environment_dim(self) -> int:
        return self.environment_ready.size

    @property
    def structure(self) -> HilbertStructure:
        return HilbertStructure(self.object_dims + (self.apparatus_dim, self.environment_dim))

    @property
    def non_orthogonal(self) -> bool:
        return not np.allclose(
            self.disturbed.conj().T @ self.disturbed, np.eye(self.n_outcomes), atol=VERIFY_TOL
        )

    @property
    def variable(self) -> Operator:
        """V = sum_k v_k |phi_k><phi_k|"""
        phi = self.eigenvectors
        v = (phi * self.eigenvalues) @ phi.conj().T
        return Operator(v, HilbertStructure(self.object_dims), hermitian=True)

    def pointer_projector(self, k: int) -> Projector:
        return Projector.from_vectors(list(self.apparatus_states[k]), dim=self.apparatus_dim)

    def outcome_for(self, state) -> Tuple[int, float]:
        """Eigenvector index closest to `state` and the squared overlap"""
        overlaps = np.abs(self.eigenvectors.conj().T @ np.asarray(state, dtype=complex)) ** 2
        k = int(np.argmax(overlaps))
        return k, float(overlaps[k])

    def to_dict(self):
        return {
            "name": self.name,
            "object_dims": list(self.object_dims),
            "eigenvalues": self.eigenvalues.tolist(),
            "outcome_labels": list(self.outcome_labels),
            "apparatus_dim": self.apparatus_dim,
            "environment_dim": self.environment_dim,
            "microstates": self.n_micro,
            "non_orthogonal": self.non_orthogonal,
        }


def measurement_model(
    eigenvectors,
    eigenvalues,
    disturbed=None,
    microstates=None,
    apparatus_dim=None,
    environment_dim=None,
    ready_index=0,
    object_dims=None,
    labels=(),
    name="",
) -> MeasurementModel:
    """
    Model with computational-basis apparatus and environment states:
    A_0 = e_ready, A_k,mu = e_(ready + 1 + k M + mu), likewise for E.
    """
    phi = _columns(eigenvectors)
    m = phi.shape[1]
    tilde = phi if disturbed is None else _columns(disturbed, phi.shape[0])
    f = np.ones((m, 1), dtype=complex) if microstates is None else np.asarray(microstates, dtype=complex)
    if f.ndim == 1:
        f = np.tile(f, (m, 1))
    n_micro = f.shape[1]
    needed = ready_index + 1 + m * n_micro
    da = apparatus_dim or needed
    de = environment_dim or needed
    if da < needed or de < needed:
        raise ModelInconsistencyError(
            f"apparatus/environment need dimension >= {needed}, got {da}/{de}"
        )

    def states(dim):
        return np.array(
            [[_e(dim, ready_index + 1 + k * n_micro + mu) for mu in range(n_micro)] for k in range(m)]
        )

    return MeasurementModel(
        object_dims=tuple(object_dims) if object_dims else (phi.shape[0],),
        eigenvectors=phi,
        eigenvalues=np.asarray(eigenvalues, dtype=float),
        disturbed=tilde,
        weights=f,
        apparatus_ready=_e(da, ready_index),
        apparatus_states=states(da),
        environment_ready=_e(de, ready_index),
        environment_states=states(de),
        outcome_labels=tuple(labels),
        name=name,
    )


def _complete_unitary(inputs: np.ndarray, images: np.ndarray) -> np.ndarray:
    """U = [Y Yc][X Xc]^dagger, extending X -> Y by fixed orthonormal completions"""
    _require_orthonormal(inputs, "mapped input vectors", VERIFY_TOL)
    _require_orthonormal(images, "images of the mapped inputs", VERIFY_TOL)
    xc = sla.null_space(inputs.conj().T)
    yc = sla.null_space(images.conj().T)
    return np.hstack([images, yc]) @ np.hstack([inputs, xc]).conj().T


def _model_map(model: MeasurementModel) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    inputs, images = [], []
    for k in range(model.n_outcomes):
        inputs.append(_kron(model.eigenvectors[:, k], model.apparatus_ready, model.environment_ready))
        images.append(
            sum(
                model.weights[k, mu]
                * _kron(
                    model.disturbed[:, k],
                    model.apparatus_states[k, mu],
                    model.environment_states[k, mu],
                )
                for mu in range(model.n_micro)
            )
        )
    return inputs, images


def _stage_unitary(models: Sequence[MeasurementModel]) -> np.ndarray:
    inputs, images = [], []
    for model in models:
        x, y = _model_map(model)
        inputs += x
        images += y
    return _complete_unitary(_columns(inputs), _columns(images))


def build_measurement_unitary(model: MeasurementModel) -> Operator:
    u = _stage_unitary([model])
    logging.debug(f"measurement unitary for {model.name or 'model'}: dim {u.shape[0]}")
    return Operator(u, model.structure)


def _require_coefficients(c, m: int) -> np.ndarray:
    c = np.asarray(c, dtype=complex).reshape(-1)
    if c.size != m:
        raise StructuralError(f"{c.size} coefficients for {m} outcomes")
    if abs(np.sum(np.abs(c) ** 2) - 1) > CONSTRUCT_TOL:
        raise StructuralError("coefficients must satisfy sum |c_k|^2 = 1")
    return c


def initial_state_single(model: MeasurementModel, c) -> StateVector:
    c = _require_coefficients(c, model.n_outcomes)
    obj = model.eigenvectors @ c
    return StateVector(_kron(obj, model.apparatus_ready, model.environment_ready), model.structure)


def _single_terms(model: MeasurementModel, c):
    for k in range(model.n_outcomes):
        for mu in range(model.n_micro):
            vec = _kron(model.disturbed[:, k], model.apparatus_states[k, mu], model.environment_states[k, mu])
            yield c[k] * model.weights[k, mu], vec


def final_state_single(model: MeasurementModel, c) -> StateVector:
    c = _require_coefficients(c, model.n_outcomes)
    amps = sum(coef * vec for coef, vec in _single_terms(model, c))
    return StateVector(amps, model.structure)


def expected_preferred_decomposition_single(model: MeasurementModel, c) -> Decomposition:
    c = _require_coefficients(c, model.n_outcomes)
    terms = list(_single_terms(model, c))
    return Decomposition.build(
        [t[0] for t in terms], [t[1] for t in terms], final_state_single(model, c)
    )


def generalized_born_probability(model_first: MeasurementModel, second_eigenvectors, k, j) -> float:
    """Prob(j | k) = |<phi~_k|phi'_j>|^2"""
    if isinstance(second_eigenvectors, np.ndarray):
        second = second_eigenvectors
    else:
        second = _columns(second_eigenvectors)
    if not (0 <= k < model_first.n_outcomes and 0 <= j < second.shape[1]):
        raise StructuralError(f"outcome indices ({k}, {j}) out of range")
    return float(abs(np.vdot(model_first.disturbed[:, k], second[:, j])) ** 2)


def tilted_final_state(model: MeasurementModel, c, epsilon: float) -> StateVector:
    """
    final_state_single with every E_k,mu tilted toward the ready state,
    E'_k,mu = (E_k,mu + eps E_0) / sqrt(1 + eps^2), so distinct
    environment states overlap by eps^2 / (1 + eps^2).
    """
    if epsilon < 0:
        raise ConfigurationError(f"tilt must be nonnegative, got {epsilon}")
    c = _require_coefficients(c, model.n_outcomes)
    norm = math.sqrt(1 + epsilon ** 2)
    amps = 0
    for k in range(model.n_outcomes):
        for mu in range(model.n_micro):
            env = (model.environment_states[k, mu] + epsilon * model.environment_ready) / norm
            amps = amps + c[k] * model.weights[k, mu] * _kron(
                model.disturbed[:, k], model.apparatus_states[k, mu], env
            )
    return StateVector(amps, model.structure)


@dataclass(frozen=True)
class SensitivityPoint:
    epsilon: float
    environment_overlap: float
    resolved: bool
    method: str
    entropy: float
    entropy_drift: float
    fidelity: float
    pointer_weight: float

    def to_dict(self):
        return asdict(self)


def environment_sensitivity(
    model: MeasurementModel, c, epsilons: Sequence[float], budget: SearchBudget = None
) -> Tuple[SensitivityPoint, ...]:
    """
    Preferred decompositions of nearly-orthogonal-environment final states
    against the orthogonal one: entropy drift, weighted best-match
    fidelity to its terms and the weight on terms with a definite pointer.
    """
    reference = expected_preferred_decomposition_single(model, c)
    ref_entropy = iu_entropy(reference)
    apparatus = len(model.object_dims)
    pointers = [
        embed_projector(model.pointer_projector(k), model.structure, (apparatus,))
        for k in range(model.n_outcomes)
    ]
    points = []
    for eps in epsilons:
        psi = tilted_final_state(model, c, float(eps))
        try:
            result = preferred_decomposition(psi, model.structure, budget or SENSITIVITY_BUDGET)
            resolved = True
        except UnresolvedMinimization as e:
            if e.candidate is None:
                raise
            result, resolved = e.candidate, False
        found = result.decomposition
        overlaps = np.abs(reference.matrix.conj().T @ found.matrix) ** 2
        fidelity = float(reference.probabilities.weights @ overlaps.max(axis=1))
        pointer_weight = 0.0
        for weight, vector in zip(found.probabilities.weights, found.vectors):
            a = PropertyAscription.from_state(vector)
            if any(projector_status(p, a).value == 1.0 for p in pointers):
                pointer_weight += float(weight)
        point = SensitivityPoint(
            float(eps),
            float(eps) ** 2 / (1 + float(eps) ** 2),
            resolved,
            result.method,
            result.entropy,
            result.entropy - ref_entropy,
            fidelity,
            pointer_weight,
        )
        logging.info(
            f"tilt {point.epsilon:g}: method={point.method} drift={point.entropy_drift:.3e} "
            f"fidelity={point.fidelity:.6f} pointer_weight={point.pointer_weight:.6f}"
        )
        points.append(point)
    return tuple(points)


@dataclass(frozen=True, eq=False)
class AdaptiveExperiment:
    """
    One or two measurement stages on S..., A1, (A2,) E1, (E2). The second
    stage measures V_(k) on first outcome k; first-stage images leave the
    second apparatus in its readiness state for that k. A fixed second
    variable is the case where every k shares one model.
    """

    first: MeasurementModel
    second_for_outcome: Tuple[MeasurementModel, ...] = ()
    second_apparatus_initial: Optional[np.ndarray] = None
    second_environment_initial: Optional[np.ndarray] = None
    coefficients: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        seconds = tuple(self.second_for_outcome)
        object.__setattr__(self, "second_for_outcome", seconds)
        if not seconds:
            return
        if len(seconds) != self.first.n_outcomes:
            raise ModelInconsistencyError("one second-stage model per first outcome is required")
        dims = {(s.object_dims, s.apparatus_dim, s.environment_dim) for s in seconds}
        if len(dims) != 1 or seconds[0].object_dims != self.first.object_dims:
            raise ModelInconsistencyError("second-stage models must share one layout")
        if self.second_apparatus_initial is None:
            object.__setattr__(self, "second_apparatus_initial", seconds[0].apparatus_ready)
        if self.second_environment_initial is None:
            object.__setattr__(self, "second_environment_initial", seconds[0].environment_ready)
        for k, model in enumerate(seconds):
            amps = model.eigenvectors.conj().T @ self.first.disturbed[:, k]
            if abs(np.sum(np.abs(amps) ** 2) - 1) > VERIFY_TOL:
                raise ModelInconsistencyError(
                    f"second variable for outcome {k + 1} does not span the disturbed state"
                )

    @property
    def sequential(self) -> bool:
        return bool(self.second_for_outcome)

    @property
    def adaptive(self) -> bool:
        return len({id(m) for m in self.second_for_outcome}) > 1

    @property
    def n_object(self) -> int:
        return len(self.first.object_dims)

    @property
    def object_factors(self) -> Tuple[int, ...]:
        return tuple(range(self.n_object))

    @property
    def factors(self) -> Dict[str, int]:
        n = self.n_object
        if not self.sequential:
            return {"A1": n, "E1": n + 1}
        return {"A1": n, "A2": n + 1, "E1": n + 2, "E2": n + 3}

    @cached_property
    def structure(self) -> HilbertStructure:
        first = self.first
        if not self.sequential:
            return first.structure
        second = self.second_for_outcome[0]
        return HilbertStructure(
            first.object_dims
            + (first.apparatus_dim, second.apparatus_dim, first.environment_dim, second.environment_dim)
        )

    def _layout(self, obj, a1, e1, a2=None, e2=None) -> np.ndarray:
        if not self.sequential:
            return _kron(obj, a1, e1)
        return _kron(obj, a1, a2, e1, e2)

    def initial_state(self, c=None) -> StateVector:
        c = _require_coefficients(self._coefficients(c), self.first.n_outcomes)
        first = self.first
        amps = self._layout(
            first.eigenvectors @ c,
            first.apparatus_ready,
            first.environment_ready,
            self.second_apparatus_initial,
            self.second_environment_initial,
        )
        return StateVector(amps, self.structure)

    def _coefficients(self, c):
        if c is None:
            if self.coefficients is None:
                raise ConfigurationError("experiment has no default coefficients")
            return self.coefficients
        return c

    def stage_terms(self, stage: int, c=None) -> List[Tuple[complex, np.ndarray, Tuple]]:
        """Closed-form terms (coefficient, vector, outcome label) after `stage` interactions"""
        c = _require_coefficients(self._coefficients(c), self.first.n_outcomes)
        first = self.first
        if stage == 0:
            return [(1.0, self.initial_state(c).amplitudes, ())]
        if stage > (2 if self.sequential else 1):
            raise StructuralError(f"experiment has no stage {stage}")
        terms = []
        for k in range(first.n_outcomes):
            second = self.second_for_outcome[k] if self.sequential else None
            for mu in range(first.n_micro):
                coef = c[k] * first.weights[k, mu]
                a1, e1 = first.apparatus_states[k, mu], first.environment_states[k, mu]
                tilde = first.disturbed[:, k]
                if stage == 1:
                    a2 = second.apparatus_ready if second else None
                    e2 = second.environment_ready if second else None
                    terms.append((coef, self._layout(tilde, a1, e1, a2, e2), (k,)))
                    continue
                d = second.eigenvectors.conj().T @ tilde
                for j in range(second.n_outcomes):
                    for nu in range(second.n_micro):
                        vec = self._layout(
                            second.disturbed[:, j],
                            a1,
                            e1,
                            second.apparatus_states[j, nu],
                            second.environment_states[j, nu],
                        )
                        terms.append((coef * d[j] * second.weights[j, nu], vec, (k, j)))
        return terms

    def stage_state(self, stage: int, c=None) -> StateVector:
        amps = sum(coef * vec for coef, vec, _ in self.stage_terms(stage, c))
        return StateVector(amps, self.structure)

    def expected_decomposition(self, stage: int, c=None) -> Decomposition:
        terms = self.stage_terms(stage, c)
        return Decomposition.build(
            [t[0] for t in terms], [t[1] for t in terms], self.stage_state(stage, c)
        )

    @cached_property
    def stage_unitaries(self) -> Tuple[Operator, ...]:
        first = self.first
        if not self.sequential:
            return (build_measurement_unitary(first),)
        inputs, images = [], []
        for k in range(first.n_outcomes):
            second = self.second_for_outcome[k]
            inputs.append(
                self._layout(
                    first.eigenvectors[:, k],
                    first.apparatus_ready,
                    first.environment_ready,
                    self.second_apparatus_initial,
                    self.second_environment_initial,
                )
            )
            images.append(
                sum(
                    first.weights[k, mu]
                    * self._layout(
                        first.disturbed[:, k],
                        first.apparatus_states[k, mu],
                        first.environment_states[k, mu],
                        second.apparatus_ready,
                        second.environment_ready,
                    )
                    for mu in range(first.n_micro)
                )
            )
        u1 = Operator(_complete_unitary(_columns(inputs), _columns(images)), self.structure)
        distinct = list({id(m): m for m in self.second_for_outcome}.values())
        local = _stage_unitary(distinct)
        factors = self.object_factors + (self.factors["A2"], self.factors["E2"])
        u2 = embed_operator(local, self.structure, factors)
        return u1, u2

    @cached_property
    def first_pointers(self) -> Tuple[Projector, ...]:
        factor = self.factors["A1"]
        return tuple(
            embed_projector(self.first.pointer_projector(k), self.structure, (factor,))
            for k in range(self.first.n_outcomes)
        )

    @cached_property
    def second_pointers(self) -> Tuple[Tuple[Projector, ...], ...]:
        if not self.sequential:
            return ()
        factor = self.factors["A2"]
        return tuple(
            tuple(
                embed_projector(model.pointer_projector(j), self.structure, (factor,))
                for j in range(model.n_outcomes)
            )
            for model in self.second_for_outcome
        )

    def pointer_reading(self, vector) -> Tuple[Optional[int], Optional[int]]:
        """Apparatus outcomes (k, j) determinate with value 1 on a property state, else None"""
        a = PropertyAscription(Projector.ray(vector), self.structure)
        first = next(
            (k for k, p in enumerate(self.first_pointers) if projector_status(p, a).value == 1.0),
            None,
        )
        if first is None or not self.sequential:
            return first, None
        second = next(
            (
                j
                for j, p in enumerate(self.second_pointers[first])
                if projector_status(p, a).value == 1.0
            ),
            None,
        )
        return first, second

    def born_table(self, c=None) -> np.ndarray:
        """Joint weights |c_k d_j^k|^2 of (first, second) outcomes"""
        c = _require_coefficients(self._coefficients(c), self.first.n_outcomes)
        if not self.sequential:
            raise StructuralError("joint table needs a second stage")
        rows = []
        for k, second in enumerate(self.second_for_outcome):
            probs = [
                generalized_born_probability(self.first, second.eigenvectors, k, j)
                for j in range(second.n_outcomes)
            ]
            rows.append(abs(c[k]) ** 2 * np.array(probs))
        return np.array(rows)

    def to_dict(self):
        return {
            "name": self.name,
            "structure": list(self.structure.factor_dims),
            "adaptive": self.adaptive,
            "first": self.first.to_dict(),
            "second_for_outcome": [m.to_dict() for m in self.second_for_outcome],
        }


def single_stage(model: MeasurementModel, coefficients=None, name="") -> AdaptiveExperiment:
    return AdaptiveExperiment(model, coefficients=coefficients, name=name or model.name)


def sequential_experiment(first, second, coefficients=None, name="") -> AdaptiveExperiment:
    """Fixed second variable: every first outcome feeds the same second model"""
    return AdaptiveExperiment(
        first,
        tuple(second for _ in range(first.n_outcomes)),
        coefficients=coefficients,
        name=name,
    )


def adaptive_experiment(first, variables: Sequence[Dict], coefficients=None, name=""):
    """
    `variables[k]` holds measurement_model kwargs of V_(k); apparatus and
    environment blocks are stacked so every readiness state is distinct,
    with index 0 as the common initial state.
    """
    sizes = [
        1 + len(v["eigenvalues"]) * (np.asarray(v.get("microstates", [[1]])).shape[-1])
        for v in variables
    ]
    dim = 1 + sum(sizes)
    models, offset = [], 1
    for v, size in zip(variables, sizes):
        models.append(
            measurement_model(
                apparatus_dim=dim, environment_dim=dim, ready_index=offset, **v
            )
        )
        offset += size
    return AdaptiveExperiment(
        first,
        tuple(models),
        second_apparatus_initial=_e(dim, 0),
        second_environment_initial=_e(dim, 0),
        coefficients=coefficients,
        name=name,
    )


def sequence_final_states(exp: AdaptiveExperiment, c=None) -> Tuple[StateVector, StateVector]:
    """States right after the first and after the second interaction"""
    if not exp.sequential:
        raise StructuralError(f"experiment {exp.name!r} has no second measurement")
    return exp.stage_state(1, c), exp.stage_state(2, c)


def _spin_coefficients(c) -> np.ndarray:
    c = np.asarray(c, dtype=complex)
    if c.shape != (2,) or np.any(np.abs(c) <= CONSTRUCT_TOL):
        raise ConfigurationError(f"spin presets need two nonzero coefficients, got {c}")
    return _require_coefficients(c, 2)


def spin_z(**kw) -> MeasurementModel:
    return measurement_model(
        [SPIN_UP_Z, SPIN_DOWN_Z], SPIN_HALF, labels=("+z", "-z"), name="S·z", **kw
    )


def spin_axis(theta: float, **kw) -> MeasurementModel:
    """S·n with n = (sin theta, 0, cos theta)"""
    up = np.array([math.cos(theta / 2), math.sin(theta / 2)], dtype=complex)
    down = np.array([-math.sin(theta / 2), math.cos(theta / 2)], dtype=complex)
    return measurement_model([up, down], SPIN_HALF, labels=("+n", "-n"), name="S·n", **kw)


def spin_example(c=(0.6, 0.8)) -> AdaptiveExperiment:
    """
    S·z measured with disturbance +z -> +z, -z -> +x; on outcome +z the
    second apparatus measures S·z, on -z it measures S·x.
    """
    first = spin_z(disturbed=[SPIN_UP_Z, SPIN_UP_X])
    variables = [
        dict(eigenvectors=[SPIN_UP_Z, SPIN_DOWN_Z], eigenvalues=SPIN_HALF, labels=("+z", "-z"), name="S·z"),
        dict(eigenvectors=[SPIN_UP_X, SPIN_DOWN_X], eigenvalues=SPIN_HALF, labels=("+x", "-x"), name="S·x"),
    ]
    return adaptive_experiment(first, variables, _spin_coefficients(c), name="spin_fig1")


def spin_sequence(c=(0.6, 0.8), theta=math.pi / 3) -> AdaptiveExperiment:
    # a tilted second axis keeps the four joint weights distinct
    return sequential_experiment(
        spin_z(), spin_axis(theta), _spin_coefficients(c), name="spin_sequence"
    )


def spin_single(c=(0.6, 0.8)) -> AdaptiveExperiment:
    return single_stage(spin_z(), _spin_coefficients(c), name="spin_single")


def spin_microstates(c=(0.6, 0.8), f=(math.sqrt(0.7), math.sqrt(0.3))) -> AdaptiveExperiment:
    return single_stage(spin_z(microstates=f), _spin_coefficients(c), name="spin_microstates")


def bell_pairs(pairs: int = 2) -> StateVector:
    """Product of EPR-Bell pairs on factors (0, 1), (2, 3), ..."""
    epr = np.array([1, 0, 0, 1], dtype=complex) / math.sqrt(2)
    amps = functools.reduce(np.kron, [epr] * pairs)
    return StateVector(amps, HilbertStructure((2,) * (2 * pairs)))


PRESETS = {
    "spin_fig1": spin_example,
    "spin_sequence": spin_sequence,
    "spin_single": spin_single,
    "spin_microstates": spin_microstates,
}
STATE_PRESETS = {"bell_pairs": bell_pairs}


@dataclass(frozen=True)
class Timing:
    first: float = 1.0
    second: float = 2.0
    t_final: float = 3.0
    ramp: float = 0.2

    def event_times(self, sequential: bool) -> Tuple[float, ...]:
        return (self.first, self.second) if sequential else (self.first,)

    def validate(self, sequential: bool, interaction: str):
        times = self.event_times(sequential) + (self.t_final,)
        if any(t <= 0 for t in times) or any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigurationError(f"interaction times must increase inside (0, t_final]: {times}")
        if interaction == INTERACTION_RAMP:
            ends = [t + self.ramp for t in self.event_times(sequential)]
            if self.ramp <= 0 or any(end > nxt for end, nxt in zip(ends, times[1:])):
                raise ConfigurationError("ramp windows must be positive and not overlap")

    def to_dict(self):
        return {"first": self.first, "second": self.second, "t_final": self.t_final, "ramp": self.ramp}


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    experiment: Optional[AdaptiveExperiment] = None
    state: Optional[StateVector] = None
    timing: Timing = field(default_factory=Timing)
    checkpoints: Tuple[float, ...] = ()
    provider: str = PROVIDER_PREFERRED
    interaction: str = INTERACTION_INSTANT
    n_traj: int = 10000
    seed: int = 0
    dt: float = 0.01
    sensitivity: Tuple[float, ...] = ()

    def __post_init__(self):
        if (self.experiment is None) == (self.state is None):
            raise ConfigurationError("a scenario holds either an experiment or a bare state")
        if self.provider not in SUPPORT_PROVIDERS:
            raise ConfigurationError(f"unknown provider {self.provider!r}")
        if self.interaction not in SUPPORT_INTERACTIONS:
            raise ConfigurationError(f"unknown interaction mode {self.interaction!r}")
        if self.provider == PROVIDER_CLOSED_FORM and self.interaction == INTERACTION_RAMP:
            raise ConfigurationError("closed-form paths are undefined inside a ramp")
        if self.n_traj < 1 or self.dt <= 0 or self.seed < 0:
            raise ConfigurationError("n_traj, dt must be positive and seed nonnegative")
        cps = tuple(float(c) for c in self.checkpoints)
        if self.experiment is not None:
            self.timing.validate(self.experiment.sequential, self.interaction)
            if not cps:
                cps = self.default_checkpoints()
        if any(b <= a for a, b in zip(cps, cps[1:])):
            raise ConfigurationError(f"checkpoints must be strictly increasing: {cps}")
        object.__setattr__(self, "checkpoints", cps)
        tilts = tuple(float(e) for e in self.sensitivity)
        if any(e < 0 for e in tilts):
            raise ConfigurationError(f"environment tilts must be nonnegative: {tilts}")
        object.__setattr__(self, "sensitivity", tilts)

    def default_checkpoints(self) -> Tuple[float, ...]:
        t = self.timing
        if self.experiment.sequential:
            return (0.0, (t.first + t.second) / 2, t.t_final)
        return (0.0, t.t_final)

    @property
    def target_state(self) -> StateVector:
        return self.state if self.state is not None else self.experiment.initial_state()

    def with_overrides(self, **kw) -> Scenario:
        data = {k: getattr(self, k) for k in self.__dataclass_fields__}
        data.update({k: v for k, v in kw.items() if v is not None})
        return Scenario(**data)

    def to_dict(self):
        return {
            "name": self.name,
            "timing": self.timing.to_dict(),
            "checkpoints": list(self.checkpoints),
            "provider": self.provider,
            "interaction": self.interaction,
            "ensemble": {"n_traj": self.n_traj, "seed": self.seed, "dt": self.dt},
            "experiment": self.experiment.to_dict() if self.experiment else None,
            "sensitivity": list(self.sensitivity),
        }


def _model_from_dict(data) -> MeasurementModel:
    try:
        dims = tuple(data.get("object_dims", ()))
        vectors = [parse_amplitudes(v) for v in data["eigenvectors"]]
        disturbed = data.get("disturbed")
        return measurement_model(
            vectors,
            [float(v) for v in data["eigenvalues"]],
            disturbed=[parse_amplitudes(v) for v in disturbed] if disturbed else None,
            microstates=[parse_amplitudes(f) for f in data["microstates"]]
            if data.get("microstates")
            else None,
            apparatus_dim=data.get("apparatus_dim"),
            environment_dim=data.get("environment_dim"),
            object_dims=dims or None,
            labels=tuple(data.get("labels", ())),
            name=data.get("name", ""),
        )
    except KeyError as e:
        raise ConfigurationError(f"model definition misses {e}")
    except (ModelInconsistencyError, StructuralError) as e:
        raise ConfigurationError(f"invalid model: {e}")


def _experiment_from_dict(data, coefficients) -> AdaptiveExperiment:
    first = _model_from_dict(data["first"])
    name = data.get("name", "custom")
    if "second_for_outcome" in data:
        variables = []
        for v in data["second_for_outcome"]:
            variables.append(
                dict(
                    eigenvectors=[parse_amplitudes(x) for x in v["eigenvectors"]],
                    eigenvalues=[float(x) for x in v["eigenvalues"]],
                    labels=tuple(v.get("labels", ())),
                    name=v.get("name", ""),
                )
            )
        return adaptive_experiment(first, variables, coefficients, name)
    if "second" in data:
        return sequential_experiment(first, _model_from_dict(data["second"]), coefficients, name)
    return single_stage(first, coefficients, name)


def scenario_from_dict(data, preset: str = None) -> Scenario:
    if not isinstance(data, dict):
        raise ConfigurationError("scenario must be a JSON object")
    name = preset or data.get("preset") or data.get("name")
    coefficients = (
        parse_amplitudes(data["coefficients"]) if data.get("coefficients") is not None else None
    )
    ensemble = data.get("ensemble", {})
    state = experiment = None
    try:
        timing = Timing(**{k: float(v) for k, v in data.get("timing", {}).items()})
        if "state" in data and not preset:
            s = data["state"]
            state = StateVector.from_amplitudes(
                parse_amplitudes(s["amplitudes"]), s.get("factor_dims")
            ).require_normalized()
        elif name in PRESETS:
            experiment = PRESETS[name](coefficients) if coefficients is not None else PRESETS[name]()
        elif name in STATE_PRESETS:
            state = STATE_PRESETS[name]()
        elif "first" in data:
            if coefficients is None:
                raise ConfigurationError("custom experiments need coefficients")
            experiment = _experiment_from_dict(data, coefficients)
        else:
            raise ConfigurationError(f"unknown preset {name!r} and no model given")
    except (StructuralError, ModelInconsistencyError, KeyError, TypeError, ValueError) as e:
        raise ConfigurationError(f"invalid scenario {name!r}: {e}")

    try:
        return Scenario(
            name=name or "custom",
            experiment=experiment,
            state=state,
            timing=timing,
            checkpoints=tuple(data.get("checkpoints", ())),
            provider=data.get("provider", PROVIDER_PREFERRED),
            interaction=data.get("interaction", INTERACTION_INSTANT),
            n_traj=int(ensemble.get("n_traj", 10000)),
            seed=int(ensemble.get("seed", 0)),
            dt=float(ensemble.get("dt", 0.01)),
            sensitivity=tuple(data.get("sensitivity", ())),
        )
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"invalid scenario settings: {e}")


def load_scenario(path, preset: str = None) -> Scenario:
    try:
        data = read_json(path)
    except FileNotFoundError:
        if preset:
            return scenario_from_dict({}, preset)
        raise ConfigurationError(f"scenario file {path} not found")
    except ValueError as e:
        raise ConfigurationError(f"scenario file {path} is not valid JSON: {e}")
    return scenario_from_dict(data, preset)


def _stage_at(times: Sequence[float], t: float) -> int:
    return sum(1 for s in times if s <= t + 1e-12)


def _preferred_provider(structure: HilbertStructure, budget: SearchBudget, complete: bool):
    def provider(psi: StateVector, t: float) -> PathFamily:
        try:
            result = preferred_decomposition(psi, structure, budget)
        except UnresolvedMinimization as e:
            if e.candidate is None:
                raise
            logging.warning(f"t={t:.4f}: {e}; using the best candidate")
            result = e.candidate
        return PathFamily.from_decomposition(result.decomposition, t, complete=complete)

    return provider


def _closed_form_provider(exp: AdaptiveExperiment, times: Sequence[float]):
    @functools.lru_cache(maxsize=None)
    def family(stage):
        d = exp.expected_decomposition(stage)
        return PathFamily.from_decomposition(d)

    def provider(psi: StateVector, t: float) -> PathFamily:
        fam = family(_stage_at(times, t))
        return fam.with_paths(fam.paths, t)

    return provider


def _ramp_hamiltonian(exp: AdaptiveExperiment, times, tau):
    generators = []
    for u in exp.stage_unitaries:
        h = 1j * sla.logm(u.entries) / tau
        generators.append(Operator((h + h.conj().T) / 2, exp.structure, hermitian=True))
    zero = Operator.zeros(exp.structure)

    def hamiltonian(t: float) -> Operator:
        for start, h in zip(times, generators):
            if start <= t < start + tau:
                return h
        return zero

    return hamiltonian


@dataclass(frozen=True, eq=False)
class ScenarioRun:
    scenario: Scenario
    timeline: Timeline
    ensemble: EnsembleResult

    @cached_property
    def readings(self) -> List[List[Tuple[Optional[int], Optional[int]]]]:
        """Pointer readings of every path at every checkpoint"""
        exp = self.scenario.experiment
        return [
            [exp.pointer_reading(cp.family.paths[:, k]) for k in range(len(cp.family))]
            for cp in self.timeline.checkpoints
        ]

    def pointer_statistics(self, checkpoint: int) -> Dict:
        """Frequencies of first-stage apparatus outcomes vs sum of path weights"""
        exp = self.scenario.experiment
        m = exp.first.n_outcomes
        readings = self.readings[checkpoint]
        weights = self.ensemble.targets(checkpoint)
        counts = self.ensemble.counts(checkpoint)
        observed, target = np.zeros(m + 1), np.zeros(m + 1)
        for k, (first, _) in enumerate(readings):
            slot = m if first is None else first
            observed[slot] += counts[k]
            target[slot] += weights[k]
        n = self.ensemble.n_traj
        freq = observed / n
        sigma = np.sqrt(target * (1 - target) / n)
        z = np.divide(freq - target, sigma, out=np.zeros(m + 1), where=sigma > 0)
        return {
            "labels": list(exp.first.outcome_labels) + ["undetermined"],
            "counts": observed.astype(int).tolist(),
            "frequencies": freq.tolist(),
            "targets": target.tolist(),
            "z_scores": z.tolist(),
        }

    def joint_table(self, checkpoint: int = -1) -> Dict:
        """Counts of (first, second) outcomes and conditional frequencies vs |d_j^k|^2"""
        exp = self.scenario.experiment
        if not exp.sequential:
            raise StructuralError("joint table needs a second stage")
        m1 = exp.first.n_outcomes
        m2 = max(s.n_outcomes for s in exp.second_for_outcome)
        table = np.zeros((m1, m2), dtype=int)
        counts = self.ensemble.counts(checkpoint)
        for k, (first, second) in enumerate(self.readings[checkpoint]):
            if first is not None and second is not None:
                table[first, second] += counts[k]
        rows = table.sum(axis=1, keepdims=True)
        conditional = np.divide(table, rows, out=np.zeros(table.shape), where=rows > 0)
        expected = np.array(
            [
                [
                    generalized_born_probability(exp.first, s.eigenvectors, k, j)
                    for j in range(m2)
                ]
                for k, s in enumerate(exp.second_for_outcome)
            ]
        )
        return {
            "counts": table.tolist(),
            "conditional": conditional.tolist(),
            "expected_conditional": expected.tolist(),
            "expected_joint": exp.born_table().tolist(),
        }


def run_scenario(scenario: Scenario, workers: int = 1) -> ScenarioRun:
    exp = scenario.experiment
    if exp is None:
        raise ConfigurationError(f"scenario {scenario.name!r} has no experiment to run")
    times = scenario.timing.event_times(exp.sequential)
    psi0 = exp.initial_state()
    hamiltonian, events, breaks = None, (), ()
    complete = False
    if scenario.interaction == INTERACTION_INSTANT:
        events = [
            InteractionEvent(t, u, f"stage {i + 1}")
            for i, (t, u) in enumerate(zip(times, exp.stage_unitaries))
        ]
    else:
        tau = scenario.timing.ramp
        hamiltonian = _ramp_hamiltonian(exp, times, tau)
        breaks = tuple(times) + tuple(t + tau for t in times)
        complete = True
        logging.warning("ramp interactions are experimental, results are heuristic")

    if scenario.provider == PROVIDER_CLOSED_FORM:
        provider = _closed_form_provider(exp, times)
    else:
        budget = RAMP_BUDGET if complete else SearchBudget(workers=workers)
        provider = _preferred_provider(exp.structure, budget, complete)

    timeline = build_timeline(
        psi0,
        hamiltonian,
        scenario.timing.t_final,
        scenario.dt,
        scenario.checkpoints,
        provider=provider,
        events=events,
        breaks=breaks,
    )
    if complete:
        timeline.metadata["heuristic"] = True
    timeline.metadata.update(
        {"provider": scenario.provider, "interaction": scenario.interaction}
    )
    ensemble = sample_ensemble(timeline, scenario.n_traj, scenario.seed, workers)
    logging.info(f"scenario {scenario.name} done: {scenario.n_traj} trajectories")
    return ScenarioRun(scenario, timeline, ensemble)


@dataclass(frozen=True)
class OutcomeFaithfulness:
    outcome: int
    label: str
    variable: str
    required_value: Optional[float]
    predictable: bool
    satisfiable: bool
    conditioned: int
    determinate: int

    @property
    def fraction(self) -> Optional[float]:
        return self.determinate / self.conditioned if self.conditioned else None

    def to_dict(self):
        return {
            "outcome": self.outcome + 1,
            "label": self.label,
            "variable": self.variable,
            "required_value": self.required_value,
            "predictable": self.predictable,
            "satisfiable": self.satisfiable,
            "conditioned": self.conditioned,
            "determinate": self.determinate,
            "fraction": self.fraction,
        }


@dataclass(frozen=True)
class FaithfulnessReport:
    checkpoint_time: float
    outcomes: Tuple[OutcomeFaithfulness, ...]

    @property
    def satisfied(self) -> bool:
        return all(
            o.fraction == 1.0 for o in self.outcomes if o.conditioned and o.predictable
        )

    def to_dict(self):
        return {
            "checkpoint_time": self.checkpoint_time,
            "satisfied": self.satisfied,
            "outcomes": [o.to_dict() for o in self.outcomes],
        }


def _between_checkpoint(timeline: Timeline, exp: AdaptiveExperiment, timing: Timing):
    start = timing.first + (timing.ramp if timeline.metadata.get("interaction") == INTERACTION_RAMP else 0)
    for index, cp in enumerate(timeline.checkpoints):
        if start <= cp.time < timing.second:
            return index
    raise ConfigurationError(
        f"no checkpoint between the interactions at {timing.first} and {timing.second}"
    )


def check_faithfulness(exp: AdaptiveExperiment, run: ScenarioRun) -> FaithfulnessReport:
    """
    Condition trajectories on the first apparatus pointer at the checkpoint
    between the two interactions and test whether V_(k) (as V_(k) ⊗ I) is
    determinate there with the value the second measurement will yield.
    """
    if not exp.sequential:
        raise ConfigurationError("faithfulness needs a two-stage experiment")
    index = _between_checkpoint(run.timeline, exp, run.scenario.timing)
    checkpoint = run.timeline.checkpoints[index]
    counts = run.ensemble.counts(index)
    readings = run.readings[index]
    obj = HilbertStructure(exp.first.object_dims)

    outcomes = []
    for k, second in enumerate(exp.second_for_outcome):
        j, overlap = second.outcome_for(exp.first.disturbed[:, k])
        predictable = overlap >= 1 - VERIFY_TOL
        required = float(second.eigenvalues[j]) if predictable else None
        satisfiable = obj.n_factors == 1 or is_product_vector(second.eigenvectors[:, j], obj)
        conditioned = determinate = 0
        for path, (first, _) in enumerate(readings):
            if first != k or counts[path] == 0:
                continue
            conditioned += int(counts[path])
            a = PropertyAscription.from_state(checkpoint.family.vector(path).with_structure(exp.structure))
            status = subsystem_variable_status(second.variable, exp.object_factors, a)
            if status.determinate and required is not None and abs(status.value - required) < VERIFY_TOL:
                determinate += int(counts[path])
        if not satisfiable:
            logging.warning(
                f"outcome {k + 1}: eigenvector of {second.name} is entangled, "
                "faithfulness cannot hold for minimal-entropy paths"
            )
        outcomes.append(
            OutcomeFaithfulness(
                k,
                exp.first.outcome_labels[k],
                second.name,
                required,
                predictable,
                satisfiable,
                conditioned,
                determinate,
            )
        )
    return FaithfulnessReport(checkpoint.time, tuple(outcomes))
