"""
Schrödinger evolution, preferred paths and the jump process of the
property state vector.

The ψ(t)/path timeline is deterministic and built once; trajectories only
draw from its per-step column-stochastic kernels, one uniform per step
from a (seed, trajectory id) stream, so results do not depend on how
trajectories are scheduled across workers.
"""
from __future__ import annotations

import asyncio
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg as sla
from scipy.optimize import linear_sum_assignment

from modalsim.decomp import ProbabilityDistribution
from modalsim.exceptions import (
    ConfigurationError,
    IncompleteBasisError,
    RateInconsistencyError,
    StepSizeError,
    StructuralError,
)
from modalsim.linalg import VERIFY_TOL, HilbertStructure, Operator, StateVector
from modalsim.metrics import (
    ENSEMBLE_SAMPLE_TIME,
    JUMP_COUNT,
    TIMELINE_BUILD_TIME,
    TRAJECTORY_COUNT,
)
from modalsim.utils import trajectory_rng

DEFICIT_TOL = 1e-6
OCCUPIED_TOL = 1e-12
CURRENT_TOL = 1e-10
MARGINAL_TOL = 1e-10
GUARD_LIMIT = 0.1
GUARD_TARGET = 0.05
MAX_REFINE = 6
NODE_MASS = 1e-4
CONTINUITY_WARN = 0.9
EDGE = 1e-9

KIND_RATES = "rates"
KIND_INTERACTION = "interaction"

Hamiltonian = Union[None, Operator, Callable[[float], Operator]]


def _matrix_at(h: Hamiltonian, t: float) -> Optional[np.ndarray]:
    if h is None:
        return None
    op = h(t) if callable(h) else h
    op.require_hermitian()
    return None if op.is_zero() else op.entries


def _is_static(h: Hamiltonian) -> bool:
    return h is None or (isinstance(h, Operator) and h.is_zero())


def _rk4(y: np.ndarray, h: Hamiltonian, t: float, dt: float) -> np.ndarray:
    def f(tau, v):
        m = _matrix_at(h, tau)
        return np.zeros_like(v) if m is None else -1j * (m @ v)

    # piecewise Hamiltonians are sampled strictly inside the step
    edge = EDGE * abs(dt)
    k1 = f(t + edge, y)
    k2 = f(t + dt / 2, y + dt / 2 * k1)
    k3 = f(t + dt / 2, y + dt / 2 * k2)
    k4 = f(t + dt - edge, y + dt * k3)
    return y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _renormalized(vec: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vec)
    drift = abs(norm - 1)
    if drift > 1e-10:
        logging.warning(f"norm drift {drift:.3e} in one step, renormalized")
    elif drift > 0:
        logging.debug(f"norm drift {drift:.3e} renormalized")
    return vec / norm


def _orthonormal_polar(paths: np.ndarray) -> np.ndarray:
    """Closest matrix with orthonormal columns"""
    u, _, vh = np.linalg.svd(paths, full_matrices=False)
    return u @ vh


def evolve_state(psi: StateVector, h: Operator, dt: float) -> StateVector:
    if dt <= 0:
        raise StructuralError(f"dt must be positive, got {dt}")
    h.require_hermitian()
    if h.dim != len(psi):
        raise StructuralError("Hamiltonian and state dimensions differ")
    if h.is_zero():
        return psi
    return StateVector(_renormalized(_rk4(psi.amplitudes, h, 0.0, dt)), psi.structure)


def _evolve_between(psi: StateVector, h: Hamiltonian, t: float, dt: float) -> StateVector:
    if _matrix_at(h, t) is None and _is_static(h):
        return psi
    return StateVector(_renormalized(_rk4(psi.amplitudes, h, t, dt)), psi.structure)


@dataclass(frozen=True, eq=False)
class PathFamily:
    paths: np.ndarray  # dim x d, orthonormal columns
    time: float = 0.0
    generator: Hamiltonian = None
    structure: Optional[HilbertStructure] = None

    def __post_init__(self):
        paths = np.array(self.paths, dtype=complex)
        if paths.ndim != 2 or paths.shape[1] == 0:
            raise StructuralError("a path family needs a dim x d matrix of paths")
        gram = paths.conj().T @ paths
        if np.max(np.abs(gram - np.eye(paths.shape[1]))) > VERIFY_TOL:
            raise StructuralError("preferred paths are not orthonormal")
        paths.setflags(write=False)
        object.__setattr__(self, "paths", paths)

    @classmethod
    def from_vectors(cls, vectors, time=0.0, generator=None):
        cols = [np.asarray(getattr(v, "amplitudes", v), dtype=complex) for v in vectors]
        structure = getattr(vectors[0], "structure", None) if len(vectors) else None
        return cls(np.column_stack(cols), time, generator, structure)

    @classmethod
    def from_decomposition(cls, decomposition, time=0.0, generator=None, complete=False):
        family = cls.from_vectors(list(decomposition.vectors), time, generator)
        return family.completed() if complete else family

    def __len__(self):
        return self.paths.shape[1]

    @property
    def dim(self) -> int:
        return self.paths.shape[0]

    def vector(self, k: int) -> StateVector:
        structure = self.structure or HilbertStructure((self.dim,))
        return StateVector(self.paths[:, k], structure)

    def generator_at(self, t: float) -> Optional[np.ndarray]:
        return _matrix_at(self.generator, t)

    def with_paths(self, paths: np.ndarray, time: float) -> PathFamily:
        return PathFamily(paths, time, self.generator, self.structure)

    def completed(self) -> PathFamily:
        """Append an orthonormal basis of the complement as zero-weight paths"""
        if len(self) == self.dim:
            return self
        extra = sla.null_space(self.paths.conj().T)
        return self.with_paths(np.hstack([self.paths, extra]), self.time)

    def advance(self, dt: float) -> PathFamily:
        """Transport every path by d|phi>/dt = -i H~ |phi> (one RK4 step)"""
        if _is_static(self.generator):
            return self.with_paths(self.paths, self.time + dt)
        moved = _rk4(self.paths, self.generator, self.time, dt)
        return self.with_paths(_orthonormal_polar(moved), self.time + dt)

    def at(self, t: float, max_step: float = 1e-2) -> PathFamily:
        span = t - self.time
        if abs(span) < 1e-15:
            return self
        if _is_static(self.generator):
            return self.with_paths(self.paths, t)
        steps = max(1, math.ceil(abs(span) / max_step))
        family = self
        for _ in range(steps):
            family = family.advance(span / steps)
        return family


@dataclass(frozen=True)
class TrajectoryState:
    path_index: int  # 0-based
    time: float


@dataclass(frozen=True, eq=False)
class RateMatrix:
    currents: np.ndarray
    probabilities: ProbabilityDistribution
    rates: Optional[np.ndarray] = None

    def __post_init__(self):
        j = np.asarray(self.currents, dtype=float)
        d = len(self.probabilities)
        if j.shape != (d, d):
            raise StructuralError(f"currents shape {j.shape} does not match {d} paths")
        if not np.array_equal(j, -j.T):
            raise StructuralError("currents must be exactly antisymmetric")
        object.__setattr__(self, "currents", j)
        if self.rates is not None:
            t = np.asarray(self.rates, dtype=float)
            if t.shape != (d, d) or np.any(t < 0):
                raise StructuralError("rates must be a nonnegative d x d matrix")
            object.__setattr__(self, "rates", t)

    def __len__(self):
        return len(self.probabilities)

    def with_rates(self, rates: np.ndarray) -> RateMatrix:
        return RateMatrix(self.currents, self.probabilities, rates)


def _amplitudes_on_paths(psi: StateVector, family: PathFamily) -> np.ndarray:
    if len(psi) != family.dim:
        raise StructuralError("state and path dimensions differ")
    return family.paths.conj().T @ psi.amplitudes


def _checked_probabilities(amplitudes: np.ndarray) -> ProbabilityDistribution:
    p = np.abs(amplitudes) ** 2
    deficit = 1 - p.sum()
    if deficit > DEFICIT_TOL:
        raise IncompleteBasisError(float(deficit))
    return ProbabilityDistribution.from_unnormalized(p)


def path_probabilities(
    psi: StateVector, family: PathFamily, t: float = None
) -> ProbabilityDistribution:
    """p_k = |<phi_k(t)|psi(t)>|^2"""
    family = family if t is None else family.at(t)
    return _checked_probabilities(_amplitudes_on_paths(psi, family))


def _relative_generator(h: Hamiltonian, family: PathFamily, t: float) -> np.ndarray:
    hm, gm = _matrix_at(h, t), family.generator_at(t)
    delta = np.zeros((family.dim, family.dim), dtype=complex)
    if hm is not None:
        delta = delta + hm
    if gm is not None:
        delta = delta - gm
    return delta


def theoretical_dpdt(
    psi: StateVector, family: PathFamily, h: Hamiltonian, t: float = None
) -> np.ndarray:
    """dp_k/dt = 2 Im[<psi|phi_k><phi_k|H - H~|psi>]"""
    t = family.time if t is None else t
    family = family.at(t)
    a = _amplitudes_on_paths(psi, family)
    b = family.paths.conj().T @ (_relative_generator(h, family, t) @ psi.amplitudes)
    return 2 * np.imag(np.conj(a) * b)


def _currents(a: np.ndarray, paths: np.ndarray, delta: np.ndarray) -> np.ndarray:
    m = paths.conj().T @ delta @ paths
    d = a.size
    upper = np.triu_indices(d, 1)
    values = 2 * np.imag(np.conj(a[upper[0]]) * m[upper] * a[upper[1]])
    j = np.zeros((d, d))
    j[upper] = values
    j[upper[1], upper[0]] = -values
    return j


def probability_currents(
    psi: StateVector, family: PathFamily, h: Hamiltonian, t: float = None
) -> RateMatrix:
    """J_kj = 2 Im[<psi|phi_k><phi_k|H - H~|phi_j><phi_j|psi>], mirrored exactly"""
    t = family.time if t is None else t
    family = family.at(t)
    a = _amplitudes_on_paths(psi, family)
    j = _currents(a, family.paths, _relative_generator(h, family, t))
    return RateMatrix(j, _checked_probabilities(a))


RateRule = Callable[..., np.ndarray]


def minimal_rates(currents: np.ndarray, weights: np.ndarray, strict: bool = True) -> np.ndarray:
    """T_kj = max(0, J_kj / p_j)"""
    occupied = weights > OCCUPIED_TOL
    outflow = currents > 0
    bad = (currents > CURRENT_TOL) & ~occupied[None, :]
    if strict and bad.any():
        k, j = (int(i) for i in np.argwhere(bad)[0])
        raise RateInconsistencyError(k, j, float(currents[k, j]))
    rates = np.zeros_like(currents)
    ok = outflow & occupied[None, :]
    denominators = np.broadcast_to(np.where(occupied, weights, 1.0), currents.shape)
    rates[ok] = currents[ok] / denominators[ok]
    return rates


def excess_rates(lam: float) -> RateRule:
    """T_kj = max(0, J_kj / p_j) + lam * p_k, a member of the general valid family"""
    if lam < 0:
        raise ConfigurationError("excess rate weight must be nonnegative")

    def rule(currents, weights, strict=True):
        rates = minimal_rates(currents, weights, strict)
        extra = lam * np.broadcast_to(weights[:, None], rates.shape).copy()
        np.fill_diagonal(extra, 0)
        return rates + extra

    return rule


def check_rate_consistency(rm: RateMatrix, tol=CURRENT_TOL) -> List[Tuple[int, int, float]]:
    """Violations of T_kj p_j - T_jk p_k = J_kj over occupied pairs, as (k, j, residual)"""
    if rm.rates is None:
        raise StructuralError("rate matrix has no rates")
    w = rm.probabilities.weights
    t, j = rm.rates, rm.currents
    residual = t * w[None, :] - t.T * w[:, None] - j
    occupied = (w[:, None] > OCCUPIED_TOL) & (w[None, :] > OCCUPIED_TOL)
    violations = []
    for k, jj in np.argwhere(occupied & (np.abs(residual) > tol)):
        violations.append((int(k), int(jj), float(residual[k, jj])))
    for k, jj in np.argwhere(t < 0):
        violations.append((int(k), int(jj), float(t[k, jj])))
    return violations


def transition_rates(rm: RateMatrix, rule: RateRule = minimal_rates) -> RateMatrix:
    rates = np.asarray(rule(rm.currents, rm.probabilities.weights), dtype=float)
    np.fill_diagonal(rates, 0)
    if np.any(rates < 0):
        raise RateInconsistencyError(0, 0, float(rates.min()), "rate rule produced negative rates")
    filled = rm.with_rates(rates)
    violations = check_rate_consistency(filled)
    if violations:
        k, j, residual = violations[0]
        raise RateInconsistencyError(
            k, j, residual, f"rates break T_kj p_j - T_jk p_k = J_kj at ({k + 1}, {j + 1})"
        )
    return filled


def _exit_kernel(rates: np.ndarray, dt: float, occupied: np.ndarray) -> np.ndarray:
    exit_rates = rates.sum(axis=0) - np.diag(rates)
    worst = float(np.max(np.where(occupied, exit_rates, 0.0), initial=0.0))
    if worst * dt >= GUARD_LIMIT:
        raise StepSizeError(worst * dt, GUARD_TARGET / worst)
    kernel = rates * dt
    np.fill_diagonal(kernel, 1 - exit_rates * dt)
    return kernel


def step_trajectory(
    traj: TrajectoryState, rm: RateMatrix, dt: float, rng: np.random.Generator
) -> TrajectoryState:
    """One categorical draw: j -> k with probability T_kj dt"""
    rates = rm.rates if rm.rates is not None else transition_rates(rm).rates
    j = traj.path_index
    occupied = np.zeros(len(rm), dtype=bool)
    occupied[j] = True
    column = _exit_kernel(rates, dt, occupied)[:, j]
    k = int(np.searchsorted(np.cumsum(column), rng.random(), side="right"))
    return TrajectoryState(min(k, len(rm) - 1), traj.time + dt)


@dataclass(frozen=True, eq=False)
class InteractionEvent:
    time: float
    unitary: Operator
    label: str = ""


@dataclass(frozen=True, eq=False)
class TimelineStep:
    time: float
    kernel: np.ndarray  # d_new x d_old, columns sum to 1
    kind: str

    @property
    def cdf(self) -> np.ndarray:
        cdf = np.cumsum(self.kernel, axis=0)
        cdf[-1, :] = 1.0
        return cdf


@dataclass(frozen=True, eq=False)
class Checkpoint:
    time: float
    step_count: int
    probabilities: ProbabilityDistribution
    family: PathFamily
    psi: StateVector


@dataclass(frozen=True, eq=False)
class Timeline:
    initial: ProbabilityDistribution
    steps: Tuple[TimelineStep, ...]
    checkpoints: Tuple[Checkpoint, ...]
    metadata: Dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return 1 + len(self.steps)

    @property
    def max_paths(self) -> int:
        return max(len(c.probabilities) for c in self.checkpoints)


def _match_labels(old: np.ndarray, new: np.ndarray) -> Tuple[np.ndarray, float]:
    """Reorder and rephase `new` to maximize sum |<old_k|new_k>|^2"""
    overlaps = np.abs(old.conj().T @ new) ** 2
    rows, cols = linear_sum_assignment(-overlaps)
    order = cols[np.argsort(rows)]
    matched = new[:, order]
    phases = np.sum(old.conj() * matched, axis=0)
    matched = matched * np.where(np.abs(phases) > 0, np.abs(phases) / np.where(phases == 0, 1, phases), 1)
    return matched, float(np.min(overlaps[rows, cols]))


def _finite_difference_generator(old: np.ndarray, new: np.ndarray, dt: float) -> np.ndarray:
    """H~ ≈ i (dPhi/dt) Phi^dagger, Hermitized, for a complete family"""
    mid = _orthonormal_polar((old + new) / 2)
    g = 1j * ((new - old) / dt) @ mid.conj().T
    return (g + g.conj().T) / 2


def _minimal_flow_kernel(p_old, p_new, overlaps) -> np.ndarray:
    """Keep mass on maximal-overlap matches, spread the rest proportionally"""
    rows, cols = linear_sum_assignment(-overlaps)
    d_new, d_old = overlaps.shape
    flow = np.zeros((d_new, d_old))
    for k, j in zip(rows, cols):
        flow[k, j] = min(p_old[j], p_new[k])
    surplus = p_old - flow.sum(axis=0)
    deficit = np.clip(p_new - flow.sum(axis=1), 0, None)
    if deficit.sum() > 0:
        flow += np.outer(deficit / deficit.sum(), np.clip(surplus, 0, None))
    return flow


def _interaction_kernel(a_old, paths_old, paths_new, unitary, p_new) -> Tuple[np.ndarray, bool]:
    """
    Transition kernel across an instantaneous interaction, from the
    amplitudes <Phi'_k|U|Phi_j> c_j when they carry both marginals.
    """
    p_old = np.abs(a_old) ** 2
    transfer = paths_new.conj().T @ (unitary @ paths_old)
    g = np.abs(transfer * a_old[None, :]) ** 2
    exact = (
        np.max(np.abs(g.sum(axis=0) - p_old)) < MARGINAL_TOL
        and np.max(np.abs(g.sum(axis=1) - p_new)) < MARGINAL_TOL
    )
    if not exact:
        logging.warning("interaction amplitudes interfere, using the minimal-flow kernel")
        g = _minimal_flow_kernel(p_old, p_new, np.abs(transfer) ** 2)
    kernel = np.zeros_like(g)
    occupied = p_old > OCCUPIED_TOL
    kernel[:, occupied] = g[:, occupied] / p_old[occupied]
    for j in np.flatnonzero(~occupied):
        # never sampled, any stochastic column will do
        kernel[int(np.argmax(np.abs(transfer[:, j]))), j] = 1.0
    kernel /= kernel.sum(axis=0, keepdims=True)
    return kernel, exact


def _breakpoints(t_final, events, checkpoints, breaks=()) -> List[float]:
    points = {0.0, float(t_final)}
    points.update(float(b) for b in breaks if 0 < b < t_final)
    points.update(float(e.time) for e in events)
    points.update(float(c) for c in checkpoints)
    return sorted(points)


def _validate_timeline_args(t_final, dt, checkpoints, events):
    if dt <= 0 or t_final <= 0:
        raise ConfigurationError("dt and t_final must be positive")
    cps = [float(c) for c in checkpoints]
    if not cps:
        raise ConfigurationError("at least one checkpoint is required")
    if any(b <= a for a, b in zip(cps, cps[1:])):
        raise ConfigurationError(f"checkpoints must be strictly increasing: {cps}")
    if cps[0] < 0 or cps[-1] > t_final + 1e-12:
        raise ConfigurationError(f"checkpoints must lie in [0, {t_final}]")
    for e in events:
        if not 0 < e.time <= t_final:
            raise ConfigurationError(f"interaction at t={e.time} outside (0, {t_final}]")
        if not e.unitary.is_unitary():
            raise StructuralError(f"interaction {e.label!r} is not unitary")


def build_timeline(
    psi0: StateVector,
    hamiltonian: Hamiltonian,
    t_final: float,
    dt: float,
    checkpoints: Sequence[float],
    family: PathFamily = None,
    provider: Callable[[StateVector, float], PathFamily] = None,
    events: Sequence[InteractionEvent] = (),
    rate_rule: RateRule = minimal_rates,
    breaks: Sequence[float] = (),
) -> Timeline:
    """
    Deterministic ψ(t) and preferred paths, reduced to one stochastic
    kernel per step. Between breakpoints the jump kernel uses midpoint
    currents over the occupation at the start of the step; steps are
    halved while the exit guard trips, and a population zero inside the
    step is crossed with the capped integrated-flow kernel. Events are
    applied before checkpoints that share their time.
    """
    if (family is None) == (provider is None):
        raise ConfigurationError("give exactly one of a path family or a provider")
    events = sorted(events, key=lambda e: e.time)
    _validate_timeline_args(t_final, dt, checkpoints, events)
    psi0.require_normalized()

    metadata = {
        "path_mode": "family" if family is not None else "provider",
        "h_tilde": "given" if family is not None else "zero",
        "heuristic": False,
        "continuity_min_overlap": 1.0,
        "continuity_violations": 0,
        "interaction_fallbacks": 0,
        "rate_steps": 0,
        "refined_steps": 0,
        "node_steps": 0,
        "unoccupied_outflow_steps": 0,
        "unoccupied_outflow_max": 0.0,
    }
    static = _is_static(hamiltonian) and (family is None or _is_static(family.generator))

    with TIMELINE_BUILD_TIME.time():
        psi = psi0
        fam = family.at(0.0) if family is not None else provider(psi0, 0.0)
        a = _amplitudes_on_paths(psi, fam)
        probs = _checked_probabilities(a)
        initial = probs
        steps: List[TimelineStep] = []
        records: List[Checkpoint] = []
        pending_cp = [float(c) for c in checkpoints]
        pending_ev = list(events)

        def record(t):
            while pending_cp and pending_cp[0] <= t + 1e-12:
                records.append(Checkpoint(pending_cp.pop(0), len(steps), probs, fam, psi))

        points = _breakpoints(t_final, events, checkpoints, breaks)
        t = 0.0
        record(t)
        for target in points[1:]:
            if not static:
                n = max(1, math.ceil((target - t) / dt - 1e-9))
                h = (target - t) / n
                for i in range(n):
                    psi, fam, a, probs = _rate_step(
                        psi, fam, a, probs, hamiltonian, provider, t, h,
                        rate_rule, steps, metadata,
                    )
                    t = t + h
            t = target
            if family is not None:
                fam = fam.with_paths(fam.paths, t)
            while pending_ev and pending_ev[0].time <= t + 1e-12:
                event = pending_ev.pop(0)
                psi, fam, a, probs = _apply_event(
                    event, psi, fam, a, probs, provider, steps, metadata
                )
            record(t)

    if metadata["unoccupied_outflow_steps"]:
        logging.warning(
            f"{metadata['unoccupied_outflow_steps']} steps with outflow from an empty path "
            f"(max current {metadata['unoccupied_outflow_max']:.3e}), rates kept at 0"
        )
    if metadata["continuity_violations"]:
        logging.warning(
            f"{metadata['continuity_violations']} steps with path overlap < {CONTINUITY_WARN}"
        )
    logging.info(
        f"timeline built: {len(steps)} kernel steps, {len(records)} checkpoints, "
        f"H~ {metadata['h_tilde']}"
    )
    return Timeline(initial, tuple(steps), tuple(records), metadata)


def _flow_kernel(rates: np.ndarray, dt: float) -> np.ndarray:
    """Integrated flow over the step with every column's exit probability capped at 1"""
    kernel = rates * dt
    exit_mass = kernel.sum(axis=0)
    scale = np.where(exit_mass > 1, 1 / np.where(exit_mass > 1, exit_mass, 1), 1.0)
    kernel = kernel * scale[None, :]
    np.fill_diagonal(kernel, 1 - exit_mass * scale)
    return kernel


def _step_ahead(psi, fam, hamiltonian, provider, t, h, metadata):
    psi_mid = _evolve_between(psi, hamiltonian, t, h / 2)
    psi_new = _evolve_between(psi, hamiltonian, t, h)
    if provider is None:
        fam_mid, fam_new = fam.advance(h / 2), fam.advance(h)
        delta = _relative_generator(hamiltonian, fam_mid, t + h / 2)
        paths_mid = fam_mid.paths
    else:
        raw = provider(psi_new, t + h)
        if len(raw) != len(fam):
            raise StructuralError("provider changed the number of paths between steps")
        matched, overlap = _match_labels(fam.paths, raw.paths)
        metadata["continuity_min_overlap"] = min(metadata["continuity_min_overlap"], overlap)
        if overlap < CONTINUITY_WARN:
            metadata["continuity_violations"] += 1
        fam_new = raw.with_paths(matched, t + h)
        generator = _finite_difference_generator(fam.paths, matched, h)
        paths_mid = _orthonormal_polar((fam.paths + matched) / 2)
        hm = _matrix_at(hamiltonian, t + h / 2)
        delta = (hm if hm is not None else 0) - generator
        metadata["h_tilde"] = "finite_difference"
        metadata["heuristic"] = True
    currents = _currents(paths_mid.conj().T @ psi_mid.amplitudes, paths_mid, delta)
    return psi_new, fam_new, currents


def _rate_step(
    psi, fam, a, probs, hamiltonian, provider, t, h, rate_rule, steps, metadata, depth=0
):
    """
    One kernel step, halved up to MAX_REFINE times while an occupied path
    would exit with probability >= GUARD_LIMIT. At the finest level a path
    holding at most NODE_MASS (a population zero is inside the step) gets
    the capped integrated-flow kernel, anything heavier is a step-size error.
    """
    psi_new, fam_new, currents = _step_ahead(psi, fam, hamiltonian, provider, t, h, metadata)
    weights = probs.weights
    occupied = weights > OCCUPIED_TOL

    # midpoint currents against start-of-step occupation: a path that is empty
    # at the start may already carry outflow, its rates stay 0
    stray = (currents > CURRENT_TOL) & ~occupied[None, :]
    if stray.any():
        metadata["unoccupied_outflow_steps"] += 1
        metadata["unoccupied_outflow_max"] = max(
            metadata["unoccupied_outflow_max"], float(currents[stray].max())
        )

    rates = np.asarray(rate_rule(currents, weights, strict=False), dtype=float)
    np.fill_diagonal(rates, 0)
    exit_prob = np.where(occupied, rates.sum(axis=0) * h, 0.0)
    if exit_prob.max(initial=0.0) >= GUARD_LIMIT:
        if depth < MAX_REFINE:
            metadata["refined_steps"] += 1
            state = _rate_step(
                psi, fam, a, probs, hamiltonian, provider, t, h / 2,
                rate_rule, steps, metadata, depth + 1,
            )
            return _rate_step(
                *state, hamiltonian, provider, t + h / 2, h / 2,
                rate_rule, steps, metadata, depth + 1,
            )
        heavy = (exit_prob >= GUARD_LIMIT) & (weights > NODE_MASS)
        if heavy.any():
            raise StepSizeError(float(exit_prob[heavy].max()), h * 2 ** (MAX_REFINE - 1))
        metadata["node_steps"] += 1
        steps.append(TimelineStep(t + h, _flow_kernel(rates, h), KIND_RATES))
        metadata["rate_steps"] += 1
    elif np.any(rates > 0):
        steps.append(TimelineStep(t + h, _exit_kernel(rates, h, occupied), KIND_RATES))
        metadata["rate_steps"] += 1
    a_new = _amplitudes_on_paths(psi_new, fam_new)
    return psi_new, fam_new, a_new, _checked_probabilities(a_new)


def _apply_event(event, psi, fam, a, probs, provider, steps, metadata):
    u = event.unitary.entries
    psi_new = StateVector(_renormalized(u @ psi.amplitudes), psi.structure)
    if provider is None:
        # paths ride along with the interaction: no transfer between labels
        fam_new = fam.with_paths(_orthonormal_polar(u @ fam.paths), event.time)
        a_new = _amplitudes_on_paths(psi_new, fam_new)
        return psi_new, fam_new, a_new, _checked_probabilities(a_new)

    fam_new = provider(psi_new, event.time)
    a_new = _amplitudes_on_paths(psi_new, fam_new)
    probs_new = _checked_probabilities(a_new)
    kernel, exact = _interaction_kernel(a, fam.paths, fam_new.paths, u, probs_new.weights)
    if not exact:
        metadata["interaction_fallbacks"] += 1
    steps.append(TimelineStep(event.time, kernel, KIND_INTERACTION))
    logging.debug(f"interaction {event.label!r} at t={event.time}: {len(fam)} -> {len(fam_new)} paths")
    return psi_new, fam_new, a_new, probs_new


@dataclass(frozen=True, eq=False)
class EnsembleResult:
    timeline: Timeline
    path_indices: np.ndarray  # n_traj x n_checkpoints, 0-based
    jumps: int
    transfers: int
    seed: int

    @property
    def n_traj(self) -> int:
        return self.path_indices.shape[0]

    @property
    def times(self) -> List[float]:
        return [c.time for c in self.timeline.checkpoints]

    def counts(self, checkpoint: int) -> np.ndarray:
        d = len(self.timeline.checkpoints[checkpoint].probabilities)
        return np.bincount(self.path_indices[:, checkpoint], minlength=d)

    def frequencies(self, checkpoint: int) -> np.ndarray:
        return self.counts(checkpoint) / self.n_traj

    def targets(self, checkpoint: int) -> np.ndarray:
        return self.timeline.checkpoints[checkpoint].probabilities.weights

    def z_scores(self, checkpoint: int) -> np.ndarray:
        p = self.targets(checkpoint)
        sigma = np.sqrt(p * (1 - p) / self.n_traj)
        diff = self.frequencies(checkpoint) - p
        return np.where(sigma > 0, diff / np.where(sigma > 0, sigma, 1), np.where(diff == 0, 0.0, np.inf))

    def joint_counts(self, first: int, second: int) -> np.ndarray:
        d1 = len(self.timeline.checkpoints[first].probabilities)
        d2 = len(self.timeline.checkpoints[second].probabilities)
        table = np.zeros((d1, d2), dtype=int)
        np.add.at(table, (self.path_indices[:, first], self.path_indices[:, second]), 1)
        return table


def _sample_chunk(timeline: Timeline, seed: int, start: int, stop: int):
    n = stop - start
    draws = np.stack([trajectory_rng(seed, i).random(timeline.n_draws) for i in range(start, stop)])
    cdf0 = np.cumsum(timeline.initial.weights)
    cdf0[-1] = 1.0
    state = np.minimum(np.searchsorted(cdf0, draws[:, 0], side="right"), cdf0.size - 1)
    indices = np.empty((n, len(timeline.checkpoints)), dtype=np.int64)
    jumps = transfers = 0
    cps = list(enumerate(timeline.checkpoints))

    def record(count):
        while cps and cps[0][1].step_count == count:
            indices[:, cps.pop(0)[0]] = state

    record(0)
    for s, step in enumerate(timeline.steps, start=1):
        cdf = step.cdf
        new = np.minimum((draws[:, s][None, :] >= cdf[:, state]).sum(axis=0), cdf.shape[0] - 1)
        if step.kind == KIND_RATES:
            jumps += int(np.count_nonzero(new != state))
        else:
            transfers += int(np.count_nonzero(new != state))
        state = new
        record(s)
    return indices, jumps, transfers


async def _gather_chunks(timeline, seed, chunks, workers):
    loop = asyncio.get_running_loop()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        tasks = [
            loop.run_in_executor(pool, _sample_chunk, timeline, seed, a, b) for a, b in chunks
        ]
        return await asyncio.gather(*tasks)


def sample_ensemble(
    timeline: Timeline, n_traj: int, seed: int, workers: int = 1, chunk_size: int = 4096
) -> EnsembleResult:
    if n_traj < 1:
        raise ConfigurationError("n_traj must be positive")
    chunks = [(a, min(a + chunk_size, n_traj)) for a in range(0, n_traj, chunk_size)]
    with ENSEMBLE_SAMPLE_TIME.time():
        if workers > 1 and len(chunks) > 1:
            parts = asyncio.run(_gather_chunks(timeline, seed, chunks, workers))
        else:
            parts = [_sample_chunk(timeline, seed, a, b) for a, b in chunks]
    # chunk order merge keeps results identical for any worker count
    indices = np.concatenate([p[0] for p in parts], axis=0)
    jumps = sum(p[1] for p in parts)
    transfers = sum(p[2] for p in parts)
    TRAJECTORY_COUNT.inc(n_traj)
    JUMP_COUNT.inc(jumps)
    logging.info(f"sampled {n_traj} trajectories: jumps={jumps} transfers={transfers}")
    return EnsembleResult(timeline, indices, jumps, transfers, int(seed))


def run_ensemble(
    psi0: StateVector,
    h: Hamiltonian,
    family_or_provider: Union[PathFamily, Callable[[StateVector, float], PathFamily]],
    t_final: float,
    n_traj: int,
    seed: int,
    dt: float = 0.01,
    checkpoints: Sequence[float] = None,
    events: Sequence[InteractionEvent] = (),
    workers: int = 1,
    rate_rule: RateRule = minimal_rates,
) -> EnsembleResult:
    if isinstance(family_or_provider, PathFamily):
        family, provider = family_or_provider, None
    else:
        family, provider = None, family_or_provider
    timeline = build_timeline(
        psi0,
        h,
        t_final,
        dt,
        checkpoints if checkpoints is not None else (t_final,),
        family=family,
        provider=provider,
        events=events,
        rate_rule=rate_rule,
    )
    return sample_ensemble(timeline, n_traj, seed, workers)
