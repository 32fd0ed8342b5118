"""
Seeded property suites behind `modalsim verify`.

Every suite draws its inputs from its own stream of the run seed, so a
failing case is reproduced by rerunning with the same seed; failures are
dumped with the inputs that triggered them.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np
from scipy import linalg as sla

from modalsim import scenarios
from modalsim import status_flag as flag
from modalsim.ascription import (
    PropertyAscription,
    common_ontology_contradiction,
    functional_relations_hold,
    mutually_exclusive,
    ontologies_identical,
    projector_status,
    sample_determinate,
    subsystem_preferred_projector,
    variable_status,
)
from modalsim.decomp import (
    Decomposition,
    SearchBudget,
    a_orthogonal_decomposition,
    apply_doubly_stochastic,
    bi_orthogonal_decomposition,
    brute_force_min_entropy,
    check_prefix_dominance,
    iu_entropy,
    majorizes,
    preferred_decomposition,
)
from modalsim.dynamics import (
    PathFamily,
    RateRule,
    check_rate_consistency,
    excess_rates,
    minimal_rates,
    probability_currents,
    run_ensemble,
    theoretical_dpdt,
    transition_rates,
)
from modalsim.exceptions import ModalSimError
from modalsim.linalg import (
    LEFT,
    CoarseGraining,
    HilbertStructure,
    Operator,
    Projector,
    StateVector,
    embed_projector,
    gram_schmidt,
    partial_trace,
    projector_intersection,
    projector_leq,
    projector_orthogonal,
    projector_span,
    svd,
    tensor_product,
)
from modalsim.utils import (
    complex_to_json,
    random_hermitian,
    random_probabilities,
    random_projector,
    random_state,
    random_unitary,
    spawn_rngs,
)

MAX_DUMPS = 5
FD_STEP = 1e-5
ENSEMBLE_TRAJ = 2000
ENSEMBLE_TIMES = (0.5, 1.0)


def _dump(value):
    if isinstance(value, np.ndarray):
        if np.iscomplexobj(value):
            return [_dump(v) for v in value] if value.ndim > 1 else [complex_to_json(z) for z in value]
        return value.tolist()
    if isinstance(value, (complex, np.complexfloating)):
        return complex_to_json(value)
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


@dataclass
class PropertyResult:
    name: str
    cases: int = 0
    failures: int = 0
    counterexamples: List[Dict] = field(default_factory=list)
    notes: Dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def check(self, ok: bool, **case):
        self.cases += 1
        if ok:
            return
        self.failures += 1
        if len(self.counterexamples) < MAX_DUMPS:
            self.counterexamples.append({k: _dump(v) for k, v in case.items()})

    def to_dict(self):
        return {
            "name": self.name,
            "passed": self.passed,
            "cases": self.cases,
            "failures": self.failures,
            "counterexamples": self.counterexamples,
            "notes": self.notes,
        }


@dataclass(frozen=True)
class SuiteSizes:
    schmidt: int = 200
    a_orthogonal: int = 100
    doubly_stochastic: int = 100
    prefix_dominance: int = 1000
    monotonicity: int = 100
    currents: int = 50
    ontology: int = 50
    linalg: int = 100
    reductionist: int = 100
    ensemble: int = 4

    @classmethod
    def quick(cls):
        return cls(
            schmidt=20,
            a_orthogonal=20,
            doubly_stochastic=20,
            prefix_dominance=200,
            monotonicity=20,
            currents=10,
            ontology=10,
            linalg=20,
            reductionist=20,
            ensemble=2,
        )


@dataclass
class VerifyReport:
    seed: int
    results: List[PropertyResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def exit_code(self) -> int:
        return flag.EXIT_OK if self.passed else flag.EXIT_PROPERTY_FAILED

    def to_dict(self):
        return {
            "seed": self.seed,
            "passed": self.passed,
            "properties": [r.to_dict() for r in self.results],
        }


SUITES: Dict[str, Callable] = {}


def suite(name):
    def register(fn):
        SUITES[name] = fn
        return fn

    return register


def _bipartite_state(rng, dims=(2, 3, 4)):
    da, db = (int(rng.choice(dims)) for _ in range(2))
    return StateVector(random_state(da * db, rng), HilbertStructure((da, db)))


CUT = CoarseGraining((0,), (1,))


@suite("schmidt_optimality")
def check_schmidt_optimality(rng, sizes: SuiteSizes, **_):
    """Brute-force minimum over product decompositions never beats Schmidt"""
    result = PropertyResult("schmidt_optimality")
    for _ in range(sizes.schmidt):
        psi = _bipartite_state(rng)
        schmidt = bi_orthogonal_decomposition(psi, CUT)
        budget = SearchBudget(restarts=3, max_iter=2000, seed=int(rng.integers(2 ** 31)))
        found = brute_force_min_entropy(psi, budget=budget)
        result.check(
            found.entropy >= schmidt.entropy - 1e-6,
            state=psi.amplitudes,
            dims=list(psi.structure.factor_dims),
            schmidt=schmidt.entropy,
            brute_force=found.entropy,
        )
    return result


def _random_product_decomposition(rng):
    da, db = int(rng.integers(2, 4)), int(rng.integers(2, 4))
    ua, ub = random_unitary(da, rng), random_unitary(db, rng)
    pairs = [(i, j) for i in range(da) for j in range(db)]
    m = int(rng.integers(2, len(pairs) + 1))
    chosen = [pairs[i] for i in rng.choice(len(pairs), size=m, replace=False)]
    c = random_state(m, rng)
    vectors = [np.kron(ua[:, i], ub[:, j]) for i, j in chosen]
    target = StateVector(sum(ck * v for ck, v in zip(c, vectors)), HilbertStructure((da, db)))
    return Decomposition.build(c, vectors, target)


@suite("a_orthogonal_construction")
def check_a_orthogonal(rng, sizes: SuiteSizes, **_):
    """The A-orthogonal construction never raises the IU entropy"""
    result = PropertyResult("a_orthogonal_construction")
    for _ in range(sizes.a_orthogonal):
        d = _random_product_decomposition(rng)
        a_orth = a_orthogonal_decomposition(d, CUT)
        result.check(
            iu_entropy(a_orth) <= iu_entropy(d) + 1e-10,
            coefficients=d.coefficients,
            before=iu_entropy(d),
            after=iu_entropy(a_orth),
        )
    return result


@suite("doubly_stochastic_majorization")
def check_doubly_stochastic(rng, sizes: SuiteSizes, **_):
    """p majorizes |U|^2 p, and Schmidt entropy bounds every A-orthogonal one"""
    result = PropertyResult("doubly_stochastic_majorization")
    for _ in range(sizes.doubly_stochastic):
        size = int(rng.integers(2, 7))
        p = random_probabilities(size, rng)
        u = random_unitary(size, rng)
        q = apply_doubly_stochastic(p, u)
        result.check(majorizes(p, q), p=p, q=q.weights)

        d = a_orthogonal_decomposition(_random_product_decomposition(rng), CUT)
        schmidt = bi_orthogonal_decomposition(d.target, CUT)
        result.check(
            schmidt.entropy <= iu_entropy(d) + 1e-10,
            state=d.target.amplitudes,
            schmidt=schmidt.entropy,
            a_orthogonal=iu_entropy(d),
        )
    return result


@suite("prefix_dominance")
def check_prefix_dominance_suite(rng, sizes: SuiteSizes, **_):
    result = PropertyResult("prefix_dominance")
    applicable = 0
    for _ in range(sizes.prefix_dominance):
        size = int(rng.integers(2, 7))
        p = rng.dirichlet(np.full(size, 0.3))
        q = rng.dirichlet(np.ones(size))
        if rng.random() < 0.5:
            p = np.sort(p)[::-1]
        if not check_prefix_dominance(p, q):
            continue
        applicable += 1
        result.check(majorizes(p, q), p=p, q=q)
    result.notes["applicable"] = applicable
    return result


@suite("projector_monotonicity")
def check_monotonicity(rng, sizes: SuiteSizes, **_):
    """P <= Q implies <psi|P|psi> <= <psi|Q|psi>"""
    result = PropertyResult("projector_monotonicity")
    for _ in range(sizes.monotonicity):
        dim = int(rng.integers(2, 6))
        q = random_projector(dim, int(rng.integers(1, dim + 1)), rng)
        sub = int(rng.integers(0, q.rank + 1))
        mix = rng.normal(size=(q.rank, sub)) + 1j * rng.normal(size=(q.rank, sub))
        p = Projector.from_vectors(list((q.basis @ mix).T), dim=dim)
        psi = random_state(dim, rng)
        result.check(
            projector_leq(p, q) and p.expectation(psi) <= q.expectation(psi) + 1e-12,
            state=psi,
            p_rank=p.rank,
            q_rank=q.rank,
        )
    return result


def _populations(psi0, paths, h, h_tilde, t):
    psi = sla.expm(-1j * h * t) @ psi0
    phi = sla.expm(-1j * h_tilde * t) @ paths
    return np.abs(phi.conj().T @ psi) ** 2


@suite("currents_and_rates")
def check_currents(rng, sizes: SuiteSizes, rate_rule: RateRule = minimal_rates, **_):
    """
    Row sums of J equal dp/dt, dp/dt matches finite differences of the
    Born weights, and the rate rule satisfies T_kj p_j - T_jk p_k = J_kj.
    """
    result = PropertyResult("currents_and_rates")
    rules = [rate_rule] if rate_rule is not minimal_rates else [minimal_rates, excess_rates(0.5)]
    for _ in range(sizes.currents):
        d = int(rng.choice((3, 4)))
        structure = HilbertStructure((d,))
        h, ht = random_hermitian(d, rng), random_hermitian(d, rng)
        paths = random_unitary(d, rng)
        psi0 = random_state(d, rng)
        psi = StateVector(psi0, structure)
        family = PathFamily(paths, 0.0, Operator(ht, structure, hermitian=True), structure)
        hop = Operator(h, structure, hermitian=True)

        rm = probability_currents(psi, family, hop)
        dpdt = theoretical_dpdt(psi, family, hop)
        result.check(
            np.max(np.abs(rm.currents.sum(axis=1) - dpdt)) < 1e-8,
            check="continuity",
            state=psi0,
            currents=rm.currents,
            dpdt=dpdt,
        )
        fd = (
            _populations(psi0, paths, h, ht, FD_STEP) - _populations(psi0, paths, h, ht, -FD_STEP)
        ) / (2 * FD_STEP)
        result.check(
            np.max(np.abs(fd - dpdt)) < 1e-6,
            check="finite_difference",
            state=psi0,
            dpdt=dpdt,
            finite_difference=fd,
        )
        for rule in rules:
            rates = np.asarray(rule(rm.currents, rm.probabilities.weights), dtype=float)
            np.fill_diagonal(rates, 0)
            violations = check_rate_consistency(rm.with_rates(np.clip(rates, 0, None)))
            if np.any(rates < 0):
                violations.append((0, 0, float(rates.min())))
            result.check(
                not violations,
                check="rate_consistency",
                rule=getattr(rule, "__name__", repr(rule)),
                currents=rm.currents,
                probabilities=rm.probabilities.weights,
                rates=rates,
                violations=[[k + 1, j + 1, r] for k, j, r in violations],
            )
        try:
            transition_rates(rm)
        except ModalSimError as e:
            result.check(False, check="transition_rates", error=str(e))
    return result


@suite("ontology_structure")
def check_ontology(rng, sizes: SuiteSizes, **_):
    """
    Determinate sets are closed under complement, span and meet with the
    functional relations intact; a variable is determinate iff V P = lambda P;
    mutually exclusive non-orthogonal ascriptions cannot share an ontology.
    """
    result = PropertyResult("ontology_structure")
    for _ in range(sizes.ontology):
        dim = int(rng.integers(2, 5))
        p = random_projector(dim, int(rng.integers(1, dim)), rng)
        a = PropertyAscription(p, HilbertStructure((dim,)))
        r1, r2 = sample_determinate(a, rng), sample_determinate(a, rng)
        closed = all(
            a.is_determinate(r)
            for r in (r1.complement(), projector_span(r1, r2), projector_intersection(r1, r2))
        )
        result.check(closed and functional_relations_hold(r1, r2, a), check="closure", dim=dim)

        lam = float(rng.normal())
        comp = p.complement().matrix
        v = lam * p.matrix + comp @ random_hermitian(dim, rng) @ comp
        status = variable_status(Operator(v, a.ambient), a)
        result.check(
            status.determinate and abs(status.value - lam) < 1e-8,
            check="eigen_variable",
            value=lam,
            reported=status.value,
        )
        generic = variable_status(Operator(random_hermitian(dim, rng), a.ambient), a)
        result.check(not generic.determinate, check="generic_variable", dim=dim)

        q = random_projector(dim, int(rng.integers(1, dim)), rng)
        b = PropertyAscription(q, a.ambient)
        if mutually_exclusive(a, b):
            chain = common_ontology_contradiction(p, q)
            expected = not projector_orthogonal(p, q)
            result.check(chain.contradiction == expected, check="exclusive_contradiction", steps=chain.steps)

    structure2, structure3 = HilbertStructure((2,)), HilbertStructure((3,))
    up, down = Projector.ray([1, 0]), Projector.ray([0, 1])
    shared = ontologies_identical(PropertyAscription(up, structure2), PropertyAscription(down, structure2))
    result.check(shared, check="dimension_2_orthogonal_rays")
    distinct = ontologies_identical(
        PropertyAscription(Projector.ray([1, 0, 0]), structure3),
        PropertyAscription(Projector.ray([0, 1, 0]), structure3),
    )
    result.check(not distinct, check="dimension_3_distinct")
    status = projector_status(down, PropertyAscription(up, structure2))
    result.check(status.determinate and status.value == 0.0, check="orthogonal_value")
    return result


def _measurement_cases(c):
    for name in ("spin_single", "spin_microstates"):
        yield name, scenarios.PRESETS[name](c), (1,)
    for name in ("spin_sequence", "spin_fig1"):
        yield name, scenarios.PRESETS[name](c), (1, 2)


@suite("measurement_decompositions")
def check_measurements(rng, sizes: SuiteSizes, **_):
    """Closed-form measurement decompositions equal the preferred ones"""
    result = PropertyResult("measurement_decompositions")
    angle = rng.uniform(0.2, 1.3)
    c = np.array([np.cos(angle), np.sin(angle) * np.exp(1j * rng.uniform(0, np.pi))])
    for name, exp, stages in _measurement_cases(c):
        state = exp.initial_state()
        for stage, u in zip(stages, exp.stage_unitaries):
            state = u.apply(state)
            expected = exp.expected_decomposition(stage)
            result.check(
                np.linalg.norm(state.amplitudes - expected.target.amplitudes) < 1e-8,
                check="unitary_consistency",
                preset=name,
                stage=stage,
            )
            found = preferred_decomposition(state, exp.structure)
            result.check(
                found.method == flag.METHOD_PRODUCT_CUT and found.decomposition.same_terms(expected),
                check="closed_form",
                preset=name,
                stage=stage,
                method=found.method,
                coefficients=c,
            )
    return result


@suite("linalg_structure")
def check_linalg(rng, sizes: SuiteSizes, **_):
    """
    Tensor products associate, the reduced spectrum is the squared Schmidt
    spectrum, Gram-Schmidt keeps prefix spans and P ∧ Q lies below P and Q.
    """
    result = PropertyResult("linalg_structure")
    for _ in range(sizes.linalg):
        a, b, c = (
            StateVector(random_state(d, rng), HilbertStructure((d,)))
            for d in rng.integers(2, 4, size=3)
        )
        left = tensor_product([tensor_product([a, b]), c])
        right = tensor_product([a, tensor_product([b, c])])
        result.check(
            left.structure.factor_dims == right.structure.factor_dims
            and np.max(np.abs(left.amplitudes - right.amplitudes)) < 1e-12,
            check="associativity",
            dims=list(left.structure.factor_dims),
        )

        psi = _bipartite_state(rng)
        da, db = psi.structure.factor_dims
        u, s, _ = svd(psi.amplitudes.reshape(da, db))
        rho = partial_trace(psi, CUT, LEFT).entries
        spectrum = np.sort(np.linalg.eigvalsh(rho))[::-1][: s.size]
        result.check(
            np.max(np.abs(spectrum - s ** 2)) < 1e-10 and np.max(np.abs(rho @ u - u * s ** 2)) < 1e-10,
            check="schmidt_link",
            state=psi.amplitudes,
            dims=[da, db],
        )

        dim = int(rng.integers(3, 6))
        vectors = [random_state(dim, rng) for _ in range(int(rng.integers(1, dim + 1)))]
        try:
            out = np.column_stack(gram_schmidt(vectors))
        except ModalSimError as e:
            result.check(False, check="gram_schmidt", error=str(e))
        else:
            residual = max(
                np.linalg.norm(v - out[:, : k + 1] @ (out[:, : k + 1].conj().T @ v))
                for k, v in enumerate(vectors)
            )
            result.check(residual < 1e-8, check="prefix_span", residual=residual)

        p = random_projector(dim, int(rng.integers(1, dim + 1)), rng)
        q = random_projector(dim, int(rng.integers(1, dim + 1)), rng)
        meet = projector_intersection(p, q)
        phi = random_state(dim, rng)
        result.check(
            projector_leq(meet, p)
            and projector_leq(meet, q)
            and meet.expectation(phi) <= min(p.expectation(phi), q.expectation(phi)) + 1e-12,
            check="intersection",
            state=phi,
            ranks=[p.rank, q.rank, meet.rank],
        )
    return result


@suite("reductionist_minimality")
def check_reductionist(rng, sizes: SuiteSizes, **_):
    """
    S = subsystem_preferred_projector(P_AB) satisfies S ⊗ I >= P_AB, every
    R with R ⊗ I >= P_AB contains S, and no proper part of S covers P_AB.
    """
    result = PropertyResult("reductionist_minimality")
    for _ in range(sizes.reductionist):
        da, db = (int(d) for d in rng.integers(2, 4, size=2))
        structure = HilbertStructure((da, db))
        outer = random_projector(da, int(rng.integers(1, da + 1)), rng)
        box = embed_projector(outer, structure, (0,)).matrix
        p_ab = Projector.from_vectors(
            [box @ random_state(da * db, rng) for _ in range(int(rng.integers(1, db + 1)))],
            dim=da * db,
            structure=structure,
        )
        s = subsystem_preferred_projector(p_ab, CUT, LEFT)

        def covers(r):
            return projector_leq(p_ab, embed_projector(r, structure, (0,)))

        result.check(covers(s) and projector_leq(s, outer), check="covers", dims=[da, db], rank=s.rank)
        for r in (outer, random_projector(da, int(rng.integers(1, da + 1)), rng)):
            if covers(r):
                result.check(projector_leq(s, r), check="smallest", dims=[da, db], rank=r.rank)
        smaller = Projector.from_vectors(list(s.basis.T)[1:], dim=da)
        result.check(not covers(smaller), check="no_proper_part", dims=[da, db], rank=s.rank)
    return result


@suite("ensemble_born_statistics")
def check_ensemble(rng, sizes: SuiteSizes, rate_rule: RateRule = minimal_rates, **_):
    """
    Path frequencies of the jump process follow the Born weights of fixed
    paths under a random Hamiltonian, and paths carried by H itself never jump.
    """
    result = PropertyResult("ensemble_born_statistics")
    n = ENSEMBLE_TRAJ
    for _ in range(sizes.ensemble):
        structure = HilbertStructure((3,))
        h, paths, psi0 = random_hermitian(3, rng), random_unitary(3, rng), random_state(3, rng)
        hop = Operator(h, structure, hermitian=True)
        psi = StateVector(psi0, structure)
        seed = int(rng.integers(2 ** 31))
        try:
            fixed = run_ensemble(
                psi,
                hop,
                PathFamily(paths, 0.0, None, structure),
                ENSEMBLE_TIMES[-1],
                n,
                seed,
                checkpoints=ENSEMBLE_TIMES,
                rate_rule=rate_rule,
            )
            carried = run_ensemble(
                psi,
                hop,
                PathFamily(paths, 0.0, hop, structure),
                ENSEMBLE_TIMES[-1],
                n,
                seed,
                checkpoints=ENSEMBLE_TIMES,
            )
        except ModalSimError as e:
            result.check(False, check="ensemble_run", state=psi0, error=str(e))
            continue
        for i, t in enumerate(ENSEMBLE_TIMES):
            born = _populations(psi0, paths, h, np.zeros_like(h), t)
            freq = fixed.frequencies(i)
            result.check(
                np.max(np.abs(fixed.targets(i) - born)) < 1e-6
                and np.max(np.abs(freq - born)) < 4 / np.sqrt(n),
                check="born_frequencies",
                time=t,
                born=born,
                frequencies=freq,
                seed=seed,
            )
        initial = np.abs(paths.conj().T @ psi0) ** 2
        result.check(
            carried.jumps == 0 and np.max(np.abs(carried.frequencies(-1) - initial)) < 4 / np.sqrt(n),
            check="carried_paths",
            jumps=carried.jumps,
            seed=seed,
        )
    return result


def run_suites(seed=0, sizes: SuiteSizes = None, rate_rule: RateRule = minimal_rates, names=None):
    sizes = sizes or SuiteSizes()
    names = list(names or SUITES)
    rngs = dict(zip(SUITES, spawn_rngs(seed, len(SUITES))))
    results = []
    for name in names:
        result = SUITES[name](rngs[name], sizes, rate_rule=rate_rule)
        status = "pass" if result.passed else f"FAIL ({result.failures}/{result.cases})"
        logging.info(f"{name}: {status}")
        results.append(result)
    return VerifyReport(int(seed), results)
