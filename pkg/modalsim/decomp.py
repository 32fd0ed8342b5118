"""
Decompositions of state vectors and their IU entropy.

preferred_decomposition first tries every bipartite coarse-graining: a
bi-orthogonal decomposition that is also a product decomposition over the
full structure is entropy minimal. Otherwise small systems fall back to
brute_force_min_entropy, a multi-start search that is marked heuristic.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg as sla
from scipy import optimize
from scipy.special import entr

from modalsim import status_flag as flag
from modalsim.exceptions import StructuralError, UnresolvedMinimization
from modalsim.linalg import (
    VERIFY_TOL,
    CoarseGraining,
    HilbertStructure,
    StateVector,
    _restore_factor_order,
    embed_operator,
    gram_schmidt_skip,
    svd,
)
from modalsim.metrics import BRUTE_FORCE_RESTARTS, DECOMPOSE_TIME, UNRESOLVED_COUNT
from modalsim.utils import random_hermitian, random_unitary, spawn_rngs

ZERO_COEFFICIENT = 1e-10
DEGENERACY_TOL = 1e-8
PRODUCT_TOL = 1e-8
BRUTE_FORCE_MAX_DIM = 64


@dataclass(frozen=True, eq=False)
class ProbabilityDistribution:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if w.size == 0 or not np.all(np.isfinite(w)):
            raise StructuralError("a distribution needs finite weights")
        if np.any(w < -1e-12) or abs(w.sum() - 1) > 1e-10:
            raise StructuralError(f"weights {w} are not a probability distribution")
        w = np.clip(w, 0, 1)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_unnormalized(cls, values):
        v = np.clip(np.asarray(values, dtype=float), 0, None)
        total = v.sum()
        if total <= 0:
            raise StructuralError("cannot normalize an all-zero weight vector")
        return cls(v / total)

    def __len__(self):
        return self.weights.size

    def padded(self, size: int) -> ProbabilityDistribution:
        if size < len(self):
            raise StructuralError(f"cannot pad {len(self)} weights down to {size}")
        return ProbabilityDistribution(np.concatenate([self.weights, np.zeros(size - len(self))]))

    def sorted_desc(self) -> np.ndarray:
        return np.sort(self.weights)[::-1]


def _weights(p) -> np.ndarray:
    if isinstance(p, ProbabilityDistribution):
        return p.weights
    return ProbabilityDistribution(p).weights


def shannon_entropy(p, concave: Callable = entr) -> float:
    """Sum of the concave functional over p; default -x ln x with 0 ln 0 = 0"""
    return float(np.sum(concave(_weights(p))))


def _term_key(coefficient, vector):
    rounded = np.round(vector, 9)
    return (-round(float(coefficient), 9), tuple(zip(rounded.real, rounded.imag)))


@dataclass(frozen=True, eq=False)
class Decomposition:
    coefficients: np.ndarray  # real, > 1e-10, nonincreasing
    vectors: Tuple[StateVector, ...]
    target: StateVector

    @classmethod
    def build(cls, coefficients, vectors, target: StateVector, tol=VERIFY_TOL):
        """
        Canonical form: phases of the coefficients go into the vectors,
        terms with |c| <= 1e-10 are dropped, coefficients nonincreasing
        with ties ordered lexicographically by amplitudes.
        """
        terms = []
        for c, v in zip(coefficients, vectors):
            c = complex(c)
            if abs(c) <= ZERO_COEFFICIENT:
                continue
            amps = np.asarray(getattr(v, "amplitudes", v), dtype=complex)
            terms.append((abs(c), amps * (c / abs(c))))
        if not terms:
            raise StructuralError("decomposition has no nonzero term")
        terms.sort(key=lambda t: _term_key(*t))
        decomposition = cls(
            np.array([c for c, _ in terms]),
            tuple(StateVector(v, target.structure) for _, v in terms),
            target,
        )
        decomposition.validate(tol)
        return decomposition

    def validate(self, tol=VERIFY_TOL):
        mat = self.matrix
        gram = mat.conj().T @ mat
        if np.max(np.abs(gram - np.eye(len(self)))) > tol:
            raise StructuralError("decomposition vectors are not orthonormal")
        residual = np.linalg.norm(mat @ self.coefficients - self.target.amplitudes)
        if residual > tol:
            raise StructuralError(f"decomposition misses the target by {residual:.3e}")

    def __len__(self):
        return len(self.vectors)

    @property
    def structure(self) -> HilbertStructure:
        return self.target.structure

    @property
    def matrix(self) -> np.ndarray:
        return np.column_stack([v.amplitudes for v in self.vectors])

    @property
    def terms(self) -> List[Tuple[float, StateVector]]:
        return list(zip(self.coefficients.tolist(), self.vectors))

    @property
    def probabilities(self) -> ProbabilityDistribution:
        return ProbabilityDistribution.from_unnormalized(self.coefficients ** 2)

    def same_terms(self, other: Decomposition, tol=VERIFY_TOL) -> bool:
        """Term-set equality up to order and vector phase"""
        if len(self) != len(other):
            return False
        unmatched = list(range(len(other)))
        for c, v in self.terms:
            for idx in unmatched:
                oc, ov = other.coefficients[idx], other.vectors[idx]
                if abs(c - oc) < tol and abs(abs(v.inner(ov)) - 1) < tol:
                    unmatched.remove(idx)
                    break
            else:
                return False
        return True

    def to_dict(self):
        return {
            "structure": list(self.structure.factor_dims),
            "terms": [
                {
                    "coefficient": float(c),
                    "amplitudes": [[float(z.real), float(z.imag)] for z in v.amplitudes],
                }
                for c, v in self.terms
            ],
        }

    @classmethod
    def from_dict(cls, data, tol=VERIFY_TOL):
        structure = HilbertStructure(tuple(data["structure"]))
        coefficients = [t["coefficient"] for t in data["terms"]]
        vectors = [
            np.array([complex(re, im) for re, im in t["amplitudes"]])
            for t in data["terms"]
        ]
        target = StateVector(sum(c * v for c, v in zip(coefficients, vectors)), structure)
        return cls.build(coefficients, vectors, target, tol=tol)


def iu_entropy(d: Decomposition) -> float:
    return shannon_entropy(ProbabilityDistribution.from_unnormalized(d.coefficients ** 2))


@dataclass(frozen=True, eq=False)
class DecompositionResult:
    decomposition: Decomposition
    entropy: float
    method: str
    unique: bool
    degeneracy_note: Optional[str] = None
    heuristic: bool = False
    grain: Optional[CoarseGraining] = None

    def __post_init__(self):
        if abs(self.entropy - iu_entropy(self.decomposition)) > 1e-10:
            raise StructuralError("result entropy disagrees with its decomposition")

    @classmethod
    def of(cls, decomposition: Decomposition, method: str, **kw):
        return cls(decomposition, iu_entropy(decomposition), method, **kw)

    def to_dict(self):
        data = self.decomposition.to_dict()
        data.update(
            {
                "entropy": self.entropy,
                "method": self.method,
                "unique": self.unique,
                "degeneracy_note": self.degeneracy_note,
                "heuristic": self.heuristic,
                "grain": self.grain.to_dict() if self.grain else None,
            }
        )
        return data

    @classmethod
    def from_dict(cls, data):
        tol = VERIFY_TOL if not data.get("heuristic") else 1e-5
        grain = data.get("grain")
        return cls.of(
            Decomposition.from_dict(data, tol=tol),
            data["method"],
            unique=bool(data["unique"]),
            degeneracy_note=data.get("degeneracy_note"),
            heuristic=bool(data.get("heuristic", False)),
            grain=CoarseGraining(tuple(grain["left"]), tuple(grain["right"])) if grain else None,
        )


def _cut_singular_values(vector: np.ndarray, structure: HilbertStructure, grain):
    order = grain.left + grain.right
    m = np.transpose(vector.reshape(structure.factor_dims), order).reshape(
        structure.block_dim(grain.left), -1
    )
    return np.linalg.svd(m, compute_uv=False)


def is_product_vector(vector, structure: HilbertStructure, tol=PRODUCT_TOL) -> bool:
    amps = np.asarray(getattr(vector, "amplitudes", vector), dtype=complex)
    for grain in structure.bipartitions() if structure.n_factors > 1 else []:
        s = _cut_singular_values(amps, structure, grain)
        if s.size > 1 and s[1] >= tol:
            return False
    return True


def is_product_decomposition(d: Decomposition, structure: HilbertStructure = None) -> bool:
    structure = structure or d.structure
    if structure.total_dim != d.structure.total_dim:
        raise StructuralError("decomposition does not live on this structure")
    return all(is_product_vector(v, structure) for v in d.vectors)


def _degenerate_blocks(s: np.ndarray) -> List[List[int]]:
    blocks = [[0]] if s.size else []
    for i in range(1, s.size):
        if s[i - 1] - s[i] < DEGENERACY_TOL:
            blocks[-1].append(i)
        else:
            blocks.append([i])
    return blocks


def _factor_labels(sub: HilbertStructure, rng) -> List[np.ndarray]:
    """One random single-factor observable per factor of a block"""
    return [
        embed_operator(random_hermitian(d, rng), sub, (pos,)).entries
        for pos, d in enumerate(sub.factor_dims)
    ]


def _align_degenerate_block(u, v, structure: HilbertStructure, grain: CoarseGraining):
    """
    Rotate a degenerate singular block (U -> UW, V -> VW leaves the block
    of the state unchanged) to the eigenbasis of a local observable, whose
    eigenvectors are product vectors when the block is. The sum over both
    sides comes first, then one side only, then single factors; the first
    basis made of product terms wins.
    """
    rng = np.random.default_rng(0)
    left, right = structure.sub(grain.left), structure.sub(grain.right)
    z_left = [u.conj().T @ label @ u for label in _factor_labels(left, rng)]
    z_right = [v.conj().T @ label @ v for label in _factor_labels(right, rng)]
    choices = [sum(z_left) + sum(z_right), sum(z_left), sum(z_right)] + z_left + z_right
    first = None
    for z in choices:
        _, w = np.linalg.eigh((z + z.conj().T) / 2)
        aligned = u @ w, v @ w
        if first is None:
            first = aligned
        if all(
            is_product_vector(aligned[0][:, k], left) and is_product_vector(aligned[1][:, k], right)
            for k in range(w.shape[1])
        ):
            return aligned
    return first


def bi_orthogonal_decomposition(psi: StateVector, grain: CoarseGraining) -> DecompositionResult:
    psi.require_normalized()
    structure = psi.structure
    grain.validate_for(structure)
    order = grain.left + grain.right
    m = np.transpose(psi.tensor(), order).reshape(structure.block_dim(grain.left), -1)
    u, s, v = svd(m)
    keep = s > ZERO_COEFFICIENT
    u, s, v = u[:, keep], s[keep], v[:, keep]

    blocks = _degenerate_blocks(s)
    unique = all(len(b) == 1 for b in blocks)
    note = None
    for block in blocks:
        if len(block) > 1:
            u[:, block], v[:, block] = _align_degenerate_block(
                u[:, block], v[:, block], structure, grain
            )
    if not unique:
        values = [float(s[b[0]]) for b in blocks if len(b) > 1]
        note = f"degenerate coefficients {values} on {grain}"
        logging.debug(f"bi-orthogonal decomposition is not unique: {note}")

    terms = np.einsum("ik,jk->ijk", u, v.conj()).reshape(m.size, -1)
    terms = _restore_factor_order(terms, structure, order)
    decomposition = Decomposition.build(s, list(terms.T), psi)
    return DecompositionResult.of(
        decomposition,
        flag.METHOD_BI_ORTHOGONAL,
        unique=unique,
        degeneracy_note=note,
        grain=grain,
    )


@dataclass(frozen=True)
class SearchBudget:
    restarts: int = 50
    max_iter: int = 4000
    seed: int = 0
    penalty: float = 1e3
    feasibility_tol: float = 1e-6
    penalized_restarts: int = 4
    workers: int = 1


def preferred_decomposition(
    psi: StateVector, structure: HilbertStructure = None, budget: SearchBudget = None
) -> DecompositionResult:
    structure = structure or psi.structure
    if structure.total_dim != psi.structure.total_dim:
        raise StructuralError(f"state does not fit structure {structure.factor_dims}")
    if structure.n_factors < 2:
        raise StructuralError("preferred decomposition needs at least two factors")
    psi = psi.with_structure(structure).require_normalized()

    with DECOMPOSE_TIME.time():
        best = None
        for grain in structure.bipartitions():
            result = bi_orthogonal_decomposition(psi, grain)
            if is_product_decomposition(result.decomposition, structure):
                logging.debug(f"product decomposition on {grain}, entropy={result.entropy:.6f}")
                return replace(result, method=flag.METHOD_PRODUCT_CUT)
            if best is None or result.entropy < best.entropy:
                best = result

        if structure.total_dim <= BRUTE_FORCE_MAX_DIM:
            logging.warning(
                f"no bi-orthogonal product decomposition on {structure.factor_dims}, "
                "falling back to brute force"
            )
            return brute_force_min_entropy(psi, structure, budget or SearchBudget())

    UNRESOLVED_COUNT.inc()
    raise UnresolvedMinimization(
        f"no coarse-graining gives a product decomposition and dim "
        f"{structure.total_dim} > {BRUTE_FORCE_MAX_DIM} is out of brute-force reach",
        candidate=best,
    )


def _hermitian_from_params(params: np.ndarray, d: int) -> np.ndarray:
    iu = np.triu_indices(d, 1)
    k = iu[0].size
    h = np.zeros((d, d), dtype=complex)
    h[np.diag_indices(d)] = params[:d]
    h[iu] = params[d : d + k] + 1j * params[d + k : d + 2 * k]
    return h + np.triu(h, 1).conj().T


def _local_overlaps(tensor: np.ndarray, unitaries: Sequence[np.ndarray]) -> np.ndarray:
    """<u^1_i1 ⊗ ... ⊗ u^n_in | psi> for every multi-index"""
    out = tensor
    for axis, u in enumerate(unitaries):
        out = np.moveaxis(np.tensordot(u.conj(), out, axes=([0], [axis])), 0, axis)
    return out


def _reduced_eigenbases(tensor: np.ndarray) -> List[np.ndarray]:
    bases = []
    for axis in range(tensor.ndim):
        m = np.moveaxis(tensor, axis, 0).reshape(tensor.shape[axis], -1)
        _, vecs = np.linalg.eigh(m @ m.conj().T)
        bases.append(vecs[:, ::-1])
    return bases


@dataclass(frozen=True, eq=False)
class _Candidate:
    entropy: float
    index: int
    coefficients: np.ndarray
    vectors: np.ndarray  # n x m
    tol: float


def _product_basis_candidate(tensor, unitaries, index) -> _Candidate:
    overlaps = _local_overlaps(tensor, unitaries).reshape(-1)
    keep = np.flatnonzero(np.abs(overlaps) > ZERO_COEFFICIENT)
    cols = []
    for flat in keep:
        multi = np.unravel_index(flat, tensor.shape)
        vec = np.array([1.0 + 0j])
        for u, i in zip(unitaries, multi):
            vec = np.kron(vec, u[:, i])
        cols.append(vec)
    c = overlaps[keep]
    return _Candidate(
        shannon_entropy(ProbabilityDistribution.from_unnormalized(np.abs(c) ** 2)),
        index,
        c,
        np.column_stack(cols),
        VERIFY_TOL,
    )


def _local_basis_search(tensor, start: List[np.ndarray], budget: SearchBudget, index):
    """Minimize entropy over product bases u^1 ⊗ ... ⊗ u^n; always exactly feasible"""
    dims = tensor.shape
    sizes = [d * d for d in dims]
    splits = np.cumsum(sizes)[:-1]

    def unitaries(x):
        return [
            u0 @ sla.expm(1j * _hermitian_from_params(p, d))
            for u0, p, d in zip(start, np.split(x, splits), dims)
        ]

    def objective(x):
        c = _local_overlaps(tensor, unitaries(x))
        return float(np.sum(entr(np.abs(c) ** 2)))

    res = optimize.minimize(
        objective,
        np.zeros(sum(sizes)),
        method="Nelder-Mead",
        options={
            "maxiter": budget.max_iter,
            "xatol": 1e-10,
            "fatol": 1e-13,
            "adaptive": True,
        },
    )
    # the initial simplex contains x0, so res.x is never worse than the start
    best = unitaries(res.x)
    return _product_basis_candidate(tensor, best, index), best


def _factor_vectors(candidate: _Candidate, dims) -> List[List[np.ndarray]]:
    factors = []
    for col in candidate.vectors.T:
        parts, rest = [], col.reshape(dims)
        for axis in range(len(dims)):
            m = rest.reshape(dims[axis], -1)
            u, s, vh = np.linalg.svd(m, full_matrices=False)
            parts.append(u[:, 0])
            rest = (s[0] * vh[0]).reshape(dims[axis + 1 :]) if axis + 1 < len(dims) else None
        factors.append(parts)
    return factors


def _penalized_search(psi_vec, dims, seed_candidate: _Candidate, budget, rng, index):
    """
    Free orthonormal product family with the seed's term count, constraints
    enforced by penalty; coefficients are always the overlaps <phi_k|psi>.
    """
    m = seed_candidate.vectors.shape[1]
    seed_parts = _factor_vectors(seed_candidate, dims)
    x0 = np.concatenate(
        [np.concatenate([p.real, p.imag]) for parts in seed_parts for p in parts]
    )
    x0 = x0 + 0.05 * rng.normal(size=x0.size)

    def vectors(x):
        cols, pos = [], 0
        for _ in range(m):
            vec = np.array([1.0 + 0j])
            for d in dims:
                part = x[pos : pos + d] + 1j * x[pos + d : pos + 2 * d]
                pos += 2 * d
                vec = np.kron(vec, part / max(np.linalg.norm(part), 1e-300))
            cols.append(vec)
        return np.column_stack(cols)

    def violations(phi):
        c = phi.conj().T @ psi_vec
        gram = phi.conj().T @ phi
        off = np.abs(gram - np.eye(m))
        return c, float(np.max(off)), float(np.linalg.norm(psi_vec - phi @ c))

    def objective(x):
        phi = vectors(x)
        c, off, res = violations(phi)
        w = np.abs(c) ** 2
        ent = float(np.sum(entr(w / max(w.sum(), 1e-300))))
        gram = phi.conj().T @ phi
        return ent + budget.penalty * (np.sum(np.abs(gram - np.eye(m)) ** 2) + res ** 2)

    res = optimize.minimize(
        objective,
        x0,
        method="Nelder-Mead",
        options={"maxiter": budget.max_iter, "xatol": 1e-10, "fatol": 1e-13, "adaptive": True},
    )
    phi = vectors(res.x)
    c, off, resid = violations(phi)
    if off > budget.feasibility_tol or resid > budget.feasibility_tol:
        return None
    entropy = shannon_entropy(ProbabilityDistribution.from_unnormalized(np.abs(c) ** 2))
    return _Candidate(entropy, index, c, phi, budget.feasibility_tol)


def brute_force_min_entropy(
    psi: StateVector, structure: HilbertStructure = None, budget: SearchBudget = None
) -> DecompositionResult:
    structure = structure or psi.structure
    budget = budget or SearchBudget()
    if structure.total_dim > BRUTE_FORCE_MAX_DIM:
        raise StructuralError(
            f"brute force is limited to dim <= {BRUTE_FORCE_MAX_DIM}, got {structure.total_dim}"
        )
    psi = psi.with_structure(structure).require_normalized()
    tensor = psi.tensor()
    dims = structure.factor_dims
    if budget.restarts < 1:
        raise UnresolvedMinimization("search budget allows no restart")

    rngs = spawn_rngs(budget.seed, budget.restarts + budget.penalized_restarts)
    warm = _reduced_eigenbases(tensor)

    def local_restart(i):
        start = warm if i == 0 else [random_unitary(d, rngs[i]) for d in dims]
        return _local_basis_search(tensor, start, budget, i)[0]

    with ThreadPoolExecutor(max_workers=max(1, budget.workers)) as pool:
        candidates = list(pool.map(local_restart, range(budget.restarts)))
    BRUTE_FORCE_RESTARTS.inc(budget.restarts)
    # deterministic reduction, independent of worker count
    best = min(candidates, key=lambda c: (round(c.entropy, 12), c.index))

    if structure.n_factors > 2 and len(best.coefficients) > 1:
        for i in range(budget.penalized_restarts):
            found = _penalized_search(
                psi.amplitudes, dims, best, budget, rngs[budget.restarts + i], budget.restarts + i
            )
            # penalized candidates must win by more than their feasibility slack
            if found is not None and found.entropy < best.entropy - budget.feasibility_tol:
                logging.info(
                    f"penalized search lowered entropy {best.entropy:.6f} -> {found.entropy:.6f}"
                )
                best = found

    decomposition = Decomposition.build(
        best.coefficients, list(best.vectors.T), psi, tol=max(best.tol, VERIFY_TOL)
    )
    blocks = _degenerate_blocks(decomposition.coefficients)
    unique = all(len(b) == 1 for b in blocks)
    return DecompositionResult.of(
        decomposition,
        flag.METHOD_BRUTE_FORCE,
        unique=unique,
        degeneracy_note=None if unique else "degenerate coefficients in brute-force minimum",
        heuristic=True,
    )


def majorizes(p, q, tol=1e-12) -> bool:
    a, b = _weights(p), _weights(q)
    size = max(a.size, b.size)
    a = np.sort(np.pad(a, (0, size - a.size)))[::-1]
    b = np.sort(np.pad(b, (0, size - b.size)))[::-1]
    return bool(np.all(np.cumsum(a) >= np.cumsum(b) - tol))


def check_prefix_dominance(p, q, tol=1e-12) -> bool:
    """Unsorted prefix sums of p dominate sorted prefix sums of q"""
    a, b = _weights(p), _weights(q)
    if a.size != b.size:
        raise StructuralError(f"prefix dominance needs equal lengths, got {a.size} and {b.size}")
    return bool(np.all(np.cumsum(a) >= np.cumsum(np.sort(b)[::-1]) - tol))


def apply_doubly_stochastic(p, u) -> ProbabilityDistribution:
    """p_j = sum_k |U_jk|^2 p_k"""
    w = _weights(p)
    u = np.asarray(u, dtype=complex)
    if u.shape != (w.size, w.size):
        raise StructuralError(f"unitary shape {u.shape} does not match {w.size} weights")
    if np.linalg.norm(u.conj().T @ u - np.eye(w.size)) >= VERIFY_TOL:
        raise StructuralError("matrix is not unitary")
    return ProbabilityDistribution.from_unnormalized((np.abs(u) ** 2) @ w)


def a_orthogonal_decomposition(d: Decomposition, grain: CoarseGraining) -> Decomposition:
    """
    Turn a product decomposition into an A-orthogonal one of no larger
    entropy: Gram-Schmidt over the A-side vectors taken in order of
    decreasing weight, dependent ones dropped, then c_j = |<mu_j|psi>| and
    nu_j = <mu_j|psi> / c_j.
    """
    structure = d.structure
    grain.validate_for(structure)
    order = grain.left + grain.right
    da = structure.block_dim(grain.left)

    a_side = []
    for c, v in sorted(d.terms, key=lambda t: -t[0]):
        m = np.transpose(v.tensor(), order).reshape(da, -1)
        u, s, _ = np.linalg.svd(m, full_matrices=False)
        if s.size > 1 and s[1] >= PRODUCT_TOL:
            raise StructuralError(f"term is not a product state across {grain}")
        a_side.append(u[:, 0])
    mus, dropped = gram_schmidt_skip(a_side)
    if dropped:
        logging.debug(f"A-side vectors {dropped} dropped as dependent")

    psi = np.transpose(d.target.tensor(), order).reshape(da, -1)
    coefficients, vectors = [], []
    for mu in mus:
        partial = mu.conj() @ psi
        c = np.linalg.norm(partial)
        if c <= ZERO_COEFFICIENT:
            continue
        coefficients.append(c)
        vectors.append(np.kron(mu, partial / c))
    vectors = _restore_factor_order(np.column_stack(vectors), structure, order)
    return Decomposition.build(coefficients, list(vectors.T), d.target)
