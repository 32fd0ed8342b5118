"""
Dense complex linear algebra over explicitly factorized Hilbert spaces.

Values are immutable after construction (arrays are copied and flagged
read-only), so they can be shared freely between worker threads.
Amplitudes follow numpy's C order, i.e. the order produced by np.kron.
"""
from __future__ import annotations

import functools
import itertools
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg as sla

from modalsim.exceptions import DependentVectorError, StructuralError

CONSTRUCT_TOL = 1e-10
VERIFY_TOL = 1e-8
PHASE_TOL = 1e-10

LEFT = "left"
RIGHT = "right"


def _frozen(value, dtype=complex) -> np.ndarray:
    arr = np.array(value, dtype=dtype)
    arr.setflags(write=False)
    return arr


def phase_fix(vector) -> np.ndarray:
    """First component with |x| > 1e-10 made real and nonnegative"""
    vec = np.array(vector, dtype=complex)
    lead = np.flatnonzero(np.abs(vec) > PHASE_TOL)
    if lead.size == 0:
        return vec
    z = vec[lead[0]]
    return vec * (abs(z) / z)


@dataclass(frozen=True)
class CoarseGraining:
    left: Tuple[int, ...]
    right: Tuple[int, ...]

    def __post_init__(self):
        left, right = tuple(self.left), tuple(self.right)
        if not left or not right:
            raise StructuralError("both blocks of a coarse-graining must be nonempty")
        if set(left) & set(right):
            raise StructuralError(f"blocks {left} and {right} overlap")
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    def __str__(self):
        return f"<{self.left}|{self.right}>"

    def validate_for(self, structure: HilbertStructure):
        if sorted(self.left + self.right) != list(range(structure.n_factors)):
            raise StructuralError(
                f"coarse-graining {self} does not exhaust {structure.n_factors} factors"
            )

    def block(self, keep: str) -> Tuple[int, ...]:
        if keep == LEFT:
            return self.left
        if keep == RIGHT:
            return self.right
        raise StructuralError(f"unknown block id: {keep}")

    def other(self, keep: str) -> Tuple[int, ...]:
        return self.block(RIGHT if keep == LEFT else LEFT)

    def to_dict(self):
        return {"left": list(self.left), "right": list(self.right)}


@dataclass(frozen=True)
class HilbertStructure:
    factor_dims: Tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.factor_dims)
        if not dims:
            raise StructuralError("a Hilbert structure needs at least one factor")
        if any(d < 2 for d in dims):
            raise StructuralError(f"factor dimensions must be >= 2, got {dims}")
        object.__setattr__(self, "factor_dims", dims)

    @property
    def n_factors(self) -> int:
        return len(self.factor_dims)

    @property
    def total_dim(self) -> int:
        return int(np.prod(self.factor_dims))

    def block_dim(self, factors: Sequence[int]) -> int:
        return int(np.prod([self.factor_dims[f] for f in factors], dtype=int))

    def sub(self, factors: Sequence[int]) -> HilbertStructure:
        return HilbertStructure(tuple(self.factor_dims[f] for f in factors))

    def bipartitions(self) -> List[CoarseGraining]:
        """All 2^(n-1)-1 bipartite coarse-grainings, smaller left blocks first"""
        n = self.n_factors
        grains = []
        for size in range(1, n // 2 + 1):
            for left in itertools.combinations(range(n), size):
                # equal halves would otherwise be listed twice
                if 2 * size == n and 0 not in left:
                    continue
                right = tuple(i for i in range(n) if i not in left)
                grains.append(CoarseGraining(left, right))
        return grains


@dataclass(frozen=True, eq=False)
class StateVector:
    amplitudes: np.ndarray
    structure: HilbertStructure

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex).reshape(-1)
        if not np.all(np.isfinite(amps)):
            raise StructuralError("state amplitudes must be finite")
        if amps.size != self.structure.total_dim:
            raise StructuralError(
                f"{amps.size} amplitudes do not fit structure {self.structure.factor_dims}"
            )
        object.__setattr__(self, "amplitudes", _frozen(amps))

    @classmethod
    def from_amplitudes(cls, amplitudes, factor_dims=None, normalize=False):
        amps = np.asarray(amplitudes, dtype=complex).reshape(-1)
        if normalize:
            norm = np.linalg.norm(amps)
            if norm <= CONSTRUCT_TOL:
                raise StructuralError("cannot normalize a null vector")
            amps = amps / norm
        dims = tuple(factor_dims) if factor_dims is not None else (amps.size,)
        return cls(amps, HilbertStructure(dims))

    @classmethod
    def basis(cls, index: int, structure: HilbertStructure):
        amps = np.zeros(structure.total_dim, dtype=complex)
        amps[index] = 1
        return cls(amps, structure)

    def __len__(self):
        return self.amplitudes.size

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def is_normalized(self, tol=CONSTRUCT_TOL) -> bool:
        return abs(self.norm - 1) <= tol

    def require_normalized(self, tol=CONSTRUCT_TOL):
        if not self.is_normalized(tol):
            raise StructuralError(f"state norm {self.norm!r} is not 1")
        return self

    def normalized(self) -> StateVector:
        return StateVector.from_amplitudes(
            self.amplitudes, self.structure.factor_dims, normalize=True
        )

    def inner(self, other: StateVector) -> complex:
        """<self|other>"""
        return complex(np.vdot(self.amplitudes, other.amplitudes))

    def tensor(self) -> np.ndarray:
        return self.amplitudes.reshape(self.structure.factor_dims)

    def with_structure(self, structure: HilbertStructure) -> StateVector:
        return StateVector(self.amplitudes, structure)


@dataclass(frozen=True, eq=False)
class Operator:
    entries: np.ndarray
    structure: HilbertStructure
    hermitian: bool = False

    def __post_init__(self):
        m = np.asarray(self.entries, dtype=complex)
        n = self.structure.total_dim
        if m.shape != (n, n):
            raise StructuralError(f"operator shape {m.shape} does not match dim {n}")
        if not np.all(np.isfinite(m)):
            raise StructuralError("operator entries must be finite")
        if self.hermitian and np.max(np.abs(m - m.conj().T), initial=0) > CONSTRUCT_TOL:
            raise StructuralError("operator flagged Hermitian is not M = M^dagger")
        object.__setattr__(self, "entries", _frozen(m))

    @classmethod
    def from_matrix(cls, matrix, factor_dims=None, hermitian=False):
        m = np.asarray(matrix, dtype=complex)
        dims = tuple(factor_dims) if factor_dims is not None else (m.shape[0],)
        return cls(m, HilbertStructure(dims), hermitian=hermitian)

    @classmethod
    def identity(cls, structure: HilbertStructure):
        return cls(np.eye(structure.total_dim), structure, hermitian=True)

    @classmethod
    def zeros(cls, structure: HilbertStructure):
        return cls(np.zeros((structure.total_dim,) * 2), structure, hermitian=True)

    @property
    def dim(self) -> int:
        return self.structure.total_dim

    def is_hermitian(self, tol=CONSTRUCT_TOL) -> bool:
        m = self.entries
        return bool(np.max(np.abs(m - m.conj().T), initial=0) <= tol)

    def require_hermitian(self):
        if not (self.hermitian or self.is_hermitian()):
            raise StructuralError("operator is not Hermitian")
        return self

    def is_zero(self, tol=CONSTRUCT_TOL) -> bool:
        return bool(np.max(np.abs(self.entries), initial=0) <= tol)

    def apply(self, psi: StateVector) -> StateVector:
        if psi.structure.total_dim != self.dim:
            raise StructuralError("operator and state dimensions differ")
        return StateVector(self.entries @ psi.amplitudes, psi.structure)

    def expectation(self, psi: StateVector) -> complex:
        return complex(np.vdot(psi.amplitudes, self.entries @ psi.amplitudes))

    def is_unitary(self, tol=VERIFY_TOL) -> bool:
        m = self.entries
        return bool(np.linalg.norm(m.conj().T @ m - np.eye(self.dim)) < tol)


@dataclass(frozen=True, eq=False)
class Projector:
    basis: np.ndarray  # dim x rank, orthonormal columns
    dim: int
    structure: Optional[HilbertStructure] = None

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=complex)
        if b.ndim == 1:
            b = b.reshape(-1, 1)
        if b.size == 0:
            b = np.zeros((int(self.dim), 0), dtype=complex)
        if b.shape[0] != int(self.dim):
            raise StructuralError(f"projector basis rows {b.shape[0]} != dim {self.dim}")
        gram = b.conj().T @ b
        if np.max(np.abs(gram - np.eye(b.shape[1])), initial=0) > CONSTRUCT_TOL:
            raise StructuralError("projector basis is not orthonormal")
        object.__setattr__(self, "basis", _frozen(b))
        object.__setattr__(self, "dim", int(self.dim))
        if self.structure is not None and self.structure.total_dim != self.dim:
            raise StructuralError(f"projector dim {self.dim} does not fit {self.structure.factor_dims}")

    @classmethod
    def from_vectors(cls, vectors, dim=None, tol=CONSTRUCT_TOL, structure=None):
        """Projector onto the span of `vectors` (rank-revealing SVD)"""
        if structure is None and len(vectors):
            structure = getattr(vectors[0], "structure", None)
        cols = [np.asarray(getattr(v, "amplitudes", v), dtype=complex) for v in vectors]
        if not cols:
            if dim is None:
                raise StructuralError("dimension needed for an empty span")
            return cls.zero(dim, structure)
        mat = np.column_stack(cols)
        u, s, _ = np.linalg.svd(mat, full_matrices=False)
        rank = int(np.sum(s > tol))
        if rank == 0:
            return cls.zero(mat.shape[0], structure)
        basis = np.column_stack([phase_fix(u[:, i]) for i in range(rank)])
        return cls(basis, mat.shape[0], structure)

    @classmethod
    def ray(cls, vector):
        vec = np.asarray(getattr(vector, "amplitudes", vector), dtype=complex)
        norm = np.linalg.norm(vec)
        if norm <= CONSTRUCT_TOL:
            raise StructuralError("a ray needs a nonzero vector")
        return cls(
            phase_fix(vec / norm).reshape(-1, 1), vec.size, getattr(vector, "structure", None)
        )

    @classmethod
    def identity(cls, dim: int):
        return cls(np.eye(dim, dtype=complex), dim)

    @classmethod
    def zero(cls, dim: int, structure=None):
        return cls(np.zeros((dim, 0), dtype=complex), dim, structure)

    @classmethod
    def from_matrix(cls, matrix, tol=VERIFY_TOL):
        m = np.asarray(matrix, dtype=complex)
        if np.linalg.norm(m @ m - m) > tol or np.linalg.norm(m - m.conj().T) > tol:
            raise StructuralError("matrix is not an orthogonal projector")
        w, v = np.linalg.eigh((m + m.conj().T) / 2)
        keep = w > 0.5
        return cls.from_vectors(list(v[:, keep].T), dim=m.shape[0])

    def with_structure(self, structure: HilbertStructure) -> Projector:
        return Projector(self.basis, self.dim, structure)

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        return self.basis @ self.basis.conj().T

    def complement(self) -> Projector:
        if self.rank == 0:
            return Projector.identity(self.dim).with_structure(self.structure)
        if self.rank == self.dim:
            return Projector.zero(self.dim, self.structure)
        return Projector.from_vectors(
            list(sla.null_space(self.basis.conj().T).T), self.dim, structure=self.structure
        )

    def apply(self, vector) -> np.ndarray:
        vec = np.asarray(getattr(vector, "amplitudes", vector), dtype=complex)
        return self.basis @ (self.basis.conj().T @ vec)

    def expectation(self, psi) -> float:
        vec = np.asarray(getattr(psi, "amplitudes", psi), dtype=complex)
        return float(np.linalg.norm(self.basis.conj().T @ vec) ** 2)

    def equals(self, other: Projector, tol=VERIFY_TOL) -> bool:
        return self.rank == other.rank and projector_leq(self, other, tol)


def tensor_product(
    factors: Sequence[StateVector], structure: HilbertStructure = None
) -> StateVector:
    if not factors:
        raise StructuralError("tensor product of no factors")
    for f in factors:
        f.require_normalized()
    dims = tuple(d for f in factors for d in f.structure.factor_dims)
    if structure is not None and structure.factor_dims != dims:
        raise StructuralError(f"factor dims {dims} do not match {structure.factor_dims}")
    amps = functools.reduce(np.kron, [f.amplitudes for f in factors])
    return StateVector(amps, structure or HilbertStructure(dims))


def tensor_operator(factors: Sequence[Operator]) -> Operator:
    dims = tuple(d for f in factors for d in f.structure.factor_dims)
    entries = functools.reduce(np.kron, [f.entries for f in factors])
    return Operator(
        entries, HilbertStructure(dims), hermitian=all(f.hermitian for f in factors)
    )


def partial_trace(
    op_or_state: Union[Operator, StateVector], grain: CoarseGraining, keep: str = LEFT
) -> Operator:
    structure = op_or_state.structure
    grain.validate_for(structure)
    kept, traced = grain.block(keep), grain.other(keep)
    dk, dt = structure.block_dim(kept), structure.block_dim(traced)
    if isinstance(op_or_state, StateVector):
        m = np.transpose(op_or_state.tensor(), kept + traced).reshape(dk, dt)
        rho = m @ m.conj().T
        hermitian = True
    else:
        n = structure.n_factors
        t = op_or_state.entries.reshape(structure.factor_dims * 2)
        axes = list(kept + traced) + [n + i for i in kept + traced]
        rho = np.einsum("ajbj->ab", t.transpose(axes).reshape(dk, dt, dk, dt))
        hermitian = op_or_state.hermitian
    if hermitian:
        rho = (rho + rho.conj().T) / 2
    return Operator(rho, structure.sub(kept), hermitian=hermitian)


def svd(matrix) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """A = U diag(s) V^dagger; returns (U, s, V) with s nonincreasing"""
    a = np.asarray(matrix, dtype=complex)
    if a.ndim != 2:
        raise StructuralError(f"svd needs a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise StructuralError("svd input has non-finite entries")
    u, s, vh = np.linalg.svd(a, full_matrices=False)
    return u, s, vh.conj().T


def _orthonormalize(vectors, tol, skip_dependent):
    kept, dropped = [], []
    for index, v in enumerate(vectors, start=1):
        vec = np.array(getattr(v, "amplitudes", v), dtype=complex)
        scale = np.linalg.norm(vec)
        residual = vec.copy()
        # two passes of classical Gram-Schmidt keep the outputs orthonormal to 1e-15
        for _ in range(2):
            for q in kept:
                residual = residual - np.vdot(q, residual) * q
        rnorm = np.linalg.norm(residual)
        if scale == 0 or rnorm <= tol * scale:
            if not skip_dependent:
                raise DependentVectorError(index, float(rnorm))
            dropped.append(index)
            continue
        kept.append(phase_fix(residual / rnorm))
    return kept, dropped


def _rewrap(outputs, vectors):
    first = vectors[0] if len(vectors) else None
    if isinstance(first, StateVector):
        return [StateVector(q, first.structure) for q in outputs]
    return outputs


def gram_schmidt(vectors: Sequence, tol=CONSTRUCT_TOL) -> List:
    """
    Orthonormalize in order; prefix spans are preserved.
    A vector whose residual is below `tol` relative to its norm raises
    DependentVectorError carrying its 1-based index.
    """
    kept, _ = _orthonormalize(vectors, tol, skip_dependent=False)
    return _rewrap(kept, vectors)


def gram_schmidt_skip(vectors: Sequence, tol=CONSTRUCT_TOL) -> Tuple[List, List[int]]:
    """Like gram_schmidt but drops dependent vectors; returns (kept, dropped 1-based)"""
    kept, dropped = _orthonormalize(vectors, tol, skip_dependent=True)
    if dropped:
        logging.debug(f"gram_schmidt dropped dependent vectors {dropped}")
    return _rewrap(kept, vectors), dropped


def _check_same_dim(p: Projector, q: Projector):
    if p.dim != q.dim:
        raise StructuralError(f"projector dims differ: {p.dim} vs {q.dim}")


def projector_leq(p: Projector, q: Projector, tol=VERIFY_TOL) -> bool:
    """P <= Q, i.e. QP = P"""
    _check_same_dim(p, q)
    if p.rank == 0:
        return True
    qp = q.basis @ (q.basis.conj().T @ p.basis)
    return bool(np.linalg.norm(qp - p.basis) < tol)


def projector_orthogonal(p: Projector, q: Projector, tol=VERIFY_TOL) -> bool:
    _check_same_dim(p, q)
    if p.rank == 0 or q.rank == 0:
        return True
    return bool(np.linalg.norm(q.basis.conj().T @ p.basis) < tol)


def projector_intersection(p: Projector, q: Projector, tol=VERIFY_TOL) -> Projector:
    """Projector onto S ∩ S', the null space of (I-P)+(I-Q)"""
    _check_same_dim(p, q)
    if p.rank == 0 or q.rank == 0:
        return Projector.zero(p.dim)
    m = 2 * np.eye(p.dim) - p.matrix - q.matrix
    w, v = np.linalg.eigh((m + m.conj().T) / 2)
    return Projector.from_vectors(list(v[:, w < tol].T), dim=p.dim)


def projector_span(p: Projector, q: Projector) -> Projector:
    _check_same_dim(p, q)
    cols = list(p.basis.T) + list(q.basis.T)
    return Projector.from_vectors(cols, dim=p.dim)


def _restore_factor_order(matrix: np.ndarray, structure: HilbertStructure, order):
    """Rows of `matrix` are indexed in `order`'s factor order; permute back"""
    dims = [structure.factor_dims[i] for i in order]
    inverse = list(np.argsort(order))
    cols = matrix.shape[1]
    t = matrix.reshape(dims + [cols]).transpose(inverse + [len(order)])
    return t.reshape(structure.total_dim, cols)


def embed_operator(local, structure: HilbertStructure, factors: Sequence[int]) -> Operator:
    """local ⊗ I on the remaining factors, laid out in the structure's factor order"""
    m = np.asarray(getattr(local, "entries", local), dtype=complex)
    factors = tuple(factors)
    rest = tuple(i for i in range(structure.n_factors) if i not in factors)
    if m.shape != (structure.block_dim(factors),) * 2:
        raise StructuralError(
            f"local operator shape {m.shape} does not fit factors {factors}"
        )
    full = np.kron(m, np.eye(structure.block_dim(rest)))
    order = factors + rest
    dims = [structure.factor_dims[i] for i in order]
    n = structure.n_factors
    inverse = list(np.argsort(order))
    t = full.reshape(dims + dims).transpose(inverse + [n + i for i in inverse])
    hermitian = bool(getattr(local, "hermitian", False)) or bool(
        np.max(np.abs(m - m.conj().T), initial=0) <= CONSTRUCT_TOL
    )
    return Operator(t.reshape(structure.total_dim, -1), structure, hermitian=hermitian)


def embed_projector(local: Projector, structure: HilbertStructure, factors) -> Projector:
    factors = tuple(factors)
    rest = tuple(i for i in range(structure.n_factors) if i not in factors)
    if local.dim != structure.block_dim(factors):
        raise StructuralError(f"projector dim {local.dim} does not fit factors {factors}")
    cols = np.kron(local.basis, np.eye(structure.block_dim(rest)))
    return Projector(
        _restore_factor_order(cols, structure, factors + rest), structure.total_dim, structure
    )
