"""
Property ascription from a preferred projector.

An ontology is never enumerated: a projector R is determinate iff R >= P
(value 1) or R ⊥ P (value 0), where P is the preferred projector.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from modalsim.exceptions import OntologyMismatchError, StructuralError
from modalsim.linalg import (
    VERIFY_TOL,
    CoarseGraining,
    HilbertStructure,
    Operator,
    Projector,
    StateVector,
    embed_operator,
    partial_trace,
    projector_intersection,
    projector_leq,
    projector_orthogonal,
    projector_span,
)
from modalsim.utils import random_state

SUPPORT_CUTOFF = 1e-10


@dataclass(frozen=True)
class ValueReport:
    determinate: bool
    value: Optional[float] = None

    def __post_init__(self):
        if self.determinate != (self.value is not None):
            raise StructuralError("a value is reported iff the variable is determinate")

    def to_dict(self):
        return {"determinate": self.determinate, "value": self.value}


INDETERMINATE = ValueReport(False)


@dataclass(frozen=True, eq=False)
class PropertyAscription:
    preferred: Projector
    ambient: HilbertStructure

    def __post_init__(self):
        if self.preferred.rank < 1:
            raise StructuralError("preferred projector must have rank >= 1")
        if self.preferred.dim != self.ambient.total_dim:
            raise StructuralError("preferred projector does not fit the ambient space")
        if self.preferred.structure is None:
            object.__setattr__(self, "preferred", self.preferred.with_structure(self.ambient))

    @classmethod
    def from_state(cls, phi: StateVector) -> PropertyAscription:
        """Ascription fixed by a property state vector: rank-1 preferred projector"""
        return cls(Projector.ray(phi), phi.structure)

    @property
    def dim(self) -> int:
        return self.ambient.total_dim

    def is_determinate(self, r: Projector) -> bool:
        return projector_status(r, self).determinate


def _require_same_ambient(r: Projector, a: PropertyAscription):
    if r.dim != a.dim:
        raise StructuralError(f"projector dim {r.dim} != ambient dim {a.dim}")


def projector_status(r: Projector, a: PropertyAscription) -> ValueReport:
    _require_same_ambient(r, a)
    if projector_leq(a.preferred, r):
        return ValueReport(True, 1.0)
    if projector_orthogonal(a.preferred, r):
        return ValueReport(True, 0.0)
    return INDETERMINATE


def variable_status(v: Operator, a: PropertyAscription, tol=VERIFY_TOL) -> ValueReport:
    """Determinate iff V P = lambda P; the value is lambda = Tr(V P) / rank"""
    v.require_hermitian()
    if v.dim != a.dim:
        raise StructuralError(f"variable dim {v.dim} != ambient dim {a.dim}")
    basis = a.preferred.basis
    vb = v.entries @ basis
    lam = float(np.real(np.trace(basis.conj().T @ vb))) / a.preferred.rank
    if np.linalg.norm(vb - lam * basis) < tol:
        return ValueReport(True, lam)
    return INDETERMINATE


def subsystem_variable_status(
    v_local, factors: Sequence[int], a: PropertyAscription
) -> ValueReport:
    """Reductionist rule: a subsystem variable V is judged as V ⊗ I"""
    return variable_status(embed_operator(v_local, a.ambient, factors), a)


def subsystem_preferred_projector(p_ab: Projector, grain: CoarseGraining, keep: str) -> Projector:
    """Smallest P_A with P_A ⊗ I >= P_AB: the support of the partial trace"""
    structure = p_ab.structure
    if structure is None:
        raise StructuralError("composite projector carries no factor structure")
    mixed = Operator(p_ab.matrix, structure, hermitian=True)
    rho = partial_trace(mixed, grain, keep)
    w, vecs = np.linalg.eigh(rho.entries)
    return Projector.from_vectors(
        list(vecs[:, w > SUPPORT_CUTOFF].T), dim=rho.dim, structure=rho.structure
    )


def mutually_exclusive(a1: PropertyAscription, a2: PropertyAscription) -> bool:
    if a1.dim != a2.dim:
        raise StructuralError("ascriptions live on different spaces")
    return projector_intersection(a1.preferred, a2.preferred).rank == 0


def ontologies_identical_closed_form(a1: PropertyAscription, a2: PropertyAscription) -> bool:
    p, q = a1.preferred, a2.preferred
    if p.equals(q):
        return True
    return a1.dim == 2 and p.rank == q.rank == 1 and projector_orthogonal(p, q)


def sample_determinate(a: PropertyAscription, rng) -> Projector:
    """Random R with R >= P or R ⊥ P, avoiding the trivial 0 and I when possible"""
    p = a.preferred
    complement = p.complement()
    if complement.rank == 0:
        return p
    extra = int(rng.integers(0, complement.rank))
    inside = [complement.basis @ random_state(complement.rank, rng) for _ in range(extra)]
    if rng.random() < 0.5:
        return Projector.from_vectors(list(p.basis.T) + inside, dim=a.dim)
    rank = int(rng.integers(1, complement.rank + 1))
    cols = [complement.basis @ random_state(complement.rank, rng) for _ in range(rank)]
    return Projector.from_vectors(cols, dim=a.dim)


def ontologies_identical(
    a1: PropertyAscription, a2: PropertyAscription, samples: int = 32, rng=None
) -> bool:
    """
    Closed form: equal preferred projectors, or orthogonal rank-1 preferred
    projectors in dimension 2. Random determinate projectors of each
    ontology are checked against the other to cross-validate.
    """
    if a1.dim != a2.dim:
        raise StructuralError("ascriptions live on different spaces")
    rng = rng or np.random.default_rng(0)
    identical = ontologies_identical_closed_form(a1, a2)
    differ = False
    for i in range(samples):
        own, other = (a1, a2) if i % 2 == 0 else (a2, a1)
        r = sample_determinate(own, rng)
        if not other.is_determinate(r):
            differ = True
            break
    if samples >= 2 and identical == differ:
        raise OntologyMismatchError(identical)
    return identical


def functional_relations_hold(p: Projector, q: Projector, a: PropertyAscription) -> bool:
    """[P ∨ Q] = [P]+[Q]-[P][Q], [P ∧ Q] = [P][Q], [P^⊥] = 1-[P] for a determinate pair"""
    vp, vq = projector_status(p, a), projector_status(q, a)
    if not (vp.determinate and vq.determinate):
        raise StructuralError("functional relations are stated for determinate projectors")
    span = projector_status(projector_span(p, q), a)
    meet = projector_status(projector_intersection(p, q), a)
    comp = projector_status(p.complement(), a)
    if not (span.determinate and meet.determinate and comp.determinate):
        return False
    return (
        span.value == vp.value + vq.value - vp.value * vq.value
        and meet.value == vp.value * vq.value
        and comp.value == 1 - vp.value
    )


@dataclass
class ContradictionChain:
    steps: List[str] = field(default_factory=list)
    contradiction: bool = False


def common_ontology_contradiction(p: Projector, q: Projector) -> ContradictionChain:
    """
    Assume mutually exclusive preferred projectors P, Q share one ontology
    and [P] = 1, then follow closure and the functional relations.
    """
    chain = ContradictionChain()
    if projector_intersection(p, q).rank != 0:
        chain.steps.append("P ∧ Q is not null: the ascriptions are not mutually exclusive")
        return chain
    if projector_orthogonal(p, q):
        chain.steps.append("P ⊥ Q: both fit one ontology with [Q] = 0, no contradiction")
        return chain
    chain.steps.append("[P] = 1 and Q is determinate (common ontology)")
    q_perp = q.complement()
    chain.steps.append("closure: Q^⊥ is determinate")
    meet = projector_intersection(q_perp, p)
    chain.steps.append(f"closure: Q^⊥ ∧ P is determinate, rank {meet.rank}")
    if 0 < meet.rank < p.rank:
        chain.steps.append("Q^⊥ ∧ P is a non-null proper subspace of P, which cannot be determinate")
        chain.contradiction = True
        return chain
    if meet.rank == p.rank:
        chain.steps.append("Q^⊥ ∧ P = P would make P ⊥ Q")
        chain.contradiction = True
        return chain
    chain.steps.append("Q^⊥ ∧ P is null, so [Q^⊥][P] = 0 and [Q^⊥] = 0")
    chain.steps.append("[Q] = 1 - [Q^⊥] = 1")
    chain.steps.append("P ∧ Q is null, so [P][Q] = 0, but [P][Q] = 1")
    chain.contradiction = True
    logging.debug(" -> ".join(chain.steps))
    return chain
