class ModalSimError(Exception):
    """Base class of every error raised by modalsim"""


class StructuralError(ModalSimError):
    """Dimension mismatch, non-finite data, or a broken Hermitian/unitary contract"""


class DependentVectorError(StructuralError):
    def __init__(self, index: int, residual: float):
        # NOTE index is 1-based, the position the caller has to drop
        self.index = index
        self.residual = residual
        super().__init__(
            f"vector {index} is linearly dependent on its predecessors "
            f"(residual={residual:.3e})"
        )


class IncompleteBasisError(ModalSimError):
    def __init__(self, deficit: float):
        self.deficit = deficit
        super().__init__(f"path probabilities miss {deficit:.3e} of the total weight")


class UnresolvedMinimization(ModalSimError):
    """No certified minimum; `candidate` is the best DecompositionResult found"""

    def __init__(self, message: str, candidate=None):
        self.candidate = candidate
        super().__init__(message)


class RateInconsistencyError(ModalSimError):
    def __init__(self, k: int, j: int, value: float, message: str = None):
        # NOTE k, j are 0-based, messages use 1-based path numbers
        self.k = k
        self.j = j
        self.value = value
        super().__init__(
            message
            or f"current {value:.3e} out of unoccupied path {j + 1} into path {k + 1}"
        )


class StepSizeError(ModalSimError):
    def __init__(self, exit_probability: float, suggested_dt: float):
        self.exit_probability = exit_probability
        self.suggested_dt = suggested_dt
        super().__init__(
            f"step leaves the occupied path with probability {exit_probability:.4f} "
            f">= 0.1, retry with dt <= {suggested_dt:.3e}"
        )


class ModelInconsistencyError(ModalSimError):
    """Measurement model maps are not isometric"""


class ConfigurationError(ModalSimError):
    """Invalid scenario file, CLI flag or environment setting"""


class OntologyMismatchError(ModalSimError):
    def __init__(self, identical: bool):
        self.identical = identical
        super().__init__(
            f"sampled determinate projectors disagree with the closed form (identical={identical})"
        )
