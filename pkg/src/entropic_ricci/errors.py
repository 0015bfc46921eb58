"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented exit statuses without a lookup table.
"""

from __future__ import annotations


class RicciError(Exception):
    exit_code = 5


class ParseError(RicciError):
    exit_code = 2


class ModelDomainError(RicciError):
    """Invalid model parameters or a chain violating a structural hypothesis."""

    exit_code = 3


class InvalidRate(ModelDomainError):
    pass


class BadRates(ModelDomainError):
    pass


class BadParticleCount(ModelDomainError):
    pass


class NotIrreducible(ModelDomainError):
    pass


class NotReversible(ModelDomainError):
    pass


class GeneratorMismatch(ModelDomainError):
    pass


class BadInverse(ModelDomainError):
    pass


class ReversibilityIdentityFailed(ModelDomainError):
    def __init__(self, message: str, residual: float = float("nan"), witness=None):
        super().__init__(message)
        self.residual = residual
        self.witness = witness


class NoKernelAvailable(ModelDomainError):
    pass


class KernelNotVerified(ModelDomainError):
    pass


class AsymmetricAlpha(ModelDomainError):
    pass


class TooLarge(RicciError):
    exit_code = 4


class NumericalError(RicciError):
    exit_code = 5


class DimensionMismatch(NumericalError):
    pass


class NegativeInput(ModelDomainError):
    pass


class NonpositiveInput(ModelDomainError):
    pass


class BoundaryDensity(NumericalError):
    pass


class SingularSystem(NumericalError):
    pass


class LeftInterior(NumericalError):
    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial if partial is not None else []


class BlowUp(LeftInterior):
    pass


class NonConvergence(NumericalError):
    pass


class NegativeTime(ModelDomainError):
    pass


class DegenerateForm(NumericalError):
    pass


class NonpositiveKappa(ModelDomainError):
    pass
