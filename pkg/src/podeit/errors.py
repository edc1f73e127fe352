"""Exception hierarchy. CLI exit codes: 2 for user/config errors, 3 for
numerical failures."""


class PodEitError(Exception):
    exit_code = 3


class UserError(PodEitError):
    exit_code = 2


class GeometryInfeasible(UserError):
    pass


class GenerationFailed(PodEitError):
    pass


class DimensionMismatch(UserError):
    pass


class NonpositiveConductivity(PodEitError):
    pass


class NonpositiveImpedance(UserError):
    pass


class SingularSystem(PodEitError):
    pass


class FactorizationFailed(PodEitError):
    pass


class EigensolveFailed(PodEitError):
    pass


class DegenerateEnsemble(PodEitError):
    pass


class AsymmetricConfiguration(UserError):
    pass


class IndefiniteReducedSystem(PodEitError):
    """Reduced coefficients drove the effective conductivity negative."""


class EnsembleTooSmall(UserError):
    pass


class ModelMismatch(UserError):
    pass


class Diverged(PodEitError):
    pass


class NotConverged(PodEitError):
    pass


class PhantomOutsideDomain(UserError):
    pass


class MissingArtifact(UserError):
    pass


class CacheConflict(UserError):
    pass
