from __future__ import annotations

from typing import Iterable, List, Tuple


class VplineError(Exception):
    """Base class for every error raised by the toolkit."""


class GeometryError(VplineError, ValueError):
    pass


class DegenerateInput(GeometryError):
    pass


class DegenerateTriangulation(GeometryError):
    pass


class LineAtInfinity(GeometryError):
    pass


class MeasurementError(VplineError, ValueError):
    pass


class DegenerateLine(MeasurementError):
    """Re-projected line has no finite image (l1 = l2 = 0)."""


class VpAtInfinity(MeasurementError):
    """Projected direction is parallel to the image plane."""


class DegenerateHypothesis(MeasurementError):
    pass


class IllConditioned(MeasurementError):
    pass


class EstimatorError(VplineError, RuntimeError):
    pass


class TrackTooShort(EstimatorError):
    pass


class InconsistentIds(EstimatorError):
    pass


class SingularNormalEquations(EstimatorError):
    def __init__(self, message: str, *, variables: Iterable[Tuple[str, int]] = ()) -> None:
        self.variables: List[Tuple[str, int]] = list(variables)
        if self.variables:
            ids = ", ".join(f"{kind}:{key}" for kind, key in self.variables)
            message = f"{message} (rank-deficient variables: {ids})"
        super().__init__(message)


class DataError(VplineError, ValueError):
    pass


class VersionError(DataError):
    pass


class DatasetIoError(DataError):
    pass


class ConfigError(VplineError, ValueError):
    pass
