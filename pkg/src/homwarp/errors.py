"""Exception hierarchy shared by every module."""


class HomwarpError(Exception):
    """Base class for all package errors."""


class DegenerateHomography(HomwarpError):
    pass


class SingularMatrix(HomwarpError):
    pass


class PointAtInfinity(HomwarpError):
    pass


class DegenerateConfiguration(HomwarpError):
    pass


class DimensionMismatch(HomwarpError, ValueError):
    pass


class ShapeMismatch(HomwarpError, ValueError):
    pass


class NonFiniteActivation(HomwarpError):
    pass


class StaleCache(HomwarpError):
    """Backward called with a cache whose parameters have since been updated."""


class NonFiniteUpdate(HomwarpError):
    pass


class DivergedTraining(HomwarpError):
    pass


class UnreadableImage(HomwarpError):
    pass


class EmptyCorpus(HomwarpError):
    pass


class ResampleExhausted(HomwarpError):
    pass


class CorruptDataset(HomwarpError):
    pass


class CheckpointError(HomwarpError):
    pass
