"""Exception hierarchy shared by every module."""


class RoverscapeError(Exception):
    """Base class for all errors raised by this package."""


class NonPositiveDepth(RoverscapeError):
    pass


class DegenerateModel(RoverscapeError):
    pass


class NonOrthogonal(RoverscapeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class NoConvergence(RoverscapeError):
    pass


class InvalidPose(RoverscapeError):
    pass


class NotThreeChannel(RoverscapeError):
    pass


class DecodeError(RoverscapeError):
    pass


class TooSmall(RoverscapeError):
    pass


class TooFewPoints(RoverscapeError):
    pass


class DegenerateConfiguration(RoverscapeError):
    pass


class DegenerateSamples(RoverscapeError):
    pass


class EmptyCloud(RoverscapeError):
    pass


class UnknownKind(RoverscapeError):
    pass


class BadParams(RoverscapeError):
    pass


class OutOfRange(RoverscapeError):
    pass


class SingularSystem(RoverscapeError):
    pass


class BehindCamera(RoverscapeError):
    pass


class ShapeMismatch(RoverscapeError):
    pass


class NoOverlap(RoverscapeError):
    pass


class NoVisibleTerrain(RoverscapeError):
    pass


class BadSpec(RoverscapeError):
    pass


class MissingInput(RoverscapeError):
    def __init__(self, path):
        super().__init__(f"missing input: {path}")
        self.path = str(path)


class LayoutError(RoverscapeError):
    def __init__(self, missing):
        super().__init__(f"sequence layout incomplete, first missing artifact: {missing}")
        self.missing = str(missing)


class FormatError(RoverscapeError):
    pass
