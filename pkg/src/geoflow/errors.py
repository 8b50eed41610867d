"""Exception hierarchy shared by all geoflow modules."""


class GeoflowError(Exception):
    """Base class for every error raised by this package."""


# graph
class IndexOutOfRange(GeoflowError, IndexError):
    pass


class NonPositiveWeight(GeoflowError, ValueError):
    pass


class ConflictingDuplicateEdge(GeoflowError, ValueError):
    pass


class SelfLoop(GeoflowError, ValueError):
    pass


class EmptySourceSet(GeoflowError, ValueError):
    pass


class EmptyLabeledSet(GeoflowError, ValueError):
    pass


# flow
class NonPositiveDensity(GeoflowError, ValueError):
    pass


class NonFiniteLoss(GeoflowError, ValueError):
    pass


class StepShrinkExhausted(GeoflowError, ArithmeticError):
    """The Euler step could not keep the density above the floor."""


class ZeroBeta(GeoflowError, ValueError):
    pass


# model / trainer
class DimensionMismatch(GeoflowError, ValueError):
    pass


class NoLabeledNodes(GeoflowError, ValueError):
    pass


class EmptyMask(GeoflowError, ValueError):
    pass


class EmptyGroup(GeoflowError, ValueError):
    pass


class ConfigInvalid(GeoflowError, ValueError):
    pass


# data
class DegenerateConfig(GeoflowError, ValueError):
    pass


class InsufficientSamples(GeoflowError, ValueError):
    pass


class ParseError(GeoflowError, ValueError):
    def __init__(self, path, line, column, message):
        self.path = str(path)
        self.line = line
        self.column = column
        super().__init__(f"{self.path}:{line}:{column}: {message}")


class SchemaMismatch(GeoflowError, ValueError):
    pass


# oracle
class NonConvergence(GeoflowError, ArithmeticError):
    pass


class DisconnectedGraph(GeoflowError, ValueError):
    pass
