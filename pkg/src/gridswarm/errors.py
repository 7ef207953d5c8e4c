"""Exception hierarchy for gridswarm."""


class GridSwarmError(Exception):
    """Base class for all gridswarm errors."""


class ValidationError(GridSwarmError):
    pass


class TopologyError(ValidationError):
    pass


class CycleDetected(TopologyError):
    pass


class DisconnectedBus(TopologyError):
    pass


class DuplicateLine(TopologyError):
    pass


class NonPositiveResistance(TopologyError):
    pass


class UnknownBus(GridSwarmError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class NotConverged(GridSwarmError):
    """Power flow hit its iteration cap.

    The best-effort solution is attached as ``solution``; ``step`` is filled in
    by the simulation engine when the failure happens inside a run.
    """

    def __init__(self, message, solution=None, step=None):
        super().__init__(message)
        self.solution = solution
        self.step = step


class VoltageCollapse(GridSwarmError):
    pass


class SingularSystem(GridSwarmError):
    pass


class DegenerateAnchor(GridSwarmError):
    pass


class EmptyNeighborhood(GridSwarmError):
    pass


class ParseError(GridSwarmError):
    def __init__(self, message, line=None, column=None, path=None):
        loc = ""
        if path is not None:
            loc += f"{path}:"
        if line is not None:
            loc += f"{line}:{column or 0}: "
        super().__init__(loc + message)
        self.line = line
        self.column = column
        self.path = path
