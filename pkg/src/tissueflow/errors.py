"""Exception hierarchy shared by all modules.

Exceptions carry an ``exit_code`` used by the command-line front end.
"""


class TissueflowError(Exception):
    exit_code = 1


# registry
class RegistryError(TissueflowError):
    pass


class DuplicateTool(RegistryError):
    pass


class InvalidCard(RegistryError):
    pass


class NoCandidates(RegistryError):
    pass


class UnsatisfiedDependency(RegistryError):
    exit_code = 3


class UnknownTool(RegistryError):
    exit_code = 3


# scheduler
class PlanError(TissueflowError):
    exit_code = 3


class InvalidPlan(PlanError):
    exit_code = 2


class CycleDetected(PlanError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("cycle detected: " + " -> ".join(self.cycle))


class MissingInput(PlanError):
    pass


class Stalled(PlanError):
    pass


class NodeExecutionFailed(TissueflowError):
    exit_code = 5

    def __init__(self, node_id, message):
        self.node_id = node_id
        super().__init__(f"{node_id}: {message}")


class PluginProtocolError(TissueflowError):
    exit_code = 5


# memory
class StoreError(TissueflowError):
    exit_code = 4


class StoreUnavailable(StoreError):
    pass


class CorruptManifest(StoreError):
    pass


class LockHeld(StoreError):
    pass


class ReadOnlyStore(StoreError):
    pass


class NameGrammarViolation(StoreError):
    exit_code = 1


class SizeMismatch(StoreError):
    exit_code = 1


class NotFound(TissueflowError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class SelectorOutOfBounds(TissueflowError):
    pass


# measure
class MeasureError(TissueflowError, ValueError):
    pass


class EmptyContour(MeasureError):
    pass


class EmptyMask(MeasureError):
    pass


class EmptyComponent(MeasureError):
    pass


class ShapeMismatch(MeasureError):
    pass


class NoIntersection(MeasureError):
    pass


class DegenerateImageWarning(UserWarning):
    pass


# guidelines
class CriterionError(TissueflowError, ValueError):
    pass


class OverlappingBands(CriterionError):
    pass


class DuplicateVersion(CriterionError):
    pass


class KindMismatch(CriterionError):
    pass


class NegativeInput(CriterionError):
    pass


# evolve
class UnknownTarget(TissueflowError):
    pass


class PoolExhausted(TissueflowError):
    pass


class DegenerateData(TissueflowError, ValueError):
    pass


class DimMismatch(TissueflowError, ValueError):
    pass


class OracleExhausted(TissueflowError):
    pass


# metrics
class MetricsError(TissueflowError, ValueError):
    pass


class EmptyInput(MetricsError):
    pass


class UnknownLabel(MetricsError):
    pass


class SingleClass(MetricsError):
    pass
