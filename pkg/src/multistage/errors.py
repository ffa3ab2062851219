"""Exception hierarchy shared by every module."""


class MultistageError(Exception):
    """Base class for all errors raised by this package."""


class JobSpecError(MultistageError, ValueError):
    """A stage graph or size distribution violates a structural rule."""


class CyclicGraph(JobSpecError):
    pass


class UnreachableFinal(JobSpecError):
    pass


class ProbabilityMismatch(JobSpecError):
    pass


class NonpositiveSize(JobSpecError):
    pass


class DuplicateStage(JobSpecError):
    pass


class AgeBeyondSupport(MultistageError, ValueError):
    """Conditioning age is at or past the largest support point."""


class BudgetExceeded(MultistageError):
    """Total-size enumeration would exceed the configured outcome budget."""


class NegativeReward(MultistageError, ValueError):
    pass


class DegenerateJob(MultistageError, ValueError):
    """The job completes instantly, so its index is undefined."""


class Unstable(MultistageError, ValueError):
    """Load is too close to (or above) one for the requested evaluation."""


class QuadratureBudgetExceeded(MultistageError):
    pass


class ParseError(MultistageError, ValueError):
    pass
