"""Exception types raised across the package."""


class OOSError(Exception):
    """Base class for all errors raised by oosdetect."""


class CaseError(OOSError, ValueError):
    """Malformed or inconsistent network case."""


class UnknownBus(CaseError):
    pass


class IslandedGenerator(CaseError):
    """A generator sits on an island not connected to the rest of the grid."""


class PowerFlowDiverged(OOSError):
    def __init__(self, iterations: int, mismatch: float):
        super().__init__(
            f"power flow did not converge after {iterations} iterations "
            f"(max mismatch {mismatch:.3e} pu)"
        )
        self.iterations = iterations
        self.mismatch = mismatch


class NoPostFaultSEP(OOSError):
    """The post-fault network has no stable equilibrium reachable from the pre-fault point."""


class SingularReduction(OOSError):
    pass


class NotASeparator(OOSError, ValueError):
    """A cutset does not split the generators into the requested groups."""


class NetworkSolveDiverged(OOSError):
    def __init__(self, buses, iterations: int):
        super().__init__(
            f"algebraic network solve failed after {iterations} iterations; "
            f"offending buses: {sorted(buses)}"
        )
        self.buses = tuple(sorted(buses))
        self.iterations = iterations


class RotorRunaway(OOSError):
    """Raised internally when rotor angles exceed the runaway guard."""


class NoBaseline(OOSError):
    pass


class InsufficientSwing(OOSError):
    """Series never reaches the extremum needed for a phase estimate."""


class PartitionMismatch(OOSError, ValueError):
    pass


class InvalidCompensation(OOSError):
    pass
