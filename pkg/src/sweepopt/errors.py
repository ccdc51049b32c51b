"""Exception hierarchy shared by all modules."""


class SweepError(Exception):
    """Base class for toolkit errors."""


class EmptySample(SweepError):
    pass


class OutsideProxRadius(SweepError):
    pass


class UnknownInstance(SweepError):
    pass


class NoClosedForm(SweepError):
    pass


class GammaTooSmall(SweepError):
    pass


class NonFinite(SweepError):
    pass


class BlowUp(SweepError):
    """Step-size control failed or the state became non-finite."""


class LeftC(SweepError):
    """The trajectory left the constraint set beyond the boundary band."""


class ZeroGradientOnBoundary(SweepError):
    pass


class GridMismatch(SweepError):
    pass


class EmptyIntersection(SweepError):
    pass


class GInfinite(SweepError):
    """Endpoint cost evaluated outside its effective domain."""


class Stalled(SweepError):
    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class NegativeLambda(SweepError):
    pass


class UnmatchedAtom(SweepError):
    pass


class EndpointInfeasible(SweepError):
    pass


class UnsupportedSetKind(SweepError):
    pass
