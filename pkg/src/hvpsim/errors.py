"""Exception types shared across the solver stack."""


class HvpError(Exception):
    """Base class for all solver errors."""


class CorruptFieldError(HvpError):
    """A field contains non-finite entries."""


class ConfigError(HvpError):
    """Configuration file invalid; carries the full list of violations."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class AssemblyError(HvpError):
    """Operator assembly requested outside the admissible state range."""


class SolverError(HvpError):
    """A linear solve broke down or failed its residual check."""


class CFLViolation(SolverError):
    """Explicit advection step rejected; carries a usable time step."""

    def __init__(self, cfl, suggested_dt):
        self.cfl = cfl
        self.suggested_dt = suggested_dt
        super().__init__(f"CFL number {cfl:.3g} > 0.5; retry with dt <= {suggested_dt:.3g}")


class InvertibilityLost(HvpError):
    """Flow-map gradient no longer safely invertible.

    Carries the offending node (grid index pair) and time when known.
    """

    def __init__(self, message, node=None, time=None):
        self.node = node
        self.time = time
        super().__init__(message)


class BlowupSignal(HvpError):
    """The iterate left the admissible region (h > kappa, a in (0,1))."""

    def __init__(self, message, time=None, report=None):
        self.time = time
        self.report = report
        super().__init__(message)


class NoConvergence(HvpError):
    """Fixed-point loop exhausted its iteration budget."""

    def __init__(self, message, deltas=None, ratios=None):
        self.deltas = list(deltas) if deltas is not None else []
        self.ratios = list(ratios) if ratios is not None else []
        super().__init__(message)
