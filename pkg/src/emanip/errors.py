"""Exception types shared across the library."""


class EmanipError(Exception):
    """Base class for library errors."""


class SingularHessian(EmanipError):
    """State Hessian determinant fell below the obstacle threshold."""


class NotConverged(EmanipError):
    """Iterative solve stopped before meeting its tolerance."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class BelowContactThreshold(EmanipError):
    """Measured force too small for wrench-axis analysis."""


class NoFeasibleHypothesis(EmanipError):
    """Pose hypothesis sampling rejected every candidate."""


class StepRejected(EmanipError):
    """Damped least-squares step rejected after all retries."""


class ObstacleHit(EmanipError):
    """Rollout entered a haptic obstacle region."""


class AllInfeasible(EmanipError):
    """Every planner rollout was infeasible."""


class IncompatibleGeometry(EmanipError):
    """Estimated object cannot be engaged by the tool."""


class TrialTimeout(EmanipError):
    """Closed-loop trial exceeded its simulated-time budget."""


class ConfigError(EmanipError):
    """Scenario file is malformed or inconsistent."""
