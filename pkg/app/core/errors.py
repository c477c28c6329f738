from typing import Optional, Sequence


class ReflowLabError(Exception):
    """Base class for every error raised by the toolkit"""


class ContractError(ReflowLabError):
    """A caller broke an operation's preconditions"""


class ShapeMismatchError(ContractError):
    def __init__(self, op: str, left: Sequence[int], right: Sequence[int], detail: str = ""):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        message = f"{op}: incompatible shapes {self.left} and {self.right}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class DomainError(ReflowLabError):
    """Argument lies outside the domain of the operation"""


class NumericFaultError(ReflowLabError):
    """An operation produced NaN or Inf"""


class ConfigError(ReflowLabError):
    """Invalid configuration or distribution parameters"""


class SingularityError(ReflowLabError):
    """Closed-form expression evaluated at a singular point"""


class IntegrationError(ReflowLabError):
    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class BudgetExceededError(IntegrationError):
    """Solver needed more vector-field evaluations than allowed"""


class StiffnessError(IntegrationError):
    """Adaptive step size collapsed below the minimum"""


class FingerprintMismatchError(ReflowLabError):
    def __init__(self, expected: str, found: str):
        self.expected = expected
        self.found = found
        super().__init__(f"model fingerprint mismatch: expected {expected[:16]}, found {found[:16]}")


class MissingPrerequisiteError(ReflowLabError):
    def __init__(self, artifact: str, hint: str = ""):
        self.artifact = artifact
        message = f"missing prerequisite artifact: {artifact}"
        if hint:
            message = f"{message} ({hint})"
        super().__init__(message)


class DivergenceError(ReflowLabError):
    def __init__(self, stage: str, iteration: int, last_checkpoint: Optional[str] = None):
        self.stage = stage
        self.iteration = iteration
        self.last_checkpoint = last_checkpoint
        message = f"{stage} diverged at iteration {iteration}"
        if last_checkpoint:
            message = f"{message}; last checkpoint: {last_checkpoint}"
        super().__init__(message)


class StageFailureError(ReflowLabError):
    """A pipeline stage finished but violated its quality gate"""
