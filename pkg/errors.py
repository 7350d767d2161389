"""
Exception types shared across the channel estimation toolkit
"""
from typing import Optional


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)"""


class NumericalError(ArithmeticError):
    """NaN/Inf produced by a computation or a diverging training run (CLI exit code 3)"""


class IllConditionedError(NumericalError):
    """Linear system too ill-conditioned to trust its solution"""

    def __init__(self, message: str, condition_number: float):
        super().__init__(f"{message} (condition number {condition_number:.3e})")
        self.condition_number = condition_number


class StageError(RuntimeError):
    """Failure inside one pipeline stage; the cause stays chained"""

    def __init__(self, stage: str, cause: Optional[BaseException] = None):
        detail = f": {cause}" if cause is not None else ""
        super().__init__(f"[{stage}] stage failed{detail}")
        self.stage = stage
        self.cause = cause


class DoaBranchError(ValueError):
    """No aliasing branch of a spatial frequency maps into the DoA prior"""

    def __init__(self, mu: float, candidates):
        self.mu = mu
        self.candidates = list(candidates)
        shown = ", ".join(f"{c:.6f}" for c in self.candidates)
        super().__init__(f"spatial frequency {mu:.6f} has no DoA branch inside the prior (cos candidates: {shown})")
