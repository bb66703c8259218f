"""Exception hierarchy shared by the solvers, the simulator and the CLI."""


class CensoringError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for this category."""

    exit_code = 1


class ScenarioError(CensoringError, ValueError):
    exit_code = 3


class BudgetExceededError(CensoringError):
    exit_code = 4

    def __init__(self, required, budget):
        self.required = int(required)
        self.budget = int(budget)
        super().__init__(
            f"energy lattice needs {self.required} cells, budget is {self.budget}; "
            f"lower the per-node caps or raise the budget to at least {self.required}"
        )


class ConvergenceError(CensoringError):
    exit_code = 5

    def __init__(self, message, trace=()):
        self.trace = list(trace)
        super().__init__(message)


class DegenerateScenarioError(CensoringError):
    exit_code = 6


class SliceError(CensoringError, ValueError):
    exit_code = 3
