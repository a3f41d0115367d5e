"""Exception hierarchy shared by all modules."""


class OneStepError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(OneStepError, ValueError):
    pass


class NonFiniteInput(OneStepError, ValueError):
    pass


class DomainError(OneStepError, ValueError):
    pass


class NotDefinite(OneStepError, ArithmeticError):
    """Symmetric factorization failed even after the ridge ladder."""


class EmptyShard(OneStepError, ValueError):
    pass


class Diverged(OneStepError, ArithmeticError):
    """Line search exhausted while the gradient was still large."""


class AllMachinesFailed(OneStepError):
    def __init__(self, round_=None):
        self.round = round_
        where = f" in round {round_}" if round_ is not None else ""
        super().__init__(f"no machine delivered its contribution{where}")


class TransportError(OneStepError):
    def __init__(self, machine_id, message):
        self.machine_id = machine_id
        super().__init__(f"machine {machine_id}: {message}")


class FrameTooLarge(OneStepError, ValueError):
    pass


class VersionMismatch(OneStepError, ValueError):
    pass


class MalformedFrame(OneStepError, ValueError):
    pass


class IndivisibleSplit(OneStepError, ValueError):
    pass


class MalformedRow(OneStepError, ValueError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


class EmptyInput(OneStepError, ValueError):
    pass
