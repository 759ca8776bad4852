from typing import Iterable, Optional


class OuPhyloError(Exception):
    """Base class for every error raised by the package."""


class InputError(OuPhyloError):
    """Bad user input: malformed trees, data or configuration."""


class NewickSyntaxError(InputError):
    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class TreeValidationError(InputError):
    pass


class MissingTipError(InputError, KeyError):
    def __init__(self, label: str) -> None:
        super().__init__(f"No value given for tip '{label}'")
        self.label = label

    def __str__(self) -> str:
        return str(self.args[0])


class ConfigError(InputError):
    def __init__(self, problems: Iterable[str]) -> None:
        self.problems = list(problems)
        fields = ", ".join(problem.split(":")[0] for problem in self.problems)
        super().__init__(
            f"Invalid configuration ({fields}): " + "; ".join(self.problems)
        )


class ModelError(OuPhyloError):
    """Parameters outside the domain where the model is defined."""


class NumericalError(OuPhyloError):
    """A computation failed for numerical reasons."""


class SingularModelError(NumericalError):
    def __init__(self, message: str, minor: Optional[int] = None) -> None:
        if minor is not None:
            message = f"{message} (leading minor of order {minor} is not positive)"
        super().__init__(message)
        self.minor = minor


class DegenerateFitError(NumericalError):
    pass


class InconsistentInputsError(NumericalError):
    pass


class SubsampleError(NumericalError):
    pass


class UnmatchedPairError(NumericalError):
    pass
