"""Shared exception types with CLI exit codes attached."""


class CsForgeError(Exception):
    exit_code = 1


class ConfigurationError(CsForgeError):
    exit_code = 2


class MissingArtifactError(CsForgeError):
    exit_code = 3


class NumericError(CsForgeError):
    exit_code = 4


class VocabularyError(CsForgeError):
    pass


class SynthesisError(CsForgeError):
    pass


class BudgetError(CsForgeError):
    """Concatenation would exceed the frame budget; caller should resample."""


class PreconditionError(CsForgeError):
    pass


class UndefinedMetricError(CsForgeError):
    pass
