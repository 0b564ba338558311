"""Exception hierarchy shared by every module.

Each error carries a human readable ``detail`` and the process ``exit_code`` the
CLI returns when it escapes a command.
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ALIGNMENT = 3
EXIT_COMPUTE = 4


class WorkbenchError(Exception):
    exit_code: int = EXIT_COMPUTE

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


# Configuration / input family
class ConfigError(WorkbenchError):
    exit_code = EXIT_CONFIG

class UsageError(ConfigError):
    pass

class TemplateError(ConfigError):
    pass

class TemplateVocabError(TemplateError):
    pass

class CapacityError(ConfigError):
    pass

class WeightLoadError(ConfigError):
    pass

class WeightFormatError(WeightLoadError):
    pass

class VocabError(ConfigError):
    pass

class ContextLengthError(ConfigError):
    pass


# Alignment family
class AlignmentError(WorkbenchError):
    exit_code = EXIT_ALIGNMENT

class PathOrderError(AlignmentError):
    pass


# Compute family
class ComputeError(WorkbenchError):
    exit_code = EXIT_COMPUTE

class TensorShapeError(ComputeError):
    pass

class MaskedRowError(ComputeError):
    pass

class WeightShapeError(ComputeError):
    pass

class HookOverrideError(ComputeError):
    pass

class BaselineError(ComputeError):
    pass

class HeadRangeError(ComputeError):
    pass
