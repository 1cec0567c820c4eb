"""Exception hierarchy shared by every ToneRank module.

Each class carries the exit code the CLI returns when it escapes a command:
1 = validation/config, 2 = runtime/numeric, 3 = external tool.
"""


class ToneRankError(Exception):
    exit_code = 2


# --- exit code 1 ---

class ValidationError(ToneRankError, ValueError):
    exit_code = 1


class ConfigError(ValidationError):
    pass


class PreconditionError(ValidationError):
    pass


class AudioIOError(ValidationError, OSError):
    """Audio file could not be read or written."""

    def __init__(self, path, reason: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {reason}")


class CoverageError(ValidationError):
    """Listening-test rows without a matching prediction."""

    def __init__(self, missing: list):
        self.missing = list(missing)
        preview = ", ".join(str(m) for m in self.missing[:20])
        more = f" (+{len(self.missing) - 20} more)" if len(self.missing) > 20 else ""
        super().__init__(f"{len(self.missing)} rows have no prediction: {preview}{more}")


# --- exit code 2 ---

class NumericError(ToneRankError, ArithmeticError):
    pass


class FitError(ToneRankError):
    pass


class SamplingError(ToneRankError):
    pass


class AlignmentError(ToneRankError):
    pass


class TrainingError(ToneRankError):
    pass


class CheckpointError(ToneRankError):
    pass


class UndefinedCorrelationError(ToneRankError):
    pass


# --- exit code 3 ---

class ExternalToolError(ToneRankError):
    exit_code = 3

    def __init__(self, message: str, command=None, diagnostics: str = ""):
        self.command = command
        self.diagnostics = diagnostics
        text = message
        if command:
            text += f"\n  command: {' '.join(str(c) for c in command)}"
        if diagnostics:
            text += f"\n  output: {diagnostics.strip()[-2000:]}"
        super().__init__(text)


class TranscoderError(ExternalToolError):
    pass


class LabelingError(ExternalToolError):
    pass


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ToneRankError):
        return exc.exit_code
    return 2
