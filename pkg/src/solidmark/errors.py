"""Exception hierarchy shared by every solidmark module."""


class SolidMarkError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(SolidMarkError, ValueError):
    pass


class DimensionError(SolidMarkError, ValueError):
    pass


class IntegrityError(SolidMarkError):
    """Dataset/keymap consistency violated (duplicate ids, missing keys)."""


class DatasetLookupError(SolidMarkError, KeyError):
    def __str__(self) -> str:  # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ManifestParseError(SolidMarkError):
    def __init__(self, path, line_no, record, reason):
        self.path = path
        self.line_no = line_no
        self.record = record
        super().__init__(f"{path}:{line_no}: {reason}: {record!r}")


class KeymapAbsentError(SolidMarkError, FileNotFoundError):
    pass


class InputError(SolidMarkError, ValueError):
    pass


class DomainError(SolidMarkError, ValueError):
    pass


class DegenerateInputError(SolidMarkError, ValueError):
    """Modified l2 denominator vanished (generation duplicates >= n training images)."""


class TrainingError(SolidMarkError, RuntimeError):
    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message if step is None else f"step {step}: {message}")


class ModelError(SolidMarkError, RuntimeError):
    pass


class EmbedderError(SolidMarkError, ValueError):
    pass
