"""Exception types shared across the pipeline.

The CLI maps these onto process exit codes, so keep the hierarchy flat.
"""


class DollError(Exception):
    exit_code = 1


class ConfigError(DollError, ValueError):
    """Invalid configuration value; ``field`` names the offending key."""

    exit_code = 2

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class PlacementError(DollError, ValueError):
    exit_code = 2


class MissingArtifactError(DollError, FileNotFoundError):
    exit_code = 3

    def __init__(self, path, what="artifact"):
        super().__init__(f"missing {what}: {path}")
        self.path = str(path)


class NumericError(DollError, ArithmeticError):
    exit_code = 4


class DivergenceError(NumericError):
    def __init__(self, epoch, lr, value):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch} (lr={lr})")
        self.epoch = epoch
        self.lr = lr


class FormatError(DollError, ValueError):
    """Malformed artifact file. ``offset`` is the byte position of the problem."""

    exit_code = 3

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ChannelMismatchError(DollError, ValueError):
    exit_code = 2


class SchemaMismatchError(DollError, ValueError):
    exit_code = 2
