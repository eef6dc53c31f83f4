"""Exception hierarchy shared by every tier of the pipeline."""


class SplitRankError(Exception):
    """Base class; ``code`` is what the wire protocol reports."""

    code = "internal"


class InputError(SplitRankError, ValueError):
    code = "bad_input"


class FormatError(SplitRankError):
    code = "bad_format"


class VersionError(SplitRankError):
    code = "version_mismatch"


class TrainingError(SplitRankError):
    code = "training"

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class BuildError(SplitRankError):
    code = "build"


class BrokerError(SplitRankError):
    code = "all_shards_failed"


class ConfigError(SplitRankError):
    code = "config"
