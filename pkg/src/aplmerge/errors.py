"""Exception types shared across the package."""


class AlignmentError(ValueError):
    """Two tensor maps do not share names and shapes."""


class CheckpointFormatError(ValueError):
    """A checkpoint file violates the on-disk format."""


class SchemaError(ValueError):
    """A partition schema cannot be resolved against a tensor map."""


class StageError(RuntimeError):
    """A merge pipeline stage failed.

    ``stage`` names the pipeline step; ``cause`` keeps the original exception
    so callers (the CLI in particular) can map it to an exit code.
    """

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
