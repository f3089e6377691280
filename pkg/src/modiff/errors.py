"""Exception hierarchy. Every error names the subsystem that raised it so the
CLI can attribute failures."""


class ModiffError(Exception):
    """Base class for all package errors."""

    module = "modiff"


class ConfigError(ModiffError):
    module = "config"


class GridSizingError(ModiffError):
    """Phantom organ would exit the volume for the requested amplitude."""

    module = "phantom"


class ShapeMismatchError(ModiffError):
    """Structural mismatch between tensors that must agree."""

    def __init__(self, message, module="modiff"):
        super().__init__(message)
        self.module = module


class ScheduleError(ModiffError):
    module = "diffusion"


class EmptyMaskError(ModiffError):
    module = "diffusion"


class CheckpointError(ModiffError):
    module = "trainer"


class TrainingDivergedError(ModiffError):
    module = "trainer"


class StageError(ModiffError):
    """Pipeline failure wrapped with the name of the stage that failed."""

    module = "i2v"

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
