"""Exception hierarchy shared across the pipeline."""


class LatentPrintError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(LatentPrintError, ValueError):
    pass


class ImageError(LatentPrintError, ValueError):
    pass


class ShapeError(LatentPrintError, ValueError):
    pass


class EmptySegmentationError(LatentPrintError):
    """Segmentation produced no foreground; callers decide to skip or fail."""


class DegenerateInputError(LatentPrintError, ValueError):
    pass


class DatasetError(LatentPrintError, ValueError):
    pass


class ManifestError(LatentPrintError, ValueError):
    pass


class AlignmentError(LatentPrintError, ValueError):
    pass


class ClosedSetError(LatentPrintError, ValueError):
    """A probe identity is not enrolled in the gallery."""

    def __init__(self, offenders, what="probe"):
        self.offenders = sorted(set(offenders))
        shown = ", ".join(self.offenders[:20])
        more = "" if len(self.offenders) <= 20 else f" (+{len(self.offenders) - 20} more)"
        super().__init__(f"closed-set violation: {what} not enrolled in gallery: {shown}{more}")
