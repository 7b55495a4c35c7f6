"""Exception hierarchy shared across the package."""


class AuVerifyError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(AuVerifyError):
    """Two tensors (or a tensor and a layer) disagree on shape.

    The message always names both offending shapes.
    """


class LayerConfigError(AuVerifyError):
    """A layer's configuration is inconsistent (e.g. non-integral conv output size)."""


class ModelFormatError(AuVerifyError):
    """A portable model file failed to parse or validate."""


class UnknownActionUnitError(AuVerifyError):
    """An Action Unit identifier is not known to the model or box config."""


class LandmarkError(AuVerifyError):
    """A landmark set violates its invariants (count, finiteness)."""


class DegenerateBoxError(AuVerifyError):
    """A bounding box has no area left after clipping to the image."""

    def __init__(self, au, landmarks, message):
        super().__init__(message)
        self.au = au
        self.landmarks = landmarks


class UndefinedMuError(AuVerifyError):
    """The localization ratio is undefined because the map holds no positive relevance."""
