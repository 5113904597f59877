"""Exception hierarchy shared across the package."""


class FontImpressError(Exception):
    """Base class for all package-specific failures."""


class EmptyCorpus(FontImpressError):
    pass


class NoTagsSurvive(FontImpressError):
    pass


class TooFewFonts(FontImpressError):
    pass


class UnknownTag(FontImpressError):
    pass


class SequenceOverflow(FontImpressError):
    pass


class WindowOutOfBounds(FontImpressError):
    pass


class NormalizationDegenerate(FontImpressError):
    pass


class EmptyDescriptorSet(FontImpressError):
    pass


class AllMasked(FontImpressError):
    pass


class NonScalarLoss(FontImpressError):
    pass


class ShapeMismatch(FontImpressError):
    pass


class InvalidToken(FontImpressError):
    pass


class OddDimension(FontImpressError):
    pass


class InvalidThreshold(FontImpressError):
    pass


class TrainingDiverged(FontImpressError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class InvalidPrefix(FontImpressError):
    pass


class InsufficientPoints(FontImpressError):
    pass


class NoLabeledFonts(FontImpressError):
    pass


class NotDifferentiable(FontImpressError):
    pass


class LikelihoodsRequired(FontImpressError):
    pass


class BadManifest(FontImpressError):
    pass
