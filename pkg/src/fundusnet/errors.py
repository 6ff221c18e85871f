"""Exception hierarchy shared across the package."""


class FundusNetError(Exception):
    """Base class for all errors raised by this package."""


# --- dataset ---

class UnknownLabelValue(FundusNetError):
    """A mask pixel does not match any value of the label encoding."""


class CupOutsideDisc(FundusNetError):
    """A cup pixel lies outside the disc mask."""


class MissingMask(FundusNetError):
    """A sample has no mask file but masks were requested."""


class MissingLabel(FundusNetError):
    """A sample has no diagnosis label but labels were requested."""


class CorruptImage(FundusNetError):
    """An image file could not be decoded."""


class TooFewSamples(FundusNetError):
    """A class has fewer members than the number of folds."""


class SingleClass(FundusNetError):
    """An operation requiring both classes received only one."""


# --- roi ---

class NoDiscFound(FundusNetError):
    """No circular bright structure passed the accumulator floor."""


# --- losses / metrics ---

class ShapeMismatch(FundusNetError):
    """Two arrays that must have equal shapes do not."""


class MissingGroundTruth(FundusNetError):
    """Ground-truth masks or labels are absent where required."""


class IdMismatch(FundusNetError):
    """Prediction and ground-truth id sets disagree."""


class EmptyDisc(FundusNetError):
    """A disc mask with no foreground pixels where one is required."""


# --- augment ---

class DegenerateSample(FundusNetError):
    """Too few pixels to estimate a color basis."""


# --- network ---

class ConfigShapeError(FundusNetError):
    """The architecture config cannot realize the mandated shapes."""


class ShapeError(FundusNetError):
    """An input batch has the wrong shape for the model."""


# --- postprocess ---

class InsufficientBoundary(FundusNetError):
    """Fewer than five boundary points available for the ellipse fit."""


class DegenerateFit(FundusNetError):
    """The least-squares conic is not an ellipse."""


# --- pipeline ---

class ArchitectureMismatch(FundusNetError):
    """Ensemble members have differing architecture configs."""


class DivergedLoss(FundusNetError):
    """Training aborted on a non-finite loss; the log so far is attached."""

    def __init__(self, message, train_log=None):
        super().__init__(message)
        self.train_log = train_log
