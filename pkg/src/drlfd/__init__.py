"""Deep robot learning from demonstrations for bimanual needle insertion.

Synthetic and on-disk demonstration datasets, a small numpy network kernel,
feed-forward and recurrent visuomotor next-pose models, training, and
position/orientation error evaluation.
"""

from drlfd.validation import CheckpointError, NotFittedError, ValidationError

__version__ = "0.1.0"

__all__ = ["CheckpointError", "NotFittedError", "ValidationError", "NextPoseRegressor", "__version__"]


def __getattr__(name):
    # keeps ``import drlfd`` free of the sklearn import cost
    if name == "NextPoseRegressor":
        from drlfd.estimator import NextPoseRegressor
        return NextPoseRegressor
    raise AttributeError(name)
