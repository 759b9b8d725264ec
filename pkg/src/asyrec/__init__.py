"""Asymmetric dyadic relationship classifier built on a small numpy autodiff core."""
__version__ = "0.1.0"

from .data import Dataset, SynthConfig, synth_generate  # noqa: E402
from .model import AsyrecParams, ForwardOptions, forward, loss, predict_video  # noqa: E402
from .train import TrainConfig, cross_validate, evaluate, train  # noqa: E402

__all__ = ["AsyrecParams", "Dataset", "ForwardOptions", "SynthConfig", "TrainConfig", "cross_validate",
           "evaluate", "forward", "loss", "predict_video", "synth_generate", "train"]
