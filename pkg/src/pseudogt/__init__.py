"""Semi-weakly supervised object detection by sampling pseudo ground truth.

A small fully annotated pool and a large pool with image-level labels train
one detector. Weakly labelled images draw pseudo boxes from persistent
per-proposal score tables that are refreshed from the detector's own output.
"""

from .geometry import Box, Detection, DetectionSet, LabeledBox, iou, nms
from .synthworld import Dataset, DatasetSplit, ProposalSet, WorldConfig, generate_dataset
from .detector import DetectorParams, detect, loss_and_grad, sgd_step
from .pseudo_gt import PropagationConfig, SamplerConfig, ScoreTable
from .trainer import RunHistory, TrainConfig, train
from .evaluation import ap50, tide_errors

__all__ = [
    "Box", "Detection", "DetectionSet", "LabeledBox", "iou", "nms",
    "Dataset", "DatasetSplit", "ProposalSet", "WorldConfig", "generate_dataset",
    "DetectorParams", "detect", "loss_and_grad", "sgd_step",
    "PropagationConfig", "SamplerConfig", "ScoreTable",
    "RunHistory", "TrainConfig", "train",
    "ap50", "tide_errors",
]

__version__ = "0.1.0"
