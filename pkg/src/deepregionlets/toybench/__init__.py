from .config import TrainConfig
from .detector import Detector, detection_loss
from .proposals import Proposal, iou, make_proposals
from .scenes import CLASSES, SceneObject, SyntheticScene, generate_scene
from .train import TrainReport, format_ablation, run_ablation, train

__all__ = [
    "CLASSES", "Detector", "Proposal", "SceneObject", "SyntheticScene", "TrainConfig",
    "TrainReport", "detection_loss", "format_ablation", "generate_scene", "iou",
    "make_proposals", "run_ablation", "train",
]
