from .model import ModelConfig, PreparedScene, SceneGraphModel, prepare_scene
from .train import TrainConfig, TrainState, TrainingDivergedError, load_checkpoint, train
from .gradcheck import gradient_check

__all__ = [
    "ModelConfig",
    "PreparedScene",
    "SceneGraphModel",
    "prepare_scene",
    "TrainConfig",
    "TrainState",
    "TrainingDivergedError",
    "load_checkpoint",
    "train",
    "gradient_check",
]
