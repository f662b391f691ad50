"""Video gaze estimation from head/face/eye region queries.

A clip goes through a per-frame backbone; learnable per-clue queries and
proposal boxes are refined over N stages of spatial-temporal interaction
and RoI-conditioned dynamic updates; task heads localize each clue and
regress per-clue gazes that a confidence-weighted fusion layer turns into
the final per-frame gaze.
"""

__version__ = "0.1.0"

from .datamodel import (Box, ClipAnnotations, ClueKind, CLUES, VideoClip,
                        box_center_to_corner, box_corner_to_center, normalize_gaze)
from .engine import (GazeEstimator, GazeOutput, ModelConfig, TrainConfig,
                     build_model, infer_video, load_checkpoint, save_checkpoint, train)
from .evaluation import EvalReport, SplitConfig, angular_error_deg, evaluate
from .losses import LossReport, LossWeights
from .synthgen import SynthConfig, generate_clip, generate_dataset

__all__ = [
    "Box", "ClipAnnotations", "ClueKind", "CLUES", "VideoClip",
    "box_center_to_corner", "box_corner_to_center", "normalize_gaze",
    "GazeEstimator", "GazeOutput", "ModelConfig", "TrainConfig",
    "build_model", "infer_video", "load_checkpoint", "save_checkpoint", "train",
    "EvalReport", "SplitConfig", "angular_error_deg", "evaluate",
    "LossReport", "LossWeights",
    "SynthConfig", "generate_clip", "generate_dataset",
]
