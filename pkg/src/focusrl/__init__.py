"""Self-improving localize-then-answer training on a synthetic micro-world.

A small two-head policy first predicts a bounding box over a grid scene,
then answers an attribute question from the cropped view.  The package
generates its own preference data (diversity-controlled box sampling, an
oracle critic, threshold filtering, win/lose selection) and optimizes the
policy with a two-stage pairwise preference objective, repeating the cycle
so each round trains on data from the previous round's model.
"""

from .config import TrainConfig, config_hash, load_config, run_id
from .datagen import (
    CandidatePath,
    FilterThresholds,
    PreferencePair,
    build_preference_dataset,
    filter_candidates,
    generate_candidates,
    select_pair,
)
from .dpo import DpoHyper, dpo_pair_loss, stage1_batch, stage2_batch
from .geometry import BoundingBox, DiversityParams, box_from_tokens, iou, tokens_from_box
from .metrics import answer_accuracy, data_quality_table, detection_accuracy
from .policy import PolicyDims, PolicyParams, ReferenceSnapshot, snapshot
from .trainer import run_baseline, run_iterations, sft_warmup, train_stage1, train_stage2
from .world import Scene, SceneObject, QueryInstance, WorldConfig, generate_scene, make_task

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "CandidatePath",
    "DiversityParams",
    "DpoHyper",
    "FilterThresholds",
    "PolicyDims",
    "PolicyParams",
    "PreferencePair",
    "QueryInstance",
    "ReferenceSnapshot",
    "Scene",
    "SceneObject",
    "TrainConfig",
    "WorldConfig",
    "answer_accuracy",
    "box_from_tokens",
    "build_preference_dataset",
    "config_hash",
    "data_quality_table",
    "detection_accuracy",
    "dpo_pair_loss",
    "filter_candidates",
    "generate_candidates",
    "generate_scene",
    "iou",
    "load_config",
    "make_task",
    "run_baseline",
    "run_id",
    "run_iterations",
    "select_pair",
    "sft_warmup",
    "snapshot",
    "stage1_batch",
    "stage2_batch",
    "tokens_from_box",
    "train_stage1",
    "train_stage2",
]
