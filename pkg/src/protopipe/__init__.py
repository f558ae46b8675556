"""protopipe: a self-contained prototype-based few-shot learning pipeline.

Stages: contrastive pre-training on unlabeled items, episodic ProtoNet
meta-training with a warmup+cosine schedule and early stopping, and
optional per-task fine-tuning at meta-test time with domain-wise learning
rate selection. Built on a small float64 autodiff core with compiled
conv/pool kernels (numpy fallback selected at import).
"""

from .autodiff import AdamState, Tensor, adam_step, backward, grad_check, zero_grads
from .backbone import (
    BackboneSpec,
    Checkpoint,
    build_backbone,
    clone_for_task,
    embed,
    load_checkpoint,
    save_checkpoint,
)
from .data import (
    Dataset,
    DomainShift,
    SplitDatasets,
    SyntheticSpec,
    apply_domain_shift,
    generate_synthetic,
    load_idx,
)
from .episodes import Episode, SamplerConfig, sample_episode, validate_episode
from .evalharness import Report, confidence_interval, dump_embeddings, evaluate
from .finetune import FineTunePolicy, finetune_task, select_learning_rate
from .pretrain import AugmentPolicy, PretrainConfig, augment_view, ntxent_loss, pretrain
from .protonet import (
    Prototypes,
    TrainConfig,
    classify,
    compute_prototypes,
    cosine_logits,
    episode_loss,
    lr_schedule,
    meta_train,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "Tensor", "adam_step", "backward", "grad_check", "zero_grads",
    "BackboneSpec", "Checkpoint", "build_backbone", "clone_for_task", "embed",
    "load_checkpoint", "save_checkpoint",
    "Dataset", "DomainShift", "SplitDatasets", "SyntheticSpec",
    "apply_domain_shift", "generate_synthetic", "load_idx",
    "Episode", "SamplerConfig", "sample_episode", "validate_episode",
    "Report", "confidence_interval", "dump_embeddings", "evaluate",
    "FineTunePolicy", "finetune_task", "select_learning_rate",
    "AugmentPolicy", "PretrainConfig", "augment_view", "ntxent_loss", "pretrain",
    "Prototypes", "TrainConfig", "classify", "compute_prototypes", "cosine_logits",
    "episode_loss", "lr_schedule", "meta_train",
    "__version__",
]
