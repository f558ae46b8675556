"""Per-task backbone fine-tuning and domain-wise learning-rate selection.

Each task adapts a private clone of the checkpoint: every step augments
the support set into a pseudo query set, recomputes prototypes from the
current backbone on the raw support items, and takes one Adam step on the
whole backbone against the support labels. The real query set is only
touched once, for the final readout from the adapted parameters.

The learning rate is chosen per domain, not per task: a handful of extra
validation tasks are scored for every grid value (the same tasks and rng
streams for each value, a paired design) and the winner is reused for all
tasks in the domain. The grid always contains 0, so selection can never
do worse on validation than not fine-tuning at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    AdamState,
    adam_step,
    backward,
    softmax_cross_entropy,
    zero_grads,
)
from .backbone import Checkpoint, clone_for_task, embed
from .data import Dataset
from .episodes import Episode, SamplerConfig, sample_episode
from .pretrain import AugmentPolicy, augment_batch, with_feature_std
from .protonet import compute_prototypes, cosine_logits


class FineTuneError(RuntimeError):
    pass


@dataclass(frozen=True)
class FineTunePolicy:
    lr_grid: tuple = (0.01, 0.001, 0.0001, 0.0)
    steps: int = 50
    augment: AugmentPolicy = field(default_factory=lambda: AugmentPolicy(apply_probability=0.9))
    val_tasks: int = 5
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_grid", tuple(float(lr) for lr in self.lr_grid))
        if not self.lr_grid:
            raise ValueError("lr_grid must not be empty")
        if 0.0 not in self.lr_grid:
            raise ValueError("lr_grid must contain 0 (the no-adaptation fallback)")
        if any(lr < 0 for lr in self.lr_grid):
            raise ValueError("learning rates must be >= 0")
        if self.steps < 0 or self.val_tasks < 1:
            raise ValueError("steps must be >= 0 and val_tasks >= 1")


@dataclass
class FineTuneResult:
    logits: np.ndarray
    predictions: np.ndarray
    loss_trace: list

    def accuracy(self, episode: Episode) -> float:
        return float(np.mean(self.predictions == episode.query_labels))


def finetune_task(ckpt: Checkpoint, episode: Episode, lr: float,
                  policy: FineTunePolicy, rng) -> FineTuneResult:
    """Adapt a fresh clone on the augmented support set, then read out."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    backbone = clone_for_task(ckpt)
    params = backbone.parameters()
    state = AdamState.for_params(params)
    augment = with_feature_std(policy.augment, episode.support_items)
    trace = []
    for step in range(policy.steps):
        pseudo_query = augment_batch(episode.support_items, augment, rng)
        support_emb = embed(backbone, episode.support_items)
        protos = compute_prototypes(support_emb, episode.support_labels)
        pseudo_emb = embed(backbone, pseudo_query)
        logits = cosine_logits(pseudo_emb, protos, policy.temperature)
        loss = softmax_cross_entropy(logits, episode.support_labels)
        value = loss.item()
        if not np.isfinite(value):
            raise FineTuneError(
                f"non-finite loss {value} at fine-tune step {step} (lr={lr})"
            )
        trace.append(value)
        zero_grads(params)
        backward(loss)
        adam_step(params, [p.grad for p in params], state, lr)
    # final classification: prototypes and query embeddings both come from
    # the adapted parameters, never from the source checkpoint
    support_emb = embed(backbone, episode.support_items)
    protos = compute_prototypes(support_emb, episode.support_labels)
    query_emb = embed(backbone, episode.query_items)
    logits = cosine_logits(query_emb, protos, policy.temperature)
    return FineTuneResult(
        logits=logits.data,
        predictions=logits.data.argmax(axis=1),
        loss_trace=trace,
    )


def select_learning_rate(ckpt: Checkpoint, domain_val_dataset: Dataset,
                         sampler_cfg: SamplerConfig, policy: FineTunePolicy, rng):
    """Pick the grid lr with the best mean accuracy on N extra tasks.

    The same episodes and the same per-episode rng streams are reused for
    every grid value; ties break toward the smaller lr (less adaptation
    when indistinguishable). Returns (chosen_lr, {lr: mean_accuracy}).
    """
    episodes = [
        sample_episode(domain_val_dataset, sampler_cfg, rng)
        for _ in range(policy.val_tasks)
    ]
    streams = rng.integers(np.iinfo(np.int64).max, size=policy.val_tasks)
    means = {}
    for lr in policy.lr_grid:
        accs = [
            finetune_task(ckpt, ep, lr, policy, np.random.default_rng(int(streams[j])))
            .accuracy(ep)
            for j, ep in enumerate(episodes)
        ]
        means[lr] = float(np.mean(accs))
    chosen = max(means, key=lambda lr: (means[lr], -lr))
    return chosen, means
