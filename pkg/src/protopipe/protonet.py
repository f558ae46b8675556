"""Prototype classification and the episodic meta-training loop.

A query's class probability is the softmax over temperature-scaled cosine
similarities between its embedding and the per-class support centroids.
Because prototypes are plain means, the same model handles any way count,
which is what makes various-way-various-shot deployment possible.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    AdamState,
    Tensor,
    adam_step,
    backward,
    matmul,
    l2_normalize,
    scale,
    softmax_cross_entropy,
    transpose,
    zero_grads,
)
from .backbone import Backbone, Checkpoint, clone_for_task, embed
from .data import Dataset, class_disjoint
from .episodes import Episode, SamplerConfig, episode_rng, sample_episode


@dataclass
class Prototypes:
    """K x m matrix of raw class centroids, aligned with episode labels."""

    matrix: Tensor

    @property
    def way(self):
        return self.matrix.data.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    episodes_per_epoch: int = 2000
    lr_min: float = 1e-6
    lr_max: float = 5e-5
    warmup_epochs: int = 5
    temperature: float = 1.0
    patience: int = 5
    val_episodes: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.lr_min > self.lr_max:
            raise ValueError(f"lr_min {self.lr_min} > lr_max {self.lr_max}")
        if self.epochs > 0 and not self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def compute_prototypes(embeddings: Tensor, labels) -> Prototypes:
    """Row k is the mean embedding of label k; gradients flow to embeddings."""
    labels = np.asarray(labels, dtype=np.int64)
    way = int(labels.max()) + 1
    n = embeddings.data.shape[0]
    assign = np.zeros((way, n))
    for k in range(way):
        members = labels == k
        count = int(members.sum())
        if count == 0:
            raise ValueError(f"class {k} has no support embeddings")
        assign[k, members] = 1.0 / count
    return Prototypes(matrix=matmul(Tensor(assign), embeddings))


def cosine_logits(query_emb: Tensor, protos: Prototypes, temperature: float = 1.0) -> Tensor:
    """logit[i,k] = temperature * cos(query_i, prototype_k); range [-t, t]."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if query_emb.data.shape[1] != protos.matrix.data.shape[1]:
        raise ValueError(
            f"embedding dim {query_emb.data.shape[1]} != prototype dim "
            f"{protos.matrix.data.shape[1]}"
        )
    sims = matmul(l2_normalize(query_emb), transpose(l2_normalize(protos.matrix)))
    return scale(sims, temperature)


def classify(logits: Tensor):
    """Row-wise softmax probabilities and argmax predictions."""
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    return Tensor(probs), probs.argmax(axis=1)


def predict_episode(backbone: Backbone, episode: Episode, temperature: float = 1.0):
    """Plain ProtoNet readout of an episode with the given live parameters."""
    support_emb = embed(backbone, episode.support_items)
    protos = compute_prototypes(support_emb, episode.support_labels)
    query_emb = embed(backbone, episode.query_items)
    logits = cosine_logits(query_emb, protos, temperature)
    return logits.data, logits.data.argmax(axis=1)


def episode_accuracy(backbone: Backbone, episode: Episode) -> float:
    _, preds = predict_episode(backbone, episode)
    return float(np.mean(preds == episode.query_labels))


def episode_loss(episode: Episode, backbone: Backbone, temperature: float = 1.0) -> Tensor:
    """Cross-entropy of the query set against support prototypes."""
    support_emb = embed(backbone, episode.support_items)
    protos = compute_prototypes(support_emb, episode.support_labels)
    query_emb = embed(backbone, episode.query_items)
    logits = cosine_logits(query_emb, protos, temperature)
    return softmax_cross_entropy(logits, episode.query_labels)


def lr_schedule(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup from lr_min to lr_max, then cosine back to lr_min."""
    if step > total_steps:
        raise ValueError(f"step {step} past total_steps {total_steps}")
    warmup_steps = config.warmup_epochs * config.episodes_per_epoch
    if warmup_steps >= total_steps:
        warmup_steps = 0
    if step == 0:
        return config.lr_min if warmup_steps else config.lr_max
    if warmup_steps and step <= warmup_steps:
        if step == warmup_steps:
            return config.lr_max
        return config.lr_min + (config.lr_max - config.lr_min) * step / warmup_steps
    if step == total_steps:
        return config.lr_min
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (
        1.0 + math.cos(math.pi * progress)
    )


def _mean_accuracy(backbone: Backbone, episodes) -> float:
    return float(np.mean([episode_accuracy(backbone, ep) for ep in episodes]))


def meta_train(init: Checkpoint, train_ds: Dataset, val_ds: Dataset,
               sampler_cfg: SamplerConfig, cfg: TrainConfig):
    """Episodic ProtoNet training with warmup+cosine schedule and early stop.

    Validation uses one fixed episode set per run (paired comparisons make
    early stopping deterministic). Returns the best-validation checkpoint,
    which is the initial one if no epoch improves on it, plus the per-epoch
    history rows.
    """
    if not class_disjoint(train_ds, val_ds):
        raise ValueError("train and val datasets share classes")
    history = []
    if cfg.epochs == 0:
        return Checkpoint(init.spec, dict(init.params), "metatrained", init.seed), history
    val_episodes = [
        sample_episode(val_ds, sampler_cfg, episode_rng(cfg.seed, 1, j))
        for j in range(cfg.val_episodes)
    ]
    backbone = clone_for_task(init)
    params = backbone.parameters()
    state = AdamState.for_params(params)
    best_acc = _mean_accuracy(backbone, val_episodes)
    best_params = {k: v.data.copy() for k, v in backbone.params.items()}
    best_epoch = -1
    total_steps = cfg.epochs * cfg.episodes_per_epoch
    step = 0
    stale_epochs = 0
    for epoch in range(cfg.epochs):
        losses = []
        for _ in range(cfg.episodes_per_epoch):
            ep = sample_episode(train_ds, sampler_cfg, episode_rng(cfg.seed, 0, step))
            lr = lr_schedule(step, total_steps, cfg)
            loss = episode_loss(ep, backbone, cfg.temperature)
            zero_grads(params)
            backward(loss)
            adam_step(params, [p.grad for p in params], state, lr)
            losses.append(loss.item())
            step += 1
        val_acc = _mean_accuracy(backbone, val_episodes)
        history.append({
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_acc": val_acc,
            "lr": lr_schedule(step - 1, total_steps, cfg),
        })
        if val_acc > best_acc:
            best_acc = val_acc
            best_params = {k: v.data.copy() for k, v in backbone.params.items()}
            best_epoch = epoch
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= cfg.patience:
                break
    ckpt = Checkpoint(init.spec, best_params, "metatrained", init.seed)
    ckpt.best_epoch = best_epoch
    ckpt.best_val_acc = best_acc
    return ckpt, history


def history_to_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_acc", "lr"])
        writer.writeheader()
        writer.writerows(history)
