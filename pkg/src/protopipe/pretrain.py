"""Self-supervised pre-training: instance discrimination with NT-Xent.

This is the pipeline's foundation stage. Each step draws a batch, makes
two stochastic views of every item, and pulls the paired views together
against all other views in the batch. Labels are never read: the function
receives bare items.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import (
    AdamState,
    Tensor,
    adam_step,
    backward,
    concat_rows,
    l2_normalize,
    matmul,
    scale,
    softmax_cross_entropy_masked,
    transpose,
    zero_grads,
)
from .backbone import Backbone, embed


class PretrainError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentPolicy:
    """Stochastic view generation for vectors and [C,H,W] images."""

    jitter_sigma: float = 0.1          # fraction of per-feature std (vectors)
    coordinate_dropout_p: float = 0.1  # vectors
    crop_padding: int = 4              # images: zero-pad then random crop
    hflip_p: float = 0.5               # images
    pixel_noise_sigma: float = 0.05    # images, clamped back to [0,1]
    apply_probability: float = 0.9
    seed: int = 0
    feature_std: tuple | None = None   # per-feature std for jitter scaling

    def __post_init__(self):
        for name in ("coordinate_dropout_p", "hflip_p", "apply_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise PretrainError(f"{name} must lie in [0,1], got {p}")
        if self.jitter_sigma < 0 or self.pixel_noise_sigma < 0:
            raise PretrainError("noise sigmas must be >= 0")


def with_feature_std(policy: AugmentPolicy, items: np.ndarray) -> AugmentPolicy:
    """Fill the per-feature std used to scale vector jitter."""
    if items.ndim != 2 or policy.feature_std is not None:
        return policy
    return replace(policy, feature_std=tuple(items.std(axis=0).tolist()))


def flip_horizontal(item: np.ndarray) -> np.ndarray:
    """Involution used by the image chain: flip(flip(x)) == x."""
    return item[:, :, ::-1].copy()


def transform_item(item: np.ndarray, policy: AugmentPolicy, rng) -> np.ndarray:
    """Apply the stochastic chain unconditionally; shape preserved."""
    if item.ndim == 1:
        d = item.shape[0]
        std = np.ones(d) if policy.feature_std is None else np.asarray(policy.feature_std)
        out = item + rng.standard_normal(d) * (policy.jitter_sigma * std)
        out[rng.random(d) < policy.coordinate_dropout_p] = 0.0
        return out
    if item.ndim == 3:
        c, h, w = item.shape
        pad = policy.crop_padding
        padded = np.zeros((c, h + 2 * pad, w + 2 * pad))
        padded[:, pad:pad + h, pad:pad + w] = item
        oy, ox = rng.integers(0, 2 * pad + 1, size=2)
        out = padded[:, oy:oy + h, ox:ox + w].copy()
        if rng.random() < policy.hflip_p:
            out = flip_horizontal(out)
        out += rng.standard_normal(out.shape) * policy.pixel_noise_sigma
        return np.clip(out, 0.0, 1.0)
    raise PretrainError(f"cannot augment items of rank {item.ndim}")


def augment_view(item: np.ndarray, policy: AugmentPolicy, rng) -> np.ndarray:
    """With probability apply_probability run the chain, else pass through."""
    if rng.random() < policy.apply_probability:
        return transform_item(item, policy, rng)
    return item.copy()


def augment_batch(items: np.ndarray, policy: AugmentPolicy, rng) -> np.ndarray:
    """One coin for the whole batch, fresh per-item transforms when it lands."""
    if rng.random() < policy.apply_probability:
        return np.stack([transform_item(item, policy, rng) for item in items])
    return items.copy()


def ntxent_loss(view_a_emb: Tensor, view_b_emb: Tensor, temperature: float = 0.5) -> Tensor:
    """Normalized-temperature cross-entropy over 2B anchors.

    Anchor i's positive is its paired view; candidates are all other 2B-1
    views (self excluded). Symmetric in the two views and invariant to
    batch order.
    """
    b = view_a_emb.data.shape[0]
    if view_b_emb.data.shape != view_a_emb.data.shape:
        raise PretrainError("view embeddings must have identical shapes")
    if b < 2:
        raise PretrainError(f"contrastive batch needs >= 2 items, got {b}")
    if temperature <= 0:
        raise PretrainError("temperature must be positive")
    z = l2_normalize(concat_rows(view_a_emb, view_b_emb))
    sims = scale(matmul(z, transpose(z)), 1.0 / temperature)
    targets = np.concatenate([np.arange(b) + b, np.arange(b)])
    return softmax_cross_entropy_masked(sims, targets, np.eye(2 * b, dtype=bool))


@dataclass(frozen=True)
class PretrainConfig:
    batch_size: int = 64
    steps: int = 500
    temperature: float = 0.5
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise PretrainError("batch_size must be >= 2 (negatives are needed)")
        if self.steps < 0:
            raise PretrainError("steps must be >= 0")


def pretrain(backbone: Backbone, items: np.ndarray, cfg: PretrainConfig,
             policy: AugmentPolicy):
    """Adam at fixed lr over NT-Xent steps; returns (checkpoint, loss trace)."""
    items = np.asarray(items, dtype=np.float64)
    if len(items) < cfg.batch_size:
        raise PretrainError(
            f"need at least batch_size={cfg.batch_size} items, got {len(items)}"
        )
    policy = with_feature_std(policy, items)
    losses = []
    if cfg.steps == 0:
        return backbone.snapshot("pretrained"), losses
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
    params = backbone.parameters()
    state = AdamState.for_params(params)
    for _ in range(cfg.steps):
        batch = items[rng.choice(len(items), size=cfg.batch_size, replace=False)]
        view_a = np.stack([augment_view(item, policy, rng) for item in batch])
        view_b = np.stack([augment_view(item, policy, rng) for item in batch])
        loss = ntxent_loss(embed(backbone, view_a), embed(backbone, view_b),
                           cfg.temperature)
        zero_grads(params)
        backward(loss)
        adam_step(params, [p.grad for p in params], state, cfg.lr)
        losses.append(loss.item())
    return backbone.snapshot("pretrained"), losses
