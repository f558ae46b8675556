"""Finite-difference verification of every differentiable op.

The harness behind the `grad-check` CLI subcommand and the gradient
acceptance gate: each op is probed on seeded random inputs and the worst
relative error against central differences is reported. episode_loss is
checked end-to-end with respect to all backbone parameters.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .backbone import BackboneSpec, build_backbone
from .episodes import Episode
from .protonet import episode_loss


def _rand(rng, *shape):
    return ad.Tensor(rng.standard_normal(shape), requires_grad=True)


def _episode_loss_check(rng, h):
    """Worst grad error of episode_loss wrt every parameter of a small MLP."""
    backbone = build_backbone(
        BackboneSpec("mlp", (6,), (8,), 4, seed=int(rng.integers(2**31)))
    )
    # generic biases: with zero biases a dead-ReLU row yields an exactly zero
    # embedding, which sits on the l2-normalization clamp kink where no
    # derivative exists and finite differences are meaningless
    for name, tensor in backbone.params.items():
        if tensor.data.ndim == 1:
            tensor.data[...] = 0.1 * rng.standard_normal(tensor.data.shape)
    episode = Episode(
        support_items=rng.standard_normal((6, 6)),
        support_labels=np.repeat(np.arange(3), 2),
        query_items=rng.standard_normal((9, 6)),
        query_labels=np.repeat(np.arange(3), 3),
        way=3,
        shots=np.full(3, 2),
        domain_name="gradcheck",
        support_indices=np.arange(6),
        query_indices=np.arange(6, 15),
        class_ids=np.arange(3),
    )

    def loss_fn(*params):
        return episode_loss(episode, backbone, temperature=10.0)

    return ad.grad_check(loss_fn, backbone.parameters(), h=h)


def _sce_check(rng, h):
    labels = rng.integers(0, 5, size=4)  # fixed before the closure re-runs
    return ad.grad_check(lambda z: ad.softmax_cross_entropy(z, labels),
                         _rand(rng, 4, 5), h=h)


def op_checks(h: float = 1e-5):
    """Name -> callable(rng) returning the max relative gradient error."""
    return {
        "matmul": lambda rng: ad.grad_check(
            ad.matmul, [_rand(rng, 3, 4), _rand(rng, 4, 2)], h=h),
        "transpose": lambda rng: ad.grad_check(ad.transpose, _rand(rng, 3, 5), h=h),
        "scale": lambda rng: ad.grad_check(
            lambda x: ad.scale(x, 3.7), _rand(rng, 4, 3), h=h),
        "mul": lambda rng: ad.grad_check(ad.mul, [_rand(rng, 3, 4), _rand(rng, 3, 4)], h=h),
        "sum_all": lambda rng: ad.grad_check(ad.sum_all, _rand(rng, 3, 4), h=h),
        "relu": lambda rng: ad.grad_check(ad.relu, _rand(rng, 5, 8), h=h),
        "add_bias_rows": lambda rng: ad.grad_check(
            ad.add_bias, [_rand(rng, 4, 6), _rand(rng, 6)], h=h),
        "add_bias_channels": lambda rng: ad.grad_check(
            ad.add_bias, [_rand(rng, 2, 3, 4, 4), _rand(rng, 3)], h=h),
        "mean_rows": lambda rng: ad.grad_check(ad.mean_rows, _rand(rng, 5, 3), h=h),
        "spatial_mean": lambda rng: ad.grad_check(ad.spatial_mean, _rand(rng, 2, 3, 4, 4), h=h),
        "concat_rows": lambda rng: ad.grad_check(
            ad.concat_rows, [_rand(rng, 3, 4), _rand(rng, 2, 4)], h=h),
        "l2_normalize": lambda rng: ad.grad_check(ad.l2_normalize, _rand(rng, 5, 8), h=h),
        "conv2d_3x3": lambda rng: ad.grad_check(
            ad.conv2d_3x3, [_rand(rng, 2, 2, 6, 6), _rand(rng, 3, 2, 3, 3)], h=h),
        "maxpool_2x2": lambda rng: ad.grad_check(ad.maxpool_2x2, _rand(rng, 2, 3, 8, 8), h=h),
        "softmax_cross_entropy": lambda rng: _sce_check(rng, h),
        "softmax_cross_entropy_masked": lambda rng: ad.grad_check(
            lambda z: ad.softmax_cross_entropy_masked(
                z, np.concatenate([np.arange(3) + 3, np.arange(3)]),
                np.eye(6, dtype=bool)),
            _rand(rng, 6, 6), h=h),
        "episode_loss": lambda rng: _episode_loss_check(rng, h),
    }


def gradient_report(num_inputs: int = 100, h: float = 1e-5, seed: int = 7):
    """Run every check on `num_inputs` seeded draws; return {op: max_error}."""
    report = {}
    for op_id, (name, check) in enumerate(op_checks(h).items()):
        worst = 0.0
        for i in range(num_inputs):
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(op_id, i)))
            worst = max(worst, check(rng))
        report[name] = worst
    return report
