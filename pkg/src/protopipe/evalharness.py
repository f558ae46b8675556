"""Benchmark driver: multi-episode evaluation, reports, embedding export.

Episodes are derived from counter-based rng streams, so a worker pool and
a sequential loop produce identical reports and episode order never
matters. Per-episode accuracies are kept in the report to allow paired
comparisons between modes.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .backbone import Checkpoint, clone_for_task, embed
from .data import Dataset
from .episodes import SamplerConfig, episode_rng, sample_episode
from .finetune import FineTunePolicy, finetune_task, select_learning_rate
from .protonet import episode_accuracy

MODES = ("readout", "finetune", "finetune_searched")


class EvaluationError(RuntimeError):
    pass


def confidence_interval(accuracies):
    """(mean, 1.96 * sample_std / sqrt(E)); needs at least two values."""
    values = np.asarray(accuracies, dtype=np.float64)
    if values.size < 2:
        raise ValueError(f"confidence interval needs >= 2 values, got {values.size}")
    return float(values.mean()), float(1.96 * values.std(ddof=1) / np.sqrt(values.size))


@dataclass
class Report:
    domain_name: str
    mode: str                  # readout | finetune(lr=x) | finetune(searched lr=x)
    episodes: int
    accuracies: list
    mean_accuracy: float
    ci95_half_width: float
    config_digest: str
    seed: int
    wall_clock_seconds: float = field(default=0.0, compare=False)

    def to_json(self) -> str:
        # wall clock is runtime telemetry, not part of the replayable
        # artifact: identical config+seed must give identical bytes
        payload = {
            "domain_name": self.domain_name,
            "mode": self.mode,
            "episodes": self.episodes,
            "accuracies": self.accuracies,
            "mean_accuracy": self.mean_accuracy,
            "ci95_half_width": self.ci95_half_width,
            "config_digest": self.config_digest,
            "seed": self.seed,
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")


_WORKER = {}


def _score_episode(index, ckpt, dataset, sampler_cfg, mode, lr, policy, readout_backbone=None):
    try:
        ep = sample_episode(dataset, sampler_cfg, episode_rng(sampler_cfg.seed, 3, index))
        if mode == "readout":
            backbone = readout_backbone or clone_for_task(ckpt)
            return episode_accuracy(backbone, ep)
        result = finetune_task(ckpt, ep, lr, policy,
                               episode_rng(sampler_cfg.seed, 4, index))
        return result.accuracy(ep)
    except EvaluationError:
        raise
    except Exception as exc:
        raise EvaluationError(f"episode {index} failed: {exc}") from exc


def _worker_init(ckpt, dataset, sampler_cfg, mode, lr, policy):
    _WORKER.update(
        ckpt=ckpt, dataset=dataset, sampler_cfg=sampler_cfg, mode=mode, lr=lr,
        policy=policy,
        readout_backbone=clone_for_task(ckpt) if mode == "readout" else None,
    )


def _worker_run(index):
    return _score_episode(
        index, _WORKER["ckpt"], _WORKER["dataset"], _WORKER["sampler_cfg"],
        _WORKER["mode"], _WORKER["lr"], _WORKER["policy"],
        _WORKER["readout_backbone"],
    )


def evaluate(ckpt: Checkpoint, dataset: Dataset, sampler_cfg: SamplerConfig,
             episodes: int, mode: str = "readout", policy: FineTunePolicy = None,
             lr: float = None, val_dataset: Dataset = None, workers: int = 1,
             config_digest: str = "") -> Report:
    """Score `episodes` deterministic episodes and aggregate into a Report.

    finetune needs a policy and an lr; finetune_searched selects the lr on
    the domain's validation split (or on held-out episodes of `dataset`,
    drawn from a disjoint rng stream, when no validation split exists).
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode != "readout" and policy is None:
        raise ValueError(f"mode {mode!r} requires a FineTunePolicy")
    if mode == "finetune" and lr is None:
        raise ValueError("mode 'finetune' requires an explicit lr")
    started = time.perf_counter()
    label = mode
    if mode == "finetune":
        label = f"finetune(lr={lr:g})"
    elif mode == "finetune_searched":
        search_rng = episode_rng(sampler_cfg.seed, 5)
        lr, _ = select_learning_rate(
            ckpt, val_dataset if val_dataset is not None else dataset,
            sampler_cfg, policy, search_rng,
        )
        label = f"finetune(searched lr={lr:g})"
        mode = "finetune"
    if workers > 1:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_worker_init,
            initargs=(ckpt, dataset, sampler_cfg, mode, lr, policy),
        ) as pool:
            accuracies = list(pool.map(_worker_run, range(episodes),
                                       chunksize=max(1, episodes // (workers * 4))))
    else:
        backbone = clone_for_task(ckpt) if mode == "readout" else None
        accuracies = [
            _score_episode(i, ckpt, dataset, sampler_cfg, mode, lr, policy, backbone)
            for i in range(episodes)
        ]
    if len(accuracies) >= 2:
        mean, half = confidence_interval(accuracies)
    else:
        mean, half = float(accuracies[0]), 0.0
    return Report(
        domain_name=dataset.domain_name,
        mode=label,
        episodes=episodes,
        accuracies=[float(a) for a in accuracies],
        mean_accuracy=mean,
        ci95_half_width=half,
        config_digest=config_digest,
        seed=sampler_cfg.seed,
        wall_clock_seconds=time.perf_counter() - started,
    )


def comparison_csv(reports, path) -> None:
    """One row per domain x mode, the cross-mode summary table."""
    with open(path, "w") as fh:
        fh.write("domain,mode,episodes,mean_accuracy,ci95_half_width\n")
        for r in reports:
            fh.write(f"{r.domain_name},{r.mode},{r.episodes},"
                     f"{r.mean_accuracy!r},{r.ci95_half_width!r}\n")


def dump_embeddings(ckpt: Checkpoint, dataset: Dataset, max_items: int, out_path) -> None:
    """Class-stratified embedding export: CSV of label + m columns."""
    order = []
    pools = [list(dataset.class_index[c]) for c in dataset.classes()]
    while pools and len(order) < max_items:
        pools = [p for p in pools if p]
        for pool in pools:
            if len(order) >= max_items:
                break
            order.append(pool.pop(0))
    backbone = clone_for_task(ckpt)
    m = ckpt.spec.embed_dim
    with open(out_path, "w") as fh:
        fh.write("label," + ",".join(f"e{j}" for j in range(m)) + "\n")
        for start in range(0, len(order), 256):
            rows = order[start:start + 256]
            vectors = embed(backbone, dataset.items[rows]).data
            for row, vec in zip(rows, vectors):
                fh.write(str(int(dataset.labels[row])) + ","
                         + ",".join(repr(float(v)) for v in vec) + "\n")
