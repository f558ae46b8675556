"""Experiment configuration: strict JSON parsing with full defaulting.

Unknown keys are rejected with their path so a typo can never silently
fall back to a default. Sections omit freely; every omitted field takes
the module default, and omitted per-section seeds inherit the master
seed. `resolved` is the fully-defaulted dict that, together with the
seed, replays the run bitwise; its digest is stamped into reports.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

from .backbone import BackboneSpec, SpecError
from .data import DataError, DomainShift, SyntheticSpec
from .episodes import SamplerConfig, SamplerError
from .finetune import FineTunePolicy
from .pretrain import AugmentPolicy, PretrainConfig, PretrainError
from .protonet import TrainConfig


class ConfigError(ValueError):
    pass


_BACKBONE_DEFAULTS = {
    "kind": "mlp",
    "input_shape": [32],
    "hidden_widths": [64, 64, 64, 64],
    "embed_dim": 16,
    "seed": None,
}
_SYNTHETIC_DEFAULTS = {
    "feature_dim": 32,
    "num_classes": 40,
    "items_per_class": 30,
    "class_sep": 8.0,
    "noise_sigma": 1.0,
    "seed": None,
}
_SHIFT_DEFAULTS = {
    "kind": "feature_permutation",
    "seed": None,
    "factor": 1.0,
}
_DATA_DEFAULTS = {
    "domain_name": "synthetic",
    "synthetic": _SYNTHETIC_DEFAULTS,
    "shift": None,
    "idx": None,
}
_SAMPLER_DEFAULTS = {
    "way": 5,
    "shot": 5,
    "queries_per_class": 15,
    "seed": None,
}
_PRETRAIN_DEFAULTS = {
    "batch_size": 64,
    "steps": 500,
    "temperature": 0.5,
    "lr": 1e-3,
    "seed": None,
    "external_data": False,
}
_TRAIN_DEFAULTS = {
    "epochs": 100,
    "episodes_per_epoch": 2000,
    "lr_min": 1e-6,
    "lr_max": 5e-5,
    "warmup_epochs": 5,
    "temperature": 1.0,
    "patience": 5,
    "val_episodes": 200,
    "seed": None,
}
_AUGMENT_DEFAULTS = {
    "jitter_sigma": 0.1,
    "coordinate_dropout_p": 0.1,
    "crop_padding": 4,
    "hflip_p": 0.5,
    "pixel_noise_sigma": 0.05,
    "apply_probability": 0.9,
    "seed": None,
}
_FINETUNE_DEFAULTS = {
    "lr_grid": [0.01, 0.001, 0.0001, 0.0],
    "steps": 50,
    "val_tasks": 5,
    "temperature": 1.0,
    "seed": None,
    "augment": _AUGMENT_DEFAULTS,
}
_EVAL_DEFAULTS = {
    "episodes": 600,
}
_TOP_DEFAULTS = {
    "seed": 0,
    "output_dir": "out",
    "workers": 1,
    "backbone": _BACKBONE_DEFAULTS,
    "data": _DATA_DEFAULTS,
    "sampler": _SAMPLER_DEFAULTS,
    "pretrain": _PRETRAIN_DEFAULTS,
    "train": _TRAIN_DEFAULTS,
    "finetune": _FINETUNE_DEFAULTS,
    "eval": _EVAL_DEFAULTS,
}


def _merge(defaults, supplied, path, master_seed):
    """Defaults overlaid with supplied values; unknown keys rejected."""
    if supplied is None:
        supplied = {}
    if not isinstance(supplied, dict):
        raise ConfigError(f"{path or 'config'} must be an object, got {type(supplied).__name__}")
    for key in supplied:
        if key not in defaults:
            raise ConfigError(f"unknown key {'.'.join(filter(None, (path, key)))!r}")
    out = {}
    for key, default in defaults.items():
        sub_path = ".".join(filter(None, (path, key)))
        value = supplied.get(key, default)
        if isinstance(default, dict):
            out[key] = _merge(default, value if value is not default else {},
                              sub_path, master_seed)
        else:
            out[key] = value
    if "seed" in out and out["seed"] is None:
        out["seed"] = master_seed
    return out


@dataclass
class ExperimentConfig:
    resolved: dict
    seed: int
    output_dir: str
    workers: int
    backbone: BackboneSpec
    synthetic: SyntheticSpec
    shift: DomainShift | None
    idx: dict | None
    domain_name: str
    sampler: SamplerConfig
    pretrain: PretrainConfig
    pretrain_external: bool
    train: TrainConfig
    finetune: FineTunePolicy
    eval_episodes: int

    def digest(self) -> str:
        blob = json.dumps(self.resolved, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def resolved_json(self) -> str:
        return json.dumps(self.resolved, sort_keys=True, indent=2)


def _build(resolved) -> ExperimentConfig:
    try:
        bk = resolved["backbone"]
        backbone = BackboneSpec(
            kind=bk["kind"], input_shape=tuple(bk["input_shape"]),
            hidden_widths=tuple(bk["hidden_widths"]), embed_dim=int(bk["embed_dim"]),
            seed=int(bk["seed"]),
        )
        sy = resolved["data"]["synthetic"]
        synthetic = SyntheticSpec(
            feature_dim=int(sy["feature_dim"]), num_classes=int(sy["num_classes"]),
            items_per_class=int(sy["items_per_class"]), class_sep=float(sy["class_sep"]),
            noise_sigma=float(sy["noise_sigma"]), seed=int(sy["seed"]),
        )
        sh = resolved["data"]["shift"]
        shift = None
        if sh is not None:
            shift = DomainShift(kind=sh["kind"], seed=int(sh["seed"]),
                                factor=float(sh["factor"]))
        sa = resolved["sampler"]
        way = tuple(sa["way"]) if isinstance(sa["way"], list) else int(sa["way"])
        shot = tuple(sa["shot"]) if isinstance(sa["shot"], list) else int(sa["shot"])
        sampler = SamplerConfig(way=way, shot=shot,
                                queries_per_class=int(sa["queries_per_class"]),
                                seed=int(sa["seed"]))
        pt = resolved["pretrain"]
        pretrain_cfg = PretrainConfig(
            batch_size=int(pt["batch_size"]), steps=int(pt["steps"]),
            temperature=float(pt["temperature"]), lr=float(pt["lr"]),
            seed=int(pt["seed"]),
        )
        tr = resolved["train"]
        train = TrainConfig(
            epochs=int(tr["epochs"]), episodes_per_epoch=int(tr["episodes_per_epoch"]),
            lr_min=float(tr["lr_min"]), lr_max=float(tr["lr_max"]),
            warmup_epochs=int(tr["warmup_epochs"]), temperature=float(tr["temperature"]),
            patience=int(tr["patience"]), val_episodes=int(tr["val_episodes"]),
            seed=int(tr["seed"]),
        )
        ft = resolved["finetune"]
        au = ft["augment"]
        augment = AugmentPolicy(
            jitter_sigma=float(au["jitter_sigma"]),
            coordinate_dropout_p=float(au["coordinate_dropout_p"]),
            crop_padding=int(au["crop_padding"]), hflip_p=float(au["hflip_p"]),
            pixel_noise_sigma=float(au["pixel_noise_sigma"]),
            apply_probability=float(au["apply_probability"]), seed=int(au["seed"]),
        )
        finetune = FineTunePolicy(
            lr_grid=tuple(float(v) for v in ft["lr_grid"]), steps=int(ft["steps"]),
            augment=augment, val_tasks=int(ft["val_tasks"]),
            temperature=float(ft["temperature"]), seed=int(ft["seed"]),
        )
    except (SpecError, DataError, SamplerError, PretrainError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(
        resolved=resolved,
        seed=int(resolved["seed"]),
        output_dir=resolved["output_dir"],
        workers=int(resolved["workers"]),
        backbone=backbone,
        synthetic=synthetic,
        shift=shift,
        idx=resolved["data"]["idx"],
        domain_name=resolved["data"]["domain_name"],
        sampler=sampler,
        pretrain=pretrain_cfg,
        pretrain_external=bool(resolved["pretrain"]["external_data"]),
        train=train,
        finetune=finetune,
        eval_episodes=int(resolved["eval"]["episodes"]),
    )


def parse_config_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top-level config must be a JSON object")
    master_seed = raw.get("seed", _TOP_DEFAULTS["seed"])
    if not isinstance(master_seed, int):
        raise ConfigError(f"seed must be an integer, got {master_seed!r}")
    resolved = _merge(_TOP_DEFAULTS, raw, "", master_seed)
    # nullable sections keep None as their default; validate when present
    if resolved["data"]["shift"] is not None:
        resolved["data"]["shift"] = _merge(
            _SHIFT_DEFAULTS, resolved["data"]["shift"], "data.shift", master_seed
        )
    if resolved["data"]["idx"] is not None:
        idx = resolved["data"]["idx"]
        if not isinstance(idx, dict):
            raise ConfigError("data.idx must be an object of per-split file pairs")
        for split, paths in idx.items():
            if split not in ("train", "val", "test"):
                raise ConfigError(f"unknown key 'data.idx.{split}'")
            for k in paths:
                if k not in ("images", "labels"):
                    raise ConfigError(f"unknown key 'data.idx.{split}.{k}'")
    return _build(resolved)


def parse_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return parse_config_dict(raw)
