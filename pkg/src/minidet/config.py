"""Run configuration: one defaults table, a dotted-key text format, overrides.

Every numeric default in the toolbox lives in DEFAULTS so it can be audited
in one place. Config files are UTF-8 text, one `dotted.key = json-value` per
line; `--set key=value` overrides win over the file, which wins over the
defaults. Unknown keys are rejected. Each command dumps the fully resolved
configuration next to its outputs so any run can be reproduced.
"""

from __future__ import annotations

import json

from .dataset import SynthConfig
from .embedding import ModelConfig
from .engine import LabelFilterConfig, SelectionConfig
from .evalkit import EvalConfig
from .fsod import TTAConfig
from .inference import DetectConfig, ProposalConfig
from .postproc import CascadeConfig
from .training import TrainingConfig


class ConfigError(ValueError):
    """Invalid, unknown, or malformed configuration input."""


DEFAULTS: dict = {
    "seed": 0,
    "workers": 0,  # 0 = auto; results are independent of worker count
    "synth": {
        "n_scenes": 60,
        "width": 128.0,
        "height": 128.0,
        "shapes": ["square", "circle", "triangle"],
        "colors": ["red", "green", "blue"],
        "n_domains": 1,
        "objects_per_scene": [2, 4],
        "object_size": [16.0, 48.0],
        "min_separation": 4.0,
        "noise": 0.05,
        "area_scale": 1.0,
        "split_fractions": [0.6, 0.2, 0.2],
        "max_placement_attempts": 200,
    },
    "model": {
        "dim": 32,
        "hidden": 64,
        "n_overflow": 8,
        "warmup_steps": 200,
        "warmup_lr": 0.5,
        "warmup_tau": 0.2,
    },
    "train": {
        "temperature": 0.07,
        "lambda_det": 1.0,
        "lambda_distill": 1.0,
        "lambda_align": 1.0,
        "learning_rate": 0.05,
        "batch_categories": 16,
        "batch_scenes": 8,
        "background_boxes": 2,
        "total_steps": 600,
    },
    "detect": {
        "score_threshold": 0.5,
        "nms_iou": 0.5,
        "nms_enabled": True,
        "combiner": "max",
        "text_weight": 0.5,
        "proposals": {
            "mode": "oracle",
            "window_fractions": [0.25, 0.375],
            "stride_fraction": 0.5,
            "dedup_iou": 0.95,
        },
    },
    "eval": {
        "max_dets": 100,
        "recall_points": 101,
        "visual_g_n": 8,
        "restrict_to_known": False,
    },
    "cascade": {
        "refine_and_tile": True,
        "background_filter": True,
        "batched_nms": True,
        "box_refine": True,
        "tile_rows": 2,
        "tile_cols": 2,
        "tile_overlap": 0.1,
        "min_tile_size": 8.0,
        "background_threshold": 0.5,
        "nms_iou": 0.5,
        "refiner": "oracle-snap",
        "snap_floor": 0.25,
        "prototype_n": 8,
    },
    "tta": {
        "scales": [0.8, 1.0, 1.2],
        "hflip": True,
        "merge_iou": 0.5,
    },
    "fsod": {
        "pseudo_floor": 0.9,
        "grid_step": 0.05,
        "default_threshold": 0.5,
        "visual_n": 8,
        "negatives": 2,
    },
    "select": {
        "budget": 10,
        "alpha": 0.5,
        "uncertainty": "entropy",
    },
    "labeling": {
        "min_rel_area": 5e-4,
        "alignment_floor": 0.3,
    },
}


def flatten(nested: dict, prefix: str = "") -> dict[str, object]:
    out: dict[str, object] = {}
    for key, value in nested.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, dotted + "."))
        else:
            out[dotted] = value
    return out


def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text  # bare strings are allowed


def parse_config_text(text: str) -> dict[str, object]:
    """Dotted-key lines -> flat {dotted: value}; '#' starts a comment."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = _parse_value(value)
    return values


def resolve(file_values: dict[str, object] | None = None, overrides=()) -> dict:
    """Defaults <- file <- --set overrides, with unknown keys rejected."""
    flat = flatten(DEFAULTS)
    merged = dict(flat)
    for source_name, source in (("config file", file_values or {}), ("override", None)):
        if source is None:
            source = {}
            for item in overrides:
                if "=" not in item:
                    raise ConfigError(f"--set expects key=value, got {item!r}")
                k, v = item.split("=", 1)
                source[k.strip()] = _parse_value(v)
        for key, value in source.items():
            if key not in flat:
                raise ConfigError(f"unknown configuration key {key!r} (from {source_name})")
            merged[key] = value
    nested: dict = {}
    for dotted, value in merged.items():
        parts = dotted.split(".")
        node = nested
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return nested


def load(path=None, overrides=()) -> dict:
    file_values = None
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                file_values = parse_config_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return resolve(file_values, overrides)


def render(resolved: dict) -> str:
    """Resolved configuration as sorted dotted-key lines (the reproducibility dump)."""
    lines = ["# format_version = 1"]
    for key, value in sorted(flatten(resolved).items()):
        lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


# -- builders ---------------------------------------------------------------------------


def synth_config(resolved: dict) -> SynthConfig:
    c = resolved["synth"]
    cfg = SynthConfig(
        n_scenes=int(c["n_scenes"]),
        width=float(c["width"]),
        height=float(c["height"]),
        shapes=tuple(c["shapes"]),
        colors=tuple(c["colors"]),
        n_domains=int(c["n_domains"]),
        objects_per_scene=tuple(int(v) for v in c["objects_per_scene"]),
        object_size=tuple(float(v) for v in c["object_size"]),
        min_separation=float(c["min_separation"]),
        noise=float(c["noise"]),
        area_scale=float(c["area_scale"]),
        split_fractions=tuple(float(v) for v in c["split_fractions"]),
        max_placement_attempts=int(c["max_placement_attempts"]),
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def model_config(resolved: dict) -> ModelConfig:
    c = resolved["model"]
    return ModelConfig(
        dim=int(c["dim"]),
        hidden=int(c["hidden"]),
        n_overflow=int(c["n_overflow"]),
        warmup_steps=int(c["warmup_steps"]),
        warmup_lr=float(c["warmup_lr"]),
        warmup_tau=float(c["warmup_tau"]),
    )


def training_config(resolved: dict) -> TrainingConfig:
    c = resolved["train"]
    cfg = TrainingConfig(
        temperature=float(c["temperature"]),
        lambda_det=float(c["lambda_det"]),
        lambda_distill=float(c["lambda_distill"]),
        lambda_align=float(c["lambda_align"]),
        learning_rate=float(c["learning_rate"]),
        batch_categories=int(c["batch_categories"]),
        batch_scenes=int(c["batch_scenes"]),
        background_boxes=int(c["background_boxes"]),
        total_steps=int(c["total_steps"]),
        seed=int(resolved["seed"]),
        model=model_config(resolved),
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def detect_config(resolved: dict) -> DetectConfig:
    c = resolved["detect"]
    p = c["proposals"]
    cfg = DetectConfig(
        score_threshold=float(c["score_threshold"]),
        nms_iou=float(c["nms_iou"]),
        nms_enabled=bool(c["nms_enabled"]),
        combiner=str(c["combiner"]),
        text_weight=float(c["text_weight"]),
        proposals=ProposalConfig(
            mode=str(p["mode"]),
            window_fractions=tuple(float(v) for v in p["window_fractions"]),
            stride_fraction=float(p["stride_fraction"]),
            dedup_iou=float(p["dedup_iou"]),
        ),
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def eval_config(resolved: dict) -> EvalConfig:
    c = resolved["eval"]
    cfg = EvalConfig(
        max_dets=int(c["max_dets"]),
        recall_points=int(c["recall_points"]),
        visual_g_n=int(c["visual_g_n"]),
        restrict_to_known=bool(c["restrict_to_known"]),
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def cascade_config(resolved: dict) -> CascadeConfig:
    c = resolved["cascade"]
    cfg = CascadeConfig(
        refine_and_tile=bool(c["refine_and_tile"]),
        background_filter=bool(c["background_filter"]),
        batched_nms=bool(c["batched_nms"]),
        box_refine=bool(c["box_refine"]),
        tile_rows=int(c["tile_rows"]),
        tile_cols=int(c["tile_cols"]),
        tile_overlap=float(c["tile_overlap"]),
        min_tile_size=float(c["min_tile_size"]),
        background_threshold=float(c["background_threshold"]),
        nms_iou=float(c["nms_iou"]),
        refiner=str(c["refiner"]),
        snap_floor=float(c["snap_floor"]),
        prototype_n=int(c["prototype_n"]),
        detect=detect_config(resolved),
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def tta_config(resolved: dict) -> TTAConfig:
    c = resolved["tta"]
    cfg = TTAConfig(
        scales=tuple(float(v) for v in c["scales"]),
        hflip=bool(c["hflip"]),
        merge_iou=float(c["merge_iou"]),
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def selection_config(resolved: dict, budget: int | None = None) -> SelectionConfig:
    c = resolved["select"]
    cfg = SelectionConfig(
        budget=int(c["budget"] if budget is None else budget),
        alpha=float(c["alpha"]),
        uncertainty=str(c["uncertainty"]),
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def label_filter_config(resolved: dict) -> LabelFilterConfig:
    c = resolved["labeling"]
    cfg = LabelFilterConfig(
        min_rel_area=float(c["min_rel_area"]),
        alignment_floor=float(c["alignment_floor"]),
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg
