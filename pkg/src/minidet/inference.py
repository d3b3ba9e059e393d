"""Prompt resolution, region proposals, scoring, and decoupled deployment.

A prompt is either a text string, a set of visual exemplars, or both. At
inference time only the two contrastive encoders are consulted, so dropping
the frozen teacher (deploy) can never change a detection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, Scene, canonical_json
from .embedding import (
    DeployedModel,
    EncoderBundle,
    average_embeddings,
    encode,
    featurize_region,
    featurize_text,
)
from .geometry import Box, iou, iou_matrix, nms

TEXT = "text"
VISUAL_GENERIC = "visual-generic"
VISUAL_INTERACTIVE = "visual-interactive"
ENSEMBLE = "ensemble"
PROMPT_MODES = (TEXT, VISUAL_GENERIC, VISUAL_INTERACTIVE, ENSEMBLE)


@dataclass(frozen=True)
class PromptSpec:
    mode: str
    text: str | None = None
    exemplars: tuple[tuple[int, Box], ...] = ()
    n: int | None = None

    def __post_init__(self):
        if self.mode not in PROMPT_MODES:
            raise ValueError(f"unknown prompt mode {self.mode!r}")
        if self.mode in (TEXT, ENSEMBLE) and not self.text:
            raise ValueError(f"{self.mode} prompt requires text")
        if self.mode in (VISUAL_GENERIC, VISUAL_INTERACTIVE, ENSEMBLE) and not self.exemplars:
            raise ValueError(f"{self.mode} prompt requires exemplars")
        if self.mode == VISUAL_INTERACTIVE and len(self.exemplars) != 1:
            raise ValueError("visual-interactive prompts take exactly one exemplar")


@dataclass(frozen=True)
class Detection:
    scene_id: int
    category_id: int
    box: Box
    score: float
    mode: str = TEXT
    transform: str | None = None
    original_category_id: int | None = None


@dataclass
class ProposalConfig:
    """Candidate-region source: ground-truth boxes, a sliding grid, or both."""

    mode: str = "oracle"  # oracle | grid | combined
    window_fractions: tuple[float, ...] = (0.25, 0.375)
    stride_fraction: float = 0.5
    dedup_iou: float = 0.95

    def validate(self):
        if self.mode not in ("oracle", "grid", "combined"):
            raise ValueError(f"unknown proposal mode {self.mode!r}")
        if not (0 < self.stride_fraction <= 1):
            raise ValueError("stride fraction must lie in (0, 1]")


@dataclass
class DetectConfig:
    score_threshold: float = 0.5
    nms_iou: float = 0.5
    nms_enabled: bool = True
    combiner: str = "max"  # max | mean | weighted
    text_weight: float = 0.5
    proposals: ProposalConfig = field(default_factory=ProposalConfig)

    def validate(self):
        if not (0.0 <= self.score_threshold <= 1.0):
            raise ValueError("score threshold must lie in [0, 1]")
        if not (0.0 <= self.nms_iou <= 1.0):
            raise ValueError("NMS IoU threshold must lie in [0, 1]")
        if self.combiner not in ("max", "mean", "weighted"):
            raise ValueError(f"unknown combiner {self.combiner!r}")
        self.proposals.validate()


Model = EncoderBundle | DeployedModel


def deploy(bundle: EncoderBundle) -> DeployedModel:
    """Strip the frozen teacher; contrastive parameters are copied verbatim."""
    return DeployedModel(
        contrastive_text=bundle.contrastive_text.copy(),
        contrastive_visual=bundle.contrastive_visual.copy(),
        tokenizer=bundle.tokenizer,
        featurizer=bundle.featurizer,
        config_hash=bundle.config_hash,
        step=bundle.step,
    )


def _exemplar_embedding(model: Model, dataset: Dataset, scene_id: int, box: Box) -> np.ndarray:
    scene = dataset.scenes[scene_id]
    feat = featurize_region(scene, box, model.featurizer, dataset.seed or 0)
    return encode(model.contrastive_visual, feat)


def resolve_prompt(model: Model, spec: PromptSpec, dataset: Dataset):
    """Turn a prompt spec into its query embedding.

    Returns a single embedding, except for ensemble mode which returns a
    (text_embedding, visual_embedding) pair.
    """
    if spec.mode == TEXT:
        return encode(model.contrastive_text, featurize_text(model.tokenizer, spec.text))
    if spec.mode == VISUAL_INTERACTIVE:
        sid, box = spec.exemplars[0]
        return _exemplar_embedding(model, dataset, sid, box)
    if spec.mode == VISUAL_GENERIC:
        n = spec.n if spec.n is not None else len(spec.exemplars)
        if n > len(spec.exemplars):
            raise ValueError(
                f"requested {n} exemplars but only {len(spec.exemplars)} are available"
            )
        chosen = spec.exemplars[:n]
        return average_embeddings(
            [_exemplar_embedding(model, dataset, sid, box) for sid, box in chosen]
        )
    text_q = encode(model.contrastive_text, featurize_text(model.tokenizer, spec.text))
    visual_spec = PromptSpec(mode=VISUAL_GENERIC, exemplars=spec.exemplars, n=spec.n)
    return text_q, resolve_prompt(model, visual_spec, dataset)


def propose_regions(dataset: Dataset, scene: Scene, config: ProposalConfig | None = None) -> list[Box]:
    """Candidate boxes for a scene, deduplicated at high IoU.

    Oracle mode returns the annotated boxes; grid mode slides windows of the
    configured sizes; combined unions the two (oracle boxes first).
    """
    config = config or ProposalConfig()
    config.validate()
    boxes: list[Box] = []
    if config.mode in ("oracle", "combined"):
        boxes.extend(a.box for a in dataset.scene_annotations(scene.id))
    if config.mode in ("grid", "combined"):
        for frac in config.window_fractions:
            w = frac * scene.width
            h = frac * scene.height
            if w <= 0 or h <= 0 or w > scene.width or h > scene.height:
                continue
            for x in _grid_positions(scene.width, w, config.stride_fraction):
                for y in _grid_positions(scene.height, h, config.stride_fraction):
                    boxes.append(Box(x, y, x + w, y + h))
    return _dedup(boxes, config.dedup_iou)


def _grid_positions(extent: float, window: float, stride_fraction: float) -> list[float]:
    stride = window * stride_fraction
    positions = []
    x = 0.0
    while x + window <= extent + 1e-9:
        positions.append(min(x, extent - window))
        x += stride
    last = extent - window
    if not positions or abs(positions[-1] - last) > 1e-9:
        positions.append(last)
    return positions


def _dedup(boxes: list[Box], thr: float) -> list[Box]:
    kept: list[Box] = []
    for b in boxes:
        if all(iou(b, k) <= thr for k in kept):
            kept.append(b)
    return kept


def _combine(text_scores: np.ndarray, visual_scores: np.ndarray, config: DetectConfig) -> np.ndarray:
    if config.combiner == "max":
        return np.maximum(text_scores, visual_scores)
    if config.combiner == "mean":
        return 0.5 * (text_scores + visual_scores)
    w = config.text_weight
    return w * text_scores + (1.0 - w) * visual_scores


def detect(
    model: Model,
    dataset: Dataset,
    scene: Scene,
    prompts: list[tuple[int, PromptSpec]],
    config: DetectConfig | None = None,
    proposals: list[Box] | None = None,
) -> list[Detection]:
    """Score every proposal against every prompt; threshold, then per-category NMS.

    Scores map cosine similarity into [0, 1] via (cos + 1) / 2. For a
    visual-interactive prompt the exemplar's own region is excluded from the
    candidates: the task is finding the *other* instances in the scene.
    Callers may pass an explicit proposal list (tiled inference does).
    """
    config = config or DetectConfig()
    config.validate()
    if proposals is None:
        proposals = propose_regions(dataset, scene, config.proposals)
    if not proposals:
        return []
    seed = dataset.seed or 0
    feats = np.stack([featurize_region(scene, b, model.featurizer, seed) for b in proposals])
    from .embedding import forward

    region_embs = forward(model.contrastive_visual, feats).Y

    raw: list[Detection] = []
    for category_id, spec in prompts:
        keep_mask = np.ones(len(proposals), dtype=bool)
        if spec.mode == VISUAL_INTERACTIVE:
            ex_sid, ex_box = spec.exemplars[0]
            if ex_sid != scene.id:
                raise ValueError("visual-interactive exemplar must come from the query scene")
            for i, b in enumerate(proposals):
                if iou(b, ex_box) >= 0.95:
                    keep_mask[i] = False
        query = resolve_prompt(model, spec, dataset)
        if spec.mode == ENSEMBLE:
            text_q, visual_q = query
            scores = _combine(
                (region_embs @ text_q + 1.0) / 2.0,
                (region_embs @ visual_q + 1.0) / 2.0,
                config,
            )
        else:
            scores = (region_embs @ query + 1.0) / 2.0
        for i, box in enumerate(proposals):
            if keep_mask[i] and scores[i] >= config.score_threshold:
                raw.append(
                    Detection(
                        scene_id=scene.id,
                        category_id=category_id,
                        box=box,
                        score=float(scores[i]),
                        mode=spec.mode,
                    )
                )
    if config.nms_enabled:
        raw = per_category_nms(raw, config.nms_iou)
    return sort_detections(raw)


def per_category_nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """NMS applied independently within each (scene, category) group."""
    groups: dict[tuple[int, int], list[int]] = {}
    for i, d in enumerate(dets):
        groups.setdefault((d.scene_id, d.category_id), []).append(i)
    kept: list[int] = []
    for key in sorted(groups):
        idxs = groups[key]
        local = nms([(dets[i].box, dets[i].score) for i in idxs], iou_threshold)
        kept.extend(idxs[i] for i in local)
    return [dets[i] for i in sorted(kept)]


def sort_detections(dets: list[Detection]) -> list[Detection]:
    order = sorted(
        range(len(dets)),
        key=lambda i: (dets[i].scene_id, dets[i].category_id, -dets[i].score, i),
    )
    return [dets[i] for i in order]


# -- detection results file ----------------------------------------------------


def detections_payload(dets: list[Detection]) -> list[dict]:
    return [
        {
            "image_id": d.scene_id,
            "category_id": d.category_id,
            "bbox": d.box.as_xywh(),
            "score": d.score,
        }
        for d in dets
    ]


def write_detections(dets: list[Detection], path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(detections_payload(dets)))


def read_detections(path) -> list[Detection]:
    with open(path, "r", encoding="utf-8") as fh:
        records = json.load(fh)
    out = []
    for rec in records:
        x, y, w, h = (float(v) for v in rec["bbox"])
        out.append(
            Detection(
                scene_id=int(rec["image_id"]),
                category_id=int(rec["category_id"]),
                box=Box.from_xywh(x, y, w, h),
                score=float(rec["score"]),
                mode=rec.get("mode", "file"),
            )
        )
    return out
