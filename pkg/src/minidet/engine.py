"""Data engine: subset selection and bidirectional auto-labeling.

Selection greedily maximizes a blend of per-scene uncertainty and
facility-location diversity gain over scene-level embeddings. Auto-labeling
runs in two directions: captions -> phrases -> localization (forward) and
proposals -> region captions -> alignment filtering (backward), with every
external model behind a pluggable oracle interface that ships with
deterministic desk-scale implementations.
"""

from __future__ import annotations

import subprocess
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .dataset import Annotation, Category, Dataset, Scene
from .embedding import encode, featurize_region, featurize_text, forward
from .geometry import Box, iou
from .inference import (
    ENSEMBLE,
    TEXT,
    DetectConfig,
    Model,
    PromptSpec,
    detect,
)


# -- subset selection -----------------------------------------------------------------


@dataclass
class SelectionConfig:
    budget: int = 10
    alpha: float = 0.5  # weight on uncertainty; 1 - alpha weights diversity gain
    uncertainty: str = "entropy"  # entropy | margin

    def validate(self):
        if self.budget < 0:
            raise ValueError("budget must be non-negative")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must lie in [0, 1]")
        if self.uncertainty not in ("entropy", "margin"):
            raise ValueError(f"unknown uncertainty mode {self.uncertainty!r}")


def scene_embedding(model: Model, dataset: Dataset, scene: Scene) -> np.ndarray:
    """Normalized mean of the scene's annotated-region embeddings; scenes
    without annotations fall back to a whole-scene crop."""
    anns = dataset.scene_annotations(scene.id)
    boxes = [a.box for a in anns] or [scene.bounds()]
    seed = dataset.seed or 0
    feats = np.stack([featurize_region(scene, b, model.featurizer, seed) for b in boxes])
    embs = forward(model.contrastive_visual, feats).Y
    mean = embs.mean(axis=0)
    return mean / np.linalg.norm(mean)


def scene_uncertainty(model: Model, dataset: Dataset, scene: Scene, mode: str = "entropy") -> float:
    """Uncertainty of the scene's max-region category-similarity distribution.

    Each category's evidence is its best region similarity (mapped to [0,1]);
    entropy mode returns the normalized entropy of that distribution, margin
    mode returns one minus the top-two gap.
    """
    cats = sorted(dataset.categories)
    if not cats:
        return 0.0
    anns = dataset.scene_annotations(scene.id)
    boxes = [a.box for a in anns] or [scene.bounds()]
    seed = dataset.seed or 0
    feats = np.stack([featurize_region(scene, b, model.featurizer, seed) for b in boxes])
    region_embs = forward(model.contrastive_visual, feats).Y
    queries = np.stack(
        [
            encode(model.contrastive_text, featurize_text(model.tokenizer, dataset.categories[c].name))
            for c in cats
        ]
    )
    sims = (region_embs @ queries.T + 1.0) / 2.0  # regions x categories
    evidence = sims.max(axis=0)
    if mode == "margin":
        if len(evidence) < 2:
            return 0.0
        top = np.sort(evidence)[::-1]
        return float(1.0 - (top[0] - top[1]))
    p = evidence / evidence.sum()
    entropy = -float(np.sum(p * np.log(p + 1e-15)))
    return entropy / np.log(len(cats)) if len(cats) > 1 else 0.0


def facility_location_value(similarity: np.ndarray, selected: list[int]) -> float:
    """Sum over the pool of each item's best similarity to the selected set."""
    if not selected:
        return 0.0
    return float(similarity[:, selected].max(axis=1).sum())


def select_subset(
    dataset: Dataset,
    config: SelectionConfig,
    model: Model,
    scene_ids=None,
) -> list[int]:
    """Greedy budgeted selection maximizing
    alpha * uncertainty + (1 - alpha) * facility-location marginal gain.

    Similarities use the (cos+1)/2 mapping so the facility-location term is
    non-negative monotone submodular and the greedy (1 - 1/e) guarantee
    holds. The gain is normalized by pool size to share scale with the
    normalized uncertainty. Ties break toward the lower scene id.
    """
    config.validate()
    pool = sorted(scene_ids if scene_ids is not None else dataset.scenes)
    if config.budget > len(pool):
        raise ValueError(f"budget {config.budget} exceeds pool size {len(pool)}")
    if config.budget == 0 or not pool:
        return []
    embs = np.stack([scene_embedding(model, dataset, dataset.scenes[s]) for s in pool])
    similarity = (embs @ embs.T + 1.0) / 2.0
    uncertainty = np.array(
        [scene_uncertainty(model, dataset, dataset.scenes[s], config.uncertainty) for s in pool]
    )
    n = len(pool)
    coverage = np.zeros(n)
    selected: list[int] = []
    selected_pos: list[int] = []
    for _ in range(config.budget):
        gains = np.maximum(similarity - coverage[:, None], 0.0).sum(axis=0) / n
        objective = config.alpha * uncertainty + (1.0 - config.alpha) * gains
        objective[selected_pos] = -np.inf
        best = int(np.argmax(objective))  # argmax -> first max -> lowest scene id
        selected_pos.append(best)
        selected.append(pool[best])
        coverage = np.maximum(coverage, similarity[:, best])
    return selected


# -- labeling oracles ------------------------------------------------------------------


class OracleError(RuntimeError):
    """An oracle call failed or returned malformed output."""


@dataclass
class LabelingOracles:
    """Pluggable stand-ins for the external models in the labeling pipeline."""

    captioner: Callable[[Scene], str]
    phrase_extractor: Callable[[str], list[str]]
    physical_filter: Callable[[str], bool]
    proposer: Callable[[Scene], list[Box]]
    region_captioner: Callable[[Scene, Box], str]
    alignment_scorer: Callable[[Scene, Box, str], float]


_ARTICLES = ("a ", "an ", "the ")


def _strip_article(phrase: str) -> str:
    p = phrase.strip()
    for art in _ARTICLES:
        if p.startswith(art):
            return p[len(art):]
    return p


def build_desk_oracles(model: Model, dataset: Dataset) -> LabelingOracles:
    """Deterministic oracles that read synthetic scene content directly."""
    shapes = set(model.featurizer.shapes)
    seed = dataset.seed or 0

    def captioner(scene: Scene) -> str:
        if scene.objects is None:
            raise OracleError(f"scene {scene.id} has no synthetic content to caption")
        if not scene.objects:
            return "an empty scene"
        return "a scene with " + " and ".join(
            f"a {o.color} {o.shape}" for o in scene.objects
        )

    def phrase_extractor(caption: str) -> list[str]:
        head = caption.split("with ", 1)[-1]
        return [_strip_article(p) for p in head.split(" and ") if _strip_article(p)]

    def physical_filter(phrase: str) -> bool:
        return phrase.split()[-1] in shapes if phrase.split() else False

    def proposer(scene: Scene) -> list[Box]:
        if scene.objects is None:
            raise OracleError(f"scene {scene.id} has no synthetic content to propose from")
        return [o.box for o in scene.objects]

    def region_captioner(scene: Scene, box: Box) -> str:
        best, best_iou = None, 0.0
        for o in scene.objects or ():
            v = iou(box, o.box)
            if v > best_iou:
                best, best_iou = o, v
        if best is None:
            return "background"
        return f"{best.color} {best.shape}"

    def alignment_scorer(scene: Scene, box: Box, caption: str) -> float:
        region = encode(
            model.contrastive_visual, featurize_region(scene, box, model.featurizer, seed)
        )
        text = encode(model.contrastive_text, featurize_text(model.tokenizer, caption))
        return float((region @ text + 1.0) / 2.0)

    return LabelingOracles(
        captioner=captioner,
        phrase_extractor=phrase_extractor,
        physical_filter=physical_filter,
        proposer=proposer,
        region_captioner=region_captioner,
        alignment_scorer=alignment_scorer,
    )


def _run_command(command: list[str], request: str, timeout: float) -> str:
    proc = subprocess.run(
        command, input=request, capture_output=True, text=True, timeout=timeout
    )
    if proc.returncode != 0:
        raise OracleError(f"oracle command exited with status {proc.returncode}")
    lines = [l for l in proc.stdout.splitlines() if l.strip()]
    if len(lines) != 1:
        raise OracleError(f"oracle returned {len(lines)} lines, expected exactly one")
    return lines[0].strip()


def external_captioner(command: list[str], timeout: float = 30.0):
    def captioner(scene: Scene) -> str:
        return _run_command(command, f"{scene.id}\n", timeout)

    return captioner


def external_phrase_extractor(command: list[str], timeout: float = 30.0):
    def extractor(caption: str) -> list[str]:
        line = _run_command(command, caption + "\n", timeout)
        return [p.strip() for p in line.split("\t") if p.strip()]

    return extractor


def external_physical_filter(command: list[str], timeout: float = 30.0):
    def physical(phrase: str) -> bool:
        line = _run_command(command, phrase + "\n", timeout)
        if line not in ("keep", "drop"):
            raise OracleError(f"physical filter must answer keep/drop, got {line!r}")
        return line == "keep"

    return physical


def external_proposer(command: list[str], timeout: float = 30.0):
    def proposer(scene: Scene) -> list[Box]:
        line = _run_command(command, f"{scene.id} {scene.width} {scene.height}\n", timeout)
        boxes = []
        for part in line.split(";"):
            part = part.strip()
            if not part:
                continue
            try:
                x, y, w, h = (float(v) for v in part.split(","))
            except ValueError as exc:
                raise OracleError(f"malformed box {part!r}") from exc
            boxes.append(Box.from_xywh(x, y, w, h))
        return boxes

    return proposer


def external_region_captioner(command: list[str], timeout: float = 30.0):
    def captioner(scene: Scene, box: Box) -> str:
        req = f"{scene.id} {box.x0} {box.y0} {box.x1} {box.y1}\n"
        return _run_command(command, req, timeout)

    return captioner


def external_alignment_scorer(command: list[str], timeout: float = 30.0):
    def scorer(scene: Scene, box: Box, caption: str) -> float:
        req = f"{scene.id} {box.x0} {box.y0} {box.x1} {box.y1}\t{caption}\n"
        line = _run_command(command, req, timeout)
        try:
            value = float(line)
        except ValueError as exc:
            raise OracleError(f"alignment score must be a decimal, got {line!r}") from exc
        if not (0.0 <= value <= 1.0):
            raise OracleError(f"alignment score {value} outside [0, 1]")
        return value

    return scorer


# -- auto-labeling ----------------------------------------------------------------------


@dataclass
class LabelFilterConfig:
    min_rel_area: float = 5e-4
    alignment_floor: float = 0.3

    def validate(self):
        if not (0.0 <= self.min_rel_area <= 1.0) or not (0.0 <= self.alignment_floor <= 1.0):
            raise ValueError("label filter bounds must lie in [0, 1]")


@dataclass
class AutoLabelResult:
    annotations: list[Annotation]
    new_categories: list[Category]
    errors: dict[int, str] = field(default_factory=dict)


def _passes_filters(
    scene: Scene, box: Box, caption: str, oracles: LabelingOracles, filters: LabelFilterConfig
) -> bool:
    rel_area = box.area() / (scene.width * scene.height)
    if rel_area < filters.min_rel_area:
        return False
    return oracles.alignment_scorer(scene, box, caption) >= filters.alignment_floor


def _category_for_phrase(
    dataset: Dataset, phrase: str, created: dict[str, Category]
) -> Category:
    existing = dataset.category_by_name(phrase)
    if existing is not None:
        return existing
    if phrase in created:
        return created[phrase]
    new_id = max(
        [dataset.next_category_id() - 1] + [c.id for c in created.values()]
    ) + 1
    cat = Category(id=new_id, name=phrase, description=None)
    created[phrase] = cat
    return cat


def autolabel_forward(
    dataset: Dataset,
    oracles: LabelingOracles,
    model: Model,
    filters: LabelFilterConfig | None = None,
    scene_ids=None,
    detect_config: DetectConfig | None = None,
) -> AutoLabelResult:
    """Caption -> noun phrases -> physical filter -> prompt-driven localization.

    Each surviving phrase is localized with a text prompt, ensembled with a
    visual exemplar when one is indexed for that category. Oracle failures
    are recorded per scene and the pipeline continues.
    """
    filters = filters or LabelFilterConfig()
    filters.validate()
    detect_config = detect_config or DetectConfig(
        score_threshold=0.5, proposals=replace(DetectConfig().proposals, mode="grid")
    )
    index = dataset.exemplar_index("train")
    annotations: list[Annotation] = []
    created: dict[str, Category] = {}
    errors: dict[int, str] = {}
    for sid in sorted(scene_ids if scene_ids is not None else dataset.scenes):
        scene = dataset.scenes[sid]
        try:
            caption = oracles.captioner(scene)
            phrases = sorted(
                {p for p in oracles.phrase_extractor(caption) if oracles.physical_filter(p)}
            )
            for phrase in phrases:
                cat = _category_for_phrase(dataset, phrase, created)
                exemplars = tuple(
                    (esid, dataset.annotations[aid].box)
                    for esid, aid in index.get(cat.id, [])
                    if esid != sid
                )[:4]
                if exemplars:
                    spec = PromptSpec(mode=ENSEMBLE, text=phrase, exemplars=exemplars)
                else:
                    spec = PromptSpec(mode=TEXT, text=phrase)
                dets = detect(model, dataset, scene, [(cat.id, spec)], detect_config)
                if not dets:
                    continue
                best = max(dets, key=lambda d: d.score)
                if _passes_filters(scene, best.box, phrase, oracles, filters):
                    annotations.append(
                        Annotation(
                            id=0,
                            scene_id=sid,
                            category_id=cat.id,
                            box=best.box,
                            provenance="auto-label-forward",
                        )
                    )
        except (OracleError, subprocess.TimeoutExpired) as exc:
            errors[sid] = str(exc)
    return AutoLabelResult(
        annotations=annotations, new_categories=sorted(created.values(), key=lambda c: c.id),
        errors=errors,
    )


def autolabel_backward(
    dataset: Dataset,
    oracles: LabelingOracles,
    model: Model,
    filters: LabelFilterConfig | None = None,
    scene_ids=None,
) -> AutoLabelResult:
    """Proposals -> attribute captions -> alignment scoring -> filtered labels."""
    filters = filters or LabelFilterConfig()
    filters.validate()
    annotations: list[Annotation] = []
    created: dict[str, Category] = {}
    errors: dict[int, str] = {}
    for sid in sorted(scene_ids if scene_ids is not None else dataset.scenes):
        scene = dataset.scenes[sid]
        try:
            for box in oracles.proposer(scene):
                caption = oracles.region_captioner(scene, box)
                if not oracles.physical_filter(caption):
                    continue
                if not _passes_filters(scene, box, caption, oracles, filters):
                    continue
                cat = _category_for_phrase(dataset, caption, created)
                annotations.append(
                    Annotation(
                        id=0,
                        scene_id=sid,
                        category_id=cat.id,
                        box=box,
                        provenance="auto-label-backward",
                    )
                )
        except (OracleError, subprocess.TimeoutExpired) as exc:
            errors[sid] = str(exc)
    return AutoLabelResult(
        annotations=annotations, new_categories=sorted(created.values(), key=lambda c: c.id),
        errors=errors,
    )


_PROVENANCE_RANK = {
    "ground-truth": 0,
    "pseudo-label": 1,
    "auto-label-forward": 2,
    "auto-label-backward": 3,
}


def merge_labels(
    dataset: Dataset,
    forward: AutoLabelResult | None = None,
    backward: AutoLabelResult | None = None,
) -> tuple[Dataset, dict[str, int]]:
    """Union ground truth with auto-labels, deduplicating at IoU >= 0.5.

    Within a duplicate group of the same category the higher-precedence
    provenance wins (ground truth > forward > backward). Idempotent: merging
    the merged dataset again changes nothing. Returns the enriched dataset
    and per-provenance kept counts.
    """
    categories = dict(dataset.categories)
    for result in (forward, backward):
        if result is None:
            continue
        for cat in result.new_categories:
            if cat.id in categories and categories[cat.id].name != cat.name:
                raise ValueError(f"category id collision on {cat.id}")
            categories.setdefault(cat.id, cat)
    candidates = [a for a in dataset.annotations.values()]
    if forward:
        candidates += forward.annotations
    if backward:
        candidates += backward.annotations
    candidates.sort(
        key=lambda a: (
            _PROVENANCE_RANK.get(a.provenance, 99),
            a.scene_id,
            a.category_id,
            a.box.x0,
            a.box.y0,
            a.box.x1,
            a.box.y1,
        )
    )
    kept: list[Annotation] = []
    for a in candidates:
        duplicate = any(
            k.scene_id == a.scene_id
            and k.category_id == a.category_id
            and iou(k.box, a.box) >= 0.5
            for k in kept
        )
        if not duplicate:
            kept.append(a)
    annotations: dict[int, Annotation] = {}
    counts: dict[str, int] = {}
    pending: list[Annotation] = []
    for a in kept:
        counts[a.provenance] = counts.get(a.provenance, 0) + 1
        # Annotations that already carry a unique id keep it, which makes the
        # merge idempotent; id-less additions are numbered afterwards.
        if a.id and a.id not in annotations:
            annotations[a.id] = a
        else:
            pending.append(a)
    next_id = max(annotations, default=0) + 1
    for a in sorted(pending, key=lambda a: (a.scene_id, a.category_id, a.box.x0, a.box.y0)):
        annotations[next_id] = replace(a, id=next_id)
        next_id += 1
    merged = Dataset(
        categories=categories,
        scenes=dict(dataset.scenes),
        annotations=annotations,
        splits={k: list(v) for k, v in dataset.splits.items()},
        synth=dataset.synth,
        seed=dataset.seed,
        extra=dict(dataset.extra),
    )
    merged.validate()
    return merged, counts
