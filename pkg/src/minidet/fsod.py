"""Few-shot adaptation toolbox.

Covers the inference-side levers used when only a handful of boxes per
category exist: paraphrased and negative text prompts, in-image vs out-image
visual prompting, conservative pseudo-labeling of unlabeled known categories,
test-time augmentation, per-category confidence threshold search, and the
exhaustive 2x2x2x3 factor grid for picking a checkpoint per domain.
"""

from __future__ import annotations

import subprocess
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Annotation, Category, Dataset
from .evalkit import EvalConfig, evaluate_detections
from .geometry import Box, apply_transform, hflip_transform, inverse_transform, iou, scale_transform
from .inference import (
    ENSEMBLE,
    TEXT,
    VISUAL_GENERIC,
    DetectConfig,
    Detection,
    Model,
    PromptSpec,
    detect,
    propose_regions,
    sort_detections,
)
from .postproc import batched_nms

# Non-physical vocabulary for negative prompts; disjoint from shape-world names.
NEGATIVE_PROMPT_POOL = (
    "silence",
    "rumor",
    "breeze",
    "melody",
    "shadow play",
    "daydream",
    "echo",
    "minute",
)


class ParaphraseFormatError(ValueError):
    """Paraphraser output violates the [term] = [definition] line format."""


def format_prompt_line(term: str, definition: str) -> str:
    return f"{term} = {definition}"


def parse_prompt_line(line: str) -> tuple[str, str]:
    if " = " not in line:
        raise ParaphraseFormatError(f"malformed paraphrase line: {line!r}")
    term, definition = line.split(" = ", 1)
    if not term.strip() or not definition.strip():
        raise ParaphraseFormatError(f"malformed paraphrase line: {line!r}")
    return term.strip(), definition.strip()


class RuleParaphraser:
    """Synonym-table paraphraser; deterministic word-for-word substitution."""

    def __init__(self, synonyms: dict[str, str] | None = None):
        self.synonyms = dict(synonyms or {})

    def run(self, lines: list[str]) -> list[str]:
        out = []
        for line in lines:
            term, definition = parse_prompt_line(line)
            words = [self.synonyms.get(w, w) for w in definition.split()]
            out.append(format_prompt_line(term, " ".join(words)))
        return out


class CommandParaphraser:
    """Out-of-process paraphraser speaking the line format on stdin/stdout."""

    def __init__(self, command: list[str], timeout: float = 30.0):
        self.command = list(command)
        self.timeout = timeout

    def run(self, lines: list[str]) -> list[str]:
        proc = subprocess.run(
            self.command,
            input="\n".join(lines) + "\n",
            capture_output=True,
            text=True,
            timeout=self.timeout,
        )
        if proc.returncode != 0:
            raise RuntimeError(f"paraphrase command failed with status {proc.returncode}")
        return [l for l in proc.stdout.splitlines() if l.strip()]


@dataclass
class PromptTable:
    """Per-category prompt variants (original first) plus negative prompts."""

    prompts: dict[int, list[str]]
    negatives: list[str] = field(default_factory=list)

    def variants(self, category_id: int) -> list[str]:
        return list(self.prompts.get(category_id, []))


def augment_prompts(
    categories: list[Category],
    paraphraser,
    negatives: int = 2,
    negative_pool=NEGATIVE_PROMPT_POOL,
    seed: int = 0,
) -> PromptTable:
    """Paraphrase every category and sample marked-non-matching negatives.

    A paraphrase that collides with a *different* category's name is an
    ambiguity error; one equal to its own original is simply dropped.
    """
    lines = [
        format_prompt_line(c.name, c.description or c.name) for c in categories
    ]
    out_lines = paraphraser.run(lines)
    if len(out_lines) != len(lines):
        raise ParaphraseFormatError(
            f"paraphraser returned {len(out_lines)} lines for {len(lines)} terms"
        )
    names = {c.name: c.id for c in categories}
    prompts: dict[int, list[str]] = {c.id: [c.name] for c in categories}
    for cat, line in zip(categories, out_lines):
        term, paraphrase = parse_prompt_line(line)
        if term != cat.name:
            raise ParaphraseFormatError(
                f"paraphraser reordered terms: expected {cat.name!r}, got {term!r}"
            )
        clash = names.get(paraphrase)
        if clash is not None and clash != cat.id:
            raise ValueError(
                f"ambiguity: paraphrase {paraphrase!r} for {cat.name!r} "
                f"equals another category's name"
            )
        if paraphrase not in prompts[cat.id]:
            prompts[cat.id].append(paraphrase)
    negative_pool = [p for p in negative_pool if p not in names]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 83]))
    n = min(negatives, len(negative_pool))
    chosen = sorted(rng.choice(len(negative_pool), size=n, replace=False).tolist()) if n else []
    return PromptTable(prompts=prompts, negatives=[negative_pool[i] for i in chosen])


# -- visual prompting ---------------------------------------------------------------


@dataclass
class VisualPrompts:
    exemplars: list[tuple[int, Box]]
    fallback_to_in_image: bool = False


def build_visual_prompts(
    dataset: Dataset,
    mode: str,
    category_id: int,
    query_scene_id: int,
    max_exemplars: int = 8,
    seed: int = 0,
) -> VisualPrompts:
    """Exemplar boxes for one category under the in-image or out-image policy.

    In-image exemplars come from the query scene itself; out-image exemplars
    are drawn (seeded) from other train scenes. When the category exists in
    no other scene, out-image falls back to in-image with a flag.
    """
    if mode not in ("in-image", "out-image"):
        raise ValueError(f"unknown visual prompt mode {mode!r}")
    in_image = [
        (a.scene_id, a.box)
        for a in dataset.scene_annotations(query_scene_id)
        if a.category_id == category_id
    ]
    if mode == "in-image":
        return VisualPrompts(exemplars=in_image[:max_exemplars])
    index = dataset.exemplar_index("train")
    others = [
        (sid, dataset.annotations[aid].box)
        for sid, aid in index.get(category_id, [])
        if sid != query_scene_id
    ]
    if not others:
        return VisualPrompts(exemplars=in_image[:max_exemplars], fallback_to_in_image=True)
    rng = np.random.default_rng(
        np.random.SeedSequence([int(seed), 29, int(category_id), int(query_scene_id)])
    )
    order = rng.permutation(len(others))[:max_exemplars]
    return VisualPrompts(exemplars=[others[i] for i in sorted(order.tolist())])


# -- pseudo-labeling -----------------------------------------------------------------


def pseudo_label(
    model: Model,
    dataset: Dataset,
    confidence_floor: float = 0.9,
    detect_config: DetectConfig | None = None,
    split: str = "train",
) -> list[Annotation]:
    """Conservative pseudo-labels for unlabeled-but-known categories.

    Only detections at or above the confidence floor survive, and never ones
    overlapping an existing annotation at IoU >= 0.5. Provenance is marked so
    the additions stay distinguishable from ground truth.
    """
    if not (0.0 < confidence_floor <= 1.0):
        raise ValueError("confidence floor must lie in (0, 1]")
    detect_config = detect_config or DetectConfig(
        score_threshold=confidence_floor,
        proposals=replace(DetectConfig().proposals, mode="grid"),
    )
    out: list[Annotation] = []
    for sid in dataset.split_scene_ids(split) or sorted(dataset.scenes):
        scene = dataset.scenes[sid]
        if scene.known_category_ids is None:
            continue
        existing = dataset.scene_annotations(sid)
        labeled = {a.category_id for a in existing}
        targets = sorted(set(scene.known_category_ids) - labeled)
        if not targets:
            continue
        prompts = [
            (cid, PromptSpec(mode=TEXT, text=dataset.categories[cid].name))
            for cid in targets
        ]
        for d in detect(model, dataset, scene, prompts, detect_config):
            if d.score < confidence_floor:
                continue
            if any(iou(d.box, a.box) >= 0.5 for a in existing):
                continue
            out.append(
                Annotation(
                    id=0,
                    scene_id=sid,
                    category_id=d.category_id,
                    box=d.box,
                    provenance="pseudo-label",
                )
            )
    return out


def with_extra_annotations(dataset: Dataset, extra: list[Annotation]) -> Dataset:
    """Copy of the dataset with additional annotations appended (fresh ids)."""
    annotations = dict(dataset.annotations)
    next_id = dataset.next_annotation_id()
    for a in sorted(extra, key=lambda a: (a.scene_id, a.category_id, a.box.x0, a.box.y0)):
        annotations[next_id] = replace(a, id=next_id)
        next_id += 1
    return Dataset(
        categories=dict(dataset.categories),
        scenes=dict(dataset.scenes),
        annotations=annotations,
        splits={k: list(v) for k, v in dataset.splits.items()},
        synth=dataset.synth,
        seed=dataset.seed,
        extra=dict(dataset.extra),
    )


# -- test-time augmentation -----------------------------------------------------------


@dataclass
class TTAConfig:
    scales: tuple[float, ...] = (0.8, 1.0, 1.2)
    hflip: bool = True
    merge_iou: float = 0.5

    def validate(self):
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError("scales must be positive")
        if 1.0 not in self.scales:
            raise ValueError("the identity scale 1.0 must be present")
        if not (0.0 <= self.merge_iou <= 1.0):
            raise ValueError("merge IoU must lie in [0, 1]")


def _augment_scene(scene, scale: float, flip: bool):
    transforms = []
    aug = scene
    if scale != 1.0:
        t = scale_transform(scale)
        transforms.append(t)
        objects = None
        if aug.objects is not None:
            objects = tuple(replace(o, box=apply_transform(t, o.box)) for o in aug.objects)
        aug = replace(aug, width=aug.width * scale, height=aug.height * scale, objects=objects)
    if flip:
        t = hflip_transform(aug.width)
        transforms.append(t)
        objects = None
        if aug.objects is not None:
            objects = tuple(replace(o, box=apply_transform(t, o.box)) for o in aug.objects)
        aug = replace(aug, objects=objects)
    return aug, transforms


def tta_detect(
    model: Model,
    dataset: Dataset,
    scene,
    prompts: list[tuple[int, PromptSpec]],
    tta: TTAConfig | None = None,
    config: DetectConfig | None = None,
) -> list[Detection]:
    """Detect under every (scale x flip) combination and merge.

    Proposals are generated once in the original frame and mapped through
    each augmentation, detections are mapped back, and the union is merged
    with batched NMS at the configured IoU. Provenance records the applied
    transform chain.
    """
    tta = tta or TTAConfig()
    tta.validate()
    config = config or DetectConfig()
    config.validate()
    base_proposals = propose_regions(dataset, scene, config.proposals)
    per_pass = replace(config, nms_enabled=False)
    merged: list[Detection] = []
    flips = (False, True) if tta.hflip else (False,)
    for scale in tta.scales:
        for flip in flips:
            aug_scene, transforms = _augment_scene(scene, scale, flip)
            proposals = base_proposals
            for t in transforms:
                proposals = [apply_transform(t, b) for b in proposals]
            if not proposals:
                continue
            label = "+".join(t.label() for t in transforms) or "identity"
            dets = detect(model, dataset, aug_scene, prompts, per_pass, proposals=proposals)
            for d in dets:
                box = d.box
                for t in reversed(transforms):
                    box = inverse_transform(t, box)
                merged.append(replace(d, box=box, transform=label))
    merged = batched_nms(merged, tta.merge_iou)
    return sort_detections(merged)


# -- category-wise threshold search ----------------------------------------------------


@dataclass
class ThresholdMap:
    thresholds: dict[int, float]
    defaulted: list[int] = field(default_factory=list)

    def apply(self, dets: list[Detection]) -> list[Detection]:
        return [
            d
            for d in dets
            if d.score >= self.thresholds.get(d.category_id, 0.0)
        ]


def threshold_grid(step: float = 0.05, top: float = 0.95) -> list[float]:
    n = int(round(top / step))
    return [round(i * step, 10) for i in range(n + 1)]


def search_thresholds(
    dets: list[Detection],
    gts: list[Annotation],
    grid_step: float = 0.05,
    eval_config: EvalConfig | None = None,
    default_threshold: float = 0.5,
) -> ThresholdMap:
    """Per-category confidence threshold maximizing that category's AP.

    Categories are independent under per-class AP, so the per-class argmax
    equals a joint exhaustive search. Ties resolve to the lower threshold;
    categories without validation ground truth fall back to the default and
    are flagged.
    """
    eval_config = eval_config or EvalConfig()
    grid = threshold_grid(grid_step)
    category_ids = sorted({g.category_id for g in gts} | {d.category_id for d in dets})
    thresholds: dict[int, float] = {}
    defaulted: list[int] = []
    for cid in category_ids:
        cat_gts = [g for g in gts if g.category_id == cid]
        if not cat_gts:
            thresholds[cid] = default_threshold
            defaulted.append(cid)
            continue
        cat_dets = [d for d in dets if d.category_id == cid]
        best_thr, best_ap = grid[0], -1.0
        for thr in grid:
            kept = [d for d in cat_dets if d.score >= thr]
            result = evaluate_detections(kept, cat_gts, None, replace(eval_config, restrict_to_known=False))
            ap = result.category_mean(cid)
            ap = 0.0 if ap is None else ap
            if ap > best_ap + 1e-12:
                best_ap = ap
                best_thr = thr
        thresholds[cid] = best_thr
    return ThresholdMap(thresholds=thresholds, defaulted=defaulted)


# -- factor-grid checkpoint selection ---------------------------------------------------

TEXT_PROMPT_OPTIONS = ("original", "original+augmented")
VISUAL_PROMPT_OPTIONS = ("in-image", "out-image")
ANNOTATION_OPTIONS = ("original", "original+pseudo-labeled")
INFERENCE_OPTIONS = ("text", "visual", "text+visual")


@dataclass(frozen=True)
class FactorAssignment:
    text_prompt: str = "original"
    visual_prompt: str = "out-image"
    annotations: str = "original"
    inference: str = "text"

    def __post_init__(self):
        if self.text_prompt not in TEXT_PROMPT_OPTIONS:
            raise ValueError(f"bad text prompt option {self.text_prompt!r}")
        if self.visual_prompt not in VISUAL_PROMPT_OPTIONS:
            raise ValueError(f"bad visual prompt option {self.visual_prompt!r}")
        if self.annotations not in ANNOTATION_OPTIONS:
            raise ValueError(f"bad annotation option {self.annotations!r}")
        if self.inference not in INFERENCE_OPTIONS:
            raise ValueError(f"bad inference option {self.inference!r}")

    def key(self) -> str:
        return (
            f"text={self.text_prompt}|visual={self.visual_prompt}"
            f"|ann={self.annotations}|inf={self.inference}"
        )


def all_factor_assignments() -> list[FactorAssignment]:
    """The full option product, in deterministic grid order."""
    out = []
    for tp in TEXT_PROMPT_OPTIONS:
        for vp in VISUAL_PROMPT_OPTIONS:
            for ann in ANNOTATION_OPTIONS:
                for inf in INFERENCE_OPTIONS:
                    out.append(
                        FactorAssignment(
                            text_prompt=tp, visual_prompt=vp, annotations=ann, inference=inf
                        )
                    )
    return out


def assignment_prompts(
    dataset: Dataset,
    assignment: FactorAssignment,
    prompt_table: PromptTable,
    category_ids,
    scene_id: int,
    visual_n: int,
    seed: int,
) -> list[tuple[int, PromptSpec]]:
    prompts: list[tuple[int, PromptSpec]] = []
    for cid in category_ids:
        texts = [dataset.categories[cid].name]
        if assignment.text_prompt == "original+augmented":
            texts = prompt_table.variants(cid) or texts
        exemplars: tuple[tuple[int, Box], ...] = ()
        if assignment.inference in ("visual", "text+visual"):
            vp = build_visual_prompts(
                dataset, assignment.visual_prompt, cid, scene_id, max_exemplars=visual_n, seed=seed
            )
            exemplars = tuple(vp.exemplars)
        if assignment.inference == "text":
            for t in texts:
                prompts.append((cid, PromptSpec(mode=TEXT, text=t)))
        elif assignment.inference == "visual":
            if exemplars:
                prompts.append((cid, PromptSpec(mode=VISUAL_GENERIC, exemplars=exemplars)))
        else:
            if exemplars:
                for t in texts:
                    prompts.append(
                        (cid, PromptSpec(mode=ENSEMBLE, text=t, exemplars=exemplars))
                    )
            else:
                for t in texts:
                    prompts.append((cid, PromptSpec(mode=TEXT, text=t)))
    return prompts


def evaluate_assignment(
    model: Model,
    dataset: Dataset,
    domain: str,
    assignment: FactorAssignment,
    prompt_table: PromptTable,
    split: str = "val",
    restrict: bool = True,
    eval_config: EvalConfig | None = None,
    detect_config: DetectConfig | None = None,
    visual_n: int = 8,
    seed: int = 0,
) -> float:
    """Domain mAP for one factor assignment.

    Validation scoring restricts predictions to each scene's known
    categories; final test inference passes restrict=False to predict across
    all categories.
    """
    eval_config = replace(eval_config or EvalConfig(), restrict_to_known=restrict)
    detect_config = detect_config or DetectConfig(score_threshold=0.0)
    scene_ids = [
        sid
        for sid in (dataset.split_scene_ids(split) or sorted(dataset.scenes))
        if dataset.scenes[sid].domain == domain
    ]
    domain_cats = dataset.domain_category_ids(domain)
    dets: list[Detection] = []
    gts: list[Annotation] = []
    for sid in scene_ids:
        scene = dataset.scenes[sid]
        if restrict and scene.known_category_ids is not None:
            cats = sorted(set(scene.known_category_ids) & set(domain_cats))
        else:
            cats = domain_cats
        prompts = assignment_prompts(
            dataset, assignment, prompt_table, cats, sid, visual_n, seed
        )
        dets.extend(detect(model, dataset, scene, prompts, detect_config))
        gts.extend(a for a in dataset.scene_annotations(sid) if a.provenance == "ground-truth")
    return evaluate_detections(dets, gts, dataset, eval_config, category_ids=domain_cats).mean_ap()


@dataclass
class FactorGridResult:
    scores: dict[str, dict[str, dict[str, float]]]  # domain -> checkpoint -> key -> mAP
    winners: dict[str, tuple[str, str]]  # domain -> (checkpoint label, assignment key)

    def payload(self) -> dict:
        return {
            "scores": {
                d: {c: dict(sorted(v.items())) for c, v in sorted(cv.items())}
                for d, cv in sorted(self.scores.items())
            },
            "winners": {d: list(w) for d, w in sorted(self.winners.items())},
            "grid_size": len(all_factor_assignments()),
        }


def select_checkpoint(
    checkpoints: list[tuple[str, Model]],
    dataset: Dataset,
    prompt_table: PromptTable,
    pseudo_floor: float = 0.9,
    split: str = "val",
    eval_config: EvalConfig | None = None,
    detect_config: DetectConfig | None = None,
    visual_n: int = 8,
    seed: int = 0,
) -> FactorGridResult:
    """Exhaustive (checkpoint x 24-assignment) validation sweep per domain.

    The annotations factor swaps the exemplar source between the original
    dataset and one augmented with that checkpoint's own pseudo-labels. The
    winner per domain is the argmax of validation mAP, ties resolving to
    grid order.
    """
    if not checkpoints:
        raise ValueError("no candidate checkpoints given")
    assignments = all_factor_assignments()
    scores: dict[str, dict[str, dict[str, float]]] = {}
    winners: dict[str, tuple[str, str]] = {}
    augmented: dict[str, Dataset] = {}
    for label, model in checkpoints:
        extra = pseudo_label(model, dataset, confidence_floor=pseudo_floor)
        augmented[label] = with_extra_annotations(dataset, extra)
    for domain in dataset.domains():
        scores[domain] = {}
        best: tuple[float, str, str] | None = None
        for label, model in checkpoints:
            scores[domain][label] = {}
            for assignment in assignments:
                ds = (
                    augmented[label]
                    if assignment.annotations == "original+pseudo-labeled"
                    else dataset
                )
                value = evaluate_assignment(
                    model,
                    ds,
                    domain,
                    assignment,
                    prompt_table,
                    split=split,
                    restrict=True,
                    eval_config=eval_config,
                    detect_config=detect_config,
                    visual_n=visual_n,
                    seed=seed,
                )
                scores[domain][label][assignment.key()] = value
                if best is None or value > best[0] + 1e-15:
                    best = (value, label, assignment.key())
        winners[domain] = (best[1], best[2])
    return FactorGridResult(scores=scores, winners=winners)
