"""Instance-detection post-processing cascade.

Five independently toggleable stages, applied in a fixed order: plain
detection, category refinement combined with tiled inference, background
filtering with a lightweight logistic classifier, batched NMS, and a
pluggable box refiner. The cascade evaluates mAP after every enabled stage
and renders the resulting ladder.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Dataset, Scene, SynthObject
from .embedding import average_embeddings, forward, region_embedding
from .evalkit import EvalConfig, evaluate_detections
from .geometry import Box, intersection_box, iou, offset_transform, inverse_transform
from .inference import (
    DetectConfig,
    Detection,
    Model,
    PromptSpec,
    detect,
    per_category_nms,
    sort_detections,
)


@dataclass
class CascadeConfig:
    refine_and_tile: bool = True
    background_filter: bool = True
    batched_nms: bool = True
    box_refine: bool = True
    tile_rows: int = 2
    tile_cols: int = 2
    tile_overlap: float = 0.1
    min_tile_size: float = 8.0
    background_threshold: float = 0.5
    nms_iou: float = 0.5
    refiner: str = "oracle-snap"  # identity | oracle-snap
    snap_floor: float = 0.25
    prototype_n: int = 8
    detect: DetectConfig = field(default_factory=DetectConfig)

    def validate(self):
        if not (0.0 <= self.tile_overlap <= 0.5):
            raise ValueError("tile overlap fraction must lie in [0, 0.5]")
        if self.tile_rows < 1 or self.tile_cols < 1:
            raise ValueError("tile grid must be at least 1x1")
        if not (0.0 <= self.background_threshold <= 1.0):
            raise ValueError("background threshold must lie in [0, 1]")
        if not (0.0 <= self.nms_iou <= 1.0):
            raise ValueError("NMS IoU threshold must lie in [0, 1]")
        if self.refiner not in ("identity", "oracle-snap"):
            raise ValueError(f"unknown refiner {self.refiner!r}")
        self.detect.validate()


# -- tiled inference ---------------------------------------------------------------


def tile_regions(scene: Scene, rows: int, cols: int, overlap: float) -> list[Box]:
    """Tile boxes covering the scene, each grown by the overlap fraction."""
    base_w = scene.width / cols
    base_h = scene.height / rows
    tiles = []
    for r in range(rows):
        for c in range(cols):
            x0 = max(0.0, c * base_w - overlap * base_w)
            x1 = min(scene.width, (c + 1) * base_w + overlap * base_w)
            y0 = max(0.0, r * base_h - overlap * base_h)
            y1 = min(scene.height, (r + 1) * base_h + overlap * base_h)
            tiles.append(Box(x0, y0, x1, y1))
    return tiles


def crop_scene(scene: Scene, tile: Box) -> Scene:
    """Sub-scene whose content is clipped to the tile and shifted to its origin."""
    objects = None
    if scene.objects is not None:
        clipped = []
        for obj in scene.objects:
            inter = intersection_box(obj.box, tile)
            if inter is None:
                continue
            shifted = Box(
                inter.x0 - tile.x0, inter.y0 - tile.y0, inter.x1 - tile.x0, inter.y1 - tile.y0
            )
            clipped.append(SynthObject(shape=obj.shape, color=obj.color, box=shifted))
        objects = tuple(clipped)
    return replace(
        scene,
        width=tile.x1 - tile.x0,
        height=tile.y1 - tile.y0,
        objects=objects,
    )


def _tile_proposals(dataset: Dataset, scene: Scene, tile: Box, tile_scene: Scene, config: DetectConfig) -> list[Box]:
    from .inference import _dedup, _grid_positions

    pconf = config.proposals
    boxes: list[Box] = []
    if pconf.mode in ("oracle", "combined"):
        for a in dataset.scene_annotations(scene.id):
            inter = intersection_box(a.box, tile)
            if inter is None:
                continue
            boxes.append(
                Box(inter.x0 - tile.x0, inter.y0 - tile.y0, inter.x1 - tile.x0, inter.y1 - tile.y0)
            )
    if pconf.mode in ("grid", "combined"):
        for frac in pconf.window_fractions:
            w = frac * tile_scene.width
            h = frac * tile_scene.height
            if w <= 0 or h <= 0:
                continue
            for x in _grid_positions(tile_scene.width, w, pconf.stride_fraction):
                for y in _grid_positions(tile_scene.height, h, pconf.stride_fraction):
                    boxes.append(Box(x, y, x + w, y + h))
    return _dedup(boxes, pconf.dedup_iou)


def tiled_detect(
    model: Model,
    dataset: Dataset,
    scene: Scene,
    prompts: list[tuple[int, PromptSpec]],
    config: DetectConfig,
    rows: int,
    cols: int,
    overlap: float,
    min_tile_size: float = 8.0,
) -> list[Detection]:
    """Full-frame pass plus one pass per tile, boxes mapped back to scene frame.

    Per-tile detections are produced in tile coordinates (content cropped and
    offset) and inverse-transformed back; the merged pool then goes through
    batched NMS when the detect config has NMS enabled.
    """
    tiles = tile_regions(scene, rows, cols, overlap)
    if any(t.width() < min_tile_size or t.height() < min_tile_size for t in tiles):
        raise ValueError(f"tile grid {rows}x{cols} produces tiles below {min_tile_size}px")
    per_pass_config = replace(config, nms_enabled=False)
    merged = list(detect(model, dataset, scene, prompts, per_pass_config))
    for t_idx, tile in enumerate(tiles):
        tile_scene = crop_scene(scene, tile)
        if tile_scene.objects is not None and not tile_scene.objects:
            continue
        proposals = _tile_proposals(dataset, scene, tile, tile_scene, config)
        if not proposals:
            continue
        crop = offset_transform(-tile.x0, -tile.y0)
        dets = detect(
            model, dataset, tile_scene, prompts, per_pass_config, proposals=proposals
        )
        for d in dets:
            merged.append(
                replace(d, box=inverse_transform(crop, d.box), transform=f"tile{t_idx}")
            )
    if config.nms_enabled:
        merged = batched_nms(merged, config.nms_iou)
    return sort_detections(merged)


# -- category refinement --------------------------------------------------------


def build_prototypes(
    model: Model, dataset: Dataset, category_ids, n: int = 8, split: str = "train"
) -> dict[int, np.ndarray]:
    """Per-category prototype embeddings averaged over exemplar crops."""
    index = dataset.exemplar_index(split)
    prototypes: dict[int, np.ndarray] = {}
    for cid in sorted(category_ids):
        exemplars = index.get(cid, [])[:n]
        if not exemplars:
            continue
        embs = [
            region_embedding(model, dataset, dataset.scenes[sid], dataset.annotations[aid].box)
            for sid, aid in exemplars
        ]
        prototypes[cid] = average_embeddings(embs)
    return prototypes


def refine_categories(
    dets: list[Detection],
    prototypes: dict[int, np.ndarray],
    model: Model,
    dataset: Dataset,
) -> list[Detection]:
    """Reassign each detection to its embedding-nearest category prototype.

    The score becomes the mapped prototype similarity; the original category
    is kept in the detection's provenance. Ties go to the lower category id.
    """
    if not prototypes:
        raise ValueError("category refinement requires at least one prototype")
    cat_ids = sorted(prototypes)
    proto = np.stack([prototypes[c] for c in cat_ids])
    out = []
    for d in dets:
        emb = region_embedding(model, dataset, dataset.scenes[d.scene_id], d.box)
        sims = proto @ emb
        best = int(np.argmax(sims))  # argmax returns the first (lowest id) on ties
        out.append(
            replace(
                d,
                category_id=cat_ids[best],
                score=float((sims[best] + 1.0) / 2.0),
                original_category_id=d.category_id,
            )
        )
    return out


# -- background filtering ----------------------------------------------------------


@dataclass
class BackgroundClassifier:
    weights: np.ndarray
    bias: float
    threshold: float = 0.5

    def probabilities(self, embeddings: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(embeddings) @ self.weights + self.bias
        return 1.0 / (1.0 + np.exp(-z))


def train_background_classifier(
    background_embeddings: np.ndarray,
    object_embeddings: np.ndarray,
    threshold: float = 0.5,
    learning_rate: float = 1.0,
    max_iters: int = 5000,
    tol: float = 1e-8,
) -> BackgroundClassifier:
    """Logistic regression (background = positive class) by full-batch
    gradient descent, run until the loss decrease falls below tol."""
    bg = np.atleast_2d(background_embeddings)
    obj = np.atleast_2d(object_embeddings)
    if len(bg) == 0 or len(obj) == 0:
        raise ValueError("background classifier needs samples from both classes")
    X = np.vstack([bg, obj])
    y = np.concatenate([np.ones(len(bg)), np.zeros(len(obj))])
    w = np.zeros(X.shape[1])
    b = 0.0
    prev = np.inf
    for _ in range(max_iters):
        p = 1.0 / (1.0 + np.exp(-(X @ w + b)))
        loss = -float(np.mean(y * np.log(p + 1e-12) + (1 - y) * np.log(1 - p + 1e-12)))
        if prev - loss < tol:
            break
        prev = loss
        g = p - y
        w -= learning_rate * (X.T @ g) / len(y)
        b -= learning_rate * float(np.mean(g))
    return BackgroundClassifier(weights=w, bias=b, threshold=threshold)


def filter_background(
    dets: list[Detection],
    clf: BackgroundClassifier,
    model: Model,
    dataset: Dataset,
) -> list[Detection]:
    """Drop detections whose background probability exceeds the threshold."""
    if not dets:
        return []
    embs = np.stack(
        [region_embedding(model, dataset, dataset.scenes[d.scene_id], d.box) for d in dets]
    )
    probs = clf.probabilities(embs)
    return [d for d, p in zip(dets, probs) if p <= clf.threshold]


def background_training_crops(
    model: Model, dataset: Dataset, scene_ids, per_scene: int = 4, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Sampled background-box embeddings and object-crop embeddings for
    classifier training. Background boxes are rejected until they overlap no
    object."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 31]))
    bg, obj = [], []
    for sid in sorted(scene_ids):
        scene = dataset.scenes[sid]
        if scene.objects is None:
            continue
        for a in dataset.scene_annotations(sid):
            obj.append(region_embedding(model, dataset, scene, a.box))
        placed = 0
        for _ in range(per_scene * 20):
            if placed >= per_scene:
                break
            w = float(rng.uniform(8.0, scene.width / 3))
            h = float(rng.uniform(8.0, scene.height / 3))
            x = float(rng.uniform(0, scene.width - w))
            y = float(rng.uniform(0, scene.height - h))
            box = Box(x, y, x + w, y + h)
            if all(iou(box, o.box) == 0.0 for o in scene.objects):
                bg.append(region_embedding(model, dataset, scene, box))
                placed += 1
    if not bg or not obj:
        raise ValueError("could not sample both background and object crops")
    return np.stack(bg), np.stack(obj)


# -- batched NMS and box refinement ---------------------------------------------------


def batched_nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """NMS within each (scene, category) group; categories never cross-suppress."""
    return per_category_nms(dets, iou_threshold)


def refine_boxes(
    dets: list[Detection],
    refiner: str,
    dataset: Dataset,
    snap_floor: float = 0.25,
) -> list[Detection]:
    """Box refinement interface. "identity" passes boxes through; the
    "oracle-snap" stand-in replaces a box with the ground-truth box of
    highest IoU when that IoU reaches the snap floor."""
    if refiner == "identity":
        return list(dets)
    if refiner != "oracle-snap":
        raise ValueError(f"unknown refiner {refiner!r}")
    if not dataset.annotations:
        raise ValueError("oracle-snap refinement requires ground-truth annotations")
    out = []
    for d in dets:
        best_box = None
        best_iou = snap_floor
        for a in dataset.scene_annotations(d.scene_id):
            v = iou(d.box, a.box)
            if v > best_iou or (v == best_iou and v >= snap_floor and best_box is None):
                best_iou = v
                best_box = a.box
        out.append(replace(d, box=best_box) if best_box is not None else d)
    return out


# -- the ladder ---------------------------------------------------------------------


@dataclass
class CascadeResult:
    stages: list[tuple[str, float]]
    detections: dict[str, list[Detection]]

    def payload(self) -> dict:
        rows = []
        prev = None
        for name, ap in self.stages:
            rows.append(
                {
                    "stage": name,
                    "ap": ap,
                    "gain": None if prev is None else ap - prev,
                }
            )
            prev = ap
        return {"ladder": rows}


def run_cascade(
    model: Model,
    dataset: Dataset,
    config: CascadeConfig,
    split: str = "test",
    eval_config: EvalConfig | None = None,
    background_clf: BackgroundClassifier | None = None,
) -> CascadeResult:
    """Evaluate after each enabled stage, in the fixed ladder order.

    When the batched-NMS stage is enabled the earlier passes run without
    detector-internal NMS, since deduplication then belongs to the cascade.
    """
    config.validate()
    eval_config = eval_config or EvalConfig()
    scene_ids = dataset.split_scene_ids(split) or sorted(dataset.scenes)
    gts = [a for sid in scene_ids for a in dataset.scene_annotations(sid)]
    category_ids = sorted({a.category_id for a in gts})
    prompts = [
        (cid, PromptSpec(mode="text", text=dataset.categories[cid].name))
        for cid in category_ids
    ]
    detect_config = replace(config.detect)
    if config.batched_nms:
        detect_config = replace(detect_config, nms_enabled=False)

    def ap_of(dets: list[Detection]) -> float:
        return evaluate_detections(dets, gts, dataset, eval_config, category_ids=category_ids).mean_ap()

    stages: list[tuple[str, float]] = []
    detections: dict[str, list[Detection]] = {}

    dets: list[Detection] = []
    for sid in scene_ids:
        dets.extend(detect(model, dataset, dataset.scenes[sid], prompts, detect_config))
    stages.append(("Standard inference", ap_of(dets)))
    detections["Standard inference"] = dets

    if config.refine_and_tile:
        pooled: list[Detection] = []
        for sid in scene_ids:
            pooled.extend(
                tiled_detect(
                    model,
                    dataset,
                    dataset.scenes[sid],
                    prompts,
                    detect_config,
                    config.tile_rows,
                    config.tile_cols,
                    config.tile_overlap,
                    config.min_tile_size,
                )
            )
        prototypes = build_prototypes(model, dataset, category_ids, config.prototype_n)
        dets = refine_categories(pooled, prototypes, model, dataset)
        name = "+ Category refinement & tiled inference"
        stages.append((name, ap_of(dets)))
        detections[name] = dets

    if config.background_filter:
        if background_clf is None:
            train_ids = dataset.split_scene_ids("train") or scene_ids
            bg, obj = background_training_crops(model, dataset, train_ids)
            background_clf = train_background_classifier(
                bg, obj, threshold=config.background_threshold
            )
        dets = filter_background(dets, background_clf, model, dataset)
        stages.append(("+ Background filtering", ap_of(dets)))
        detections["+ Background filtering"] = dets

    if config.batched_nms:
        dets = batched_nms(dets, config.nms_iou)
        stages.append(("+ Batched NMS", ap_of(dets)))
        detections["+ Batched NMS"] = dets

    if config.box_refine:
        dets = refine_boxes(dets, config.refiner, dataset, config.snap_floor)
        stages.append(("+ Box refinement", ap_of(dets)))
        detections["+ Box refinement"] = dets

    return CascadeResult(stages=stages, detections=detections)


def render_ladder(stages: list[tuple[str, float]]) -> str:
    """Plain-text ladder with Method / AP / Gain columns (AP scaled x100)."""
    lines = [f"{'Method':<42}{'AP':>6}{'Gain':>7}"]
    prev = None
    for name, ap in stages:
        gain = "--" if prev is None else f"{100 * (ap - prev):+.1f}"
        lines.append(f"{name:<42}{100 * ap:>6.1f}{gain:>7}")
        prev = ap
    return "\n".join(lines) + "\n"
