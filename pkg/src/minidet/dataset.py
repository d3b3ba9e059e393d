"""Scene/annotation data model, COCO-style file IO, and the synthetic shape-world generator.

The shape-world is the desk-scale corpus every pipeline runs on: scenes are
populated with colored shapes whose region features are deterministic
functions of their content, so training, labeling, and evaluation claims can
all be checked exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .geometry import Box


class IngestError(ValueError):
    """Raised when an annotation file cannot be ingested."""


class GenerationError(RuntimeError):
    """Raised when the synthetic generator cannot satisfy its constraints."""


@dataclass
class Category:
    id: int
    name: str
    description: str | None = None
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SynthObject:
    """One synthetic object: shape kind, fill color, and its box."""

    shape: str
    color: str
    box: Box


@dataclass
class Scene:
    id: int
    width: float
    height: float
    domain: str = "default"
    objects: tuple[SynthObject, ...] | None = None
    known_category_ids: list[int] | None = None
    extra: dict = field(default_factory=dict)

    def bounds(self) -> Box:
        return Box(0.0, 0.0, self.width, self.height)


@dataclass
class Annotation:
    id: int
    scene_id: int
    category_id: int
    box: Box
    provenance: str = "ground-truth"
    extra: dict = field(default_factory=dict)


@dataclass
class SynthConfig:
    n_scenes: int = 60
    width: float = 128.0
    height: float = 128.0
    shapes: tuple[str, ...] = ("square", "circle", "triangle")
    colors: tuple[str, ...] = ("red", "green", "blue")
    n_domains: int = 1
    objects_per_scene: tuple[int, int] = (2, 4)
    object_size: tuple[float, float] = (16.0, 48.0)
    min_separation: float = 4.0
    noise: float = 0.05
    area_scale: float = 1.0
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    max_placement_attempts: int = 200

    def validate(self):
        if self.n_scenes < 0:
            raise ValueError("n_scenes must be non-negative")
        if self.n_domains < 1:
            raise ValueError("need at least one domain")
        if len(self.shapes) % self.n_domains or len(self.colors) % self.n_domains:
            raise ValueError("shapes and colors must divide evenly across domains")
        if self.objects_per_scene[0] > self.objects_per_scene[1]:
            raise ValueError("objects_per_scene range inverted")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


@dataclass
class Dataset:
    categories: dict[int, Category]
    scenes: dict[int, Scene]
    annotations: dict[int, Annotation]
    splits: dict[str, list[int]] = field(default_factory=dict)
    synth: SynthConfig | None = None
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    # -- accessors ---------------------------------------------------------

    def scene_annotations(self, scene_id: int) -> list[Annotation]:
        return sorted(
            (a for a in self.annotations.values() if a.scene_id == scene_id),
            key=lambda a: a.id,
        )

    def split_scene_ids(self, split: str) -> list[int]:
        return list(self.splits.get(split, []))

    def domains(self) -> list[str]:
        return sorted({s.domain for s in self.scenes.values()})

    def domain_category_ids(self, domain: str) -> list[int]:
        """Categories observed (via annotations) in scenes of a domain."""
        ids = {
            a.category_id
            for a in self.annotations.values()
            if self.scenes[a.scene_id].domain == domain
        }
        return sorted(ids)

    def exemplar_index(self, split: str = "train") -> dict[int, list[tuple[int, int]]]:
        """category id -> (scene id, annotation id) pairs usable as visual exemplars."""
        allowed = set(self.splits.get(split, self.scenes.keys()))
        index: dict[int, list[tuple[int, int]]] = {c: [] for c in self.categories}
        for a in sorted(self.annotations.values(), key=lambda a: a.id):
            if a.scene_id in allowed:
                index[a.category_id].append((a.scene_id, a.id))
        return index

    def category_by_name(self, name: str) -> Category | None:
        for c in self.categories.values():
            if c.name == name:
                return c
        return None

    def next_category_id(self) -> int:
        return max(self.categories, default=0) + 1

    def next_annotation_id(self) -> int:
        return max(self.annotations, default=0) + 1

    # -- integrity ---------------------------------------------------------

    def validate(self):
        names = [c.name for c in self.categories.values()]
        if any(not n for n in names):
            raise ValueError("category with empty name")
        for a in self.annotations.values():
            if a.scene_id not in self.scenes:
                raise ValueError(f"annotation {a.id} references unknown scene {a.scene_id}")
            if a.category_id not in self.categories:
                raise ValueError(f"annotation {a.id} references unknown category {a.category_id}")
            s = self.scenes[a.scene_id]
            if not (
                -1e-6 <= a.box.x0 and a.box.x1 <= s.width + 1e-6
                and -1e-6 <= a.box.y0 and a.box.y1 <= s.height + 1e-6
            ):
                raise ValueError(f"annotation {a.id} box outside scene bounds")
        for s in self.scenes.values():
            if s.known_category_ids is not None:
                unknown = set(s.known_category_ids) - set(self.categories)
                if unknown:
                    raise ValueError(f"scene {s.id} lists unknown categories {sorted(unknown)}")
        split_ids = [i for ids in self.splits.values() for i in ids]
        if len(split_ids) != len(set(split_ids)):
            raise ValueError("splits overlap")
        if set(split_ids) - set(self.scenes):
            raise ValueError("split references unknown scene")


class RestrictResult(NamedTuple):
    detections: list
    missing_known: bool


def restrict_to_known_categories(dets: list, scene: Scene) -> RestrictResult:
    """Keep only detections of categories known to be present in the scene.

    When the scene carries no known-category list the detections pass
    through unchanged and the result is flagged.
    """
    if scene.known_category_ids is None:
        return RestrictResult(list(dets), True)
    known = set(scene.known_category_ids)
    return RestrictResult([d for d in dets if d.category_id in known], False)


# -- synthetic generation ---------------------------------------------------


def domain_palettes(config: SynthConfig) -> list[tuple[str, list[str], list[str]]]:
    """Per-domain (name, shapes, colors) with mutually disjoint palettes."""
    ns = len(config.shapes) // config.n_domains
    nc = len(config.colors) // config.n_domains
    out = []
    for d in range(config.n_domains):
        out.append(
            (
                f"domain{d}",
                list(config.shapes[d * ns : (d + 1) * ns]),
                list(config.colors[d * nc : (d + 1) * nc]),
            )
        )
    return out


def generate_shape_world(config: SynthConfig, seed: int) -> Dataset:
    """Deterministically populate scenes with colored shapes, all annotated.

    Category names are compositional ("red square"), so text prompts carry
    recoverable semantics. Raises GenerationError when the min-separation
    constraint cannot be met after the configured number of attempts.
    """
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))

    categories: dict[int, Category] = {}
    domain_cats: dict[str, list[int]] = {}
    cid = 1
    for domain, shapes, colors in domain_palettes(config):
        domain_cats[domain] = []
        for shape in shapes:
            for color in colors:
                categories[cid] = Category(
                    id=cid, name=f"{color} {shape}", description=f"a {color} {shape}"
                )
                domain_cats[domain].append(cid)
                cid += 1

    cat_lookup = {c.name: c.id for c in categories.values()}
    scenes: dict[int, Scene] = {}
    annotations: dict[int, Annotation] = {}
    aid = 1
    lo, hi = config.objects_per_scene
    smin, smax = config.object_size
    for sid in range(1, config.n_scenes + 1):
        domain = f"domain{(sid - 1) % config.n_domains}"
        n_obj = int(rng.integers(lo, hi + 1))
        placed: list[Box] = []
        objects: list[SynthObject] = []
        for _ in range(n_obj):
            cat = categories[int(rng.choice(domain_cats[domain]))]
            color, shape = cat.name.split(" ", 1)
            box = _place_object(rng, config, placed)
            placed.append(box)
            objects.append(SynthObject(shape=shape, color=color, box=box))
        scenes[sid] = Scene(
            id=sid,
            width=config.width,
            height=config.height,
            domain=domain,
            objects=tuple(objects),
        )
        for obj in objects:
            annotations[aid] = Annotation(
                id=aid,
                scene_id=sid,
                category_id=cat_lookup[f"{obj.color} {obj.shape}"],
                box=obj.box,
            )
            aid += 1

    splits = _assign_splits(rng, sorted(scenes), config.split_fractions)
    ds = Dataset(
        categories=categories,
        scenes=scenes,
        annotations=annotations,
        splits=splits,
        synth=config,
        seed=int(seed),
    )
    ds.validate()
    return ds


def _place_object(rng, config: SynthConfig, placed: list[Box]) -> Box:
    gap = config.min_separation
    smin, smax = config.object_size
    for _ in range(config.max_placement_attempts):
        w = float(rng.uniform(smin, smax))
        h = float(rng.uniform(smin, smax))
        if w > config.width or h > config.height:
            continue
        x = float(rng.uniform(0.0, config.width - w))
        y = float(rng.uniform(0.0, config.height - h))
        box = Box(x, y, x + w, y + h)
        grown = Box(
            max(0.0, x - gap), max(0.0, y - gap), min(config.width, x + w + gap), min(config.height, y + h + gap)
        )
        if all(
            grown.x1 <= other.x0 or other.x1 <= grown.x0
            or grown.y1 <= other.y0 or other.y1 <= grown.y0
            for other in placed
        ):
            return box
    raise GenerationError(
        f"could not place object with min separation {gap} after "
        f"{config.max_placement_attempts} attempts"
    )


def _assign_splits(rng, scene_ids: list[int], fractions) -> dict[str, list[int]]:
    order = [scene_ids[i] for i in rng.permutation(len(scene_ids))]
    n = len(order)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train : n_train + n_val]),
        "test": sorted(order[n_train + n_val :]),
    }


# -- COCO-style file IO ------------------------------------------------------

_IMAGE_KEYS = {"id", "width", "height", "domain", "known_category_ids"}
_ANN_KEYS = {"id", "image_id", "category_id", "bbox", "provenance"}
_CAT_KEYS = {"id", "name", "description"}


def ingest_coco(path) -> Dataset:
    """Read a COCO-style annotation file (bbox as [x, y, w, h]).

    Unknown fields are preserved verbatim so that export round-trips. The
    first malformed record aborts ingestion with a descriptive error.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestError(f"cannot read annotation file {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise IngestError("annotation file must be a JSON object")

    categories: dict[int, Category] = {}
    for rec in raw.get("categories", []):
        try:
            cat = Category(
                id=int(rec["id"]),
                name=str(rec["name"]),
                description=rec.get("description"),
                extra={k: v for k, v in rec.items() if k not in _CAT_KEYS},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestError(f"malformed category record {rec!r}: {exc}") from exc
        if cat.id in categories:
            raise IngestError(f"duplicate category id {cat.id}")
        if not cat.name:
            raise IngestError(f"category {cat.id} has empty name")
        categories[cat.id] = cat

    scenes: dict[int, Scene] = {}
    for rec in raw.get("images", []):
        try:
            scene = Scene(
                id=int(rec["id"]),
                width=float(rec["width"]),
                height=float(rec["height"]),
                domain=str(rec.get("domain", "default")),
                known_category_ids=(
                    [int(c) for c in rec["known_category_ids"]]
                    if rec.get("known_category_ids") is not None
                    else None
                ),
                extra={k: v for k, v in rec.items() if k not in _IMAGE_KEYS},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestError(f"malformed image record {rec!r}: {exc}") from exc
        if scene.id in scenes:
            raise IngestError(f"duplicate image id {scene.id}")
        scenes[scene.id] = scene

    annotations: dict[int, Annotation] = {}
    for rec in raw.get("annotations", []):
        try:
            x, y, w, h = (float(v) for v in rec["bbox"])
            ann = Annotation(
                id=int(rec["id"]),
                scene_id=int(rec["image_id"]),
                category_id=int(rec["category_id"]),
                box=Box.from_xywh(x, y, w, h),
                provenance=str(rec.get("provenance", "ground-truth")),
                extra={k: v for k, v in rec.items() if k not in _ANN_KEYS},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestError(f"malformed annotation record {rec!r}: {exc}") from exc
        if ann.id in annotations:
            raise IngestError(f"duplicate annotation id {ann.id}")
        if ann.scene_id not in scenes:
            raise IngestError(f"annotation {ann.id}: unknown image id {ann.scene_id}")
        if ann.category_id not in categories:
            raise IngestError(f"annotation {ann.id}: unknown category id {ann.category_id}")
        annotations[ann.id] = ann

    splits = raw.get("splits", {})
    extra = {
        k: v
        for k, v in raw.items()
        if k not in ("images", "annotations", "categories", "splits")
    }
    ds = Dataset(
        categories=categories,
        scenes=scenes,
        annotations=annotations,
        splits={k: [int(i) for i in v] for k, v in splits.items()},
        extra=extra,
    )
    ds.validate()
    return ds


def coco_payload(ds: Dataset) -> dict:
    """Dataset as a COCO-style JSON-serializable dict."""
    payload = dict(ds.extra)
    payload["images"] = []
    for s in sorted(ds.scenes.values(), key=lambda s: s.id):
        rec = {"id": s.id, "width": s.width, "height": s.height, "domain": s.domain}
        if s.known_category_ids is not None:
            rec["known_category_ids"] = list(s.known_category_ids)
        rec.update(s.extra)
        payload["images"].append(rec)
    payload["annotations"] = []
    for a in sorted(ds.annotations.values(), key=lambda a: a.id):
        rec = {
            "id": a.id,
            "image_id": a.scene_id,
            "category_id": a.category_id,
            "bbox": a.box.as_xywh(),
            "provenance": a.provenance,
        }
        rec.update(a.extra)
        payload["annotations"].append(rec)
    payload["categories"] = []
    for c in sorted(ds.categories.values(), key=lambda c: c.id):
        rec = {"id": c.id, "name": c.name}
        if c.description is not None:
            rec["description"] = c.description
        rec.update(c.extra)
        payload["categories"].append(rec)
    if ds.splits:
        payload["splits"] = {k: list(v) for k, v in sorted(ds.splits.items())}
    return payload


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def export_coco(ds: Dataset, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(coco_payload(ds)))


def _synth_config_payload(c: SynthConfig) -> dict:
    return {
        "n_scenes": c.n_scenes,
        "width": c.width,
        "height": c.height,
        "shapes": list(c.shapes),
        "colors": list(c.colors),
        "n_domains": c.n_domains,
        "objects_per_scene": list(c.objects_per_scene),
        "object_size": list(c.object_size),
        "min_separation": c.min_separation,
        "noise": c.noise,
        "area_scale": c.area_scale,
        "split_fractions": list(c.split_fractions),
        "max_placement_attempts": c.max_placement_attempts,
    }


def synth_config_from_payload(payload: dict) -> SynthConfig:
    return SynthConfig(
        n_scenes=int(payload["n_scenes"]),
        width=float(payload["width"]),
        height=float(payload["height"]),
        shapes=tuple(payload["shapes"]),
        colors=tuple(payload["colors"]),
        n_domains=int(payload["n_domains"]),
        objects_per_scene=tuple(int(v) for v in payload["objects_per_scene"]),
        object_size=tuple(float(v) for v in payload["object_size"]),
        min_separation=float(payload["min_separation"]),
        noise=float(payload["noise"]),
        area_scale=float(payload.get("area_scale", 1.0)),
        split_fractions=tuple(float(v) for v in payload["split_fractions"]),
        max_placement_attempts=int(payload["max_placement_attempts"]),
    )


def scene_content_payload(ds: Dataset) -> dict:
    objects = {}
    for s in sorted(ds.scenes.values(), key=lambda s: s.id):
        if s.objects is not None:
            objects[str(s.id)] = [
                {"shape": o.shape, "color": o.color, "bbox": o.box.as_xywh()}
                for o in s.objects
            ]
    return {
        "format_version": 1,
        "seed": ds.seed,
        "synth": _synth_config_payload(ds.synth) if ds.synth else None,
        "objects": objects,
    }


def save_dataset(ds: Dataset, annotations_path, content_path):
    """Write the annotation file plus the synthetic scene-content file."""
    export_coco(ds, annotations_path)
    with open(content_path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(scene_content_payload(ds)))


def load_dataset(annotations_path, content_path=None) -> Dataset:
    """Rebuild a dataset from its annotation file and optional content file."""
    ds = ingest_coco(annotations_path)
    if content_path is None:
        return ds
    with open(content_path, "r", encoding="utf-8") as fh:
        content = json.load(fh)
    ds.seed = content.get("seed")
    if content.get("synth") is not None:
        ds.synth = synth_config_from_payload(content["synth"])
    for sid_str, objs in content.get("objects", {}).items():
        sid = int(sid_str)
        if sid not in ds.scenes:
            raise IngestError(f"content file references unknown scene {sid}")
        ds.scenes[sid] = replace(
            ds.scenes[sid],
            objects=tuple(
                SynthObject(
                    shape=o["shape"],
                    color=o["color"],
                    box=Box.from_xywh(*(float(v) for v in o["bbox"])),
                )
                for o in objs
            ),
        )
    return ds


def hide_annotations(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, dict[int, Annotation]]:
    """Remove a seeded fraction of annotations, recording what was hidden.

    Scenes keep the hidden categories in their known-category lists, which
    models the partially-annotated splits used by the few-shot tooling.
    Returns the reduced dataset and the hidden annotations by id.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7751]))
    ids = sorted(ds.annotations)
    n_hide = int(round(fraction * len(ids)))
    hidden_ids = set(int(i) for i in rng.choice(ids, size=n_hide, replace=False)) if n_hide else set()
    kept = {i: a for i, a in ds.annotations.items() if i not in hidden_ids}
    hidden = {i: ds.annotations[i] for i in sorted(hidden_ids)}
    scenes = {}
    for sid, scene in ds.scenes.items():
        present = sorted({a.category_id for a in ds.annotations.values() if a.scene_id == sid})
        scenes[sid] = replace(scene, known_category_ids=present)
    return (
        Dataset(
            categories=dict(ds.categories),
            scenes=scenes,
            annotations=kept,
            splits={k: list(v) for k, v in ds.splits.items()},
            synth=ds.synth,
            seed=ds.seed,
            extra=dict(ds.extra),
        ),
        hidden,
    )
