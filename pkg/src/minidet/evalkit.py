"""COCO-style average precision, the three prompt protocols, and Max AP.

Conventions fixed here: greedy score-ordered matching with best-IoU
assignment, 101-point interpolated precision-recall area, detections capped
per (scene, category), categories with no ground truth excluded from means.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Annotation, Dataset, restrict_to_known_categories
from .geometry import iou
from .inference import (
    TEXT,
    VISUAL_GENERIC,
    VISUAL_INTERACTIVE,
    DetectConfig,
    Detection,
    PromptSpec,
    detect,
)

PROTOCOLS = ("text-g", "visual-g", "visual-i")


class ProtocolRequirementError(ValueError):
    """A protocol precondition (e.g. exemplar availability) is not met."""


def default_iou_thresholds() -> tuple[float, ...]:
    return tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


@dataclass
class EvalConfig:
    iou_thresholds: tuple[float, ...] = field(default_factory=default_iou_thresholds)
    recall_points: int = 101
    max_dets: int = 100
    visual_g_n: int = 8
    restrict_to_known: bool = False

    def validate(self):
        t = self.iou_thresholds
        if not t or any(b <= a for a, b in zip(t, t[1:])) or t[0] < 0 or t[-1] > 1:
            raise ValueError("IoU thresholds must be strictly increasing within [0, 1]")
        if self.recall_points < 2:
            raise ValueError("need at least two recall interpolation points")


# -- AP core ---------------------------------------------------------------------


def _truncate_per_scene(dets: list[Detection], max_dets: int) -> list[Detection]:
    by_scene: dict[int, list[tuple[float, int]]] = {}
    for i, d in enumerate(dets):
        by_scene.setdefault(d.scene_id, []).append((-d.score, i))
    keep = set()
    for entries in by_scene.values():
        entries.sort()
        keep.update(i for _, i in entries[:max_dets])
    return [d for i, d in enumerate(dets) if i in keep]


def match_category(
    dets: list[Detection], gts: list[Annotation], iou_threshold: float
) -> tuple[np.ndarray, int]:
    """Greedy one-to-one matching for a single category.

    Detections are visited in descending score (ties: input order) and each
    claims the unmatched ground-truth box of highest IoU >= threshold in its
    scene. Returns the true-positive flags in visit order and the GT count.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    gt_by_scene: dict[int, list[int]] = {}
    for j, g in enumerate(gts):
        gt_by_scene.setdefault(g.scene_id, []).append(j)
    matched = [False] * len(gts)
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        d = dets[i]
        best_j = -1
        best_iou = iou_threshold
        for j in gt_by_scene.get(d.scene_id, []):
            if matched[j]:
                continue
            v = iou(d.box, gts[j].box)
            if v > best_iou or (v == best_iou and v >= iou_threshold and best_j == -1):
                best_iou = v
                best_j = j
        if best_j >= 0:
            matched[best_j] = True
            tp[rank] = True
    return tp, len(gts)


def ap_from_flags(tp: np.ndarray, n_pos: int, recall_points: int = 101) -> float:
    """Area under the interpolated precision-recall curve on a fixed grid."""
    if n_pos == 0:
        raise ValueError("AP undefined with no ground truth")
    if len(tp) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    recall = cum_tp / n_pos
    precision = cum_tp / (cum_tp + cum_fp)
    # Monotone envelope from the right, then sample at the recall grid.
    env = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, recall_points)
    idx = np.searchsorted(recall, grid, side="left")
    sampled = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(sampled.mean())


@dataclass
class APResult:
    per_category: dict[int, dict[float, float]]
    undefined_categories: list[int]

    def category_mean(self, category_id: int) -> float | None:
        vals = self.per_category.get(category_id)
        if not vals:
            return None
        return float(np.mean(list(vals.values())))

    def mean_ap(self) -> float:
        means = [self.category_mean(c) for c in self.per_category]
        means = [m for m in means if m is not None]
        return float(np.mean(means)) if means else 0.0


def average_precision(
    dets: list[Detection],
    gts: list[Annotation],
    config: EvalConfig | None = None,
    category_ids=None,
) -> APResult:
    """Per-category AP across the IoU threshold grid.

    Categories with zero ground truth are reported as undefined and excluded
    from the mean rather than scored zero.
    """
    config = config or EvalConfig()
    config.validate()
    if category_ids is None:
        category_ids = sorted({g.category_id for g in gts} | {d.category_id for d in dets})
    per_cat: dict[int, dict[float, float]] = {}
    undefined: list[int] = []
    for cid in category_ids:
        cat_gts = [g for g in gts if g.category_id == cid]
        if not cat_gts:
            undefined.append(cid)
            continue
        cat_dets = _truncate_per_scene(
            [d for d in dets if d.category_id == cid], config.max_dets
        )
        per_cat[cid] = {}
        for thr in config.iou_thresholds:
            tp, n_pos = match_category(cat_dets, cat_gts, thr)
            per_cat[cid][thr] = ap_from_flags(tp, n_pos, config.recall_points)
    return APResult(per_category=per_cat, undefined_categories=undefined)


def apply_known_category_restriction(
    dets: list[Detection], gts: list[Annotation], dataset: Dataset
) -> tuple[list[Detection], list[Annotation]]:
    """Drop detections/GT of categories not known to be present per scene."""
    out_dets: list[Detection] = []
    for sid in sorted({d.scene_id for d in dets}):
        scene_dets = [d for d in dets if d.scene_id == sid]
        out_dets.extend(restrict_to_known_categories(scene_dets, dataset.scenes[sid]).detections)
    out_gts = [
        g
        for g in gts
        if dataset.scenes[g.scene_id].known_category_ids is None
        or g.category_id in dataset.scenes[g.scene_id].known_category_ids
    ]
    return out_dets, out_gts


def evaluate_detections(
    dets: list[Detection],
    gts: list[Annotation],
    dataset: Dataset,
    config: EvalConfig | None = None,
    category_ids=None,
) -> APResult:
    config = config or EvalConfig()
    if config.restrict_to_known:
        dets, gts = apply_known_category_restriction(dets, gts, dataset)
    return average_precision(dets, gts, config, category_ids=category_ids)


# -- protocol evaluation -----------------------------------------------------------


def _domain_scenes(dataset: Dataset, split: str, domain: str) -> list[int]:
    ids = dataset.split_scene_ids(split) or sorted(dataset.scenes)
    return [i for i in ids if dataset.scenes[i].domain == domain]


def build_protocol_prompts(
    dataset: Dataset, protocol: str, domain: str, config: EvalConfig
) -> list[tuple[int, PromptSpec]]:
    """Per-category prompts for Text-G or Visual-G in one domain."""
    prompts = []
    cats = dataset.domain_category_ids(domain)
    if protocol == "text-g":
        for cid in cats:
            prompts.append((cid, PromptSpec(mode=TEXT, text=dataset.categories[cid].name)))
        return prompts
    if protocol == "visual-g":
        index = dataset.exemplar_index("train")
        for cid in cats:
            exemplars = index.get(cid, [])
            if not exemplars:
                raise ProtocolRequirementError(
                    f"visual-g requires train exemplars for category {cid} "
                    f"({dataset.categories[cid].name}); none are indexed"
                )
            pairs = tuple(
                (sid, dataset.annotations[aid].box) for sid, aid in exemplars
            )
            n = min(config.visual_g_n, len(pairs))
            prompts.append((cid, PromptSpec(mode=VISUAL_GENERIC, exemplars=pairs, n=n)))
        return prompts
    raise ValueError(f"build_protocol_prompts does not handle {protocol!r}")


def evaluate_protocol(
    model,
    dataset: Dataset,
    protocol: str,
    eval_config: EvalConfig | None = None,
    detect_config: DetectConfig | None = None,
    split: str = "test",
) -> dict[str, float]:
    """Per-domain mAP for one prompting protocol.

    Text-G prompts with category names, Visual-G with averaged train
    exemplars, Visual-I with a single instance crop per (scene, category) —
    scored against the *other* instances of that category in the scene.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    eval_config = eval_config or EvalConfig()
    detect_config = detect_config or DetectConfig(score_threshold=0.0)
    out: dict[str, float] = {}
    for domain in dataset.domains():
        scene_ids = _domain_scenes(dataset, split, domain)
        if protocol in ("text-g", "visual-g"):
            prompts = build_protocol_prompts(dataset, protocol, domain, eval_config)
            dets: list[Detection] = []
            gts: list[Annotation] = []
            for sid in scene_ids:
                dets.extend(detect(model, dataset, dataset.scenes[sid], prompts, detect_config))
                gts.extend(dataset.scene_annotations(sid))
            result = evaluate_detections(dets, gts, dataset, eval_config)
        else:
            result = _evaluate_visual_i(model, dataset, scene_ids, eval_config, detect_config)
        out[domain] = result.mean_ap()
    return out


def _evaluate_visual_i(model, dataset, scene_ids, eval_config, detect_config) -> APResult:
    dets: list[Detection] = []
    gts: list[Annotation] = []
    for sid in scene_ids:
        scene = dataset.scenes[sid]
        anns = dataset.scene_annotations(sid)
        by_cat: dict[int, list[Annotation]] = {}
        for a in anns:
            by_cat.setdefault(a.category_id, []).append(a)
        for cid in sorted(by_cat):
            instances = by_cat[cid]
            if len(instances) < 2:
                continue  # no other instances to find
            probe = instances[0]
            spec = PromptSpec(mode=VISUAL_INTERACTIVE, exemplars=((sid, probe.box),))
            dets.extend(detect(model, dataset, scene, [(cid, spec)], detect_config))
            gts.extend(instances[1:])
    return evaluate_detections(dets, gts, dataset, eval_config)


# -- aggregation --------------------------------------------------------------------


@dataclass
class MetricReport:
    per_domain: dict[str, dict[str, float]]
    mean_text_g: float
    mean_visual_g: float
    mean_visual_i: float | None
    max_ap: float
    excluded_domains: list[str]

    def payload(self) -> dict:
        return {
            "per_domain": {d: dict(v) for d, v in sorted(self.per_domain.items())},
            "mean_text_g": self.mean_text_g,
            "mean_visual_g": self.mean_visual_g,
            "mean_visual_i": self.mean_visual_i,
            "max_ap": self.max_ap,
            "excluded_domains": list(self.excluded_domains),
            "max_ap_dominates_means": self.max_ap
            >= max(self.mean_text_g, self.mean_visual_g) - 1e-12,
        }


def aggregate(per_domain: dict[str, dict[str, float]]) -> MetricReport:
    """Cross-domain means plus Max AP (mean of per-domain best of the two
    generic protocols). Domains missing either generic protocol are excluded
    from the aggregates and flagged."""
    usable = {
        d: v for d, v in per_domain.items() if "text-g" in v and "visual-g" in v
    }
    excluded = sorted(set(per_domain) - set(usable))
    if not usable:
        raise ValueError("no domain carries both text-g and visual-g scores")
    text = [v["text-g"] for v in usable.values()]
    visual = [v["visual-g"] for v in usable.values()]
    max_per_domain = [max(v["text-g"], v["visual-g"]) for v in usable.values()]
    vi = [v["visual-i"] for v in usable.values() if "visual-i" in v]
    report = MetricReport(
        per_domain={d: dict(v) for d, v in per_domain.items()},
        mean_text_g=float(np.mean(text)),
        mean_visual_g=float(np.mean(visual)),
        mean_visual_i=float(np.mean(vi)) if vi else None,
        max_ap=float(np.mean(max_per_domain)),
        excluded_domains=excluded,
    )
    assert report.max_ap >= max(report.mean_text_g, report.mean_visual_g) - 1e-12
    return report


def render_summary_table(report: MetricReport, model_label: str, train_size: str) -> str:
    """Fixed-width summary row in the benchmark-table layout."""
    vi = f"{100 * report.mean_visual_i:.1f}" if report.mean_visual_i is not None else "-"
    header = f"{'Model':<16}{'Train size':>12}{'Visual-I AP':>13}{'Text-G AP':>11}{'Visual-G AP':>13}{'Max AP':>8}"
    row = (
        f"{model_label:<16}{train_size:>12}{vi:>13}"
        f"{100 * report.mean_text_g:>11.1f}{100 * report.mean_visual_g:>13.1f}{100 * report.max_ap:>8.1f}"
    )
    return header + "\n" + row + "\n"
