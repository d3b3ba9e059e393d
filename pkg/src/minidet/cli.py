"""Command-line interface: synth, train, eval, insdet, fsod, curate, autolabel.

Every command is deterministic given (inputs, config, seed), writes a
resolved-config dump sufficient to reproduce the run, and uses exit status
0 for success, 1 for usage/config errors, and 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as cfg
from . import embedding, engine, evalkit, fsod, inference, postproc, training
from .dataset import (
    GenerationError,
    IngestError,
    canonical_json,
    coco_payload,
    generate_shape_world,
    load_dataset,
    save_dataset,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _add_common(p: _Parser, needs_out: bool = True):
    p.add_argument("--config", help="config file (dotted-key text format)")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a single config key (repeatable)",
    )
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--workers", type=int, default=0, help="parallelism hint; results never depend on it")
    if needs_out:
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="allow writing into an existing directory")


def build_parser() -> _Parser:
    parser = _Parser(prog="minidet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic shape-world dataset")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the multi-prompt encoders")
    _add_common(p)
    p.add_argument("--dataset", required=True, help="dataset directory (from synth)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--snapshot-every", type=int, default=0, help="also save a checkpoint every N steps")
    p.add_argument("--dry-run", action="store_true", help="validate configuration and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run the prompt-protocol evaluation suite")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument(
        "--protocol",
        default="all",
        choices=["all", "text-g", "visual-g", "visual-i"],
    )
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("insdet", help="run the post-processing cascade ladder")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_insdet)

    p = sub.add_parser("fsod", help="factor-grid checkpoint selection per domain")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument(
        "--checkpoint",
        action="append",
        required=True,
        help="candidate checkpoint (repeatable)",
    )
    p.set_defaults(func=cmd_fsod)

    p = sub.add_parser("curate", help="uncertainty+diversity subset selection")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--budget", type=int, help="override select.budget")
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("autolabel", help="bidirectional auto-labeling with desk oracles")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_autolabel)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        resolved = cfg.load(args.config, args.overrides)
        if args.seed is not None:
            resolved["seed"] = int(args.seed)
    except cfg.ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args, resolved)
    except cfg.ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (
        IngestError,
        GenerationError,
        evalkit.ProtocolRequirementError,
        engine.OracleError,
        training.TrainingDiverged,
        OSError,
        ValueError,
        FloatingPointError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _prepare_out(args) -> Path:
    out = Path(args.out)
    if out.exists() and not args.force:
        raise cfg.ConfigError(f"output path {out} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _dump_config(out: Path, resolved: dict):
    _write(out / "resolved_config.txt", cfg.render(resolved))


def _load_ds(path_str: str):
    root = Path(path_str)
    ann = root / "annotations.json"
    content = root / "scenes.json"
    if not ann.exists():
        raise IngestError(f"dataset directory {root} has no annotations.json")
    return load_dataset(ann, content if content.exists() else None)


def _load_model(path_str: str):
    return embedding.load_checkpoint(path_str)


# -- commands -------------------------------------------------------------------


def cmd_synth(args, resolved) -> int:
    out = _prepare_out(args)
    ds = generate_shape_world(cfg.synth_config(resolved), resolved["seed"])
    save_dataset(ds, out / "annotations.json", out / "scenes.json")
    _dump_config(out, resolved)
    print(f"wrote {len(ds.scenes)} scenes, {len(ds.annotations)} annotations to {out}")
    return 0


def cmd_train(args, resolved) -> int:
    train_config = cfg.training_config(resolved)
    if args.dry_run:
        print("configuration valid; dry run, nothing written")
        return 0
    out = _prepare_out(args)
    ds = _load_ds(args.dataset)
    bundle = None
    if args.resume:
        bundle = _load_model(args.resume)
        if not isinstance(bundle, embedding.EncoderBundle):
            raise cfg.ConfigError("--resume requires a full bundle checkpoint")
    snapshot_steps = (
        range(0, train_config.total_steps, args.snapshot_every)
        if args.snapshot_every
        else ()
    )
    try:
        result = training.train(ds, train_config, bundle=bundle, snapshot_steps=snapshot_steps)
    except training.TrainingDiverged as exc:
        if bundle is not None:
            embedding.save_checkpoint(bundle, out / "checkpoint.json.aborted")
        _dump_config(out, resolved)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    embedding.save_checkpoint(result.bundle, out / "checkpoint.json")
    for step, snap in sorted(result.snapshots.items()):
        embedding.save_checkpoint(snap, out / f"checkpoint_step_{step}.json")
    _write(out / "losses.csv", training.loss_curve_rows(result.reports))
    _dump_config(out, resolved)
    print(f"trained {train_config.total_steps} steps; checkpoint at {out / 'checkpoint.json'}")
    return 0


def cmd_eval(args, resolved) -> int:
    out = _prepare_out(args)
    ds = _load_ds(args.dataset)
    model = _load_model(args.checkpoint)
    eval_config = cfg.eval_config(resolved)
    detect_config = cfg.detect_config(resolved)
    protocols = evalkit.PROTOCOLS if args.protocol == "all" else (args.protocol,)
    per_domain: dict[str, dict[str, float]] = {d: {} for d in ds.domains()}
    for protocol in protocols:
        scores = evalkit.evaluate_protocol(
            model, ds, protocol, eval_config, detect_config, split=args.split
        )
        for domain, value in scores.items():
            per_domain[domain][protocol] = value
    payload: dict = {"format_version": 1, "split": args.split, "per_domain": per_domain}
    if {"text-g", "visual-g"} <= set(protocols):
        report = evalkit.aggregate(per_domain)
        payload["aggregate"] = report.payload()
        _write(out / "table.txt", evalkit.render_summary_table(report, "minidet", "desk"))
    _write(out / "report.json", canonical_json(payload))
    _dump_config(out, resolved)
    print(f"evaluated {', '.join(protocols)} on split {args.split}")
    return 0


def cmd_insdet(args, resolved) -> int:
    out = _prepare_out(args)
    ds = _load_ds(args.dataset)
    model = _load_model(args.checkpoint)
    cascade = cfg.cascade_config(resolved)
    result = postproc.run_cascade(
        model, ds, cascade, split=args.split, eval_config=cfg.eval_config(resolved)
    )
    ladder = postproc.render_ladder(result.stages)
    _write(out / "ladder.txt", ladder)
    _write(
        out / "ladder.json",
        canonical_json({"format_version": 1, **result.payload()}),
    )
    _dump_config(out, resolved)
    print(ladder, end="")
    return 0


def cmd_fsod(args, resolved) -> int:
    out = _prepare_out(args)
    ds = _load_ds(args.dataset)
    checkpoints = []
    for i, path in enumerate(args.checkpoint):
        checkpoints.append((f"ckpt{i}:{Path(path).stem}", _load_model(path)))
    fsod_cfg = resolved["fsod"]
    table = fsod.augment_prompts(
        sorted(ds.categories.values(), key=lambda c: c.id),
        fsod.RuleParaphraser(_BUILTIN_SYNONYMS),
        negatives=int(fsod_cfg["negatives"]),
        seed=resolved["seed"],
    )
    result = fsod.select_checkpoint(
        checkpoints,
        ds,
        table,
        pseudo_floor=float(fsod_cfg["pseudo_floor"]),
        eval_config=cfg.eval_config(resolved),
        detect_config=cfg.detect_config(resolved),
        visual_n=int(fsod_cfg["visual_n"]),
        seed=resolved["seed"],
    )
    grid_size = len(fsod.all_factor_assignments())
    print(f"factor grid size: {grid_size} assignments per domain")
    _write(out / "factor_grid.json", canonical_json({"format_version": 1, **result.payload()}))
    # Final inference on the test split runs without category restriction.
    by_label = dict(checkpoints)
    detect_config = cfg.detect_config(resolved)
    for domain, (label, key) in sorted(result.winners.items()):
        assignment = next(
            a for a in fsod.all_factor_assignments() if a.key() == key
        )
        model = by_label[label]
        dets = []
        for sid in ds.split_scene_ids("test") or sorted(ds.scenes):
            scene = ds.scenes[sid]
            if scene.domain != domain:
                continue
            prompts = fsod.assignment_prompts(
                ds,
                assignment,
                table,
                ds.domain_category_ids(domain),
                sid,
                int(fsod_cfg["visual_n"]),
                resolved["seed"],
            )
            dets.extend(inference.detect(model, ds, scene, prompts, detect_config))
        inference.write_detections(dets, out / f"test_detections_{domain}.json")
        print(f"{domain}: winner {label} [{key}]")
    _dump_config(out, resolved)
    return 0


def cmd_curate(args, resolved) -> int:
    out = _prepare_out(args)
    ds = _load_ds(args.dataset)
    model = _load_model(args.checkpoint)
    selection = cfg.selection_config(resolved, budget=args.budget)
    selected = engine.select_subset(ds, selection, model)
    _write(
        out / "selection.json",
        canonical_json(
            {
                "format_version": 1,
                "budget": selection.budget,
                "alpha": selection.alpha,
                "selected_scene_ids": selected,
            }
        ),
    )
    _dump_config(out, resolved)
    print(f"selected {len(selected)} of {len(ds.scenes)} scenes")
    return 0


def cmd_autolabel(args, resolved) -> int:
    out = _prepare_out(args)
    ds = _load_ds(args.dataset)
    model = _load_model(args.checkpoint)
    filters = cfg.label_filter_config(resolved)
    oracles = engine.build_desk_oracles(model, ds)
    fwd = engine.autolabel_forward(ds, oracles, model, filters)
    bwd = engine.autolabel_backward(ds, oracles, model, filters)
    merged, counts = engine.merge_labels(ds, fwd, bwd)
    additions = {
        "format_version": 1,
        "categories": [
            {"id": c.id, "name": c.name}
            for c in sorted(merged.categories.values(), key=lambda c: c.id)
            if c.id not in ds.categories
        ],
        "annotations": [
            {
                "id": a.id,
                "image_id": a.scene_id,
                "category_id": a.category_id,
                "bbox": a.box.as_xywh(),
                "provenance": a.provenance,
            }
            for a in sorted(merged.annotations.values(), key=lambda a: a.id)
            if a.provenance != "ground-truth"
        ],
        "errors": {str(k): v for k, v in sorted({**fwd.errors, **bwd.errors}.items())},
        "counts": counts,
    }
    _write(out / "autolabels.json", canonical_json(additions))
    _write(out / "merged_annotations.json", canonical_json(coco_payload(merged)))
    _dump_config(out, resolved)
    print(
        "auto-labeling added "
        f"{counts.get('auto-label-forward', 0)} forward and "
        f"{counts.get('auto-label-backward', 0)} backward labels"
    )
    return 0


_BUILTIN_SYNONYMS = {
    "red": "crimson",
    "green": "emerald",
    "blue": "azure",
    "square": "quadrilateral block",
    "circle": "round disc",
    "triangle": "three-cornered wedge",
}


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
