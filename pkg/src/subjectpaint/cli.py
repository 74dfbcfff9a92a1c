"""Command-line entry point. Exit codes: 0 ok, 1 runtime failure, 2 usage or I/O error."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


log = logging.getLogger("subjectpaint")


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="JSON or YAML overrides applied on top of the profile")
    p.add_argument("--profile", choices=["desk", "paper"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="subjectpaint", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render the synthetic scene dataset")
    _common(p)

    p = sub.add_parser("ingest-coco", help="convert COCO-style annotations into a dataset directory")
    p.add_argument("--instances", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--test-instances")
    p.add_argument("--test-captions")
    p.add_argument("--image-root")
    _common(p)

    for name in ("train-layout", "train-paint"):
        p = sub.add_parser(name, help=f"{name.split('-')[1]} model training")
        p.add_argument("--data", help="dataset directory (default: $SCENEBOOTH_DATA)")
        p.add_argument("--resume", help="checkpoint to continue from")
        _common(p)

    p = sub.add_parser("generate", help="subject image + caption + phrases -> composed scenes")
    p.add_argument("--subject", required=True, help="PNG; alpha marks subject pixels")
    p.add_argument("--caption", required=True)
    p.add_argument("--phrases", nargs="+", required=True, help="object phrases; prefix the subject with '*'")
    p.add_argument("--layout-ckpt", required=True)
    p.add_argument("--paint-ckpt", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--all-k", action="store_true", help="paint every sampled layout, not just the first")
    _common(p)

    p = sub.add_parser("drag", help="move the subject of a previous generation and repaint")
    p.add_argument("--record", required=True, help="record.json written by generate")
    p.add_argument("--dx", type=float, required=True, help="horizontal shift as a fraction of width")
    p.add_argument("--dy", type=float, default=0.0, help="vertical shift as a fraction of height")
    _common(p)

    p = sub.add_parser("evaluate", help="layout and image metrics on the test split")
    p.add_argument("--data", help="dataset directory (default: $SCENEBOOTH_DATA)")
    p.add_argument("--layout-ckpt")
    p.add_argument("--paint-ckpt")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--gt-as-generated", action="store_true",
                   help="score the ground-truth layouts themselves (sanity check)")
    _common(p)
    return ap


def _config(args):
    from .config import load_config

    if args.config and not Path(args.config).exists():
        raise FileNotFoundError(f"config not found: {args.config}")
    return load_config(args.config, args.profile, args.seed)


def _data_root(args) -> Path:
    from .data import dataset_root

    root = dataset_root(args.data)
    if not (root / "index.jsonl").exists():
        raise FileNotFoundError(f"no dataset at {root} (index.jsonl missing)")
    return root


def run(args) -> int:
    from . import pipeline

    cfg = _config(args)
    out = Path(args.out)
    if args.command == "synth-data":
        root = pipeline.synth_dataset(cfg, out)
        print(f"wrote dataset to {root}")
    elif args.command == "ingest-coco":
        for p in (args.instances, args.captions, args.test_instances, args.test_captions):
            if p is not None and not Path(p).exists():
                raise FileNotFoundError(f"annotation file not found: {p}")
        if (args.test_instances is None) != (args.test_captions is None):
            raise UsageError("--test-instances and --test-captions go together")
        root = pipeline.ingest_dataset(args.instances, args.captions, out, cfg.seed, args.image_root,
                                       args.test_instances, args.test_captions)
        print(f"wrote dataset to {root}")
    elif args.command == "train-layout":
        ckpt = pipeline.train_layout_stage(cfg, _data_root(args), out, args.resume)
        print(f"wrote {ckpt}")
    elif args.command == "train-paint":
        ckpt = pipeline.train_paint_stage(cfg, _data_root(args), out, args.resume)
        print(f"wrote {ckpt}")
    elif args.command == "generate":
        if args.k < 1:
            raise UsageError("--k must be >= 1")
        if not Path(args.subject).exists():
            raise FileNotFoundError(f"subject image not found: {args.subject}")
        rec = pipeline.run_generate(args.subject, args.caption, args.phrases, args.k, cfg.seed, args.layout_ckpt,
                                    args.paint_ckpt, out, args.all_k)
        print(json.dumps(rec["layout"]))
    elif args.command == "drag":
        if not Path(args.record).exists():
            raise FileNotFoundError(f"generation record not found: {args.record}")
        rec = pipeline.run_drag(args.record, args.dx, args.dy, args.seed, out)
        print(f"shifted subject by {rec['drag']['pixels']} pixels")
    elif args.command == "evaluate":
        k = args.k or cfg.eval.k
        if k < 1 or args.workers < 1:
            raise UsageError("--k and --workers must be >= 1")
        for p in (args.layout_ckpt, args.paint_ckpt):
            if p is not None and not Path(p).exists():
                raise FileNotFoundError(f"checkpoint not found: {p}")
        report = pipeline.run_evaluate(cfg, _data_root(args), args.layout_ckpt, args.paint_ckpt, k, cfg.seed, out,
                                       args.workers, args.gt_as_generated)
        print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    from .config import CheckpointError
    from .data import SchemaViolationError
    from .pipeline import DragError

    try:
        return run(args)
    except (UsageError, FileNotFoundError, IsADirectoryError, PermissionError, KeyError, json.JSONDecodeError,
            SchemaViolationError, CheckpointError, DragError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
