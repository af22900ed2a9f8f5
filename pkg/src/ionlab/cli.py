"""``ionlab`` command line: each pipeline stage reads and writes files.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or malformed
input), 3 verification failure (gradient check over tolerance).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import io as lab_io
from .config import ConfigError, ExperimentConfig, load_config, parse_config_text
from .data import DataConfig, generate_shapes_dataset, ground_truth, proposal_recall
from .gradcheck import REGISTRY, TOLERANCE, format_reports, run_gradcheck
from .metrics import evaluate
from .model import IonModel
from .nn_core import load_params, save_params
from .postprocess import COCO_TUNED, RawDetections, VotingConfig, postprocess, threshold_search
from .rfield import RFIELD_OPS, probe_receptive_field
from .train import TrainState, run_staged_training, write_curve_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("ionlab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


# ------------------------------------------------------------ subcommands


def cmd_gradcheck(args) -> int:
    reports = run_gradcheck(args.ops or None, args.instances, _seed(args), tolerance=args.tolerance,
                            registry=REGISTRY)
    print(format_reports(reports))
    failed = [r.op_name for r in reports if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)} exceed {args.tolerance:g}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_rfield(args) -> int:
    ops = RFIELD_OPS if args.op == "all" else (args.op,)
    for op in ops:
        rf = probe_receptive_field(op, args.height, args.width, args.channels, _seed(args))
        print(rf.describe())
    return EXIT_OK


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else parse_config_text("")
    if args.seed is not None:
        cfg.budget.seed = args.seed
    if getattr(args, "iters", None) is not None:
        cfg.budget.iters = args.iters
    return cfg


def cmd_train(args) -> int:
    cfg = _experiment(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.scenes:
        train = lab_io.load_scenes(args.scenes)
    else:
        b = cfg.budget
        train = generate_shapes_dataset(b.train_seed, b.n_train, b.data)
    model = IonModel(cfg.model)
    tc = cfg.train_config()
    model, curve = run_staged_training(model, train, tc, TrainState(tc.seed))
    text = cfg.to_text()
    save_params(out / "params.bin", model.params, {"config": text})
    (out / "config.txt").write_text(text)
    write_curve_csv(curve, out / "curve.csv")
    last = curve[-1] if curve else {}
    print(f"trained {len(curve)} updates; final loss {last.get('total', float('nan')):.4f}; "
          f"checkpoint {out / 'params.bin'}")
    return EXIT_OK


def load_model(path) -> IonModel:
    arrays, meta = load_params(path)
    if "config" not in meta:
        raise lab_io.DataFormatError("checkpoint carries no model config", path)
    cfg = parse_config_text(meta["config"], f"{path}[config]")
    model = IonModel(cfg.model)
    model.load_state(arrays)
    return model


def cmd_detect(args) -> int:
    model = load_model(args.checkpoint)
    scenes = lab_io.load_scenes(args.scenes)
    dets = []
    for sc in scenes:
        dets.extend(model.raw_detections(sc, args.rounds, args.flip).to_detections())
    lab_io.write_detections(args.out, dets)
    print(f"wrote {len(dets)} raw detections for {len(scenes)} images to {args.out}")
    return EXIT_OK


def _voting(args) -> VotingConfig:
    nms_iou, vote_iou = args.nms_iou, args.vote_iou
    if args.preset == "coco_tuned":
        nms_iou, vote_iou = COCO_TUNED["nms_iou"], COCO_TUNED["vote_iou"]
    vote = None if args.no_vote else vote_iou
    return VotingConfig(nms_iou, vote, 2, args.score_thresh, args.max_per_image)


def cmd_postprocess(args) -> int:
    dets = lab_io.read_detections(args.detections)
    out = postprocess(dets, _voting(args))
    lab_io.write_detections(args.out, out)
    print(f"kept {len(out)} of {len(dets)} detections")
    return EXIT_OK


def cmd_eval(args) -> int:
    dets = lab_io.read_detections(args.detections)
    gts = lab_io.read_ground_truth(args.gt)
    result = evaluate(dets, gts, args.max_dets)
    print(result.table())
    if args.json:
        Path(args.json).write_text(json.dumps(result.as_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_threshsearch(args) -> int:
    dets = lab_io.read_detections(args.detections)
    gts = lab_io.read_ground_truth(args.gt)
    by_image = {}
    for d in dets:
        by_image.setdefault(d.image_id, []).append(d)
    raws = [RawDetections.from_detections(i, ds) for i, ds in by_image.items()]
    if not raws or not gts:
        raise lab_io.DataFormatError("threshold search needs non-empty detections and ground truth")
    seed = _seed(args)
    nms_t, vote_t, score = threshold_search(raws, gts, args.samples, seed)
    print(json.dumps({"nms_iou": nms_t, "vote_iou": vote_t, "map": score}))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = _seed(args)
    scenes = generate_shapes_dataset(seed, args.n, DataConfig(image_size=args.image_size), args.start_id)
    lab_io.save_scenes(out / "scenes.npz", scenes)
    lab_io.write_ground_truth(out / "gt.jsonl", ground_truth(scenes))
    rec = proposal_recall(scenes)
    print(f"wrote {len(scenes)} scenes to {out}; proposal recall@0.5 all {rec['all']:.3f} "
          f"small {rec['small']:.3f} large {rec['large']:.3f}")
    return EXIT_OK


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ionlab", description="Context-aware detection laboratory.")
    p.add_argument("--seed", type=int, default=None, help="seed override (default: per-command default)")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    # --seed is accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed override")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add = sub.add_parser
    sub.add_parser = lambda name, **kw: _add(name, parents=[common], **kw)

    s = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    s.add_argument("--ops", nargs="*", choices=sorted(REGISTRY), help="subset of ops (default: all)")
    s.add_argument("--instances", type=int, default=5)
    s.add_argument("--tolerance", type=float, default=TOLERANCE)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("rfield", help="perturbation receptive field of a context operator")
    s.add_argument("op", choices=RFIELD_OPS + ("all",))
    s.add_argument("--height", type=int, default=15)
    s.add_argument("--width", type=int, default=15)
    s.add_argument("--channels", type=int, default=2)
    s.set_defaults(fn=cmd_rfield)

    s = sub.add_parser("train", help="train a detector from an experiment config")
    s.add_argument("--config", help="key = value experiment file (default: built-in toy recipe)")
    s.add_argument("--scenes", help="scenes .npz to train on (default: generate per config)")
    s.add_argument("--iters", type=int, help="override budget.iters")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("detect", help="raw (pre-NMS) detections from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scenes", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--rounds", type=int, choices=(1, 2), default=2)
    s.add_argument("--flip", action="store_true", help="average with the left-right flipped image")
    s.set_defaults(fn=cmd_detect)

    s = sub.add_parser("postprocess", help="threshold, NMS, voting, per-image cap")
    s.add_argument("--detections", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--nms-iou", type=float, default=0.3)
    s.add_argument("--vote-iou", type=float, default=0.5)
    s.add_argument("--no-vote", action="store_true")
    s.add_argument("--preset", choices=("coco_tuned",))
    s.add_argument("--score-thresh", type=float, default=0.05)
    s.add_argument("--max-per-image", type=int, default=100)
    s.set_defaults(fn=cmd_postprocess)

    s = sub.add_parser("eval", help="AP / AR report")
    s.add_argument("--detections", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--max-dets", type=int, default=100)
    s.add_argument("--json", help="also write the metrics as JSON")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("threshsearch", help="random search of NMS / voting IoU thresholds")
    s.add_argument("--detections", required=True, help="raw (pre-NMS) detections")
    s.add_argument("--gt", required=True)
    s.add_argument("--samples", type=int, default=200)
    s.set_defaults(fn=cmd_threshsearch)

    s = sub.add_parser("gen-data", help="render a synthetic shapes dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--start-id", type=int, default=0)
    s.set_defaults(fn=cmd_gen_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (lab_io.DataFormatError, ConfigError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
