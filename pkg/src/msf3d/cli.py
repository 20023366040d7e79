"""Command-line entry point: generate, train, infer, eval, gradcheck, report.

Exit codes: 0 success, 1 input error, 2 contract violation, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import InputError, MSF3DError
from .formats import read_detections, read_ground_truth, write_detections, write_ground_truth

log = logging.getLogger("msf3d")


def _load_scenes(directory):
    from .scene import load_scene

    if not Path(directory).is_dir():
        raise InputError(f"{directory} is not a directory")
    return [load_scene(p) for p in sorted(Path(directory).glob("*.json"))]


def cmd_generate(args) -> int:
    from .scene import SceneSpec, generate_scene, save_scene
    from .train import ground_truth_records, load_config

    spec = load_config(args.config).scene if args.config else SceneSpec()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = []
    for i in range(args.count):
        scene = generate_scene(spec, args.seed + i)
        save_scene(scene, out / f"{scene.sample_id}.json")
        scenes.append(scene)
    write_ground_truth(out / "ground_truth.txt", ground_truth_records(scenes))
    log.info("wrote %d scenes to %s", len(scenes), out)
    return 0


def cmd_train(args) -> int:
    from .train import load_config, train

    config = load_config(args.config)
    scenes = _load_scenes(args.scenes) if args.scenes else None
    log_file = open(args.log, "w") if args.log else None

    def on_step(entry):
        if log_file:
            log_file.write(json.dumps(entry) + "\n")
        if entry["step"] % args.print_every == 0:
            layers = " ".join(f"L{i}:{l['cls']:.4f}/{l['box']:.4f}" for i, l in enumerate(entry["layers"]))
            log.info("step %d lr %.3e loss %.5f %s", entry["step"], entry["lr"], entry["loss"], layers)

    try:
        result = train(config, scenes, on_step, checkpoint_dir=Path(args.out).parent)
    finally:
        if log_file:
            log_file.close()
    result.checkpoint.save(args.out)
    log.info("saved checkpoint to %s", args.out)
    return 0


def cmd_infer(args) -> int:
    from .train import Checkpoint, infer, load_config

    ckpt = Checkpoint.load(args.checkpoint)
    config = load_config(args.config) if args.config else None
    records = infer(ckpt, _load_scenes(args.scenes), config, args.top_k)
    write_detections(args.out, records)
    log.info("wrote %d detections to %s", len(records), args.out)
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate

    report = evaluate(read_detections(args.detections), read_ground_truth(args.ground_truth))
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    print(report.table(args.method))
    return 0


def cmd_report(args) -> int:
    from .metrics import MetricsReport

    try:
        report = MetricsReport.from_dict(json.loads(Path(args.report).read_text()))
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise InputError(f"cannot read report {args.report}: {exc}") from exc
    print(report.table(args.method))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    outcomes = run_suite(args.seed, args.samples)
    for o in outcomes:
        print(o.line())
    failed = [o.name for o in outcomes if not o.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return 3
    print(f"all {len(outcomes)} checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msf3d", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic scenes and a ground-truth file")
    p.add_argument("--config", help="training config whose scene section is used")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a detector and write a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--scenes", help="directory of scene files (default: generate from the config)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="JSON-lines per-step loss log")
    p.add_argument("--print-every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run a checkpoint on scenes and write detections")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="refuse to run if this config disagrees with the checkpoint")
    p.add_argument("--top-k", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--detections", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--out", help="write the report as JSON")
    p.add_argument("--method", default="model")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and composite layer")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="render a saved report as a table")
    p.add_argument("report")
    p.add_argument("--method", default="model")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except MSF3DError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
