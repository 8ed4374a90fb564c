"""Command-line entry point: ``mpda <command> ...``.

Exit codes: 0 success, 1 validation error (bad input, config or file), 2 runtime
error (including training divergence).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from mpda.feature_core import FeatureMap, read_fmap, viz_export, write_fmap

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("mpda")


def _agents(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("agent counts must be >= 1")
    return values


def cmd_gen(args) -> int:
    from mpda.synth import collaborator_features, extract_features, gen_scene, get_scenario, scene_seeds

    scen = get_scenario(args.scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, seed in enumerate(scene_seeds(args.seed, args.count)):
        scene = gen_scene(seed)
        stem = f"scene{i:04d}"
        write_fmap(extract_features(scene, scen.ego, 0), out / f"{stem}_ego.fmap")
        collab = collaborator_features(scene, scen.collab_test)
        write_fmap(collab, out / f"{stem}_collab.fmap")
        manifest.append(
            {
                "name": stem,
                "seed": seed,
                "boxes": scene.boxes.array[:, :4].tolist(),
                "visibility": scene.visibility.astype(int).tolist(),
            }
        )
    (out / "scenes.json").write_text(json.dumps({"scenario": scen.name, "scenes": manifest}, indent=1))
    print(f"wrote {args.count} scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from mpda.training import load_config, train

    cfg = load_config(args.config)
    system, report = train(cfg, progress=not args.quiet)
    system.save(args.out)
    if args.report:
        Path(args.report).write_text(report.to_csv())
    last = report.steps[-1] if report.steps else None
    if last is not None:
        print(f"final step {last.step}: L {last.L:.4f} L_det {last.L_det:.4f} L_domain {last.L_domain:.4f}")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from mpda.evaluation import evaluate
    from mpda.training import TrainedSystem

    system = TrainedSystem.load(args.ckpt)
    report = evaluate(system, args.scenario, args.seed, n_scenes=args.scenes, score_thr=args.score_thr)
    print({"text": report.to_text, "kv": report.to_kv, "json": report.to_json}[args.format]())
    return EXIT_OK


def cmd_adapt(args) -> int:
    from mpda.adapter import adapt
    from mpda.training import TrainedSystem

    system = TrainedSystem.load(args.ckpt)
    dtype = system.cfg.dtype
    f_t = read_fmap(args.inp)
    f_s = read_fmap(args.ego)
    f_t = FeatureMap(f_t.data.to(dtype), f_t.domain_id, f_t.agent_ids)
    f_s = FeatureMap(f_s.data.to(dtype), f_s.domain_id, f_s.agent_ids)
    system.eval()
    system.mpda.adapter.reseed(args.seed)
    with torch.no_grad():
        out = adapt(f_t, f_s, system.mpda.adapter)
    write_fmap(out, args.out)
    print(f"adapted {tuple(f_t.shape)} -> {tuple(out.shape)}, written to {args.out}")
    return EXIT_OK


def cmd_viz(args) -> int:
    for p in viz_export(read_fmap(args.inp), args.out):
        print(p)
    return EXIT_OK


def cmd_bench(args) -> int:
    from mpda.evaluation import bench_inference, format_bench
    from mpda.training import TrainedSystem

    rows = bench_inference(TrainedSystem.load(args.ckpt), args.agents, args.iters, args.warmup)
    print(format_bench(rows))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from mpda.gradcheck import format_results, run_suite

    results = run_suite(args.seed)
    print(format_results(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpda", description="Heterogeneous-backbone feature adaptation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", help="generate synthetic scenes as FMAP files")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--out", required=True)
    s.add_argument("--scenario", default="hetero1")
    s.set_defaults(fn=cmd_gen)

    s = sub.add_parser("train", help="train no-fusion, naive and adapted models")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report", help="write the per-step loss report as CSV")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="AP@0.5/0.7 on held-out scenes")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scenario", default="hetero1")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scenes", type=int, default=64)
    s.add_argument("--score-thr", type=float, default=0.3)
    s.add_argument("--format", choices=("text", "kv", "json"), default="text")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("adapt", help="map collaborator features into the ego feature space")
    s.add_argument("--in", dest="inp", required=True, help="collaborator FMAP")
    s.add_argument("--ego", required=True, help="ego FMAP supplying keys/values")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0, help="seed for the channel aligner's random drop/pad")
    s.set_defaults(fn=cmd_adapt)

    s = sub.add_parser("viz", help="export |channel| sums as PGM images")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_viz)

    s = sub.add_parser("bench", help="inference throughput per collaborator count")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--agents", type=_agents, default=(1, 2, 3, 4))
    s.add_argument("--iters", type=int, default=20)
    s.add_argument("--warmup", type=int, default=3)
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("gradcheck", help="finite-difference check of every learnable operation")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    try:
        return args.fn(args)
    except (ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # divergence and anything unexpected
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
