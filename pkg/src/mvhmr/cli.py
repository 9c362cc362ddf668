"""Command-line interface: ``generate``, ``run``, ``ablate``, ``selftest``, ``weights``.

The output directory defaults to ``$MVHMR_OUTPUT_DIR`` (else ``mvhmr_out``)
and the ablation worker count to ``$MVHMR_THREADS`` (else 1).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .ablation import SUITES, ablate, write_suite_report
from .body_model import forward, write_obj
from .engine import ORIENTATION_MODES, EngineConfig, EngineError, run
from .features import save_pyramids
from .fusion import FusionConfig, FusionWeights, init_weights, zero_weights
from .geometry import GeometryError
from .report import ITERATION_HEADER, PROTOCOL_NOTE, evaluate, iteration_rows, write_csv, write_json
from .scenario import Scenario, ScenarioConfig, generate_scenario

OUTPUT_ENV = "MVHMR_OUTPUT_DIR"

log = logging.getLogger("mvhmr")


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_ENV, "mvhmr_out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scenario_config(args) -> ScenarioConfig:
    cfg = ScenarioConfig(n_views=args.views, pixel_noise=args.pixel_noise, occluded_views=args.occluded_views)
    if args.scale_range:
        cfg.scale_range = tuple(args.scale_range)
    if args.skew_view is not None:
        cfg.skew_view = args.skew_view
    return cfg


def _add_scenario_args(p):
    p.add_argument("--views", type=int, default=4, help="number of cameras on the ring")
    p.add_argument("--pixel-noise", type=float, default=0.0, help="detector noise sigma in pixels")
    p.add_argument("--occluded-views", type=int, default=0, help="views with a 25%% occluder")
    p.add_argument("--scale-range", type=float, nargs=2, metavar=("LO", "HI"), help="ground-truth body scale range")
    p.add_argument("--skew-view", type=int, help="view whose init orientation is skewed 30 degrees")


def cmd_generate(args):
    out = _out_dir(args)
    cfg = _scenario_config(args)
    for seed in range(args.seed, args.seed + args.count):
        sc = generate_scenario(cfg, seed)
        path = sc.save(out / f"scenario_{seed:04d}.json")
        write_obj(out / f"scenario_{seed:04d}_gt.obj", sc.gt_mesh[0], sc.template.faces)
        if args.pyramids:
            save_pyramids(out / f"scenario_{seed:04d}_pyramids", sc.pyramids(), {"seed": seed})
        log.info("wrote %s", path)
    return 0


def _engine_config(args) -> EngineConfig:
    kw = dict(n_views=args.views, mode=args.mode, calibrated=not args.calib_free,
              scale_solve=not args.no_scale, seed=args.seed)
    if args.aggregation:
        kw["aggregation"] = args.aggregation
    if args.orientation_mode:
        return EngineConfig.with_orientation_mode(args.orientation_mode, **kw)
    return EngineConfig(**kw)


def cmd_run(args):
    out = _out_dir(args)
    if args.scenario:
        sc = Scenario.load(args.scenario)
        args.views = sc.config.n_views
    else:
        sc = generate_scenario(_scenario_config(args), args.seed)
    cfg = _engine_config(args)
    weights = None
    if cfg.mode == "neural":
        if not args.weights:
            raise EngineError("neural mode needs --weights")
        weights = FusionWeights.load(args.weights)
    state, trace = run(sc, cfg, weights)
    stem = f"run_{sc.seed:04d}_{cfg.mode}"
    metrics = evaluate(sc, state, trace)
    write_csv(out / f"{stem}_iterations.csv", ITERATION_HEADER, iteration_rows(trace))
    write_json(out / f"{stem}_summary.json", {
        "seed": sc.seed,
        "protocol": PROTOCOL_NOTE,
        "engine_config": cfg.to_dict(),
        "scenario_config": sc.config.to_dict(),
        "metrics": {k: v for k, v in metrics.items() if not k.startswith("curve_")},
        "levels": [str(x) for x in trace.levels],
        "residual_px": trace.residual_px,
        "mpjpe": trace.mpjpe,
        "aligner": trace.aligner,
        "failures": trace.failures,
        "final_solve": trace.final_solve,
        "final_state": state.to_dict(),
    })
    if not args.no_figures:
        from .plotting import plot_iterations

        plot_iterations(trace, out / f"{stem}.png", title=f"seed {sc.seed}, {cfg.mode} mode")
    if args.obj:
        for i, s in enumerate(trace.states):
            write_obj(out / f"{stem}_iter{i}.obj", forward(sc.template, s)[0], sc.template.faces)
        write_obj(out / f"{stem}_final.obj", forward(sc.template, state)[0], sc.template.faces)
    print(f"seed {sc.seed}: MPJPE {trace.mpjpe[0]:.2f} -> {metrics['mpjpe']:.2f} mm, "
          f"PA-MPJPE {metrics['pa_mpjpe']:.2f} mm, O err {metrics['o_err_deg']:.2f} deg, scale {metrics['scale']:.4f}")
    return 0


def cmd_ablate(args):
    out = _out_dir(args)
    suites = sorted(SUITES) if args.suite.lower() == "all" else [args.suite]
    base = {"aggregation": args.aggregation} if args.aggregation else {}
    for sid in suites:
        rep = ablate(sid, base, n_seeds=args.seeds, first_seed=args.seed, workers=args.workers)
        write_suite_report(rep, out, figures=not args.no_figures)
        print(f"suite {rep.suite} ({rep.title}), {len(rep.seeds)} seeds, ranked by median {rep.primary}:")
        for s in rep.summary:
            print(f"  {s['rank']}. {s['variant']:<16} {s['median_' + rep.primary]:10.4f}")
    return 0


def cmd_selftest(args):
    from .selftest import run_selftest

    results = run_selftest(seed=args.seed)
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_weights(args):
    cfg = FusionConfig()
    w = zero_weights(cfg) if args.zero else init_weights(cfg, args.seed)
    manifest, blob = w.save(args.path)
    print(f"wrote {manifest} and {blob}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="mvhmr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write scenario files")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--pyramids", action="store_true", help="also dump the feature pyramids")
    g.add_argument("--out")
    _add_scenario_args(g)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="refine one scenario and write its report")
    r.add_argument("--scenario", help="scenario JSON written by generate")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--mode", choices=("descent", "neural"), default="descent")
    r.add_argument("--weights", help="weights file stem for neural mode")
    r.add_argument("--aggregation", choices=("max", "avg", "softmax_sum", "transformer_max"))
    r.add_argument("--orientation-mode", choices=sorted(ORIENTATION_MODES))
    r.add_argument("--calib-free", action="store_true", help="weak-perspective views without calibration")
    r.add_argument("--no-scale", action="store_true", help="skip the global translation/scale solve")
    r.add_argument("--obj", action="store_true", help="write an OBJ mesh per iteration")
    r.add_argument("--no-figures", action="store_true")
    r.add_argument("--out")
    _add_scenario_args(r)
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("ablate", help="run an ablation suite")
    a.add_argument("--suite", default="all", help="T3, T4, T5 or all")
    a.add_argument("--seeds", type=int, default=20)
    a.add_argument("--seed", type=int, default=0, help="first seed")
    a.add_argument("--workers", type=int, help="parallel scenario workers")
    a.add_argument("--aggregation", choices=("max", "avg", "softmax_sum", "transformer_max"),
                   help="aggregation kind for suites that do not sweep it")
    a.add_argument("--no-figures", action="store_true")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("selftest", help="run the property checks")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_selftest)

    w = sub.add_parser("weights", help="write a fusion weights file")
    w.add_argument("path", help="output stem (writes .json and .bin)")
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--zero", action="store_true", help="all-zero decoders")
    w.set_defaults(func=cmd_weights)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (EngineError, GeometryError, ValueError, OSError) as exc:
        print(f"mvhmr: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
