"""Command-line entry point.

Subcommands:

- ``train``       offline training of the shared generic model
- ``pretrain``    offline training of one baseline cohort (ac / draco2like)
- ``test``        deploy a checkpoint into the live marketplace
- ``mix``         deployment with a heterogeneous bidder population
- ``sensitivity`` preference-weight sweep at deployment
- ``oracle``      run the independent self-checks

Exit codes: 0 success, 1 configuration error, 2 self-check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import nn, scenarios
from .baselines import ALGO_AC, ALGO_DRACO2, PRETRAINABLE, PopulationModel
from .scenarios import (config_hash, evaluate, load_config, metric_mean,
                        preset, pretrain_population, run_ofr,
                        sensitivity_sweep, train_generic, write_report_json,
                        write_sensitivity_csv, write_training_csv)
from .simulation import PHASE_TEST, PHASE_TRAIN, World

log = logging.getLogger(__name__)

MIX_ALGOS = ("moody",) * 6 + ("ac", "ac", "draco2like", "draco2like", "random", "random")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None,
                   help="YAML scenario overriding the preset")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--out", type=Path, default=Path("out"), help="artifact directory")
    p.add_argument("--horizon", type=int, default=None, help="override horizon steps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgemarket",
        description="Deterministic edge-offloading auction marketplace with "
                    "multi-objective learning bidders.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the shared generic model offline")
    _add_common(p)
    p.add_argument("--epochs", type=int, default=None,
                   help="stop once every bidder finished this many inner loops")
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="where to write the generic model (default OUT/generic.npz)")

    p = sub.add_parser("pretrain", help="train one baseline cohort offline")
    _add_common(p)
    p.add_argument("--algo", type=str, default=ALGO_AC, choices=PRETRAINABLE,
                   help="which baseline kind to pretrain")
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="where to write the cohort (default OUT/<algo>.npz)")

    for name, help_text in (("test", "deploy a checkpoint into the live market"),
                            ("mix", "deploy a heterogeneous population")):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.add_argument("--seeds", type=str, default=None,
                       help="comma-separated master seeds (overrides --seed)")
        p.add_argument("--checkpoint", type=Path, default=None,
                       help="generic model to deploy (omit for random init)")
        p.add_argument("--ac-checkpoint", type=Path, default=None, dest="ac_checkpoint",
                       help="pretrained actor-critic cohort (omit for random init)")
        p.add_argument("--draco-checkpoint", type=Path, default=None,
                       dest="draco_checkpoint",
                       help="pretrained single-objective cohort (omit for random init)")
        p.add_argument("--audit-log", type=Path, default=None, dest="audit_log",
                       help="write audit counters and the event trace of the "
                            "first seed here")

    p = sub.add_parser("sensitivity", help="sweep one preference weight")
    _add_common(p)
    p.add_argument("--seeds", type=str, default="0,1,2")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--weight", type=str, default="w_fairness")
    p.add_argument("--grid", type=str, default="0.1,0.3,0.5,0.7,0.9")

    p = sub.add_parser("oracle", help="run the independent self-checks")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _resolve_config(args, phase: str):
    cfg = load_config(args.config) if args.config else preset(phase)
    updates = {"seed": args.seed, "phase": phase}
    if args.horizon:
        updates["horizon_steps"] = args.horizon
    return dataclasses.replace(cfg, **updates)


def _seed_list(args) -> list[int]:
    if getattr(args, "seeds", None):
        return [int(s) for s in str(args.seeds).split(",") if s.strip() != ""]
    return [args.seed]


def _load_generic(path):
    if path is None:
        return None, 0
    arch, params, meta = nn.load_checkpoint(path)
    return params, int(meta.get("steps_trained", 0))


def _load_baselines(args) -> dict[str, PopulationModel]:
    models = {}
    for algo, path in ((ALGO_AC, getattr(args, "ac_checkpoint", None)),
                       (ALGO_DRACO2, getattr(args, "draco_checkpoint", None))):
        if path is None:
            continue
        arch, params_list, meta = nn.load_population(path)
        if meta.get("algo", algo) != algo:
            raise ValueError(f"{path} holds a {meta.get('algo')!r} cohort, "
                             f"expected {algo!r}")
        models[algo] = PopulationModel(algo=algo, params_by_agent=params_list,
                                       steps_trained=int(meta.get("steps_trained", 0)))
    return models


def _cmd_train(args) -> int:
    cfg = _resolve_config(args, PHASE_TRAIN)
    args.out.mkdir(parents=True, exist_ok=True)
    result = train_generic(cfg, stop_after_epochs=args.epochs)
    ck = args.checkpoint or (args.out / "generic.npz")
    from .agent import make_arch
    arch = make_arch(len(cfg.type_names), cfg.hyper)
    nn.save_checkpoint(ck, arch, result.checkpoint_params,
                       meta={"steps_trained": result.steps_trained,
                             "config_hash": config_hash(cfg),
                             "seed": cfg.seed})
    result.metrics.write(args.out / f"metrics_seed{cfg.seed}.csv")
    write_training_csv(result.training_rows, args.out / f"training_seed{cfg.seed}.csv")
    write_report_json([result], cfg, args.out / "report.json")
    print(f"trained {result.report['steps']} steps, "
          f"{len(result.training_rows)} handoffs, checkpoint -> {ck}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _resolve_config(args, PHASE_TRAIN)
    args.out.mkdir(parents=True, exist_ok=True)
    model, result = pretrain_population(cfg, args.algo)
    ck = args.checkpoint or (args.out / f"{args.algo}.npz")
    from .agent import make_arch
    arch = make_arch(len(cfg.type_names), cfg.hyper)
    nn.save_population(ck, arch, model.params_by_agent,
                       meta={"algo": args.algo,
                             "steps_trained": model.steps_trained,
                             "config_hash": config_hash(result.config),
                             "seed": cfg.seed})
    result.metrics.write(args.out / f"pretrain_{args.algo}_seed{cfg.seed}.csv")
    print(f"pretrained {len(model.params_by_agent)} {args.algo} bidder(s) for "
          f"{result.report['steps']} steps, cohort -> {ck}")
    return 0


def _cmd_deploy(args, mix: bool) -> int:
    cfg = _resolve_config(args, PHASE_TEST)
    if mix:
        cfg = dataclasses.replace(cfg, algos=MIX_ALGOS)
    args.out.mkdir(parents=True, exist_ok=True)
    params, steps_trained = _load_generic(args.checkpoint)
    baselines = _load_baselines(args)
    seeds = _seed_list(args)
    results = evaluate(cfg, seeds, generic_params=params,
                       generic_steps_trained=steps_trained,
                       baseline_models=baselines)
    for seed, res in zip(seeds, results):
        res.metrics.write(args.out / f"metrics_seed{seed}.csv")
    write_report_json(results, cfg, args.out / "report.json")
    if args.audit_log:
        world = World(dataclasses.replace(cfg, seed=seeds[0]), generic_params=params,
                      generic_steps_trained=steps_trained,
                      baseline_models=baselines)
        res = world.run()
        lines = [f"# audit {k}={v}" for k, v in sorted(res.report["audit"].items())]
        lines += ["step,seq,kind"]
        lines += [f"{s},{q},{k}" for s, q, k in world.trace]
        args.audit_log.write_text("\n".join(lines) + "\n", encoding="utf-8")
    ofr = scenarios.t_interval([run_ofr(r) for r in results])
    fair = scenarios.t_interval([metric_mean(r, "fairness") for r in results])
    print(f"{len(results)} run(s): failure share {ofr.mean:.3f} +/- {ofr.half:.3f}, "
          f"fairness {fair.mean:.3f} +/- {fair.half:.3f}")
    return 0


def _cmd_sensitivity(args) -> int:
    cfg = _resolve_config(args, PHASE_TEST)
    args.out.mkdir(parents=True, exist_ok=True)
    params, steps_trained = _load_generic(args.checkpoint)
    grid = [float(x) for x in args.grid.split(",")]
    rows = sensitivity_sweep(cfg, args.weight, grid, _seed_list(args),
                             generic_params=params, generic_steps_trained=steps_trained)
    write_sensitivity_csv(rows, args.out / "sensitivity.csv")
    for row in rows:
        print(f"{row['weight']}={row['value']:.2f}: failure share "
              f"{row['ofr_mean']:.3f}, fairness {row['fairness_mean']:.3f}")
    return 0


def _cmd_oracle(args) -> int:
    from .selfcheck import run_all
    checks = run_all(args.seed)
    failed = 0
    for name, (ok, detail) in checks.items():
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        failed += 0 if ok else 1
    return 2 if failed else 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "pretrain":
            return _cmd_pretrain(args)
        if args.command == "test":
            return _cmd_deploy(args, mix=False)
        if args.command == "mix":
            return _cmd_deploy(args, mix=True)
        if args.command == "sensitivity":
            return _cmd_sensitivity(args)
        if args.command == "oracle":
            return _cmd_oracle(args)
        raise AssertionError(f"unhandled command {args.command}")
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
