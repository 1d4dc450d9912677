"""Command-line orchestration of the full pipeline.

Subcommands: synth-data, train-teacher, train-supernet, search, eval, cost,
pareto-export, gradcheck. All knobs live in a JSON run config; --set
overrides individual keys. Outputs land under the configured output
directory; timing information is confined to files under logs/.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import report as R
from . import searcher as SR
from . import space as S
from .costmodel import model_cost, op_signatures
from .datasynth import build_dataset, load_split
from .distill import (KdConfig, TeacherHandle, format_ledger_report, ledger_report)
from .gradcheck import run_gradient_suite
from .runconfig import RunConfig, apply_overrides, load_run_config, write_resolved_config
from .trainer import (CheckpointError, DataSplit, TrainConfig, evaluate, load_checkpoint,
                      load_subnet_model, load_supernet, save_subnet_model,
                      save_supernet, train_standalone, train_supernet)


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    return apply_overrides(cfg, args.set)


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _log(cfg: RunConfig, name: str, text: str):
    logs = _out(cfg) / "logs"
    logs.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y-%m-%d %H:%M:%S")
    with open(logs / name, "a", encoding="utf-8") as fh:
        for line in text.rstrip("\n").split("\n"):
            fh.write(f"[{stamp}] {line}\n")


def _load_data(cfg: RunConfig, split: str) -> DataSplit:
    x, y = load_split(cfg.data.dir, split)
    return DataSplit(x, y)


def _sampling_validator(cfg: RunConfig, space: S.SearchSpace, profile):
    input_len = cfg.cost_input_len()
    theta = cfg.cost.theta
    return lambda config: S.validate_config(config, space, profile, theta, input_len)


def _teacher_path(cfg: RunConfig) -> Path:
    if cfg.kd.teacher_checkpoint:
        return Path(cfg.kd.teacher_checkpoint)
    return _out(cfg) / "teacher.ckpt"


def cmd_synth_data(args) -> int:
    cfg = _load_config(args)
    ds_cfg = cfg.dataset_config()
    manifests = build_dataset(ds_cfg)
    write_resolved_config(cfg, Path(ds_cfg.out_dir) / "synth_config.json")
    for split, manifest in manifests.items():
        print(f"{split}: {len(manifest.entries)} examples "
              f"({len(manifest.entries) // 6} per class)")
    print(f"dataset written to {ds_cfg.out_dir}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _load_config(args)
    space = cfg.build_space()
    data = _load_data(cfg, "train")
    out = _out(cfg)
    config = S.max_config(space)
    tc = TrainConfig(epochs=cfg.teacher.epochs, batch_size=cfg.teacher.batch_size,
                     lr=cfg.teacher.lr, optimizer=cfg.teacher.optimizer, seed=cfg.seed)
    initial = None
    steps_before = 0
    path = _teacher_path(cfg)
    if args.resume:
        model, meta = load_subnet_model(path)
        initial, steps_before = model, int(meta.get("steps", 0))
    t0 = time.perf_counter()
    model, result = train_standalone(space, config, data, tc, initial=initial)
    wall = time.perf_counter() - t0
    train_err = evaluate(model, data)
    meta = {"steps": steps_before + len(result.losses), "train_error": train_err}
    try:
        val = _load_data(cfg, "val")
        meta["val_error"] = evaluate(model, val)
    except (FileNotFoundError, ValueError):
        pass
    save_subnet_model(path, model, meta)
    R.write_csv(out / "teacher_losses.csv", ("step", "loss"),
                enumerate(result.losses))
    R.loss_curve_figure(result.losses, out / "teacher_loss_curve.png",
                        title="teacher training loss")
    write_resolved_config(cfg, out / "teacher_config.json")
    _log(cfg, "train.log", f"teacher: {len(result.losses)} steps in {wall:.1f} s")
    print(f"teacher saved to {path} (steps {meta['steps']})")
    print(f"teacher train error {train_err:.4f}"
          + (f", val error {meta['val_error']:.4f}" if "val_error" in meta else ""))
    return 0


def _run_supernet_once(cfg: RunConfig, space, data, teacher, tau, validator,
                       initial=None):
    kd = None
    if teacher is not None:
        kd = KdConfig(tau=tau, temperature=cfg.kd.temperature, alpha=cfg.kd.alpha)
    tc = TrainConfig(epochs=cfg.train.epochs, batch_size=cfg.train.batch_size,
                     lr=cfg.train.lr, optimizer=cfg.train.optimizer,
                     lr_decay_fraction=cfg.train.lr_decay_fraction, seed=cfg.seed,
                     kd=kd, sample_max_every=cfg.train.sample_max_every)
    return train_supernet(space, data, teacher, tc, validator=validator,
                          initial=initial)


def cmd_train_supernet(args) -> int:
    cfg = _load_config(args)
    space = cfg.build_space()
    profile = cfg.load_cost_profile()
    data = _load_data(cfg, "train")
    out = _out(cfg)
    validator = _sampling_validator(cfg, space, profile)

    teacher = None
    if cfg.kd.enabled:
        if cfg.kd.tau is None and not args.tau_sweep:
            raise ValueError("kd.enabled requires kd.tau (or use --tau-sweep)")
        model, _ = load_subnet_model(_teacher_path(cfg))
        teacher = TeacherHandle(model)

    standard_seconds = None
    if args.standard_reference or args.tau_sweep:
        t0 = time.perf_counter()
        _run_supernet_once(cfg, space, data, None, None, validator)
        standard_seconds = time.perf_counter() - t0
        _log(cfg, "train.log", f"standard reference run: {standard_seconds:.1f} s")

    if args.tau_sweep:
        taus = [float(t) for t in args.tau_sweep.split(",")]
        if teacher is None:
            raise ValueError("--tau-sweep requires kd.enabled and a teacher checkpoint")
        try:
            probe_data = _load_data(cfg, "val")
        except (FileNotFoundError, ValueError):
            probe_data = data
        probe = S.mid_config(space)
        rows = []
        print(f"{'tau':>8} {'query_ratio':>12} {'error':>8} ")
        for tau in taus:
            teacher.queries = 0
            net, result = _run_supernet_once(cfg, space, data, teacher, tau, validator)
            err = evaluate((net, probe), probe_data)
            rows.append((tau, result.ledger.query_ratio, err))
            rep = ledger_report(result.ledger, reference_seconds=standard_seconds)
            _log(cfg, "train.log",
                 f"tau={tau}: wall {result.wall_seconds:.1f} s\n"
                 + format_ledger_report(rep))
            print(f"{tau:>8.3f} {result.ledger.query_ratio:>12.4f} {err:>8.4f}")
        R.write_csv(out / "tau_sweep.csv", ("tau", "query_ratio", "error"), rows)
        R.tau_sweep_figure(rows, out / "tau_sweep.png")
        write_resolved_config(cfg, out / "supernet_config.json")
        print(f"sweep written to {out / 'tau_sweep.csv'}")
        return 0

    initial = None
    steps_before = 0
    ckpt_path = out / "supernet.ckpt"
    if args.resume:
        net0, meta0 = load_supernet(ckpt_path)
        initial, steps_before = net0, int(meta0.get("steps", 0))
    net, result = _run_supernet_once(cfg, space, data, teacher,
                                     cfg.kd.tau if teacher else None, validator,
                                     initial=initial)
    steps = steps_before + len(result.losses)
    save_supernet(ckpt_path, net, {"steps": steps})
    R.write_csv(out / "supernet_losses.csv", ("step", "loss"),
                enumerate(result.losses))
    R.loss_curve_figure(result.losses, out / "supernet_loss_curve.png",
                        title="supernet training loss")
    write_resolved_config(cfg, out / "supernet_config.json")

    if teacher is not None:
        rep = ledger_report(result.ledger, reference_seconds=standard_seconds)
        _log(cfg, "ledger.txt", format_ledger_report(rep))
        print(f"query ratio {rep.query_ratio:.4f} "
              f"({rep.queried_batches}/{rep.total_batches} batches)")
        if rep.wall_clock_ratio is not None:
            print(f"wall-clock ratio vs standard: {rep.wall_clock_ratio:.2f}x")
    _log(cfg, "train.log",
         f"supernet: {len(result.losses)} steps in {result.wall_seconds:.1f} s")
    print(f"supernet saved to {ckpt_path} (steps {steps})")
    return 0


def _make_evaluator(cfg: RunConfig, net) -> SR.FitnessEvaluator:
    try:
        val = _load_data(cfg, "val")
    except (FileNotFoundError, ValueError):
        val = _load_data(cfg, "train")
    if cfg.search.val_subset and cfg.search.val_subset < len(val):
        rng = np.random.default_rng(cfg.seed)
        idx = rng.permutation(len(val))[:cfg.search.val_subset]
        val = val.subset(np.sort(idx))
    return SR.FitnessEvaluator(
        net, val, cfg.load_cost_profile(), cfg.constraints(),
        cost_input_len=cfg.cost_input_len(),
        segment_seconds=cfg.cost_segment_seconds(),
        active_hours=cfg.cost.active_hours)


def cmd_search(args) -> int:
    cfg = _load_config(args)
    out = _out(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "supernet.ckpt"
    net, _ = load_supernet(ckpt)
    evaluator = _make_evaluator(cfg, net)
    rng = np.random.default_rng(cfg.seed)
    mode = cfg.search.mode
    if mode == "evolutionary":
        result = SR.evolutionary_search(evaluator, rng, SR.EvolutionParams(
            population=cfg.search.population, generations=cfg.search.generations,
            mutation=cfg.search.mutation, crossover=cfg.search.crossover,
            tournament=cfg.search.tournament))
    elif mode == "random":
        result = SR.random_search(evaluator, rng, probes=cfg.search.random_probes)
    elif mode == "exhaustive":
        result = SR.exhaustive_search(evaluator, cap=cfg.search.exhaustive_cap)
    else:
        raise ValueError(f"unknown search mode {mode!r}")

    search_dir = out / "search"
    search_dir.mkdir(parents=True, exist_ok=True)
    front = result.front
    R.write_candidates_csv(search_dir / "candidates.csv", result.evaluated)
    R.write_pareto_csv(search_dir / "pareto.csv", front)
    R.pareto_figure(result.evaluated, front, search_dir / "pareto.png")
    if mode == "evolutionary":
        R.write_csv(search_dir / "history.csv",
                    ("generation", "best_error", "mean_error"), result.history)
        R.search_history_figure(result.history, search_dir / "history.png")
    text = R.format_search_report(result.best, mode, evaluator.evaluations,
                                  evaluator.constraints, len(front))
    (search_dir / "report.txt").write_text(text)
    best = {"genes": list(result.best.encoding),
            "config": result.best.config.describe(),
            "error": result.best.error,
            "latency_ms": result.best.cost.latency_ms,
            "energy_mj": result.best.cost.energy_mj,
            "daily_energy_mwh": result.best.cost.daily_energy_mwh}
    with open(search_dir / "best_config.json", "w", encoding="utf-8") as fh:
        json.dump(best, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_resolved_config(cfg, search_dir / "search_config.json")
    print(text, end="")
    return 0


def _resolve_genes(cfg: RunConfig, space, args) -> S.SubnetConfig:
    if getattr(args, "genes", None):
        return S.SubnetConfig.decode(space, R.decode_genes(args.genes))
    if getattr(args, "preset", None):
        return {"min": S.min_config, "mid": S.mid_config,
                "max": S.max_config}[args.preset](space)
    if getattr(args, "best", False):
        best_path = _out(cfg) / "search" / "best_config.json"
        with open(best_path, "r", encoding="utf-8") as fh:
            return S.SubnetConfig.decode(space, json.load(fh)["genes"])
    raise ValueError("specify a sub-network via --genes, --preset, or --best")


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    data = _load_data(cfg, args.split)
    ckpt_path = Path(args.checkpoint) if args.checkpoint \
        else _out(cfg) / "supernet.ckpt"
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.meta.get("kind") == "supernet":
        net, _ = load_supernet(ckpt_path)
        config = _resolve_genes(cfg, net.space, args)
        err = evaluate((net, config), data)
        print(f"config {config.describe()}")
    else:
        model, _ = load_subnet_model(ckpt_path)
        err = evaluate(model, data)
        print(f"config {model.config.describe()}")
    print(f"{args.split} error rate: {err:.4f}")
    return 0


def cmd_cost(args) -> int:
    cfg = _load_config(args)
    space = cfg.build_space()
    profile = cfg.load_cost_profile()
    config = _resolve_genes(cfg, space, args)
    input_len = cfg.cost_input_len()
    sigs = op_signatures(space, config, input_len)
    est = model_cost(profile, space, config, input_len,
                     cfg.cost_segment_seconds(), cfg.cost.active_hours)
    print(f"config {config.describe()}")
    print(f"{'op':>4} {'c_in':>5} {'c_out':>6} {'k':>3} {'stride':>6} "
          f"{'l_in':>7} {'latency_ms':>11} {'energy_mj':>10}")
    for i, sig in enumerate(sigs):
        lat, en = profile.op_cost(sig)
        print(f"{i:>4} {sig.c_in:>5} {sig.c_out:>6} {sig.kernel:>3} "
              f"{sig.stride:>6} {sig.l_in:>7} {lat:>11.4f} {en:>10.4f}")
    print(f"latency_ms: {est.latency_ms:.4f}")
    print(f"energy_mj_per_inference: {est.energy_mj:.4f}")
    print(f"daily_energy_mwh: {est.daily_energy_mwh:.4f}")
    return 0


def cmd_pareto_export(args) -> int:
    cfg = _load_config(args)
    out = _out(cfg)
    src = Path(args.candidates) if args.candidates \
        else out / "search" / "candidates.csv"
    space = cfg.build_space()
    candidates = R.candidates_from_csv(src, space)
    front = SR.pareto_front(c for c in candidates if c.feasible)
    R.write_pareto_csv(out / "pareto.csv", front)
    R.pareto_figure(candidates, front, out / "pareto.png")
    print(f"{len(front)} non-dominated candidates of {len(candidates)} evaluated")
    print(f"pareto front written to {out / 'pareto.csv'} (+ pareto.png)")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradient_suite(cases=args.cases, seed=args.seed)
    print(f"{'operator':<34} {'worst rel err':>14} {'status':>8}")
    failed = False
    for name, worst, ok in results:
        print(f"{name:<34} {worst:>14.3e} {'ok' if ok else 'FAIL':>8}")
        failed |= not ok
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="headcount",
        description="Hardware-aware architecture search for on-device "
                    "speaker-count estimation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", help="run config JSON file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")

    p = sub.add_parser("synth-data", help="generate a balanced mixture dataset")
    common(p)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-teacher", help="train the max-config teacher network")
    common(p)
    p.add_argument("--resume", action="store_true",
                   help="continue from the existing teacher checkpoint")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-supernet",
                       help="train the weight-sharing supernet (optionally gated KD)")
    common(p)
    p.add_argument("--resume", action="store_true",
                   help="continue from the existing supernet checkpoint")
    p.add_argument("--tau-sweep", metavar="T1,T2,...",
                   help="train once per threshold and tabulate query ratio/error")
    p.add_argument("--standard-reference", action="store_true",
                   help="also run standard training to report the wall-clock ratio")
    p.set_defaults(func=cmd_train_supernet)

    p = sub.add_parser("search", help="search sub-networks under the cost budgets")
    common(p)
    p.add_argument("--checkpoint", help="supernet checkpoint "
                                        "(default <output_dir>/supernet.ckpt)")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    common(p)
    p.add_argument("--checkpoint", help="supernet or standalone checkpoint")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--genes", help="flat gene string like 2-0-1-...")
    p.add_argument("--preset", choices=("min", "mid", "max"))
    p.add_argument("--best", action="store_true",
                   help="use <output_dir>/search/best_config.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cost", help="estimate latency/energy of one sub-network")
    common(p)
    p.add_argument("--genes", help="flat gene string like 2-0-1-...")
    p.add_argument("--preset", choices=("min", "mid", "max"))
    p.add_argument("--best", action="store_true")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("pareto-export",
                       help="export the Pareto front CSV and figure")
    common(p)
    p.add_argument("--candidates", help="candidates CSV "
                                        "(default <output_dir>/search/candidates.csv)")
    p.set_defaults(func=cmd_pareto_export)

    p = sub.add_parser("gradcheck", help="finite-difference operator verification")
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError, CheckpointError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
