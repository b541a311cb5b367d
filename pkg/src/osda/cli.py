"""Command-line orchestration: dataset prep, runs, sweeps, and reports.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import data as datamod
from . import evaluation, mining, strategies, training
from .config import ConfigError, ExperimentConfig, load_config, save_config
from .models import load_checkpoint
from .training import STRATEGIES

log = logging.getLogger("osda")


def _task_dir(task):
    return task.replace(":", "-")


def prepare_task(cfg, task):
    """Build the relabeled (source, target, split) triple for a task."""
    src_name, _, tgt_name = task.partition(":")
    ds = cfg.dataset
    if ds.kind == "synthetic":
        source, target, split = datamod.synth_osda_benchmark(ds.synthetic)
    else:
        source = datamod.load_image_folder(ds.domains[src_name],
                                           ds.image_size, datamod.SOURCE,
                                           name=src_name)
        target = datamod.load_image_folder(ds.domains[tgt_name],
                                           ds.image_size, datamod.TARGET,
                                           name=tgt_name)
        if source.class_names != target.class_names:
            raise ConfigError("domains %s and %s disagree on class names"
                              % (src_name, tgt_name))
        split = datamod.make_osda_split(source.class_names, ds.known_count)
    return (datamod.relabel_for_training(source, split),
            datamod.relabel_for_training(target, split), split)


def _dump_grid(record, plan, run_dir):
    negs = record.negatives
    if negs is None or len(negs) == 0:
        return
    rows = {"pristine": negs.data[:8]}
    if negs.data.ndim == 4:
        aug = strategies.AugmentProvider(
            negs, dataclasses.replace(plan.augment, seed=plan.seed))
        rows["augmented"] = aug.next_batch(min(8, 8))
    if record.gan is not None:
        gen = strategies.GenerationProvider(record.gan, seed=plan.seed)
        rows["generated"] = gen.next_batch(8)
    suffix = "png" if negs.data.ndim == 4 else "csv"
    strategies.dump_sample_grid(run_dir / ("sample_grid.%s" % suffix), rows)


def execute_cell(cfg, task, strategy, seed, out_root):
    """Train one (task, strategy, seed) cell and write its run directory."""
    run_dir = Path(out_root) / _task_dir(task) / strategy / str(seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    source, target, _ = prepare_task(cfg, task)
    plan = cfg.make_plan(strategy, seed)
    save_config(cfg, run_dir / "config.yaml")
    record = training.run(plan, source, target, out_dir=run_dir)
    report = evaluation.evaluate(record.model, target)
    evaluation.save_metrics_json(
        report, run_dir / "metrics.json",
        plan_echo=json.loads(training._plan_fingerprint(plan)))
    _dump_grid(record, plan, run_dir)
    return record, report, run_dir


def cmd_synth(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    synth = cfg.dataset.synthetic
    if args.seed is not None:
        synth = dataclasses.replace(synth, seed=args.seed)
    out = Path(args.out)
    files = [out / "source.csv", out / "target.csv", out / "manifest.json"]
    if any(f.exists() for f in files) and not args.force:
        print("refusing to overwrite %s (use --force)" % out,
              file=sys.stderr)
        return 2
    out.mkdir(parents=True, exist_ok=True)
    source, target, split = datamod.synth_osda_benchmark(synth)
    datamod.save_dataset_csv(source, files[0])
    datamod.save_dataset_csv(target, files[1])
    manifest = {
        "class_names": source.class_names,
        "known_classes": list(split.known_classes),
        "unknown_classes": list(split.unknown_classes),
        "known_count": len(split.known_classes),
        "unknown_count": len(split.unknown_classes),
        "config": dataclasses.asdict(synth),
        "files": ["source.csv", "target.csv"],
    }
    with open(files[2], "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=list)
        f.write("\n")
    print("wrote %s (%d source, %d target examples)"
          % (out, len(source), len(target)))
    return 0


def cmd_run(args):
    cfg = load_config(args.config)
    out_root = cfg.resolve_out_dir(args.out)
    record, report, run_dir = execute_cell(cfg, args.task, args.strategy,
                                           args.seed, out_root)
    flag = " (fallback to baseline)" if record.fallback_to_baseline else ""
    print("task=%s strategy=%s seed=%d acc=%.4f h_score=%.4f%s"
          % (args.task, args.strategy, args.seed, report.acc,
             report.h_score, flag))
    print("run directory: %s" % run_dir)
    return 0


def cmd_sweep(args):
    cfg = load_config(args.config)
    out_root = cfg.resolve_out_dir(args.out)
    failures = []
    executed = skipped = 0
    for task in cfg.tasks:
        for strategy in cfg.strategies:
            for seed in cfg.seeds:
                run_dir = (Path(out_root) / _task_dir(task) / strategy
                           / str(seed))
                if (run_dir / "metrics.json").exists():
                    skipped += 1
                    continue
                try:
                    execute_cell(cfg, task, strategy, seed, out_root)
                    executed += 1
                except Exception as exc:  # record and keep sweeping
                    log.exception("cell failed: %s/%s/seed %d",
                                  task, strategy, seed)
                    failures.append((task, strategy, seed, str(exc)))
    grid = collect_grid(cfg, out_root)
    if grid:
        evaluation.write_tables(grid, out_root,
                                strategies=[s for s in cfg.strategies
                                            if _grid_has(grid, s)])
    if args.render_plots:
        render_plots(cfg, out_root)
    print("sweep complete: %d executed, %d skipped, %d failed"
          % (executed, skipped, len(failures)))
    for task, strategy, seed, msg in failures:
        print("FAILED %s/%s/seed %d: %s" % (task, strategy, seed, msg))
    return 1 if failures else 0


def _grid_has(grid, strategy):
    return all(strategy in row for row in grid.values())


def collect_grid(cfg, out_root):
    """Aggregate metrics.json files under out_root into a render grid."""
    grid = {}
    for task in cfg.tasks:
        for strategy in cfg.strategies:
            reports = []
            for seed in cfg.seeds:
                p = (Path(out_root) / _task_dir(task) / strategy / str(seed)
                     / "metrics.json")
                if not p.exists():
                    continue
                with open(p) as f:
                    d = json.load(f)
                reports.append(evaluation.MetricsReport(
                    acc=d["acc"], acc_known=d["acc_known"],
                    acc_unknown=d["acc_unknown"], h_score=d["h_score"],
                    per_class_acc=d["per_class_acc"], counts=d["counts"],
                    num_known=d["num_known"]))
            if reports:
                agg = evaluation.aggregate(reports)
                cell = evaluation.cell_from_aggregate(agg)
                grid.setdefault(task, {})[strategy] = cell
    return grid


def render_plots(cfg, out_root):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib not installed; skipping plot rendering",
              file=sys.stderr)
        return
    import csv as csvmod

    for losses_csv in Path(out_root).rglob("losses.csv"):
        with open(losses_csv) as f:
            rows = list(csvmod.DictReader(f))
        if not rows:
            continue
        fig, ax = plt.subplots(figsize=(8, 4))
        for col in ("closed_ce", "ova_hncs", "ent_min", "neg_constraint"):
            ax.plot([float(r[col]) for r in rows], label=col, linewidth=0.8)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss contribution")
        ax.legend()
        fig.tight_layout()
        fig.savefig(losses_csv.with_suffix(".png"), dpi=120)
        plt.close(fig)


def cmd_extract(args):
    cfg = load_config(args.config)
    _, target, _ = prepare_task(cfg, args.task)
    model, meta = load_checkpoint(args.checkpoint)
    model.eval()
    negs = mining.extract_negatives(model, target,
                                    threshold=args.threshold,
                                    source_iteration=meta.get("iteration",
                                                              0))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mining.save_manifest(negs, out / "negatives.csv")
    stats = mining.rejection_score_stats(model, target)
    mining.save_stats_csv(stats, out / "rejection_stats.csv")
    print("extracted %d negatives (threshold %.3g) -> %s"
          % (len(negs), args.threshold, out))
    return 0


def cmd_gan_train(args):
    cfg = load_config(args.config)
    _, target, _ = prepare_task(cfg, args.task)
    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    plan = cfg.make_plan("generation", args.seed)
    if args.negatives:
        negs = mining.load_manifest(args.negatives, target=target)
    else:
        negs = mining.extract_negatives(model, target,
                                        threshold=plan.threshold)
    if len(negs) == 0:
        print("no negatives above threshold; nothing to train",
              file=sys.stderr)
        return 1
    gan_cfg = dataclasses.replace(plan.gan, iterations=args.iterations
                                  or plan.gan.iterations, seed=args.seed)
    state = strategies.gan_train(negs, model, gan_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    strategies.save_gan_checkpoint(out / "gan.pt", state)
    with open(out / "gan_history.csv", "w") as f:
        cols = ["iter", "d_loss", "g_adv", "gen_ent", "gen_agree",
                "d_fake_prob"]
        f.write(",".join(cols) + "\n")
        for row in state.history:
            f.write(",".join("%.8g" % row[c] if c != "iter" else str(row[c])
                             for c in cols) + "\n")
    print("gan checkpoint -> %s" % (out / "gan.pt"))
    return 0


def cmd_evaluate(args):
    cfg = load_config(args.config)
    _, target, _ = prepare_task(cfg, args.task)
    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    report = evaluation.evaluate(model, target)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    if args.out:
        evaluation.save_metrics_json(report, args.out)
    return 0


def cmd_report(args):
    out_root = None
    grid = {}
    strategies_order = None
    if args.config:
        cfg = load_config(args.config)
        out_root = cfg.resolve_out_dir(args.out)
        grid = collect_grid(cfg, out_root)
        strategies_order = [s for s in cfg.strategies if _grid_has(grid, s)]
    if args.fixtures:
        fix = evaluation.load_reference_fixtures(args.fixtures)
        for task, row in fix.items():
            grid.setdefault(task, {}).update(row)
        strategies_order = None  # recompute over the merged grid
    if not grid:
        print("no results to report", file=sys.stderr)
        return 1
    target_dir = Path(args.out or out_root or ".")
    csv_text, md_text = evaluation.write_tables(grid, target_dir,
                                                strategies=strategies_order)
    print(md_text)
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="osda",
        description="Open-set domain adaptation harness with "
                    "unknown-exploitation strategies.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="write the synthetic benchmark CSVs")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("run", help="train one task/strategy/seed cell")
    sp.add_argument("--config", required=True)
    sp.add_argument("--task", required=True)
    sp.add_argument("--strategy", required=True, choices=STRATEGIES)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("sweep", help="run tasks x strategies x seeds")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out")
    sp.add_argument("--render-plots", action="store_true")
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("extract", help="extract negatives with a "
                                        "checkpointed model")
    sp.add_argument("--config", required=True)
    sp.add_argument("--task", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--threshold", type=float,
                    default=mining.DEFAULT_THRESHOLD)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_extract)

    sp = sub.add_parser("gan-train", help="train the generator on "
                                          "extracted negatives")
    sp.add_argument("--config", required=True)
    sp.add_argument("--task", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--negatives")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gan_train)

    sp = sub.add_parser("evaluate", help="score a checkpoint on a task's "
                                         "target")
    sp.add_argument("--config", required=True)
    sp.add_argument("--task", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("report", help="aggregate runs and render tables")
    sp.add_argument("--config")
    sp.add_argument("--out")
    sp.add_argument("--fixtures", choices=["office31", "office_home"])
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2
    except Exception as exc:
        log.exception("command failed")
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
