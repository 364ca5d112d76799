# ===========================================
# cli.py
# ===========================================

## \file cli.py
## \brief Command-line front end: collect, ingest, train, eval, curves, compare, bench, combine.
##
## \details
## \par Usage (examples)
## ```bash
## python3 -m scripts.cli collect --transitions 30000 --agent_lc_rate 0 --track_length 500 --vehicles 20,20 --out data/sim.dsqr
## python3 -m scripts.cli ingest --data_dir data/highD --out data/highd.dsqr
## python3 -m scripts.cli train --buffer data/sim.dsqr --algo surrogate --batch_size 16 --checkpoint_dir checkpoints
## python3 -m scripts.cli eval --checkpoint checkpoints/surrogate_final.dsqn --counts 20 --scenarios 20 --out reports/sur.csv
## python3 -m scripts.cli eval --policy keep-lane --counts 20 --scenarios 20 --out reports/keep.csv
## python3 -m scripts.cli compare reports/sur.csv reports/keep.csv --metric mean_speed
## python3 -m scripts.cli curves --buffer data/sim.dsqr --out reports/curves.csv
## python3 -m scripts.cli bench --sizes 4,16,32 --batchid a7d38b57
## python3 -m scripts.cli combine reports/all.csv reports/sur.csv reports/keep.csv
## ```
##
## \par Options
##     Flags mirror config-file keys; a `--config` file is applied first and
##     explicit flags override it.
##
## \par Exit codes
##     0 success, 1 usage/config error, 2 data/format error or missing file, 3 numeric failure


from pathlib import Path
import argparse
import sys
import numpy as np

from model.errors import ConfigError, DataError, NumericError
from model.qnet import ClippedDoubleQ, SurrogateQNet, load_checkpoint
from model.trainer import TrainConfig, train
from pipeline.bench import batch_directory, combine_batches, new_batch_id, random_scene, run_benchmark, write_benchmark
from pipeline.curves import cumulative_lane_change_curve, write_curve
from pipeline.highd_ingest import IngestConfig, find_recordings, ingest_recordings
from pipeline.replay_io import read_buffer, write_buffer
from pipeline.utils import err, log, set_verbosity
from scripts.config import (
    CHECKPOINT_DIR, DATA_DIR, DB_PATH, DEFAULT_SEED, LOG_DIR, REPORT_DIR, WORKERS, build_config,
)
from sim.collect import ScenarioSpec, collect_dataset
from sim.evaluate import (
    EvalGrid, GreedyQPolicy, KeepLanePolicy, RuleBasedPolicy, combine_reports, compare_reports, evaluate,
    read_report, write_report,
)
from sim.highway import SimConfig, write_events


EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

SIM_KEYS = ("track_length", "lanes", "sim_dt", "action_dt", "sensor_range", "v_desired", "agent_max_speed", "safety")
TRAIN_KEYS = ("gamma", "batch_size", "gradient_steps", "learning_rate", "tau", "seed", "clipped_double_q",
              "eval_interval", "checkpoint_interval", "sampling", "algo")
SCENARIO_KEYS = ("vehicles", "driver_lc_rate", "calibrated", "episode_steps")


class UsageParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        err(message)
        sys.exit(EXIT_USAGE)


def _pick(args, keys) -> dict:
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _add_sim_flags(p):
    p.add_argument("--sim_config", help="SimConfig key-value file")
    p.add_argument("--scenario", help="ScenarioSpec key-value file")
    for key in SIM_KEYS + SCENARIO_KEYS:
        p.add_argument(f"--{key}", help=f"Override {key}")


def _sim_configs(args) -> tuple:
    cfg = build_config(SimConfig, args.sim_config, _pick(args, SIM_KEYS))
    spec = build_config(ScenarioSpec, args.scenario, _pick(args, SCENARIO_KEYS))
    return cfg, spec


def cmd_collect(args):
    cfg, spec = _sim_configs(args)
    seed = args.seed if args.seed is not None else spec.seed
    events = [] if args.events else None
    buffer = collect_dataset(cfg, spec.driver_mix(), float(args.agent_lc_rate), int(args.transitions), int(seed),
                             spec.vehicles, spec.episode_steps, progress=not args.quiet, events=events)
    out = write_buffer(args.out, buffer)
    log(f"Replay buffer saved: {out}")
    if args.events:
        log(f"Event log saved: {write_events(events, args.events)}")


def cmd_ingest(args):
    cfg = build_config(IngestConfig, args.config, _pick(args, ("sensor_range", "v_desired", "lanes", "workers")))
    if args.tracks:
        pairs = [(Path(args.tracks), Path(args.meta) if args.meta else None)]
    else:
        pairs = find_recordings(args.data_dir)
    if not pairs:
        raise FileNotFoundError(f"No *_tracks.csv recordings found in {args.data_dir}")

    buffer, stats = ingest_recordings(pairs, cfg)
    log(f"Replay buffer saved: {write_buffer(args.out, buffer)} ({len(buffer)} transitions)")
    if args.stats:
        Path(args.stats).parent.mkdir(parents=True, exist_ok=True)
        stats.write_csv(args.stats)


def cmd_train(args):
    config = build_config(TrainConfig, args.config, _pick(args, TRAIN_KEYS))
    buffer = read_buffer(args.buffer)
    metrics = args.metrics or str(Path(args.checkpoint_dir) / f"{config.algo}_metrics.csv")
    state, _ = train(config, buffer, checkpoint_dir=args.checkpoint_dir, metrics_path=metrics,
                     progress=not args.quiet)
    log(f"Finished {state.step} steps, final loss {state.loss_history[-1] if state.loss_history else float('nan'):.6g}")


def _policy(args):
    if args.checkpoint:
        net = load_checkpoint(args.checkpoint)
        return GreedyQPolicy(net, args.name or net.arch)
    if args.policy == "rule-based":
        return RuleBasedPolicy(args.name or "rule-based")
    if args.policy == "keep-lane":
        return KeepLanePolicy(args.name or "keep-lane")
    raise ConfigError(f"Policy '{args.policy}' needs --checkpoint")


def cmd_eval(args):
    cfg, spec = _sim_configs(args)
    counts = tuple(int(c) for c in args.counts.split(",")) if args.counts else EvalGrid().vehicle_counts
    grid = EvalGrid(counts, int(args.scenarios))
    report = evaluate(_policy(args), grid, int(args.episode_length), int(args.seed), cfg, spec.driver_mix(),
                      workers=int(args.workers), progress=not args.quiet)
    log(f"Report saved: {write_report(report, args.out)}")
    for row in report.aggregate().iter_rows(named=True):
        log(f"{row['policy']}: mean speed {row['mean_speed_mean']:.3f} m/s, "
            f"lane changes {row['lane_changes_mean']:.2f}/episode, collisions {row['collisions_mean']:.0f}")


def cmd_curves(args):
    curves = cumulative_lane_change_curve(read_buffer(args.buffer))
    log(f"Curve saved: {write_curve(curves, args.out)}")


def cmd_compare(args):
    result = compare_reports(read_report(args.report_a), read_report(args.report_b), args.metric,
                             args.policy_a, args.policy_b)
    row = result.row(0, named=True)
    log(f"{row['metric']}: {row['policy_a']} {row['mean_a']:.4f} vs {row['policy_b']} {row['mean_b']:.4f}, "
        f"t = {row['t']:.4f}, p = {row['p']:.4g}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        result.write_csv(args.out)


def cmd_bench(args):
    rng = np.random.default_rng(int(args.seed))
    net = load_checkpoint(args.checkpoint) if args.checkpoint else SurrogateQNet.initialize(rng)
    if isinstance(net, ClippedDoubleQ):
        # time a single member; the pair doubles every count
        net = net.members[0]
    if not isinstance(net, SurrogateQNet):
        raise ConfigError("bench needs a surrogate checkpoint")
    sizes = [int(s) for s in args.sizes.split(",")]
    scenes = [random_scene(rng, size) for size in sizes for _ in range(int(args.scenes))]

    batch_id = args.batchid or new_batch_id()
    df = run_benchmark(net, scenes, int(args.repeats), batch_id)
    batch_dir = batch_directory(batch_id, args.log_dir)
    write_benchmark(df, batch_dir)
    combine_batches(batch_dir, batch_dir / f"bench_all_{batch_id}.parquet", args.db_path)
    for row in df.iter_rows(named=True):
        log(f"{row['Method']}: {row['Wall Time (s)']:.4f} s, {row['Rho Forwards']} rho forwards, "
            f"speedup {row['Speedup']}")


def cmd_combine(args):
    report = combine_reports(args.inputs)
    log(f"Combined report saved: {write_report(report, args.output)} ({len(report)} rows)")


def build_parser() -> argparse.ArgumentParser:
    parser = UsageParser(prog="dsq", description="Deep Surrogate Q-learning toolkit.")
    parser.add_argument("--quiet", action="store_true", help="Warnings and errors only, no progress bars")
    parser.add_argument("--verbose", action="store_true", help="Debug output")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=UsageParser)

    p = sub.add_parser("collect", help="Simulate scenarios into a replay buffer")
    _add_sim_flags(p)
    p.add_argument("--agent_lc_rate", default="0.0", help="Agent lane changes per action step")
    p.add_argument("--transitions", default="30000", help="Number of transitions to record")
    p.add_argument("--seed", help="Collection seed (default: scenario seed)")
    p.add_argument("--out", default=str(DATA_DIR / "sim.dsqr"), help="Output buffer path")
    p.add_argument("--events", help="Optional event log CSV")
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("ingest", help="Rebuild transitions from highD recordings")
    p.add_argument("--data_dir", default=str(DATA_DIR / "highD"), help="Directory of XX_tracks.csv files")
    p.add_argument("--tracks", help="Single tracks file")
    p.add_argument("--meta", help="Recording meta of --tracks")
    p.add_argument("--config", help="IngestConfig key-value file")
    for key in ("sensor_range", "v_desired", "lanes"):
        p.add_argument(f"--{key}", help=f"Override {key}")
    p.add_argument("--workers", default=str(WORKERS), help="Parallel recordings")
    p.add_argument("--out", default=str(DATA_DIR / "highd.dsqr"), help="Output buffer path")
    p.add_argument("--stats", help="Optional per-recording statistics CSV")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="Train Surrogate-Q or the DeepSet-Q baseline")
    p.add_argument("--buffer", required=True, help="Replay buffer file")
    p.add_argument("--config", help="TrainConfig key-value file")
    for key in TRAIN_KEYS:
        p.add_argument(f"--{key}", help=f"Override {key}")
    p.add_argument("--checkpoint_dir", default=str(CHECKPOINT_DIR), help="Checkpoint directory")
    p.add_argument("--metrics", help="Metrics CSV (default: <checkpoint_dir>/<algo>_metrics.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Evaluate a policy on a scenario grid")
    _add_sim_flags(p)
    p.add_argument("--checkpoint", help="Trained network checkpoint")
    p.add_argument("--policy", default="rule-based", choices=("surrogate", "deepset", "rule-based", "keep-lane"))
    p.add_argument("--name", help="Policy label in the report")
    p.add_argument("--counts", help="Comma-separated vehicle counts (default 30,35,...,90)")
    p.add_argument("--scenarios", default="20", help="Scenarios per vehicle count")
    p.add_argument("--episode_length", default="400", help="Action steps per scenario")
    p.add_argument("--seed", default=str(DEFAULT_SEED), help="Grid seed, shared by compared policies")
    p.add_argument("--workers", default=str(WORKERS), help="Parallel scenarios")
    p.add_argument("--out", default=str(REPORT_DIR / "report.csv"), help="Report CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("curves", help="Cumulative lane changes per driving hour")
    p.add_argument("--buffer", required=True, help="Replay buffer file")
    p.add_argument("--out", default=str(REPORT_DIR / "curves.csv"), help="Curve CSV")
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("compare", help="Welch's t-test between two reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--metric", default="mean_speed")
    p.add_argument("--policy_a")
    p.add_argument("--policy_b")
    p.add_argument("--out", help="Optional result CSV")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bench", help="Shared vs naive encoding timings")
    p.add_argument("--checkpoint", help="Surrogate checkpoint (default: random weights)")
    p.add_argument("--sizes", default="1,4,16,32", help="Scene sizes")
    p.add_argument("--scenes", default="50", help="Scenes per size")
    p.add_argument("--repeats", default="3")
    p.add_argument("--seed", default=str(DEFAULT_SEED))
    p.add_argument("--batchid", help="Batch id (default: random)")
    p.add_argument("--log_dir", default=str(LOG_DIR))
    p.add_argument("--db_path", default=str(DB_PATH))
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("combine", help="Merge per-policy report CSVs")
    p.add_argument("output")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_combine)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    set_verbosity(args.quiet, args.verbose)
    try:
        args.func(args)
    except ConfigError as e:
        err(str(e))
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        err(str(e))
        return EXIT_DATA
    except NumericError as e:
        err(str(e))
        return EXIT_NUMERIC
    except ValueError as e:
        err(str(e))
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
