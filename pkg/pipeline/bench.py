# ===========================================
# bench.py
# ===========================================

## \file bench.py
## \brief Times the shared-encoding Q pass against per-participant re-encoding and logs runs to parquet.
##
## \details
## \par Description
##     `run_benchmark` evaluates every participant's Q-vector of a set of
##     scenes twice: once with one scene encoding shared by all participants
##     (`q_values_all`) and once re-encoding the scene per participant
##     (`q_values_naive`). Wall times and forward-pass counters are stored one
##     row per method, cast through BENCH_SCHEMA.
##
##     `write_benchmark` saves each method row as a timestamped parquet in a
##     batch directory; `combine_batches` merges a batch directory into one file
##     and appends it to the global history at `DB_PATH`.
##
## \par Output
##     - File: db/logs/batch_<batchid>_<timestamp>/bench_<method>_<timestamp>_<batchid>.parquet
##     - Format: compressed `zstd` parquet with labeled fields and derived metrics


from datetime import datetime
from pathlib import Path
import time
import uuid
import polars as pl
import numpy as np

from model.qnet import SurrogateQNet, q_values_all, q_values_naive
from model.scene import FeatureScale, SceneState, VehicleFeatures
from pipeline.schema import BENCH_SCHEMA
from pipeline.utils import log, ratio_or_null, safe_vector_cast


METHODS = {"shared": q_values_all, "naive": q_values_naive}
TIMESTAMP_FORMAT = "%Y-%m-%d_%H-%M-%S"


def new_batch_id() -> str:
    return uuid.uuid4().hex[:8]


def random_scene(rng: np.random.Generator, size: int, scale: FeatureScale | None = None) -> SceneState:
    """!Synthetic scene of `size` participants with features spread over the sensor window."""
    scale = scale or FeatureScale()
    lanes = scale.lanes
    own_lane = int(rng.integers(0, lanes))
    own_speed = float(rng.uniform(0.5, 1.1) * scale.v_desired)
    vehicles = [VehicleFeatures(0, 0.0, 0.0, 0, own_speed, own_lane, is_agent=True)]
    for vid in range(1, size):
        lane = int(rng.integers(0, lanes))
        speed = float(rng.uniform(0.5, 1.1) * scale.v_desired)
        vehicles.append(VehicleFeatures(vid, float(rng.uniform(-scale.sensor_range, scale.sensor_range)),
                                        speed - own_speed, lane - own_lane, speed, lane))
    return SceneState(tuple(vehicles), 0.0, scale)


def run_benchmark(net: SurrogateQNet, scenes, repeats: int = 1, batch_id: str | None = None) -> pl.DataFrame:
    """!One row per method with wall time, forward counts and seconds per virtual sample.

    @throws ValueError If no scenes are given or repeats < 1.
    """
    if not scenes or repeats < 1:
        raise ValueError("run_benchmark needs at least one scene and repeats >= 1")
    batch_id = batch_id or new_batch_id()
    stamp = datetime.now().replace(microsecond=0)
    samples = sum(len(s) for s in scenes) * repeats

    rows = []
    for method, fn in METHODS.items():
        net.counters.reset()
        start = time.perf_counter_ns()
        for _ in range(repeats):
            for scene in scenes:
                fn(net, scene)
        elapsed_ns = time.perf_counter_ns() - start
        counts = net.counters.snapshot()
        rows.append({
            "Timestamp": stamp,
            "BatchID": batch_id,
            "Method": method,
            "Scenes": len(scenes) * repeats,
            "Virtual Samples": samples,
            "Repeats": repeats,
            "Wall Time (s)": elapsed_ns / 1e9,
            "Wall Time (ns)": elapsed_ns,
            "Phi Forwards": counts["phi"],
            "Rho Forwards": counts["rho"],
            "Q-Head Forwards": counts["qhead"],
            "Seconds/Sample": ratio_or_null(elapsed_ns / 1e9, samples),
            "Rho/Scene": ratio_or_null(counts["rho"], len(scenes) * repeats),
        })
    net.counters.reset()

    naive = next(r for r in rows if r["Method"] == "naive")
    for r in rows:
        r["Speedup"] = ratio_or_null(naive["Wall Time (ns)"], r["Wall Time (ns)"])

    df = pl.DataFrame(rows).with_columns(pl.col("Timestamp").cast(pl.Datetime("ms")))
    return safe_vector_cast(df, BENCH_SCHEMA)


def batch_directory(batch_id: str, log_dir, timestamp: str | None = None) -> Path:
    """!Existing batch directory for `batch_id`, or a new timestamped one."""
    log_dir = Path(log_dir)
    matches = sorted(log_dir.glob(f"batch_{batch_id}_*"))
    if matches:
        return matches[-1]
    stamp = timestamp or datetime.now().strftime(TIMESTAMP_FORMAT)
    path = log_dir / f"batch_{batch_id}_{stamp}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_benchmark(df: pl.DataFrame, batch_dir) -> list:
    """!Writes one zstd parquet per method row into the batch directory."""
    batch_dir = Path(batch_dir)
    batch_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for method in df["Method"].unique().sort().to_list():
        part = df.filter(pl.col("Method") == method)
        stamp = part["Timestamp"][0].strftime(TIMESTAMP_FORMAT)
        batch_id = part["BatchID"][0]
        path = batch_dir / f"bench_{method}_{stamp}_{batch_id}.parquet"
        part.write_parquet(path, compression="zstd")
        log(f"Parquet saved: {path}")
        written.append(path)
    return written


def combine_batches(batch_dir, output_path, db_path) -> pl.DataFrame:
    """!Merges a batch directory's method files into `output_path` and appends them to `db_path`.

    @throws FileNotFoundError If the directory holds no benchmark parquet.
    """
    batch_dir, output_path, db_path = Path(batch_dir), Path(output_path), Path(db_path)
    files = [f for f in sorted(batch_dir.glob("bench_*.parquet")) if f.name != output_path.name]
    if not files:
        raise FileNotFoundError(f"No .parquet files found in {batch_dir}")

    merged = pl.concat([pl.read_parquet(f) for f in files], how="vertical_relaxed").sort(["Timestamp", "Method"])
    output_path.parent.mkdir(parents=True, exist_ok=True)
    merged.write_parquet(output_path, compression="zstd")
    log(f"Merged batch saved: {output_path}")

    if db_path.exists():
        db = pl.concat([pl.read_parquet(db_path), merged], how="vertical_relaxed")
        log(f"Appended to existing {db_path.name}")
    else:
        db = merged
        log(f"Created new {db_path.name}")
    db_path.parent.mkdir(parents=True, exist_ok=True)
    db.write_parquet(db_path, compression="zstd")
    log(f"Parquet db updated: {db_path}")
    return merged
