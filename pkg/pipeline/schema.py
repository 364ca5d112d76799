# ===========================================
# schema.py
# ===========================================

## \file schema.py
## \brief Declares the column schemas for every CSV and parquet file the repo reads or writes.
##
## \details
## \par Description
##     Each schema maps column names to Polars dtypes and nullability flags. They are used for:
##     - Casting CSV inputs via safe_vector_cast()
##     - Fixing column order and dtypes of every emitted CSV / parquet
##     - Re-parsing reports losslessly
##
## \par Format
##     SCHEMA = {
##         "column": (Polars DataType, is_nullable: bool),
##         ...
##     }
##
## \par Design Notes
##     - Benchmark timestamps use millisecond-resolution Datetime
##     - Derived benchmark ratios are nullable ("NA" when undefined)
##     - Track columns follow the highD header names exactly


import polars as pl


"""!Required columns of a highD-style `XX_tracks` file. Other columns are ignored."""
TRACKS_SCHEMA = {
    "frame": (pl.Int64(), False),
    "id": (pl.Int64(), False),
    "x": (pl.Float64(), False),
    "laneId": (pl.Int64(), False),
    "xVelocity": (pl.Float64(), False),
}

"""!Training metrics log, one row per logging interval."""
METRICS_SCHEMA = {
    "step": (pl.Int64(), False),
    "loss": (pl.Float64(), False),
    "mean_q": (pl.Float64(), False),
    "checkpoint": (pl.Utf8(), True),
}

"""!Per-scenario evaluation rows. Report aggregates are always recomputed from these."""
EVAL_REPORT_SCHEMA = {
    "policy": (pl.Utf8(), False),
    "vehicle_count": (pl.Int64(), False),
    "scenario": (pl.Int64(), False),
    "seed": (pl.Int64(), False),
    "mean_return": (pl.Float64(), False),
    "discounted_return": (pl.Float64(), False),
    "mean_speed": (pl.Float64(), False),
    "lane_changes": (pl.Int64(), False),
    "collisions": (pl.Int64(), False),
    "overrides": (pl.Int64(), False),
    "steps": (pl.Int64(), False),
}

EVENTS_SCHEMA = {
    "step": (pl.Int64(), False),
    "vehicle_id": (pl.Int64(), False),
    "event": (pl.Utf8(), False),
    "lane_from": (pl.Int64(), True),
    "lane_to": (pl.Int64(), True),
}

"""!Cumulative lane changes per driving hour, `series` is `agent` or `all`."""
CURVE_SCHEMA = {
    "series": (pl.Utf8(), False),
    "hours": (pl.Float64(), False),
    "cumulative_lane_changes": (pl.Int64(), False),
}

INGEST_STATS_SCHEMA = {
    "recording": (pl.Utf8(), False),
    "vehicles": (pl.Int64(), False),
    "lane_changes": (pl.Int64(), False),
    "transitions": (pl.Int64(), False),
}

COMPARE_SCHEMA = {
    "metric": (pl.Utf8(), False),
    "policy_a": (pl.Utf8(), False),
    "policy_b": (pl.Utf8(), False),
    "mean_a": (pl.Float64(), False),
    "mean_b": (pl.Float64(), False),
    "t": (pl.Float64(), False),
    "p": (pl.Float64(), False),
}

"""!Shared-encoding vs naive re-encoding timings.

@note Speedup is relative to the naive method of the same batch and is null for rows without one.
"""
BENCH_SCHEMA = {
    "Timestamp": (pl.Datetime("ms"), False),
    "BatchID": (pl.Utf8(), False),
    "Method": (pl.Utf8(), False),
    "Scenes": (pl.Int64(), False),
    "Virtual Samples": (pl.Int64(), False),
    "Repeats": (pl.Int64(), False),
    "Wall Time (s)": (pl.Float64(), False),
    "Wall Time (ns)": (pl.Int64(), False),
    "Phi Forwards": (pl.Int64(), False),
    "Rho Forwards": (pl.Int64(), False),
    "Q-Head Forwards": (pl.Int64(), False),
    "Seconds/Sample": (pl.Float64(), True),
    "Rho/Scene": (pl.Float64(), True),
    "Speedup": (pl.Float64(), True),
}
