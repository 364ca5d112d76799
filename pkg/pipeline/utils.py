# ===========================================
# utils.py
# ===========================================

## \file utils.py
## \brief Shared utilities for logging, schema enforcement, and arithmetic fallback logic.
##
## \details
## \par Description
##     This module provides shared helpers used by every package in the repo:
##     bracketed-level progress logging on stderr, schema-aware casting of
##     Polars DataFrames read from CSV, and division with an "NA" fallback for
##     derived benchmark metrics.
##
## \par Included Utilities
##     - `log`, `warn`, `err`, `debug`: `[LEVEL] message` lines on stderr
##     - `safe_vector_cast`: Vectorized, schema-aware casting for Polars DataFrames
##     - `ratio_or_null`: Benchmark ratio that is null when undefined
##
## \par Design Notes
##     - Schema mismatches are surfaced with detailed debug output and raise FormatError
##     - "NA" strings are treated as nulls when a column is nullable
##     - Undefined ratios become nulls rather than sentinel strings


from polars import col, when
import polars as pl
import logging
import math
import sys

from model.errors import FormatError


LOGGER = logging.getLogger("dsq")

if not LOGGER.handlers:
    _handler = logging.StreamHandler(sys.stderr)
    _handler.setFormatter(logging.Formatter("[%(levelname)s] %(message)s"))
    LOGGER.addHandler(_handler)
    LOGGER.setLevel(logging.INFO)
    LOGGER.propagate = False

logging.addLevelName(logging.WARNING, "WARN")


def log(msg: str):
    """!Prints an info message to stderr.

    @param msg The message string.
    """
    LOGGER.info(msg)

def warn(msg: str):
    LOGGER.warning(msg)

def err(msg: str):
    """!Prints an error message to stderr.
    @param msg The message string.
    """
    LOGGER.error(msg)

def debug(msg: str):
    LOGGER.debug(msg)

def set_verbosity(quiet: bool = False, verbose: bool = False):
    """!Adjusts the `dsq` logger level from CLI flags."""
    if verbose:
        LOGGER.setLevel(logging.DEBUG)
    elif quiet:
        LOGGER.setLevel(logging.WARNING)
    else:
        LOGGER.setLevel(logging.INFO)


def safe_vector_cast(df: pl.DataFrame, schema: dict) -> pl.DataFrame:
    """!Cast a Polars DataFrame to match a declared schema, handling 'NA' strings as nulls.

    This function enforces schema alignment between a raw input DataFrame (typically from CSV)
    and a declared schema. If `allow_na` is True in the schema, string values like "NA" will be
    replaced with nulls prior to casting. Columns outside the schema are dropped and the
    result follows the schema's column order.

    @param df The input Polars DataFrame to cast.
    @param schema Dictionary in the format { column_name: (dtype, allow_na) }.

    @return A new Polars DataFrame with all fields casted according to the schema.

    @throws FormatError If any schema field is missing in the DataFrame or a cast fails.
    """
    missing = [c for c in schema if c not in df.columns]

    if missing:
        debug("SCHEMA MISMATCH DETECTED")
        debug("Expected columns (from schema):")
        for s in schema:
            debug(f"  {s}")
        debug("Found columns (in DataFrame):")
        for c in df.columns:
            debug(f"  {c}")
        err(f"Missing columns: {', '.join(missing)}")
        raise FormatError(f"Schema mismatch: missing column(s) {', '.join(missing)}")

    casted = []

    for c, (dtype, allow_na) in schema.items():
        if allow_na and df[c].dtype == pl.Utf8:
            expr = when(col(c) == "NA").then(None).otherwise(col(c)).cast(dtype).alias(c)
        else:
            expr = col(c).cast(dtype).alias(c)
        casted.append(expr)

    try:
        out = df.select(casted)
    except Exception as e:
        err(f"safe_vector_cast failed: {e}")
        debug(f"DataFrame columns: {df.columns}")
        debug(f"Schema fields: {list(schema.keys())}")
        raise FormatError(f"Schema cast failed: {e}") from e

    for c, (_, allow_na) in schema.items():
        if not allow_na and out[c].null_count() > 0:
            raise FormatError(f"Column '{c}' contains nulls but is not nullable")
    return out

def ratio_or_null(numerator, denominator):
    """!Per-unit benchmark figure, or `None` when it is undefined.

    Seconds per virtual sample sits around 1e-6, so the quotient is kept at
    full precision. Missing inputs, a zero denominator and non-finite results
    map to `None`, which the nullable Float64 columns of the bench schema
    store as null.
    """
    if numerator is None or denominator is None:
        return None
    try:
        value = float(numerator) / float(denominator)
    except (TypeError, ValueError, ZeroDivisionError):
        return None
    return value if math.isfinite(value) else None
