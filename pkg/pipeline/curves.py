# ===========================================
# curves.py
# ===========================================

## \file curves.py
## \brief Cumulative lane changes per driving hour, for the agent alone and for every observed vehicle.
##
## \details
## \par Description
##     Transition `i` (0-based, buffer order) ends after `(i + 1) * action_dt`
##     seconds of driving. The agent series counts the agent's own lane
##     changes; the all-vehicles series counts every valid participant's lane
##     change in the scene, which is what surrogate training can learn from.
##
## \par Output CSV
##     series, hours, cumulative_lane_changes   (series = agent | all)


from pathlib import Path
import polars as pl
import numpy as np

from model.scene import Action, ReplayBuffer
from pipeline.schema import CURVE_SCHEMA
from pipeline.utils import safe_vector_cast


SECONDS_PER_HOUR = 3600.0


def cumulative_lane_change_curve(buffer: ReplayBuffer) -> dict:
    """!`{"agent": [(hours, count), ...], "all": [...]}`, one point per transition."""
    if len(buffer) == 0:
        return {"agent": [], "all": []}

    agent_counts = np.zeros(len(buffer), dtype=np.int64)
    all_counts = np.zeros(len(buffer), dtype=np.int64)
    for i, kappa in enumerate(buffer):
        changed = kappa.valid_mask & ((kappa.actions == Action.LEFT) | (kappa.actions == Action.RIGHT))
        agent_counts[i] = int(changed[0])
        all_counts[i] = int(changed.sum())

    hours = np.arange(1, len(buffer) + 1) * buffer.meta.action_dt / SECONDS_PER_HOUR
    return {
        "agent": list(zip(hours.tolist(), np.cumsum(agent_counts).tolist())),
        "all": list(zip(hours.tolist(), np.cumsum(all_counts).tolist())),
    }


def hours_to_reach(curve: list, count: int) -> float:
    """!Driving hours at which a series first reaches `count` lane changes (inf if never)."""
    for hours, total in curve:
        if total >= count:
            return hours
    return float("inf")


def curve_frame(curves: dict) -> pl.DataFrame:
    rows = [
        {"series": series, "hours": h, "cumulative_lane_changes": c}
        for series in ("agent", "all")
        for h, c in curves.get(series, [])
    ]
    schema = {c: t for c, (t, _) in CURVE_SCHEMA.items()}
    return safe_vector_cast(pl.DataFrame(rows, schema=schema), CURVE_SCHEMA)


def write_curve(curves: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    curve_frame(curves).write_csv(path)
    return path
