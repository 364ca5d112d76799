# ===========================================
# highd_ingest.py
# ===========================================

## \file highd_ingest.py
## \brief Rebuilds scene transitions around lane changes in highD-style drone recordings.
##
## \details
## \par Description
##     `parse_tracks` reads an `XX_tracks` file (and optionally its
##     `XX_recordingMeta`), validates it and indexes records per driving
##     direction and frame. Lane ids are re-indexed per carriageway to
##     0..lanes-1 with 0 the rightmost lane, and carriageways without exactly
##     `lanes` lanes are dropped.
##
##     `extract_transitions` finds every frame at which a vehicle's lane id
##     changes, takes that vehicle as ego and snapshots its surroundings at
##     offsets -4, -2, 0, +2, +4 s (rounded to frames), giving 4 transitions
##     per lane change. Chains leaving the ego's recorded span are dropped.
##
## \par Coordinates
##     Positions and velocities are measured along each carriageway's driving
##     direction: the upper carriageway (drivingDirection 1) drives towards -x,
##     the lower one (drivingDirection 2) towards +x.
##
## \par Lane ids (highD convention)
##     upper carriageway with n lanes: ids 2..n+1, rightmost first
##     lower carriageway with m lanes: ids n+3..n+m+2, leftmost first


from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple
import polars as pl
import numpy as np

from model.errors import ConfigError, DataError, FormatError
from model.scene import FEATURE_WIDTH, BufferMeta, ReplayBuffer, SceneState, VehicleFeatures, build_transition
from pipeline.schema import INGEST_STATS_SCHEMA, TRACKS_SCHEMA
from pipeline.utils import debug, log, safe_vector_cast, warn


UPPER, LOWER = 0, 1
DIRECTION_NAMES = ("upper", "lower")
DEFAULT_FRAME_RATE = 25.0


@dataclass(frozen=True)
class IngestConfig:
    sensor_range: float = 80.0
    v_desired: float = 27.0
    action_dt: float = 2.0
    chain_offsets: tuple[int, ...] = (-2, -1, 0, 1, 2)
    lanes: int = 3
    default_frame_rate: float = DEFAULT_FRAME_RATE
    workers: int = 1

    def __post_init__(self):
        if self.sensor_range <= 0 or self.v_desired <= 0 or self.action_dt <= 0 or self.default_frame_rate <= 0:
            raise ConfigError("IngestConfig magnitudes must be positive")
        if len(self.chain_offsets) < 2 or list(self.chain_offsets) != sorted(set(self.chain_offsets)):
            raise ConfigError("chain_offsets must be at least two strictly increasing step offsets")

    @property
    def meta(self) -> BufferMeta:
        return BufferMeta(FEATURE_WIDTH, self.sensor_range, self.v_desired, self.action_dt, self.lanes)


@dataclass(frozen=True)
class RecordingMeta:
    recording_id: str = "0"
    frame_rate: float = DEFAULT_FRAME_RATE
    upper_lane_count: int | None = None
    lower_lane_count: int | None = None

    def __post_init__(self):
        if self.frame_rate <= 0:
            raise DataError(f"Recording {self.recording_id}: frame rate must be positive")


class TrackRecord(NamedTuple):
    frame: int
    vehicle_id: int
    position: float
    lane: int
    velocity: float
    direction: str


def _markings_count(raw) -> int | None:
    if raw is None:
        return None
    parts = [p for p in str(raw).split(";") if p.strip()]
    return max(len(parts) - 1, 0) if parts else None


def read_recording_meta(meta_input, recording_id: str | None = None) -> RecordingMeta:
    """!Reads frame rate and lane-marking counts from an `XX_recordingMeta` file.

    Missing optional columns fall back to 25 Hz and lane counts inferred from the tracks.
    """
    df = meta_input if isinstance(meta_input, pl.DataFrame) else pl.read_csv(meta_input, infer_schema_length=0)
    if df.height == 0:
        raise FormatError("Recording meta file has no data row")
    row = df.row(0, named=True)

    rec_id = recording_id or str(row.get("id", Path(str(meta_input)).stem.split("_")[0]))
    try:
        frame_rate = float(row["frameRate"]) if row.get("frameRate") not in (None, "") else DEFAULT_FRAME_RATE
    except ValueError as e:
        raise FormatError(f"Recording {rec_id}: bad frameRate '{row['frameRate']}'") from e
    return RecordingMeta(rec_id, frame_rate, _markings_count(row.get("upperLaneMarkings")),
                         _markings_count(row.get("lowerLaneMarkings")))


@dataclass
class TrackIndex:
    """!Validated records sorted by (direction, frame, vehicle id) with a per-(direction, frame) index."""
    meta: RecordingMeta
    frame: np.ndarray
    vehicle_id: np.ndarray
    position: np.ndarray
    lane: np.ndarray
    velocity: np.ndarray
    direction: np.ndarray
    lanes: int = 3
    _slices: dict = field(default_factory=dict, repr=False)
    _vehicles: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        order = np.lexsort((self.vehicle_id, self.frame, self.direction))
        for name in ("frame", "vehicle_id", "position", "lane", "velocity", "direction"):
            setattr(self, name, getattr(self, name)[order])

        n = len(self.frame)
        if n:
            key_change = np.r_[True, (np.diff(self.frame) != 0) | (np.diff(self.direction) != 0)]
            starts = np.flatnonzero(key_change)
            stops = np.r_[starts[1:], n]
            self._slices = {(int(self.direction[s]), int(self.frame[s])): (int(s), int(e)) for s, e in zip(starts, stops)}

        by_vehicle = np.lexsort((self.frame, self.vehicle_id))
        for vid in np.unique(self.vehicle_id):
            rows = by_vehicle[self.vehicle_id[by_vehicle] == vid]
            self._vehicles[int(vid)] = rows

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def vehicle_ids(self) -> list:
        return sorted(self._vehicles)

    def rows_at(self, direction: int, frame: int) -> np.ndarray:
        start, stop = self._slices.get((direction, frame), (0, 0))
        return np.arange(start, stop)

    def vehicle_rows(self, vehicle_id: int) -> np.ndarray:
        """!Row indices of one vehicle in frame order."""
        return self._vehicles.get(int(vehicle_id), np.zeros(0, dtype=np.int64))

    def records(self) -> list:
        order = np.lexsort((self.vehicle_id, self.frame))
        return [
            TrackRecord(int(self.frame[k]), int(self.vehicle_id[k]), float(self.position[k]), int(self.lane[k]),
                        float(self.velocity[k]), DIRECTION_NAMES[int(self.direction[k])])
            for k in order
        ]


def _lane_maps(lane_ids: np.ndarray, direction: np.ndarray, meta: RecordingMeta) -> dict:
    """!Per direction, highD lane id -> 0-based index with 0 rightmost."""
    maps = {}
    if meta.upper_lane_count is not None and meta.lower_lane_count is not None:
        n, m = meta.upper_lane_count, meta.lower_lane_count
        maps[UPPER] = {lid: lid - 2 for lid in range(2, n + 2)}
        maps[LOWER] = {lid: (n + m + 2) - lid for lid in range(n + 3, n + m + 3)}
        return maps

    for d in (UPPER, LOWER):
        ids = sorted(int(x) for x in np.unique(lane_ids[direction == d]))
        if d == LOWER:
            ids = ids[::-1]
        maps[d] = {lid: k for k, lid in enumerate(ids)}
    return maps


def parse_tracks(tracks_input, meta_input=None, lanes: int = 3) -> TrackIndex:
    """!Validates a tracks file and indexes it by direction and frame.

    @param tracks_input Path of an `XX_tracks` CSV or an already-read DataFrame.
    @param meta_input Optional `XX_recordingMeta` path, DataFrame or RecordingMeta.
    @param lanes Lanes per carriageway to keep; other carriageways are dropped.

    @throws FormatError If a required column is missing or unparseable.
    @throws DataError If a vehicle's frames are not strictly increasing and contiguous.
    """
    raw = tracks_input if isinstance(tracks_input, pl.DataFrame) else pl.read_csv(tracks_input, infer_schema_length=0)
    if isinstance(meta_input, RecordingMeta):
        meta = meta_input
    elif meta_input is not None:
        meta = read_recording_meta(meta_input)
    else:
        meta = RecordingMeta(Path(str(tracks_input)).stem.split("_")[0] if not isinstance(tracks_input, pl.DataFrame) else "0")

    df = safe_vector_cast(raw, TRACKS_SCHEMA)
    if "drivingDirection" in raw.columns:
        df = df.with_columns(raw["drivingDirection"].cast(pl.Int64, strict=False).alias("drivingDirection"))
        if df["drivingDirection"].null_count() or not df["drivingDirection"].is_in([1, 2]).all():
            raise FormatError("drivingDirection must be 1 (upper) or 2 (lower)")
        df = df.with_columns((pl.col("drivingDirection") - 1).alias("direction"))
    else:
        df = df.with_columns(
            pl.when(pl.col("xVelocity").mean().over("id") < 0).then(UPPER).otherwise(LOWER).alias("direction")
        )

    steps = df.select(pl.col("frame").diff().over("id").alias("d"))["d"]
    if (steps.drop_nulls() <= 0).any():
        raise DataError(f"Recording {meta.recording_id}: frames are not monotone for some vehicle")
    if (steps.drop_nulls() != 1).any():
        raise DataError(f"Recording {meta.recording_id}: frames are not contiguous for some vehicle")
    if not df["xVelocity"].is_finite().all():
        raise DataError(f"Recording {meta.recording_id}: non-finite velocity")

    direction = df["direction"].to_numpy().astype(np.int64)
    lane_ids = df["laneId"].to_numpy().astype(np.int64)
    maps = _lane_maps(lane_ids, direction, meta)

    keep = np.zeros(len(df), dtype=bool)
    lane = np.full(len(df), -1, dtype=np.int64)
    for d in (UPPER, LOWER):
        rows = direction == d
        if not rows.any():
            continue
        if len(maps[d]) != lanes:
            log(f"Recording {meta.recording_id}: {DIRECTION_NAMES[d]} carriageway has {len(maps[d])} lanes, skipped")
            continue
        mapped = np.array([maps[d].get(int(lid), -1) for lid in lane_ids[rows]], dtype=np.int64)
        if np.any(mapped < 0):
            raise DataError(f"Recording {meta.recording_id}: lane id outside the {DIRECTION_NAMES[d]} carriageway")
        lane[rows] = mapped
        keep |= rows

    sign = np.where(direction == UPPER, -1.0, 1.0)
    x = df["x"].to_numpy().astype(np.float64)
    vx = df["xVelocity"].to_numpy().astype(np.float64)
    return TrackIndex(
        meta=meta,
        frame=df["frame"].to_numpy().astype(np.int64)[keep],
        vehicle_id=df["id"].to_numpy().astype(np.int64)[keep],
        position=(sign * x)[keep],
        lane=lane[keep],
        velocity=(sign * vx)[keep],
        direction=direction[keep],
        lanes=lanes,
    )


def snapshot(tracks: TrackIndex, ego_row: int, cfg: IngestConfig) -> SceneState:
    """!Scene around the record at `ego_row`, ego first, others by signed distance then id."""
    d, f = int(tracks.direction[ego_row]), int(tracks.frame[ego_row])
    rows = tracks.rows_at(d, f)
    rel = tracks.position[rows] - tracks.position[ego_row]
    mine = rows == ego_row
    sel = rows[(np.abs(rel) <= cfg.sensor_range) & ~mine]
    rel_sel = tracks.position[sel] - tracks.position[ego_row]
    sel = sel[np.lexsort((tracks.vehicle_id[sel], rel_sel))]

    ego_speed, ego_lane = float(tracks.velocity[ego_row]), int(tracks.lane[ego_row])
    vehicles = [VehicleFeatures(int(tracks.vehicle_id[ego_row]), 0.0, 0.0, 0, ego_speed, ego_lane, is_agent=True)]
    for k in sel:
        vehicles.append(VehicleFeatures(
            vehicle_id=int(tracks.vehicle_id[k]),
            rel_distance=float(tracks.position[k] - tracks.position[ego_row]),
            rel_speed=float(tracks.velocity[k] - ego_speed),
            rel_lane=int(tracks.lane[k]) - ego_lane,
            own_speed=float(tracks.velocity[k]),
            own_lane=int(tracks.lane[k]),
        ))
    return SceneState(tuple(vehicles), f / tracks.meta.frame_rate, cfg.meta.scale)


def lane_change_frames(tracks: TrackIndex, vehicle_id: int) -> list:
    """!Frames at which the vehicle is first seen in a new lane."""
    rows = tracks.vehicle_rows(vehicle_id)
    lanes = tracks.lane[rows]
    return [int(tracks.frame[rows[k]]) for k in np.flatnonzero(np.diff(lanes) != 0) + 1]


def extract_transitions(tracks: TrackIndex, meta: RecordingMeta | None = None,
                        cfg: IngestConfig | None = None) -> ReplayBuffer:
    """!Four transitions per lane change (five snapshots two seconds apart), ordered by ego then frame."""
    cfg = cfg or IngestConfig(lanes=tracks.lanes)
    meta = meta or tracks.meta
    step = int(round(cfg.action_dt * meta.frame_rate))
    buffer = ReplayBuffer(cfg.meta)

    seen = set()
    for ego in tracks.vehicle_ids:
        rows = tracks.vehicle_rows(ego)
        frame_to_row = {int(tracks.frame[r]): int(r) for r in rows}
        for center in lane_change_frames(tracks, ego):
            if (ego, center) in seen:
                continue
            seen.add((ego, center))

            frames = [center + k * step for k in cfg.chain_offsets]
            if any(f not in frame_to_row for f in frames):
                warn(f"Recording {meta.recording_id}: chain of vehicle {ego} at frame {center} "
                     f"leaves the recorded span, dropped")
                continue

            scenes = [snapshot(tracks, frame_to_row[f], cfg) for f in frames]
            for s_t, s_t1 in zip(scenes, scenes[1:]):
                buffer.append(build_transition(s_t, s_t1, cfg.v_desired))
    debug(f"Recording {meta.recording_id}: {len(buffer)} transitions")
    return buffer


def _ingest_one(job) -> tuple:
    tracks_path, meta_path, cfg = job
    tracks = parse_tracks(tracks_path, meta_path, cfg.lanes)
    buffer = extract_transitions(tracks, cfg=cfg)
    lane_changes = sum(len(lane_change_frames(tracks, v)) for v in tracks.vehicle_ids)
    stats = {"recording": tracks.meta.recording_id, "vehicles": len(tracks.vehicle_ids),
             "lane_changes": lane_changes, "transitions": len(buffer)}
    return list(buffer), stats


def find_recordings(data_dir) -> list:
    """!`(tracks, meta)` path pairs of every `XX_tracks.csv` in a directory, meta None when absent."""
    pairs = []
    for tracks in sorted(Path(data_dir).glob("*_tracks.csv")):
        meta = tracks.with_name(tracks.name.replace("_tracks.csv", "_recordingMeta.csv"))
        pairs.append((tracks, meta if meta.exists() else None))
    return pairs


def ingest_recordings(pairs, cfg: IngestConfig | None = None) -> tuple:
    """!Ingests independent recordings, in parallel when `cfg.workers > 1`.

    @return `(buffer, stats)`; the buffer is ordered by recording, ego and frame.
    """
    cfg = cfg or IngestConfig()
    jobs = [(t, m, cfg) for t, m in pairs]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_ingest_one, jobs))
    else:
        results = [_ingest_one(job) for job in jobs]

    buffer = ReplayBuffer(cfg.meta)
    rows = []
    for transitions, stats in results:
        buffer.extend(transitions)
        rows.append(stats)
        log(f"Recording {stats['recording']}: {stats['vehicles']} vehicles, "
            f"{stats['lane_changes']} lane changes, {stats['transitions']} transitions")

    schema = {c: t for c, (t, _) in INGEST_STATS_SCHEMA.items()}
    return buffer, pl.DataFrame(rows, schema=schema)
