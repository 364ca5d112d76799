# ===========================================
# replay_io.py
# ===========================================

## \file replay_io.py
## \brief Binary replay-buffer file format shared by the simulator collector and the highD ingester.
##
## \details
## \par Layout (little endian)
##     header: magic "DSQR" | u16 version | u16 feature width | u16 lanes |
##             f64 sensor_range | f64 v_desired | f64 action_dt | u64 record count
##     record: u32 body length | f64 t | f64 t+1 | u32 n |
##             n rows of s_t | n rows of s_t1 | i8 actions[n] | f64 rewards[n] | u8 mask[n]
##     row:    i64 id | f64 rel_distance | f64 rel_speed | i8 rel_lane |
##             f64 own_speed | i8 own_lane | u8 flags (bit0 agent, bit1 dummy)
##
## \par Notes
##     - Raw feature values are stored, not the normalised network rows
##     - Reading back gives a buffer equal to the written one


from pathlib import Path
import numpy as np

from model.errors import FormatError
from model.scene import BufferMeta, ReplayBuffer, SceneState, SceneTransition, VehicleFeatures


BUFFER_MAGIC = b"DSQR"
BUFFER_VERSION = 1

_HEADER = np.dtype([
    ("magic", "S4"), ("version", "<u2"), ("feature_width", "<u2"), ("lanes", "<u2"),
    ("sensor_range", "<f8"), ("v_desired", "<f8"), ("action_dt", "<f8"), ("count", "<u8"),
])
_RECORD_HEAD = np.dtype([("ts_t", "<f8"), ("ts_t1", "<f8"), ("n", "<u4")])
ROW_DTYPE = np.dtype([
    ("id", "<i8"), ("rel_distance", "<f8"), ("rel_speed", "<f8"), ("rel_lane", "i1"),
    ("own_speed", "<f8"), ("own_lane", "i1"), ("flags", "u1"),
])
_LENGTH = np.dtype("<u4")

FLAG_AGENT = 1
FLAG_DUMMY = 2


def _rows(scene: SceneState) -> np.ndarray:
    return np.array(
        [
            (v.vehicle_id, v.rel_distance, v.rel_speed, v.rel_lane, v.own_speed, v.own_lane,
             (FLAG_AGENT if v.is_agent else 0) | (FLAG_DUMMY if v.is_dummy else 0))
            for v in scene.vehicles
        ],
        dtype=ROW_DTYPE,
    )


def _scene(rows: np.ndarray, timestamp: float, meta: BufferMeta) -> SceneState:
    vehicles = tuple(
        VehicleFeatures(
            vehicle_id=int(r["id"]),
            rel_distance=float(r["rel_distance"]),
            rel_speed=float(r["rel_speed"]),
            rel_lane=int(r["rel_lane"]),
            own_speed=float(r["own_speed"]),
            own_lane=int(r["own_lane"]),
            is_agent=bool(r["flags"] & FLAG_AGENT),
            is_dummy=bool(r["flags"] & FLAG_DUMMY),
        )
        for r in rows
    )
    return SceneState(vehicles, float(timestamp), meta.scale)


def encode_transition(kappa: SceneTransition) -> bytes:
    n = len(kappa)
    body = b"".join([
        np.array([(kappa.s_t.timestamp, kappa.s_t1.timestamp, n)], dtype=_RECORD_HEAD).tobytes(),
        _rows(kappa.s_t).tobytes(),
        _rows(kappa.s_t1).tobytes(),
        kappa.actions.astype("i1").tobytes(),
        kappa.rewards.astype("<f8").tobytes(),
        kappa.valid_mask.astype("u1").tobytes(),
    ])
    return np.array([len(body)], dtype=_LENGTH).tobytes() + body


def write_buffer(path, buffer: ReplayBuffer) -> Path:
    """!Serialises a replay buffer, header first, one length-prefixed record per transition."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = buffer.meta
    header = np.array(
        [(BUFFER_MAGIC, BUFFER_VERSION, meta.feature_width, meta.lanes,
          meta.sensor_range, meta.v_desired, meta.action_dt, len(buffer))],
        dtype=_HEADER,
    ).tobytes()

    with open(path, "wb") as fh:
        fh.write(header)
        for kappa in buffer:
            fh.write(encode_transition(kappa))
    return path


def read_buffer(path, expected_feature_width: int | None = None) -> ReplayBuffer:
    """!Reads a buffer written by `write_buffer`.

    @throws FormatError On a bad magic tag, unknown version, feature-width
            mismatch, truncated record or trailing bytes.
    @throws FileNotFoundError If the file does not exist.
    """
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < _HEADER.itemsize:
        raise FormatError(f"{path}: file too short for a replay buffer header")

    header = np.frombuffer(buf, dtype=_HEADER, count=1)[0]
    if header["magic"] != BUFFER_MAGIC:
        raise FormatError(f"{path}: not a replay buffer (magic {header['magic']!r})")
    if int(header["version"]) != BUFFER_VERSION:
        raise FormatError(f"{path}: unsupported buffer version {int(header['version'])}")
    if expected_feature_width is not None and int(header["feature_width"]) != expected_feature_width:
        raise FormatError(
            f"{path}: feature width {int(header['feature_width'])} != expected {expected_feature_width}"
        )

    meta = BufferMeta(
        feature_width=int(header["feature_width"]),
        sensor_range=float(header["sensor_range"]),
        v_desired=float(header["v_desired"]),
        action_dt=float(header["action_dt"]),
        lanes=int(header["lanes"]),
    )
    buffer = ReplayBuffer(meta)
    offset = _HEADER.itemsize

    try:
        for _ in range(int(header["count"])):
            length = int(np.frombuffer(buf, dtype=_LENGTH, count=1, offset=offset)[0])
            offset += _LENGTH.itemsize
            end = offset + length
            if end > len(buf):
                raise FormatError(f"{path}: truncated record at byte {offset}")

            head = np.frombuffer(buf, dtype=_RECORD_HEAD, count=1, offset=offset)[0]
            n = int(head["n"])
            pos = offset + _RECORD_HEAD.itemsize
            rows_t = np.frombuffer(buf, dtype=ROW_DTYPE, count=n, offset=pos)
            pos += n * ROW_DTYPE.itemsize
            rows_t1 = np.frombuffer(buf, dtype=ROW_DTYPE, count=n, offset=pos)
            pos += n * ROW_DTYPE.itemsize
            actions = np.frombuffer(buf, dtype="i1", count=n, offset=pos)
            pos += n
            rewards = np.frombuffer(buf, dtype="<f8", count=n, offset=pos)
            pos += 8 * n
            mask = np.frombuffer(buf, dtype="u1", count=n, offset=pos)
            pos += n
            if pos != end:
                raise FormatError(f"{path}: record length {length} does not match its {n} rows")

            buffer.append(SceneTransition(
                _scene(rows_t, head["ts_t"], meta),
                _scene(rows_t1, head["ts_t1"], meta),
                actions.astype(np.int8),
                rewards.astype(np.float64),
                mask.astype(bool),
            ))
            offset = end
    except ValueError as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"{path}: corrupt record data ({e})") from e

    if offset != len(buf):
        raise FormatError(f"{path}: {len(buf) - offset} trailing bytes after {int(header['count'])} records")
    return buffer
