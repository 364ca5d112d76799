import numpy as np
import polars as pl
import pytest

from model.errors import DataError, FormatError
from model.scene import Action
from pipeline.highd_ingest import (
    IngestConfig, RecordingMeta, TrackRecord, extract_transitions, find_recordings, ingest_recordings,
    lane_change_frames, parse_tracks, read_recording_meta,
)


META = RecordingMeta("01", 25.0, 3, 3)
HEADER = "frame,id,x,y,width,height,xVelocity,yVelocity,laneId,drivingDirection\n"


def _tracks(rows):
    """rows: (frame, id, x, xVelocity, laneId, drivingDirection)"""
    return pl.DataFrame(
        {
            "frame": [r[0] for r in rows],
            "id": [r[1] for r in rows],
            "x": [float(r[2]) for r in rows],
            "y": [0.0] * len(rows),
            "xVelocity": [float(r[3]) for r in rows],
            "laneId": [r[4] for r in rows],
            "drivingDirection": [r[5] for r in rows],
        }
    )


def _lane_change_recording(change_frame=150, last_frame=300):
    rows = []
    for f in range(0, last_frame + 1):
        rows.append((f, 1, 10.0 + 1.0 * f, 25.0, 7 if f < change_frame else 6, 2))
        rows.append((f, 2, 40.0 + 0.8 * f, 20.0, 8, 2))
        rows.append((f, 3, -(12.0 + 1.0 * f), -25.0, 3, 1))
    return _tracks(rows)


class TestParseTracks:
    def test_empty_file_with_header(self, tmp_path):
        path = tmp_path / "01_tracks.csv"
        path.write_text(HEADER)
        assert len(parse_tracks(path, META)) == 0

    def test_golden_three_vehicle_fixture(self, tmp_path):
        path = tmp_path / "07_tracks.csv"
        path.write_text(
            HEADER
            + "1,1,10.0,20.0,4.5,2.0,25.0,0.0,7,2\n"
            + "2,1,11.0,20.0,4.5,2.0,25.0,0.0,7,2\n"
            + "3,1,12.0,20.0,4.5,2.0,25.0,0.0,7,2\n"
            + "1,2,30.0,24.0,4.5,2.0,20.0,0.0,8,2\n"
            + "2,2,31.0,24.0,4.5,2.0,20.0,0.0,8,2\n"
            + "2,3,100.0,8.0,4.5,2.0,-22.0,0.0,3,1\n"
            + "3,3,99.0,8.0,4.5,2.0,-22.0,0.0,3,1\n"
        )
        tracks = parse_tracks(path, RecordingMeta("07", 25.0, 3, 3))
        assert tracks.records() == [
            TrackRecord(1, 1, 10.0, 1, 25.0, "lower"),
            TrackRecord(1, 2, 30.0, 0, 20.0, "lower"),
            TrackRecord(2, 1, 11.0, 1, 25.0, "lower"),
            TrackRecord(2, 2, 31.0, 0, 20.0, "lower"),
            TrackRecord(2, 3, -100.0, 1, 22.0, "upper"),
            TrackRecord(3, 1, 12.0, 1, 25.0, "lower"),
            TrackRecord(3, 3, -99.0, 1, 22.0, "upper"),
        ]

    def test_direction_from_velocity_sign(self):
        df = _tracks([(1, 1, 10.0, 25.0, 7, 2), (1, 2, 50.0, -20.0, 3, 1)]).drop("drivingDirection")
        records = parse_tracks(df, META).records()
        assert [(r.vehicle_id, r.direction) for r in records] == [(1, "lower"), (2, "upper")]

    def test_two_lane_recording_filtered(self):
        df = _tracks([(1, 1, 10.0, 25.0, 5, 2), (1, 2, 30.0, 25.0, 6, 2), (1, 3, 50.0, -25.0, 2, 1)])
        assert len(parse_tracks(df, RecordingMeta("02", 25.0, 2, 2))) == 0

    def test_inferred_lane_counts(self):
        df = _tracks([(1, 1, 10.0, 25.0, 6, 2), (1, 2, 30.0, 25.0, 7, 2), (1, 3, 50.0, 25.0, 8, 2)])
        tracks = parse_tracks(df)
        assert sorted(r.lane for r in tracks.records()) == [0, 1, 2]

    def test_missing_column(self):
        df = _tracks([(1, 1, 10.0, 25.0, 7, 2)]).drop("xVelocity")
        with pytest.raises(FormatError, match="xVelocity"):
            parse_tracks(df, META)

    def test_non_monotone_frames(self):
        df = _tracks([(1, 1, 10.0, 25.0, 7, 2), (3, 1, 12.0, 25.0, 7, 2), (2, 1, 11.0, 25.0, 7, 2)])
        with pytest.raises(DataError):
            parse_tracks(df, META)

    def test_frame_gap(self):
        df = _tracks([(1, 1, 10.0, 25.0, 7, 2), (3, 1, 12.0, 25.0, 7, 2)])
        with pytest.raises(DataError):
            parse_tracks(df, META)

    def test_bad_driving_direction(self):
        df = _tracks([(1, 1, 10.0, 25.0, 7, 3)])
        with pytest.raises(FormatError):
            parse_tracks(df, META)


class TestRecordingMeta:
    def test_reads_lane_markings(self, tmp_path):
        path = tmp_path / "01_recordingMeta.csv"
        path.write_text("id,frameRate,upperLaneMarkings,lowerLaneMarkings\n1,25,8.5;12.4;16.1;20.0,24.1;28.0;31.9;35.7\n")
        meta = read_recording_meta(path)
        assert (meta.recording_id, meta.frame_rate, meta.upper_lane_count, meta.lower_lane_count) == ("1", 25.0, 3, 3)


class TestExtractTransitions:
    def test_isolated_lane_change_gives_four_transitions(self):
        tracks = parse_tracks(_lane_change_recording(), META)
        assert lane_change_frames(tracks, 1) == [150]
        buffer = extract_transitions(tracks)
        assert len(buffer) == 4
        assert [kappa.agent_action for kappa in buffer] == [Action.KEEP, Action.LEFT, Action.KEEP, Action.KEEP]
        assert [kappa.s_t.timestamp for kappa in buffer] == pytest.approx([2.0, 4.0, 6.0, 8.0])

    def test_ego_scene_contents(self):
        buffer = extract_transitions(parse_tracks(_lane_change_recording(), META))
        first = buffer[0]
        assert first.s_t.ids == (1, 2)
        other = first.s_t.vehicles[1]
        assert other.rel_distance == pytest.approx(20.0)
        assert other.rel_speed == pytest.approx(-5.0)
        assert other.rel_lane == -1
        assert first.rewards[0] == pytest.approx(1.0 - 2.0 / 27.0)

    def test_opposite_carriageway_never_observed(self):
        buffer = extract_transitions(parse_tracks(_lane_change_recording(), META))
        assert all(3 not in kappa.s_t.ids for kappa in buffer)

    def test_no_lane_changes(self):
        tracks = parse_tracks(_lane_change_recording(change_frame=10_000), META)
        assert len(extract_transitions(tracks)) == 0

    def test_chain_leaving_recording_is_dropped(self):
        tracks = parse_tracks(_lane_change_recording(change_frame=60), META)
        assert len(extract_transitions(tracks)) == 0

    def test_chain_spacing_follows_frame_rate(self):
        tracks = parse_tracks(_lane_change_recording(), RecordingMeta("01", 50.0, 3, 3))
        assert len(extract_transitions(tracks)) == 0
        cfg = IngestConfig(chain_offsets=(-1, 0, 1))
        buffer = extract_transitions(tracks, cfg=cfg)
        assert len(buffer) == 2
        assert [kappa.s_t1.timestamp - kappa.s_t.timestamp for kappa in buffer] == pytest.approx([2.0, 2.0])


class TestIngestRecordings:
    def test_directory_ingest(self, tmp_path):
        _lane_change_recording().write_csv(tmp_path / "01_tracks.csv")
        (tmp_path / "01_recordingMeta.csv").write_text(
            "id,frameRate,upperLaneMarkings,lowerLaneMarkings\n1,25,1;2;3;4,5;6;7;8\n"
        )
        _lane_change_recording(change_frame=10_000).write_csv(tmp_path / "02_tracks.csv")

        pairs = find_recordings(tmp_path)
        assert [(t.name, m.name if m else None) for t, m in pairs] == [
            ("01_tracks.csv", "01_recordingMeta.csv"), ("02_tracks.csv", None),
        ]
        buffer, stats = ingest_recordings(pairs)
        assert len(buffer) == 4
        assert stats["transitions"].to_list() == [4, 0]
        assert stats["lane_changes"].to_list() == [1, 0]
        assert np.all([kappa.s_t.scale == buffer.meta.scale for kappa in buffer])
