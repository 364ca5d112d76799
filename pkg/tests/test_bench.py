import numpy as np
import polars as pl
import pytest

from model.qnet import SurrogateQNet
from pipeline.bench import batch_directory, combine_batches, random_scene, run_benchmark, write_benchmark
from pipeline.schema import BENCH_SCHEMA


@pytest.fixture
def bench_df():
    rng = np.random.default_rng(0)
    net = SurrogateQNet.initialize(rng)
    scenes = [random_scene(rng, size) for size in (1, 4, 8)]
    return run_benchmark(net, scenes, repeats=2, batch_id="abcd1234")


class TestRunBenchmark:
    def test_schema_and_methods(self, bench_df):
        assert bench_df.columns == list(BENCH_SCHEMA)
        assert sorted(bench_df["Method"].to_list()) == ["naive", "shared"]

    def test_forward_counts(self, bench_df):
        rows = {r["Method"]: r for r in bench_df.iter_rows(named=True)}
        assert rows["shared"]["Virtual Samples"] == 2 * 13
        assert rows["shared"]["Rho Forwards"] == 6
        assert rows["naive"]["Rho Forwards"] == 26
        assert rows["shared"]["Phi Forwards"] == 26
        assert rows["naive"]["Phi Forwards"] == 2 * (1 + 16 + 64)
        assert rows["naive"]["Speedup"] == pytest.approx(1.0)

    def test_rejects_empty_input(self):
        with pytest.raises(ValueError):
            run_benchmark(SurrogateQNet.initialize(np.random.default_rng(0)), [], 1)


class TestBatchFiles:
    def test_write_and_combine(self, bench_df, tmp_path):
        batch_dir = batch_directory("abcd1234", tmp_path / "logs", timestamp="2025-01-01_00-00-00")
        assert batch_dir.name == "batch_abcd1234_2025-01-01_00-00-00"
        assert batch_directory("abcd1234", tmp_path / "logs") == batch_dir

        written = write_benchmark(bench_df, batch_dir)
        assert len(written) == 2 and all(p.name.startswith("bench_") for p in written)

        db_path = tmp_path / "db" / "bench.parquet"
        merged = combine_batches(batch_dir, batch_dir / "bench_all_abcd1234.parquet", db_path)
        assert merged.height == 2
        combine_batches(batch_dir, batch_dir / "bench_all_abcd1234.parquet", db_path)
        assert pl.read_parquet(db_path).height == 4

    def test_combine_empty_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            combine_batches(tmp_path, tmp_path / "all.parquet", tmp_path / "db.parquet")
