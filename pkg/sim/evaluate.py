# ===========================================
# evaluate.py
# ===========================================

## \file evaluate.py
## \brief Scenario-grid evaluation of driving policies on the ring highway.
##
## \details
## \par Description
##     A grid is a set of vehicle counts times a number of seeded scenarios per
##     count. Scenario `(count, j)` is generated from `SeedSequence([seed,
##     count, j])`, so every policy evaluated with the same seed meets exactly
##     the same traffic. Each scenario is one episode of `episode_length`
##     action steps; the report keeps one row per scenario and recomputes its
##     aggregates from those rows.
##
## \par Policies
##     - GreedyQPolicy   argmax of a Surrogate-Q or DeepSet-Q network
##     - RuleBasedPolicy the surrounders' speed-gain heuristic, without rate limit
##     - KeepLanePolicy  never changes lanes


from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol
from tqdm import tqdm
import polars as pl
import numpy as np

from model.errors import DataError
from model.qnet import greedy_action
from model.scene import Action, SceneState, infer_action, label_reward
from pipeline.schema import COMPARE_SCHEMA, EVAL_REPORT_SCHEMA
from pipeline.stats import welch_t_test
from pipeline.utils import log, safe_vector_cast
from sim.collect import ScenarioSpec, scenario_rng
from sim.highway import AGENT_ID, AGENT_INDEX, DriverMix, DriverParams, HighwayWorld, SimConfig, observe, \
    rule_based_lane_decision, step


FULL_GRID_COUNTS = tuple(range(30, 91, 5))
FULL_GRID_SCENARIOS = 20
DEFAULT_EPISODE_LENGTH = 400
SCENARIO_KEY = ("vehicle_count", "scenario", "seed")


class Policy(Protocol):
    name: str

    def act(self, world: HighwayWorld, scene: SceneState, rng: np.random.Generator) -> Action:
        ...


@dataclass
class GreedyQPolicy:
    net: object
    name: str = "surrogate"

    def act(self, world, scene, rng) -> Action:
        return greedy_action(self.net, scene)


@dataclass
class RuleBasedPolicy:
    name: str = "rule-based"

    def act(self, world, scene, rng) -> Action:
        return rule_based_lane_decision(world, AGENT_INDEX, rng, ignore_rate=True)


@dataclass
class KeepLanePolicy:
    name: str = "keep-lane"

    def act(self, world, scene, rng) -> Action:
        return Action.KEEP


@dataclass(frozen=True)
class EvalGrid:
    vehicle_counts: tuple = FULL_GRID_COUNTS
    scenarios_per_count: int = FULL_GRID_SCENARIOS

    def __post_init__(self):
        if not self.vehicle_counts or self.scenarios_per_count < 1 or min(self.vehicle_counts) < 1:
            raise ValueError("EvalGrid needs vehicle counts >= 1 and at least one scenario per count")

    def scenarios(self) -> list:
        return [(int(c), j) for c in self.vehicle_counts for j in range(self.scenarios_per_count)]


@dataclass
class EvalReport:
    """!Per-scenario rows (EVAL_REPORT_SCHEMA), sorted by policy and scenario key."""
    rows: pl.DataFrame

    def __post_init__(self):
        self.rows = safe_vector_cast(self.rows, EVAL_REPORT_SCHEMA).sort(["policy", *SCENARIO_KEY])

    def __len__(self) -> int:
        return self.rows.height

    @property
    def policies(self) -> list:
        return self.rows["policy"].unique().sort().to_list()

    def scenario_keys(self, policy: str | None = None) -> list:
        rows = self.rows if policy is None else self.rows.filter(pl.col("policy") == policy)
        return [tuple(r) for r in rows.select(SCENARIO_KEY).unique().sort(list(SCENARIO_KEY)).iter_rows()]

    def aggregate(self) -> pl.DataFrame:
        """!Mean and standard deviation of every metric per policy, recomputed from the rows."""
        metrics = ["mean_return", "discounted_return", "mean_speed", "lane_changes", "collisions", "overrides"]
        exprs = [pl.len().alias("scenarios")]
        for m in metrics:
            exprs += [pl.col(m).mean().alias(f"{m}_mean"), pl.col(m).std().alias(f"{m}_std")]
        return self.rows.group_by("policy").agg(exprs).sort("policy")


def run_episode(policy, cfg: SimConfig, driver_mix: DriverMix, vehicle_count: int, scenario: int, seed: int,
                episode_length: int, gamma: float = 0.99) -> dict:
    """!One seeded scenario; returns its report row."""
    rng = scenario_rng(seed, vehicle_count, scenario)
    policy_rng = scenario_rng(seed, vehicle_count, scenario, 1)
    agent = DriverParams(cfg.agent_max_speed, lane_change_eagerness=1.0, cooperation=0.5, sigma=0.0, lc_rate=0.0)
    world = HighwayWorld.spawn(cfg, vehicle_count, driver_mix, agent, rng)

    rewards, speeds = [], []
    lane_changes = collisions = overrides = 0
    for _ in range(episode_length):
        scene = observe(world, AGENT_ID)
        lane_before = int(world.lane[AGENT_INDEX])
        world, events = step(world, policy.act(world, scene, policy_rng))

        executed = infer_action(lane_before, int(world.lane[AGENT_INDEX]))
        speed = float(world.speed[AGENT_INDEX])
        rewards.append(label_reward(executed, speed, cfg.desired_speed))
        speeds.append(speed)

        collisions += sum(e.event == "collision" for e in events)
        lane_changes += sum(e.event == "lane_change" and e.vehicle_id == AGENT_ID for e in events)
        overrides += sum(e.event == "unsafe_override" for e in events)

    rewards = np.asarray(rewards)
    return {
        "policy": policy.name,
        "vehicle_count": vehicle_count,
        "scenario": scenario,
        "seed": seed,
        "mean_return": float(rewards.mean()) if len(rewards) else 0.0,
        "discounted_return": float(np.sum(rewards * gamma ** np.arange(len(rewards)))),
        "mean_speed": float(np.mean(speeds)) if speeds else 0.0,
        "lane_changes": lane_changes,
        "collisions": collisions,
        "overrides": overrides,
        "steps": episode_length,
    }


def _run_scenario(args) -> dict:
    return run_episode(*args)


def evaluate(policy, grid: EvalGrid, episode_length: int = DEFAULT_EPISODE_LENGTH, seed: int = 7,
             cfg: SimConfig | None = None, driver_mix: DriverMix | None = None, gamma: float = 0.99,
             workers: int = 1, progress: bool = True) -> EvalReport:
    """!Evaluates one policy on every scenario of the grid.

    Scenarios run in a process pool when `workers > 1`; the report order only
    depends on the scenario keys.
    """
    if episode_length < 1:
        raise ValueError("episode_length must be >= 1")
    cfg = cfg or SimConfig()
    driver_mix = driver_mix or ScenarioSpec().driver_mix()
    jobs = [(policy, cfg, driver_mix, c, j, seed, episode_length, gamma) for c, j in grid.scenarios()]

    log(f"Evaluating {policy.name} on {len(jobs)} scenarios x {episode_length} steps (seed {seed})")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(tqdm(pool.map(_run_scenario, jobs), total=len(jobs), desc=f"eval[{policy.name}]",
                             disable=not progress))
    else:
        rows = [_run_scenario(job) for job in tqdm(jobs, desc=f"eval[{policy.name}]", disable=not progress)]

    schema = {c: t for c, (t, _) in EVAL_REPORT_SCHEMA.items()}
    return EvalReport(pl.DataFrame(rows, schema=schema))


def write_report(report: EvalReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    report.rows.write_csv(path)
    return path


def read_report(path) -> EvalReport:
    """!Parses a report CSV through EVAL_REPORT_SCHEMA.

    @throws FormatError If a column is missing or cannot be cast.
    """
    return EvalReport(pl.read_csv(path, infer_schema_length=0))


def combine_reports(paths) -> EvalReport:
    """!Concatenates per-policy reports into one."""
    reports = [read_report(p) for p in paths]
    if not reports:
        raise FileNotFoundError("No reports to combine")
    return EvalReport(pl.concat([r.rows for r in reports], how="vertical"))


def compare_reports(a: EvalReport, b: EvalReport, metric: str = "mean_speed",
                    policy_a: str | None = None, policy_b: str | None = None) -> pl.DataFrame:
    """!Welch's t-test of one per-scenario metric between two policies.

    @throws DataError If the two policies were not run on identical scenarios.
    """
    if metric not in EVAL_REPORT_SCHEMA:
        raise ValueError(f"Unknown report metric '{metric}'")
    policy_a = policy_a or a.policies[0]
    policy_b = policy_b or b.policies[0]

    keys_a, keys_b = a.scenario_keys(policy_a), b.scenario_keys(policy_b)
    if keys_a != keys_b:
        raise DataError(f"Reports for {policy_a} and {policy_b} do not share the same scenario seeds")

    xa = a.rows.filter(pl.col("policy") == policy_a)[metric].to_numpy().astype(np.float64)
    xb = b.rows.filter(pl.col("policy") == policy_b)[metric].to_numpy().astype(np.float64)
    t, p = welch_t_test(xa, xb)
    row = {"metric": metric, "policy_a": policy_a, "policy_b": policy_b,
           "mean_a": float(xa.mean()), "mean_b": float(xb.mean()), "t": t, "p": p}
    schema = {c: dt for c, (dt, _) in COMPARE_SCHEMA.items()}
    return pl.DataFrame([row], schema=schema)
