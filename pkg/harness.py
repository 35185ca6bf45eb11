import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

import config
from costs import barrier_h
from dynamics import PX, PY, V, rk4_step, steering_angle
from evaluator import NoFeasibleCandidate, select
from nlp import SolveMode
from planner import (
    CandidateTrajectory,
    fallback_brake,
    plan_parallel,
    precheck_safety,
    warm_starts,
)
from scenario import Scenario
from traffic import perceive_nearest, step_traffic

# Configure logging
logger = logging.getLogger(__name__)

LOG_FILE = "log.csv"
CANDIDATES_FILE = "candidates.jsonl"
SUMMARY_FILE = "summary.json"
TIMING_FILE = "timing.csv"
META_FILE = "run.json"

# Fixed header of log.csv
LOG_COLUMNS = [
    "cycle", "time", "px", "py", "theta", "v", "omega", "a", "omega_dot",
    "steering", "lane", "target_y", "candidate_id", "fallback", "distance", "min_barrier",
]


class SimulationAbort(RuntimeError):
    """The EV state left the finite range during a closed-loop run"""


@dataclass
class CandidateRecord:
    id: int
    lane: int
    target_speed: float
    objective: float
    status: str
    iterations: int
    feasible: bool
    min_barrier: float
    raw: Optional[List[float]] = None
    normalized: Optional[List[float]] = None
    score: Optional[float] = None


@dataclass
class CycleRecord:
    """
    One control cycle

    state is the EV state the cycle planned from; control was applied to
    it and distance is the resulting longitudinal advance.
    """
    cycle: int
    time: float
    state: List[float]
    control: List[float]
    steering: float
    lane: int
    target_y: float
    candidate_id: int
    fallback: bool
    distance: float
    min_barrier: float
    sv_barriers: List[float] = field(default_factory=list)
    solve_time: float = 0.0
    candidates: List[CandidateRecord] = field(default_factory=list)

    def row(self) -> List:
        return [
            self.cycle, _fmt(self.time), *[_fmt(x) for x in self.state], *[_fmt(u) for u in self.control],
            _fmt(self.steering), self.lane, _fmt(self.target_y), self.candidate_id, int(self.fallback),
            _fmt(self.distance), _fmt(self.min_barrier),
        ]


@dataclass
class RunLog:
    scenario: str
    planner: str
    period: float
    v_g: float
    records: List[CycleRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class Summary:
    """Aggregate driving performance of one run"""
    e_mean: float
    e_max: float
    S_min: float
    P_safe: float
    T_solve: float
    A_mean: float
    L_long: float
    P_LC: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    def to_json_dict(self) -> Dict[str, Optional[float]]:
        """Field mapping with non-finite values as None (S_min is inf on a run without SVs)"""
        return json_safe(self.to_dict())

    @classmethod
    def from_json_dict(cls, data: Dict[str, Optional[float]]) -> "Summary":
        return cls(**{k: math.inf if v is None else float(v) for k, v in data.items()})


def json_safe(value: Any) -> Any:
    """Replace non-finite floats with None, recursively, so the result is strict JSON"""
    if isinstance(value, dict):
        return {k: json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    return value


def _fmt(x: float) -> str:
    return repr(float(x))


def _candidate_records(cands: List[CandidateTrajectory], scores) -> List[CandidateRecord]:
    by_id = {s.candidate_id: s for s in scores}
    records = []
    for cand in cands:
        scored = by_id.get(cand.id)
        records.append(CandidateRecord(
            id=cand.id,
            lane=cand.lane,
            target_speed=cand.spec.target_speed,
            objective=cand.solution.objective,
            status=cand.solution.status.value,
            iterations=cand.solution.iterations,
            feasible=cand.feasible,
            min_barrier=cand.min_barrier,
            raw=[float(x) for x in scored.raw] if scored else None,
            normalized=[float(x) for x in scored.normalized] if scored else None,
            score=scored.total if scored else None,
        ))
    return records


def run_closed_loop(scenario: Scenario, mode: SolveMode = SolveMode.RTI,
                    threads: Optional[int] = None) -> RunLog:
    """
    Receding-horizon simulation of the EV in traffic

    Each cycle perceives the nearest SVs, solves every candidate, applies
    the safety check, selects a candidate (or brakes when none is safe),
    applies the first control and steps the traffic.

    Args:
        scenario: Scenario to run
        mode: SQP mode used by every candidate solve
        threads: Worker thread override for the parallel solves

    Returns:
        RunLog with one record per cycle

    Raises:
        SimulationAbort: when the EV state becomes non-finite or leaves the allowed range
    """
    cfg = scenario.planner
    ew = scenario.eval_weights
    lanes = scenario.lanes
    Ts = scenario.period

    ev = np.asarray(scenario.ev_state, dtype=float)
    agents = list(scenario.agents)
    prev_lane = lanes.nearest(float(ev[PY]))
    prev_target_y = lanes.y(prev_lane)
    prev_solutions = {}

    log = RunLog(scenario.name, cfg.mode.value, Ts, cfg.target_speed)
    n_cycles = scenario.num_cycles
    logger.info(f"Starting closed-loop run of '{scenario.name}' with {cfg.mode.value}: "
                f"{n_cycles} cycles, {cfg.num_candidates} candidates, {mode.value} mode")
    run_start = time.perf_counter()

    for k in range(n_cycles):
        perceived = np.asarray(perceive_nearest(ev, agents, scenario.perception_count), dtype=float).reshape(-1, 4)

        start = time.perf_counter()
        cands = plan_parallel(ev, perceived, prev_solutions, cfg, mode, threads)
        cands = precheck_safety(cands, perceived, Ts, cfg.weights)
        try:
            selection = select(cands, ew, prev_lane, prev_target_y, Ts)
            control = selection.trajectory.solution.controls[0].copy()
            lane = selection.lane
            candidate_id = selection.trajectory.id
            scores = selection.scores
            fallback = False
        except NoFeasibleCandidate:
            logger.warning(f"Cycle {k}: no candidate passed the safety check, braking")
            control = np.asarray(fallback_brake(ev, cfg.params, Ts), dtype=float)
            lane = prev_lane
            candidate_id = -1
            scores = []
            fallback = True
        solve_time = time.perf_counter() - start
        prev_solutions = warm_starts(cands)

        sv_barriers = barrier_h(ev, perceived, cfg.weights) if len(perceived) else np.zeros(0)
        next_ev = rk4_step(ev, control, Ts)
        if not np.all(np.isfinite(next_ev)) or np.max(np.abs(next_ev)) > config.STATE_ABORT_LIMIT:
            raise SimulationAbort(f"EV state left the finite range at t={k * Ts:.1f} s: {next_ev}")

        log.records.append(CycleRecord(
            cycle=k,
            time=round(k * Ts, 9),
            state=[float(x) for x in ev],
            control=[float(u) for u in control],
            steering=steering_angle(ev, cfg.params),
            lane=lane,
            target_y=lanes.y(lane),
            candidate_id=candidate_id,
            fallback=fallback,
            distance=float(next_ev[PX] - ev[PX]),
            min_barrier=float(sv_barriers.min()) if sv_barriers.size else math.inf,
            sv_barriers=[float(h) for h in sv_barriers],
            solve_time=solve_time,
            candidates=_candidate_records(cands, scores),
        ))

        agents = step_traffic(agents, Ts, ev, lanes)
        ev = next_ev
        prev_lane, prev_target_y = lane, lanes.y(lane)

        if config.PROGRESS_LOG_INTERVAL > 0 and (k + 1) % config.PROGRESS_LOG_INTERVAL == 0:
            logger.info(f"Cycle {k + 1}/{n_cycles}: px={ev[PX]:.1f} m, py={ev[PY]:.2f} m, "
                        f"v={ev[V]:.2f} m/s, lane {lane}, last solve {solve_time * 1000:.1f} ms")
        else:
            logger.debug(f"Cycle {k}: lane {lane}, candidate {candidate_id}, u={control}, "
                         f"solve {solve_time * 1000:.1f} ms")

    logger.info(f"Finished '{scenario.name}' with {cfg.mode.value} in {time.perf_counter() - run_start:.1f} s")
    return log


def count_reversals(lanes: List[int], period: float, window: float = None) -> int:
    """
    Count A -> B -> A target-lane reversals

    Cycle k is a reversal when its lane differs from cycle k-1's and equals
    the lane of some cycle in the window preceding cycle k-1.

    Args:
        lanes: Selected lane per cycle
        period: Cycle period (s)
        window: Look-back window (s); defaults to config.REVERSAL_WINDOW

    Returns:
        Number of reversal cycles
    """
    window = config.REVERSAL_WINDOW if window is None else window
    span = int(round(window / period))
    reversals = 0
    for k in range(2, len(lanes)):
        if lanes[k] == lanes[k - 1]:
            continue
        earlier = lanes[max(0, k - 1 - span):k - 1]
        if lanes[k] in earlier:
            reversals += 1
    return reversals


def compute_metrics(log: RunLog, v_g: Optional[float] = None) -> Summary:
    """
    Aggregate a run log into the summary metrics

    Args:
        log: Non-empty run log
        v_g: Target cruise speed (m/s); defaults to the log's

    Returns:
        Summary
    """
    if not log.records:
        raise ValueError("compute_metrics needs a non-empty log")
    v_g = log.v_g if v_g is None else v_g
    records = log.records
    speeds = np.array([r.state[V] for r in records])
    errors = np.abs(speeds - v_g)
    accels = np.array([r.control[0] for r in records])
    n = len(records)
    safe = sum(1 for r in records if not r.fallback)
    reversals = count_reversals([r.lane for r in records], log.period)
    return Summary(
        e_mean=float(errors.mean()),
        e_max=float(errors.max()),
        S_min=float(min(r.min_barrier for r in records)),
        P_safe=100.0 * safe / n,
        T_solve=float(np.mean([r.solve_time for r in records])),
        A_mean=float(np.abs(accels).mean()),
        L_long=float(max(sum(r.distance for r in records), 0.0)),
        P_LC=100.0 * (n - reversals) / n,
    )


def export(log: RunLog, summary: Summary, out_dir: str) -> Dict[str, str]:
    """
    Write the run files

    log.csv and candidates.jsonl contain no wall-clock values; solve times
    go to timing.csv and the summary.

    Args:
        log: Run log
        summary: Summary of the run
        out_dir: Output directory, created if needed

    Returns:
        Mapping of file kind to written path
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "log": os.path.join(out_dir, LOG_FILE),
        "candidates": os.path.join(out_dir, CANDIDATES_FILE),
        "summary": os.path.join(out_dir, SUMMARY_FILE),
        "timing": os.path.join(out_dir, TIMING_FILE),
        "meta": os.path.join(out_dir, META_FILE),
    }

    with open(paths["meta"], "w", encoding="utf-8") as f:
        json.dump({"scenario": log.scenario, "planner": log.planner,
                   "period": log.period, "v_g": log.v_g}, f, indent=2, sort_keys=True)
        f.write("\n")

    with open(paths["log"], "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for record in log.records:
            writer.writerow(record.row())

    with open(paths["candidates"], "w", encoding="utf-8") as f:
        for record in log.records:
            line = {
                "cycle": record.cycle,
                "time": record.time,
                "lane": record.lane,
                "candidate_id": record.candidate_id,
                "fallback": record.fallback,
                "sv_barriers": record.sv_barriers,
                "candidates": [asdict(c) for c in record.candidates],
            }
            f.write(json.dumps(json_safe(line), sort_keys=True, allow_nan=False) + "\n")

    with open(paths["timing"], "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["cycle", "solve_time"])
        for record in log.records:
            writer.writerow([record.cycle, _fmt(record.solve_time)])

    write_summary(summary, out_dir)

    logger.info(f"Wrote {len(log.records)} cycles to {out_dir}")
    return paths


def write_summary(summary: Summary, out_dir: str) -> str:
    """Write summary.json into out_dir and return its path"""
    path = os.path.join(out_dir, SUMMARY_FILE)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary.to_json_dict(), f, indent=2, allow_nan=False)
        f.write("\n")
    return path


def load_summary(run_dir: str) -> Summary:
    """Read summary.json; null fields come back as inf"""
    with open(os.path.join(run_dir, SUMMARY_FILE), encoding="utf-8") as f:
        return Summary.from_json_dict(json.load(f))


def load_run(run_dir: str, v_g: Optional[float] = None) -> RunLog:
    """
    Rebuild a RunLog from the files written by export

    Candidate details are not reloaded; solve times come from timing.csv
    and the run identity from run.json.

    Args:
        run_dir: Directory written by export
        v_g: Target cruise speed override (m/s)

    Returns:
        RunLog without candidate records
    """
    timings = {}
    timing_path = os.path.join(run_dir, TIMING_FILE)
    if os.path.exists(timing_path):
        with open(timing_path, newline="", encoding="utf-8") as f:
            for row in csv.DictReader(f):
                timings[int(row["cycle"])] = float(row["solve_time"])

    records = []
    with open(os.path.join(run_dir, LOG_FILE), newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != LOG_COLUMNS:
            raise ValueError(f"{LOG_FILE} in {run_dir} has an unexpected header: {reader.fieldnames}")
        for row in reader:
            cycle = int(row["cycle"])
            records.append(CycleRecord(
                cycle=cycle,
                time=float(row["time"]),
                state=[float(row[c]) for c in ("px", "py", "theta", "v", "omega")],
                control=[float(row["a"]), float(row["omega_dot"])],
                steering=float(row["steering"]),
                lane=int(row["lane"]),
                target_y=float(row["target_y"]),
                candidate_id=int(row["candidate_id"]),
                fallback=bool(int(row["fallback"])),
                distance=float(row["distance"]),
                min_barrier=float(row["min_barrier"]),
                solve_time=timings.get(cycle, 0.0),
            ))

    meta = {}
    meta_path = os.path.join(run_dir, META_FILE)
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as f:
            meta = json.load(f)
    return RunLog(
        scenario=meta.get("scenario", os.path.basename(os.path.normpath(run_dir))),
        planner=meta.get("planner", ""),
        period=meta.get("period", 0.1),
        v_g=v_g if v_g is not None else meta.get("v_g", 15.0),
        records=records,
    )
