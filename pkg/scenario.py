import logging
import os
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import config
from costs import CostWeights
from dynamics import ControlInput, EvState, SvState, VehicleParams
from evaluator import EvalWeights
from planner import PlannerConfig, PlannerMode
from traffic import LaneSet, SvAgent

# Configure logging
logger = logging.getLogger(__name__)

SCENARIO_SUFFIX = ".scenario"

_SECTIONS = {"name", "description", "lanes", "ev", "planner", "weights", "sv"}
_LANE_KEYS = {"centerlines", "width"}
_EV_KEYS = {"initial_state", "initial_control"} | {f.name for f in fields(VehicleParams)}
_PLANNER_KEYS = {"mode", "horizon", "ts", "target_speed", "speed_fractions",
                 "perception_count", "duration", "period"}
_COST_KEYS = {f.name for f in fields(CostWeights)}
_EVAL_KEYS = {f.name for f in fields(EvalWeights)} - {"v_g"}
_SV_IDM_KEYS = {"a_idm", "b_idm", "s0", "t_headway", "delta_exp", "brake_max"}
_SV_KEYS = {"id", "state", "target_speed"} | _SV_IDM_KEYS


class ScenarioError(ValueError):
    """Scenario file could not be parsed or violates a validation rule"""

    def __init__(self, message: str, field_name: Optional[str] = None, line: Optional[int] = None):
        self.field_name = field_name
        self.line = line
        location = ""
        if field_name:
            location += f" [{field_name}]"
        if line is not None:
            location += f" (line {line})"
        super().__init__(f"{message}{location}")


@dataclass
class Scenario:
    """
    Everything needed for one closed-loop run

    The planner configuration carries the lanes, the vehicle limits and
    the cost weights; the loop period always equals the planner's Ts.
    """
    name: str
    ev_state: EvState
    ev_control: ControlInput
    agents: List[SvAgent]
    duration: float
    perception_count: int
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    eval_weights: EvalWeights = field(default_factory=EvalWeights)
    description: str = ""

    def __post_init__(self):
        if self.duration <= 0:
            raise ScenarioError(f"duration must be positive, got {self.duration}", "planner.duration")
        if self.perception_count < 0:
            raise ScenarioError(f"perception_count must be >= 0, got {self.perception_count}",
                                "planner.perception_count")
        ids = [agent.id for agent in self.agents]
        duplicates = sorted({i for i in ids if ids.count(i) > 1})
        if duplicates:
            raise ScenarioError(f"duplicate SV ids {duplicates}", "sv.id")

    @property
    def lanes(self) -> LaneSet:
        return self.planner.lanes

    @property
    def period(self) -> float:
        return self.planner.Ts

    @property
    def num_cycles(self) -> int:
        return int(round(self.duration / self.period))


def resolve_scenario_path(name_or_path: str) -> str:
    """
    Map a bundled scenario name to its file, pass real paths through

    Args:
        name_or_path: File path or the stem of a file in config.SCENARIO_DIR

    Returns:
        Path to the scenario file
    """
    if os.path.exists(name_or_path):
        return name_or_path
    bundled = os.path.join(config.SCENARIO_DIR, name_or_path + SCENARIO_SUFFIX)
    if os.path.exists(bundled):
        return bundled
    return name_or_path


def _check_keys(table: Dict[str, Any], allowed: set, section: str) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ScenarioError(f"unknown key(s) {unknown}", section)


def _require(table: Dict[str, Any], key: str, section: str) -> Any:
    if key not in table:
        raise ScenarioError(f"missing required key '{key}'", f"{section}.{key}")
    return table[key]


def _vector(value: Any, length: int, name: str) -> List[float]:
    if not isinstance(value, list) or len(value) != length:
        raise ScenarioError(f"expected a list of {length} numbers, got {value!r}", name)
    try:
        return [float(v) for v in value]
    except (TypeError, ValueError):
        raise ScenarioError(f"expected numbers, got {value!r}", name)


def _tupled(table: Dict[str, Any]) -> Dict[str, Any]:
    return {k: tuple(float(x) for x in v) if isinstance(v, list) else v for k, v in table.items()}


def _build(cls, kwargs: Dict[str, Any], section: str):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        if isinstance(e, ScenarioError):
            raise
        raise ScenarioError(str(e), section) from e


def parse_scenario(data: Dict[str, Any], name: str = "scenario") -> Scenario:
    """
    Validate a decoded scenario document and build the Scenario

    Args:
        data: Decoded TOML document
        name: Fallback scenario name

    Returns:
        Scenario

    Raises:
        ScenarioError: for unknown keys, missing keys or invariant violations
    """
    _check_keys(data, _SECTIONS, "top level")

    lanes_table = data.get("lanes", {})
    _check_keys(lanes_table, _LANE_KEYS, "lanes")
    lanes = _build(LaneSet, _tupled(lanes_table), "lanes")

    ev_table = dict(_require(data, "ev", "top level"))
    _check_keys(ev_table, _EV_KEYS, "ev")
    ev_state = EvState(*_vector(_require(ev_table, "initial_state", "ev"), 5, "ev.initial_state"))
    ev_control = ControlInput(*_vector(ev_table.pop("initial_control", [0.0, 0.0]), 2, "ev.initial_control"))
    ev_table.pop("initial_state")
    params = _build(VehicleParams, ev_table, "ev")

    planner_table = data.get("planner", {})
    _check_keys(planner_table, _PLANNER_KEYS, "planner")
    Ts = float(planner_table.get("ts", 0.1))
    period = float(planner_table.get("period", Ts))
    if abs(period - Ts) > 1e-12:
        raise ScenarioError(f"loop period {period} must equal the planner interval {Ts}", "planner.period")
    target_speed = float(planner_table.get("target_speed", 15.0))

    weights_table = data.get("weights", {})
    _check_keys(weights_table, _COST_KEYS | _EVAL_KEYS, "weights")
    cost_weights = _build(CostWeights, _tupled({k: v for k, v in weights_table.items() if k in _COST_KEYS}),
                          "weights")
    eval_kwargs = {k: v for k, v in weights_table.items() if k in _EVAL_KEYS}
    eval_weights = _build(EvalWeights, dict(eval_kwargs, v_g=target_speed), "weights")

    planner_kwargs = dict(
        mode=planner_table.get("mode", PlannerMode.PTO6.value),
        weights=cost_weights,
        params=params,
        lanes=lanes,
        N=int(planner_table.get("horizon", 50)),
        Ts=Ts,
        target_speed=target_speed,
    )
    if "speed_fractions" in planner_table:
        planner_kwargs["speed_fractions"] = tuple(float(f) for f in planner_table["speed_fractions"])
    planner_cfg = _build(PlannerConfig, planner_kwargs, "planner")
    if eval_weights.n_c > planner_cfg.N:
        raise ScenarioError(f"n_c ({eval_weights.n_c}) exceeds the horizon ({planner_cfg.N})", "weights.n_c")

    agents = []
    for index, sv_table in enumerate(data.get("sv", [])):
        section = f"sv[{index}]"
        _check_keys(sv_table, _SV_KEYS, section)
        state = SvState(*_vector(_require(sv_table, "state", section), 4, f"{section}.state"))
        idm = {k: float(v) for k, v in sv_table.items() if k in _SV_IDM_KEYS}
        agent = _build(SvAgent, dict(
            id=int(_require(sv_table, "id", section)),
            state=state,
            target_speed=float(_require(sv_table, "target_speed", section)),
            lane=lanes.nearest(state.oy),
            **idm,
        ), section)
        agents.append(agent)

    return Scenario(
        name=str(data.get("name", name)),
        description=str(data.get("description", "")),
        ev_state=ev_state,
        ev_control=ev_control,
        agents=agents,
        duration=float(planner_table.get("duration", 20.0)),
        perception_count=int(planner_table.get("perception_count", 3)),
        planner=planner_cfg,
        eval_weights=eval_weights,
    )


def load_scenario(path: str) -> Scenario:
    """
    Read and validate a TOML scenario file

    Args:
        path: Scenario file path, or the name of a bundled scenario

    Returns:
        Scenario

    Raises:
        ScenarioError: on a missing file, parse or validation errors
    """
    path = resolve_scenario_path(path)
    if not os.path.isfile(path):
        raise ScenarioError(f"scenario file not found: {path}", "scenario")
    with open(path, "rb") as f:
        try:
            data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ScenarioError(f"cannot parse {path}: {e}", line=getattr(e, "lineno", None)) from e

    stem = os.path.splitext(os.path.basename(path))[0]
    scenario = parse_scenario(data, stem)
    logger.info(f"Loaded scenario '{scenario.name}' from {path}: {len(scenario.agents)} SVs, "
                f"{scenario.duration:.1f} s, planner {scenario.planner.mode.value}")
    return scenario


def with_overrides(scenario: Scenario, mode: Optional[str] = None,
                   duration: Optional[float] = None) -> Scenario:
    """Copy of a scenario with the planner mode and/or duration replaced"""
    planner_cfg = scenario.planner
    if mode is not None:
        try:
            planner_cfg = replace(planner_cfg, mode=mode)
        except ValueError as e:
            raise ScenarioError(str(e), "planner.mode") from e
    return replace(scenario, planner=planner_cfg,
                   duration=scenario.duration if duration is None else float(duration))
