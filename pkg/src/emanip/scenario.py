"""Scenario files: world configuration, module settings, libraries.

A scenario fully determines a trial: tool, ground-truth shape and pose
distribution, hypothesis library, noise, module configs, phase schedule,
and the RNG seed.  JSON layout follows the shape/tool library schema
described in the README; build_scenario/to_json round-trip.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .controller import StiffnessConfig
from .dynamics import FrictionParams, SolverConfig
from .errors import ConfigError
from .estimation import EstimatorConfig
from .geometry import (CompositeShape, ToolPointCloud, shape_from_dict,
                       shape_to_dict, tool_from_dict, tool_to_dict)
from .library import default_shapes, default_tools
from .planner import PlannerConfig
from .potential import PotentialParams


@dataclass(frozen=True)
class PhaseSchedule:
    insertion: bool = True
    loosening: bool = False
    loosen_total: float = math.radians(30.0)


@dataclass(frozen=True)
class WorldConfig:
    tool: str = "spanner-30"
    true_shape: str = "Hex-30"
    hypotheses: tuple = ("Rec-30", "Hex-30", "Hex-36")
    # Ground-truth pose: nominal plus a seeded uniform draw within ranges.
    nominal_pose: tuple = (0.0, 0.0, 0.0)
    pose_jitter: tuple = (0.004, 0.004, math.pi)
    # The executive's prior on the object position (approach aiming) is the
    # nominal pose plus a seeded offset of this magnitude.
    prior_offset: float = 0.004
    sigma_f: float = 0.2
    obs_period: float = 0.01
    friction: FrictionParams = field(
        default_factory=lambda: FrictionParams(mu=0.5, b=1000.0, enabled=True))
    screw_breakaway_torque: float = 0.3
    screw_viscosity: float = 2.0


@dataclass(frozen=True)
class ExecutiveConfig:
    approach_speed: float = 0.015
    hold_time: float = 0.25
    settle_time: float = 0.3
    press_step: float = 0.0015
    contact_threshold: float = 0.5
    engage_dist: float = 0.002
    engage_weight: float = 0.8
    timeout: float = 40.0
    jam_window: float = 1.5         # no-progress watchdog (s)
    jam_progress: float = 3e-4      # minimum motion per window (m)
    finish_weight: float = 0.8      # confident-identification stop (probe)


@dataclass
class Scenario:
    name: str
    seed: int
    shapes: dict                    # label -> CompositeShape
    tools: dict                     # label -> ToolPointCloud
    world: WorldConfig
    potential: PotentialParams
    solver: SolverConfig
    estimator: EstimatorConfig
    planner: PlannerConfig
    stiffness: StiffnessConfig
    executive: ExecutiveConfig
    phases: PhaseSchedule

    @property
    def tool(self) -> ToolPointCloud:
        return self.tools[self.world.tool]

    @property
    def hypothesis_shapes(self) -> dict:
        return {i: self.shapes[lbl] for i, lbl in enumerate(self.world.hypotheses)}

    def sample_true_pose(self, rng: np.random.Generator) -> np.ndarray:
        nom = np.asarray(self.world.nominal_pose, dtype=float)
        jit = np.asarray(self.world.pose_jitter, dtype=float)
        return nom + rng.uniform(-jit, jit)


def build_scenario(name: str = "default", seed: int = 0, **overrides) -> Scenario:
    """Scenario with the default libraries; overrides patch the sections."""
    kn_mid = 0.5 * (1.0 + 20.0) * 40.0
    sc = Scenario(
        name=name,
        seed=seed,
        shapes=default_shapes(),
        tools=default_tools(),
        world=WorldConfig(),
        potential=PotentialParams(0.05, 400.0, np.diag([kn_mid, 800.0, 40.0])),
        solver=SolverConfig(lambda_obs=1.0, max_iters=60),
        estimator=EstimatorConfig(),
        planner=PlannerConfig(),
        stiffness=StiffnessConfig(),
        executive=ExecutiveConfig(),
        phases=PhaseSchedule(),
    )
    for key, val in overrides.items():
        if not hasattr(sc, key):
            raise ConfigError(f"unknown scenario section {key!r}")
        setattr(sc, key, val)
    _validate(sc)
    return sc


def _validate(sc: Scenario):
    if sc.world.tool not in sc.tools:
        raise ConfigError(f"tool {sc.world.tool!r} not in the tool library")
    for lbl in sc.world.hypotheses:
        if lbl not in sc.shapes:
            raise ConfigError(f"hypothesis shape {lbl!r} not in the library")
    if sc.world.true_shape not in sc.shapes:
        raise ConfigError(f"true shape {sc.world.true_shape!r} not in the library")
    if sc.seed is None:
        raise ConfigError("scenario seed is mandatory")


# ---------------------------------------------------------------------------
# JSON round trip
# ---------------------------------------------------------------------------

def scenario_to_json(sc: Scenario) -> str:
    d = {
        "name": sc.name,
        "seed": sc.seed,
        "shapes": [shape_to_dict(s) for s in sc.shapes.values()],
        "tools": [tool_to_dict(t) for t in sc.tools.values()],
        "world": {**asdict(sc.world),
                  "friction": asdict(sc.world.friction),
                  "hypotheses": list(sc.world.hypotheses),
                  "nominal_pose": list(sc.world.nominal_pose),
                  "pose_jitter": list(sc.world.pose_jitter)},
        "potential": {"zeta1": sc.potential.zeta1, "zeta2": sc.potential.zeta2,
                      "Kc": np.asarray(sc.potential.Kc).tolist()},
        "dynamics": asdict(sc.solver),
        "estimator": asdict(sc.estimator),
        "planner": {**asdict(sc.planner),
                    "terminal_sigma": sc.planner.terminal_sigma.tolist(),
                    "exploration_floor": sc.planner.exploration_floor.tolist()},
        "stiffness": asdict(sc.stiffness),
        "executive": asdict(sc.executive),
        "phases": asdict(sc.phases),
    }
    d["estimator"]["solver"] = asdict(sc.estimator.solver)
    return json.dumps(d, indent=2)


def scenario_from_json(text: str) -> Scenario:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid scenario JSON: {e}") from e
    try:
        shapes = {s["label"]: shape_from_dict(s) for s in d["shapes"]}
        tools = {t["label"]: tool_from_dict(t) for t in d["tools"]}
        wd = dict(d["world"])
        wd["friction"] = FrictionParams(**wd["friction"])
        wd["hypotheses"] = tuple(wd["hypotheses"])
        wd["nominal_pose"] = tuple(wd["nominal_pose"])
        wd["pose_jitter"] = tuple(wd["pose_jitter"])
        est = dict(d["estimator"])
        est["solver"] = SolverConfig(**est["solver"])
        pl = dict(d["planner"])
        pl["terminal_sigma"] = np.array(pl["terminal_sigma"])
        pl["exploration_floor"] = np.array(pl["exploration_floor"])
        sc = Scenario(
            name=d["name"],
            seed=int(d["seed"]),
            shapes=shapes,
            tools=tools,
            world=WorldConfig(**wd),
            potential=PotentialParams(d["potential"]["zeta1"],
                                      d["potential"]["zeta2"],
                                      np.array(d["potential"]["Kc"])),
            solver=SolverConfig(**d["dynamics"]),
            estimator=EstimatorConfig(**est),
            planner=PlannerConfig(**pl),
            stiffness=StiffnessConfig(**d["stiffness"]),
            executive=ExecutiveConfig(**d["executive"]),
            phases=PhaseSchedule(**d["phases"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"scenario file malformed: {e}") from e
    _validate(sc)
    return sc


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        return scenario_from_json(fh.read())


def save_scenario(sc: Scenario, path):
    with open(path, "w") as fh:
        fh.write(scenario_to_json(sc))


# ---------------------------------------------------------------------------
# Named presets used by the studies and tests
# ---------------------------------------------------------------------------

def preset(name: str, seed: int = 0) -> Scenario:
    """Standard study scenarios; see the README for the catalogue."""
    if name == "vf-hex30":
        return build_scenario(
            name=name, seed=seed,
            world=WorldConfig(true_shape="Hex-30"),
            phases=PhaseSchedule(insertion=True, loosening=False))
    if name == "vf-rec30":
        return build_scenario(
            name=name, seed=seed,
            world=WorldConfig(true_shape="Rec-30",
                              pose_jitter=(0.004, 0.004, math.pi)),
            phases=PhaseSchedule(insertion=True, loosening=False))
    if name == "vf-hex36":
        return build_scenario(
            name=name, seed=seed,
            world=WorldConfig(true_shape="Hex-36"),
            phases=PhaseSchedule(insertion=True, loosening=False))
    if name == "loosen-hex30":
        return build_scenario(
            name=name, seed=seed,
            world=WorldConfig(true_shape="Hex-30"),
            phases=PhaseSchedule(insertion=True, loosening=True))
    if name == "ablation-highfriction":
        return build_scenario(
            name=name, seed=seed,
            world=WorldConfig(true_shape="Hex-30",
                              friction=FrictionParams(mu=0.8, b=1000.0,
                                                      enabled=True),
                              prior_offset=0.004),
            phases=PhaseSchedule(insertion=True, loosening=True))
    raise ConfigError(f"unknown preset {name!r}")
