"""Task configuration files: schema, validation and construction of task objects.

Lengths are metres and angles radians. Paths inside a configuration are
resolved relative to the configuration file; the name ``package:`` prefix
refers to files shipped in :mod:`dexroll.tasks`.
"""

import copy
import json
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Dict, Optional

import jsonschema
import numpy as np

from .body import SampledBody, load_obj, surface_samples_of_scene
from .constraints import ObjectModel
from .geometry import SdfScene
from .kinematics import KinematicChain
from .optimizer import FAMILIES, ProblemSpec, SolverConfig, State
from .plant import PlantConfig
from .rotations import quat_normalize

VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
QUAT = {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4}
POS = {"type": "number", "exclusiveMinimum": 0}
NONNEG = {"type": "number", "minimum": 0}

PRIMITIVE_SCHEMA = {
    "type": "object",
    "required": ["kind", "dimensions"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["sphere", "box", "cylinder"]},
        "dimensions": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "radius": POS,
                "half_length": POS,
                "half_extents": {"type": "array", "items": POS, "minItems": 3, "maxItems": 3},
            },
        },
        "pose": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"xyz": VEC3, "quat_wxyz": QUAT},
        },
    },
}

_SOLVER_KEYS = {f.name: f.type for f in fields(SolverConfig)}
_PLANT_KEYS = {f.name: f.type for f in fields(PlantConfig)}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["name", "object", "chain", "fingertips", "initial_state", "goal"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "description": {"type": "string"},
        "object": {
            "type": "object",
            "required": ["primitives"],
            "additionalProperties": False,
            "properties": {
                "primitives": {"type": "array", "items": PRIMITIVE_SCHEMA, "minItems": 1},
                "mass": NONNEG,
                "com": VEC3,
                "joint": {
                    "type": "object",
                    "required": ["type"],
                    "additionalProperties": False,
                    "properties": {"type": {"enum": ["free", "revolute", "spherical"]}, "axis": VEC3, "anchor": VEC3},
                },
                "environment": {"type": "array", "items": PRIMITIVE_SCHEMA},
                "environment_samples": {"type": "integer", "minimum": 32},
            },
        },
        "chain": {"type": "string"},
        "fingertips": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["finger", "link", "mesh"],
                "additionalProperties": False,
                "properties": {"finger": {"type": "string"}, "link": {"type": "string"}, "mesh": {"type": "string"}, "tip_point": VEC3},
            },
        },
        "sampling": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"points": {"type": "integer", "minimum": 32}, "seed": {"type": "integer", "minimum": 0}, "delta": POS},
        },
        "initial_state": {
            "type": "object",
            "required": ["q", "x", "theta_wxyz"],
            "additionalProperties": False,
            "properties": {"q": {"type": "array", "items": {"type": "number"}}, "x": VEC3, "theta_wxyz": QUAT},
        },
        "goal": {
            "type": "object",
            "required": ["x", "theta_wxyz"],
            "additionalProperties": False,
            "properties": {"x": VEC3, "theta_wxyz": QUAT},
        },
        "horizon": {"type": "integer", "minimum": 1},
        "dt": POS,
        "constraints": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "families": {"type": "array", "items": {"enum": list(FAMILIES)}, "uniqueItems": True},
                "ablation_families": {"type": "array", "items": {"enum": list(FAMILIES)}, "uniqueItems": True},
                "mu": POS,
                "f_min": {"oneOf": [NONNEG, {"type": "array", "items": NONNEG}]},
                "Kp": {"oneOf": [POS, {"type": "array", "items": POS}]},
                "scales": {"type": "object", "additionalProperties": POS},
                "region": {
                    "type": "object",
                    "required": ["anchor"],
                    "additionalProperties": False,
                    "properties": {"finger": {"type": "integer", "minimum": 0}, "anchor": VEC3, "radius": POS},
                },
            },
        },
        "cost": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "w_x": NONNEG,
                "w_theta": NONNEG,
                "terminal_weight": NONNEG,
                "smooth": {"type": "array", "items": NONNEG, "minItems": 3, "maxItems": 3},
            },
        },
        "init": {"type": "object", "additionalProperties": False, "properties": {"sigma_u": POS, "sigma_f": POS}},
        "solver": {"type": "object", "additionalProperties": False, "properties": {k: {"type": "number"} for k in _SOLVER_KEYS}},
        "plant": {"type": "object", "additionalProperties": False, "properties": {k: {"type": "number"} for k in _PLANT_KEYS}},
        "metric": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "type": {"enum": ["orientation", "joint_angle"]},
                "goal_angle": {"type": "number"},
                "axis": VEC3,
                "validity": {"enum": ["no_drop", "top_displacement", "none"]},
                "top_point": VEC3,
                "max_top_displacement": POS,
            },
        },
        "seeds": {"type": "object", "additionalProperties": False, "properties": {"count": {"type": "integer", "minimum": 1}, "base": {"type": "integer", "minimum": 0}}},
    },
}

DEFAULTS = {
    "object": {"mass": 0.1, "com": [0.0, 0.0, 0.0], "joint": {"type": "free"}, "environment_samples": 256},
    "sampling": {"points": 512, "seed": 0, "delta": 1000.0},
    "horizon": 10,
    "dt": 0.1,
    "constraints": {"families": ["contact", "rolling", "torque", "wrench", "friction", "min_force"], "ablation_families": ["tracking", "torque", "wrench", "friction", "min_force"], "mu": 0.95, "f_min": 0.0, "Kp": 3.0},
    "cost": {"w_x": 1.0, "w_theta": 1.0, "terminal_weight": 10.0, "smooth": [1.0, 100.0, 1.0]},
    "init": {"sigma_u": 2.5e-2, "sigma_f": 0.15},
    "solver": {},
    "plant": {},
    "metric": {"type": "orientation", "validity": "no_drop"},
    "seeds": {"count": 10, "base": 0},
}


class ConfigError(ValueError):
    """Invalid task configuration; ``path`` names the offending field."""

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def _merge(defaults, given):
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(data):
    """Raise :class:`ConfigError` with a dotted field path on schema violations."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        path = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(e.message, path)
    for i, p in enumerate(data["object"]["primitives"]):
        need = {"sphere": {"radius"}, "box": {"half_extents"}, "cylinder": {"radius", "half_length"}}[p["kind"]]
        if set(p["dimensions"]) != need:
            raise ConfigError(f"{p['kind']} needs dimensions {sorted(need)}", f"object.primitives.{i}.dimensions")


def package_dir():
    return Path(str(resources.files("dexroll") / "tasks"))


def resolve_path(ref, base_dir):
    if ref.startswith("package:"):
        return package_dir() / ref[len("package:") :]
    p = Path(ref)
    return p if p.is_absolute() else Path(base_dir) / p


@dataclass
class Task:
    """Objects built from a configuration, ready for solving and rollout."""

    name: str
    spec: ProblemSpec
    ablation_spec: ProblemSpec
    solver: SolverConfig
    plant: PlantConfig
    initial_state: State
    metric: Dict
    seeds: Dict


class TaskConfig:
    """A validated task configuration with defaults filled in."""

    def __init__(self, data, base_dir="."):
        validate(data)
        self.data = _merge(DEFAULTS, data)
        validate(self.data)
        self.base_dir = Path(base_dir)
        for key in ["chain"] + [f"fingertips.{i}.mesh" for i in range(len(self.data["fingertips"]))]:
            ref = self.data["chain"] if key == "chain" else self.data["fingertips"][int(key.split(".")[1])]["mesh"]
            if not resolve_path(ref, self.base_dir).is_file():
                raise ConfigError(f"file not found: {ref}", key)

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"invalid JSON: {err}") from err
        except OSError as err:
            raise ConfigError(f"cannot read {path}: {err}") from err
        return cls(data, path.parent)

    @classmethod
    def from_dict(cls, data, base_dir="."):
        return cls(data, base_dir)

    def to_dict(self):
        return copy.deepcopy(self.data)

    def to_json(self):
        return json.dumps(self.data, indent=2, sort_keys=True)

    def __eq__(self, other):
        return isinstance(other, TaskConfig) and self.data == other.data

    @property
    def name(self):
        return self.data["name"]

    def build(self, points=None):
        """Construct chain, sampled fingertips, object model and problem specs."""
        d = self.data
        chain = KinematicChain.load(resolve_path(d["chain"], self.base_dir))
        s = d["sampling"]
        n_pts = s["points"] if points is None else points
        bindings, tips = [], []
        for k, ft in enumerate(d["fingertips"]):
            try:
                fi = chain.finger_index(ft["finger"])
                li = chain.link_index(ft["link"])
            except ValueError as err:
                raise ConfigError(str(err), f"fingertips.{k}") from err
            mesh = load_obj(resolve_path(ft["mesh"], self.base_dir))
            bindings.append((fi, li, mesh))
            tips.append((li, np.asarray(ft.get("tip_point", [0.0, 0.0, 0.0]), float)))
        body = SampledBody.from_meshes(chain, bindings, n=n_pts, seed=s["seed"])
        o = d["object"]
        scene = SdfScene.from_list(o["primitives"])
        env = SdfScene.from_list(o["environment"]) if o.get("environment") else None
        j = o["joint"]
        model = ObjectModel(scene, o["mass"], np.asarray(o["com"], float), j["type"], j.get("axis"), j.get("anchor"), env)
        st = d["initial_state"]
        q0 = np.asarray(st["q"], float)
        if q0.shape != (chain.n_q,):
            raise ConfigError(f"expected {chain.n_q} joint values", "initial_state.q")
        state = State(q0, np.asarray(st["x"], float), quat_normalize(np.asarray(st["theta_wxyz"], float)))
        c = d["constraints"]
        reg = c.get("region")
        env_samples = surface_samples_of_scene(scene, o["environment_samples"], s["seed"] + 1) if env is not None else None
        cost = d["cost"]
        common = dict(
            chain=chain,
            body=body,
            model=model,
            goal_x=np.asarray(d["goal"]["x"], float),
            goal_theta=np.asarray(d["goal"]["theta_wxyz"], float),
            T=d["horizon"],
            dt=d["dt"],
            delta=s["delta"],
            Kp=np.broadcast_to(np.asarray(c["Kp"], float), (chain.n_q,)).copy(),
            mu=c["mu"],
            f_min=c["f_min"],
            w_x=cost["w_x"],
            w_theta=cost["w_theta"],
            terminal_weight=cost["terminal_weight"],
            w_smooth=tuple(cost["smooth"]),
            sigma_u=d["init"]["sigma_u"],
            sigma_f=d["init"]["sigma_f"],
            region_anchor=None if reg is None else np.asarray(reg["anchor"], float),
            region_radius=0.02 if reg is None else reg.get("radius", 0.02),
            region_finger=0 if reg is None else reg.get("finger", 0),
            tips=tips,
            env_samples=env_samples,
        )
        scales = None
        if c.get("scales"):
            from .optimizer import DEFAULT_SCALES

            scales = dict(DEFAULT_SCALES)
            scales.update(c["scales"])
            common["scales"] = scales
        try:
            spec = ProblemSpec(families=tuple(c["families"]), **common)
            abl = ProblemSpec(families=tuple(c["ablation_families"]), **common)
        except ValueError as err:
            raise ConfigError(str(err), "constraints") from err
        solver = SolverConfig(**{k: (int(v) if _SOLVER_KEYS[k] is int else float(v)) for k, v in d["solver"].items()})
        plant = PlantConfig(**{k: (int(v) if _PLANT_KEYS[k] is int else float(v)) for k, v in d["plant"].items()})
        metric = dict(d["metric"])
        metric["metric"] = metric.pop("type")
        metric["goal_theta"] = list(spec.goal_theta)
        return Task(d["name"], spec, abl, solver, plant, state, metric, dict(d["seeds"]))


def shipped_configs():
    """Paths of the example task configurations bundled with the package."""
    return sorted(p for p in package_dir().glob("*.json") if not p.name.startswith("hand_"))
