"""JSON run configuration: schema, defaults and object construction."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from . import modelfile
from .compose import BundleEntry, CompositionSpec, ExpertBundle, SpecViolation
from .experts import GaussianExpert, GmmExpert, parse_condition
from .oracle import GridSpec, OracleError
from .sampler import SamplerConfig
from .schedule import make_schedule
from .trainer import TrainConfig

__all__ = ["ConfigError", "RunConfig", "DEFAULT_CONFIG", "SCHEMA", "load_config"]


class ConfigError(Exception):
    """Configuration is malformed or violates a constraint; maps to exit status 2."""


_num = {"type": "number"}
_vec = {"type": "array", "items": _num, "minItems": 1}
_condition = {
    "oneOf": [
        {"const": "null"},
        {"type": "object", "properties": {"label": {"type": "integer", "minimum": 0}}, "required": ["label"], "additionalProperties": False},
        {"type": "object", "properties": {"embedding": _vec}, "required": ["embedding"], "additionalProperties": False},
    ]
}
_schedule = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["linear", "cosine"]},
        "T": {"type": "integer", "minimum": 1},
        "beta_start": _num,
        "beta_end": _num,
        "offset": _num,
    },
    "required": ["kind", "T"],
    "additionalProperties": False,
}


def _expert_schema(kind, entry_props, extra=None):
    props = {"type": {"const": kind}, "condition": _condition, "schedule": _schedule}
    required = ["type", "condition"]
    if entry_props is not None:
        entry = {
            "type": "object",
            "properties": {"condition": _condition, **entry_props},
            "required": ["condition", *entry_props],
            "additionalProperties": False,
        }
        props["table"] = {"type": "array", "items": entry, "minItems": 1}
        required.append("table")
    props.update(extra or {})
    required.extend(extra or {})
    return {"type": "object", "properties": props, "required": required, "additionalProperties": False}


SCHEMA = {
    "type": "object",
    "properties": {
        "schedule": _schedule,
        "experts": {
            "type": "array",
            "minItems": 1,
            "items": {
                "oneOf": [
                    _expert_schema("gaussian", {"mu": _vec, "sigma": _vec}),
                    _expert_schema(
                        "gmm",
                        {"weights": _vec, "means": {"type": "array", "items": _vec}, "stds": {"type": "array", "items": _vec}},
                    ),
                    _expert_schema("mlp", None, {"model": {"type": "string"}}),
                ]
            },
        },
        "composition": {
            "type": "object",
            "properties": {"a": _vec, "w": _vec, "allow_weak_weights": {"type": "boolean"}},
            "required": ["a", "w"],
            "additionalProperties": False,
        },
        "sampler": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["ancestral", "ddim"]},
                "num_steps": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "sigma_convention": {"enum": ["sigma", "sigma_squared"]},
                "record_trajectory": {"type": "boolean"},
                "chains": {"type": "integer", "minimum": 1},
                "workers": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "grid": {
            "type": "object",
            "properties": {
                "bounds": {"type": "array", "items": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}, "minItems": 1, "maxItems": 2},
                "bins": {"type": "array", "items": {"type": "integer"}, "minItems": 1, "maxItems": 2},
            },
            "required": ["bounds", "bins"],
            "additionalProperties": False,
        },
        "output_dir": {"type": "string"},
        "train": {
            "type": "object",
            "properties": {
                "dataset": {
                    "type": "object",
                    "properties": {
                        "generator": {"enum": ["gaussian_blobs", "two_moons", "checkerboard"]},
                        "n": {"type": "integer", "minimum": 1},
                        "seed": {"type": "integer", "minimum": 0},
                        "params": {"type": "object"},
                    },
                    "required": ["generator", "n"],
                    "additionalProperties": False,
                },
                "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "learning_rate": _num,
                "seed": {"type": "integer", "minimum": 0},
                "p_uncond": _num,
            },
            "required": ["dataset", "hidden"],
            "additionalProperties": False,
        },
    },
    "required": ["schedule"],
    "additionalProperties": False,
}


DEFAULT_CONFIG = {
    "schedule": {"kind": "linear", "T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
    "experts": [
        {
            "type": "gaussian",
            "condition": {"label": 0},
            "table": [{"condition": "null", "mu": [0.0], "sigma": [1.5]}, {"condition": {"label": 0}, "mu": [1.0], "sigma": [0.8]}],
        },
        {
            "type": "gaussian",
            "condition": {"label": 0},
            "table": [{"condition": "null", "mu": [0.5], "sigma": [1.2]}, {"condition": {"label": 0}, "mu": [-0.5], "sigma": [0.6]}],
        },
    ],
    "composition": {"a": [0.5, 0.5], "w": [1.0, 1.0]},
    "sampler": {"kind": "ancestral", "seed": 0, "chains": 10000},
    "train": {
        "dataset": {"generator": "gaussian_blobs", "n": 4000, "seed": 0, "params": {"centers": [[-2.0, 0.0], [2.0, 0.0]], "std": 0.3}},
        "hidden": [64, 64],
        "epochs": 30,
        "batch_size": 128,
        "learning_rate": 0.05,
        "seed": 0,
        "p_uncond": 0.1,
    },
    "output_dir": "unite_out",
}


def _schedule_from(block):
    params = {k: v for k, v in block.items() if k not in ("kind", "T")}
    try:
        return make_schedule(block["kind"], block["T"], **params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid schedule {block}: {exc}") from exc


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path

    def __post_init__(self):
        self._schedule = None
        self._bundle = None

    @property
    def output_dir(self) -> Path:
        return self.base_dir / self.raw.get("output_dir", "unite_out")

    @property
    def schedule(self):
        if self._schedule is None:
            self._schedule = _schedule_from(self.raw["schedule"])
        return self._schedule

    def resolve(self, path):
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def _expert(self, block):
        kind = block["type"]
        try:
            if kind == "mlp":
                return modelfile.load(self.resolve(block["model"]))
            table = {}
            for entry in block["table"]:
                cond = parse_condition(entry["condition"])
                if kind == "gaussian":
                    table[cond] = (entry["mu"], entry["sigma"])
                else:
                    table[cond] = (entry["weights"], entry["means"], entry["stds"])
            return GaussianExpert(table) if kind == "gaussian" else GmmExpert(table)
        except modelfile.ModelFileError as exc:
            raise ConfigError(f"cannot load model {block['model']!r}: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read model file: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"invalid {kind} expert: {exc}") from exc

    @property
    def bundle(self) -> ExpertBundle:
        if self._bundle is None:
            if "experts" not in self.raw:
                raise ConfigError("config declares no experts")
            entries = []
            for block in self.raw["experts"]:
                expert = self._expert(block)
                sched = _schedule_from(block["schedule"]) if "schedule" in block else None
                cond = parse_condition(block["condition"])
                if hasattr(expert, "table") and cond not in expert.table:
                    raise ConfigError(f"expert condition {block['condition']!r} is not in its table")
                entries.append(BundleEntry(expert, cond, sched))
            try:
                self._bundle = ExpertBundle(tuple(entries), self.schedule)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        return self._bundle

    def composition(self, **overrides) -> CompositionSpec:
        if "composition" not in self.raw:
            raise ConfigError("config declares no composition block")
        block = {**self.raw["composition"], **overrides}
        try:
            spec = CompositionSpec(a=block["a"], w=block["w"], allow_weak_weights=block.get("allow_weak_weights", False))
        except SpecViolation as exc:
            raise ConfigError(f"composition invalid: {exc}") from exc
        if "experts" in self.raw and spec.N != len(self.raw["experts"]):
            raise ConfigError(f"composition has {spec.N} entries for {len(self.raw['experts'])} experts")
        return spec

    def sampler(self, seed=None) -> SamplerConfig:
        block = dict(self.raw.get("sampler", {}))
        block.pop("chains", None)
        block.pop("workers", None)
        if seed is not None:
            block["seed"] = seed
        try:
            cfg = SamplerConfig(**block)
            cfg.steps_for(self.schedule)
        except ValueError as exc:
            raise ConfigError(f"sampler invalid: {exc}") from exc
        return cfg

    def chains(self, override=None):
        return override if override is not None else self.raw.get("sampler", {}).get("chains", 1000)

    def workers(self):
        return self.raw.get("sampler", {}).get("workers", 1)

    def grid(self, dim):
        block = self.raw.get("grid")
        try:
            if block is None:
                return GridSpec(((-4.0, 4.0),) * dim, (64,) * dim)
            g = GridSpec(block["bounds"], block["bins"])
        except OracleError as exc:
            raise ConfigError(f"grid invalid: {exc}") from exc
        if g.ndim != dim:
            raise ConfigError(f"grid has {g.ndim} axes but experts have dimension {dim}")
        return g

    def train_config(self) -> TrainConfig:
        block = self.raw.get("train")
        if block is None:
            raise ConfigError("config declares no train block")
        keys = ("epochs", "batch_size", "learning_rate", "seed", "p_uncond")
        try:
            return TrainConfig(**{k: block[k] for k in keys if k in block})
        except ValueError as exc:
            raise ConfigError(f"train block invalid: {exc}") from exc

    def validate_for(self, command):
        """Build everything ``command`` needs, so errors surface before any work."""
        self.schedule
        if command in ("sample", "sweep"):
            bundle = self.bundle
            self.composition()
            self.sampler()
            self.grid(bundle.dim)
        elif command == "train":
            self.train_config()


def _check_files(raw, base_dir):
    for block in raw.get("experts", []):
        if block.get("type") == "mlp":
            p = Path(block["model"])
            p = p if p.is_absolute() else base_dir / p
            if not p.is_file():
                raise ConfigError(f"model file {str(p)!r} does not exist")


def from_dict(raw, base_dir=".") -> RunConfig:
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config schema violation at {where}: {exc.message}") from None
    base = Path(base_dir)
    _check_files(raw, base)
    return RunConfig(copy.deepcopy(raw), base)


def load_config(path=None) -> RunConfig:
    if path is None:
        return from_dict(DEFAULT_CONFIG, os.getcwd())
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return from_dict(raw, Path(path).resolve().parent)
