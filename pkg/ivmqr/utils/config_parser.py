"""
Experiment config parser.

Reads the JSON config of one subcommand, validates it against a schema assembled
from the command's CONFIG_TYPES, and resolves every default so the emitted report
can embed the full config.
"""

import json
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
import pandas as pd

from ..densities import estimated_fields, exact_fields
from ..errors import ConfigError
from ..model import (
    COUPLINGS,
    INVARIANCE,
    NoiseCopula,
    ObservedSample,
    StructuralModel,
    degenerate_model,
    example1_model,
    example2_model,
    identity_model,
    rank_violation_model,
    simulate,
)

SCHEMA_VERSION = 1
MODEL_KINDS = ["example1", "example2", "identity", "degenerate", "rank-violation", "custom"]

_NUMBER_LIST = {"type": "array", "items": {"type": "number"}}
_MATRIX = {"type": "array", "items": _NUMBER_LIST, "minItems": 1}

MODEL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": MODEL_KINDS},
        "dimension": {"type": "integer", "minimum": 1, "maximum": 6},
        "treatments": {"enum": [2, 3]},
        "A0": _MATRIX,
        "A1": _MATRIX,
        "b0": _NUMBER_LIST,
        "b1": _NUMBER_LIST,
        "utilities": {"type": "array", "items": _NUMBER_LIST, "minItems": 2, "maxItems": 2},
        "compliance": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "shares": _MATRIX,
        "eigen_bounds": {
            "type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 2, "maxItems": 2,
        },
        "instrument_probs": _NUMBER_LIST,
        "copula": {
            "type": "object",
            "additionalProperties": False,
            "required": ["cells", "strength"],
            "properties": {
                "cells": {"type": "integer", "minimum": 1},
                "strength": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "coupling": {"enum": list(COUPLINGS)},
        "similarity_scale": {"type": "number", "exclusiveMinimum": 0},
        "regularization": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "identical": {"type": "boolean"},
        "payload": {"type": "object"},
    },
}


@dataclass(frozen=True)
class ModelConfig:
    """Structural model description. Unused keys for a kind stay None."""

    kind: str
    dimension: int = 2
    treatments: int = 2
    A0: Optional[list] = None
    A1: Optional[list] = None
    b0: Optional[list] = None
    b1: Optional[list] = None
    utilities: Optional[list] = None
    compliance: float = 0.9
    shares: Optional[list] = None
    eigen_bounds: Optional[list] = None
    instrument_probs: Optional[list] = None
    copula: Optional[dict] = None
    coupling: str = INVARIANCE
    similarity_scale: float = 0.25
    regularization: float = 0.1
    identical: bool = False
    payload: Optional[dict] = None

    def to_dict(self) -> dict:
        return {key: value for key, value in asdict(self).items() if value is not None}


@dataclass(frozen=True)
class ExperimentConfig:
    """One resolved subcommand config."""

    command: str
    seed: int = 0
    model: Optional[ModelConfig] = None
    data: Optional[str] = None
    output_dir: Optional[str] = None
    options: dict = field(default_factory=dict)
    source: Optional[str] = None

    def resolved(self) -> dict:
        """Full config with defaults, as embedded in reports."""
        out = {"schema_version": SCHEMA_VERSION, "command": self.command, "seed": self.seed}
        if self.model is not None:
            out["model"] = self.model.to_dict()
        if self.data is not None:
            out["data"] = self.data
        if self.output_dir is not None:
            out["output_dir"] = self.output_dir
        out.update(self.options)
        return out

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed))

    def summary_lines(self) -> list[str]:
        """Short description for logs."""
        lines = [f"Command: {self.command} | Seed: {self.seed}"]
        if self.model is not None:
            model_parts = [f"Model: {self.model.kind}", f"p={self.model.dimension}"]
            if self.model.eigen_bounds:
                model_parts.append(f"bounds={tuple(self.model.eigen_bounds)}")
            lines.append(" | ".join(model_parts))
        if self.data:
            lines.append(f"Data: {self.data}")
        if self.options:
            lines.append(", ".join(f"{k}={v}" for k, v in sorted(self.options.items())))
        return lines


# ============== Schema ==============

def _type_schema(tag, spec: dict) -> dict:
    """JSON schema of one CONFIG_TYPES entry."""
    if isinstance(tag, (list, tuple)):
        return {"enum": list(tag)}
    if tag == "INT":
        schema = {"type": "integer"}
    elif tag == "FLOAT":
        schema = {"type": "number"}
    elif tag == "BOOLEAN":
        return {"type": "boolean"}
    elif tag == "STRING":
        return {"type": "string"}
    elif tag == "FLOAT_LIST":
        return {"type": "array", "items": {"type": "number"}, "minItems": 1}
    elif tag == "SETS":
        return {"type": "array", "items": SET_SCHEMA, "minItems": 1}
    elif tag == "MODEL":
        return MODEL_SCHEMA
    else:
        raise ValueError(f"Unknown config type tag: {tag!r}")
    if "min" in spec:
        schema["minimum"] = spec["min"]
    if "max" in spec:
        schema["maximum"] = spec["max"]
    return schema


SET_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "lo", "hi"],
            "properties": {"kind": {"const": "box"}, "lo": _NUMBER_LIST, "hi": _NUMBER_LIST},
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "normal", "offset"],
            "properties": {"kind": {"const": "half-space"}, "normal": _NUMBER_LIST, "offset": {"type": "number"}},
        },
    ]
}


def build_schema(command_name: str, command_cls) -> dict:
    """Top-level schema: common keys plus the command's CONFIG_TYPES."""
    types = command_cls.CONFIG_TYPES()
    properties = {
        "schema_version": {"const": SCHEMA_VERSION},
        "command": {"const": command_name},
        "seed": {"type": "integer", "minimum": 0},
        "data": {"type": "string"},
        "output_dir": {"type": "string"},
    }
    required = ["schema_version"]
    for section in ("required", "optional"):
        for key, (tag, spec) in types.get(section, {}).items():
            properties[key] = _type_schema(tag, spec)
            if section == "required":
                required.append(key)
    return {"type": "object", "additionalProperties": False, "required": required, "properties": properties}


def _defaults(command_cls) -> dict:
    types = command_cls.CONFIG_TYPES()
    return {
        key: spec["default"]
        for key, (_, spec) in types.get("optional", {}).items()
        if "default" in spec
    }


# ============== Parsing ==============

def _line_of_key(text: str, key) -> Optional[int]:
    if not isinstance(key, str):
        return None
    match = re.search(rf'"{re.escape(key)}"\s*:', text)
    if match is None:
        return None
    return text.count("\n", 0, match.start()) + 1


def _locate(error: jsonschema.ValidationError, text: str) -> tuple[Optional[int], str]:
    """Best source line for a schema error and the key it concerns."""
    if error.validator == "additionalProperties" and isinstance(error.instance, dict):
        allowed = set(error.schema.get("properties", {}))
        extra = sorted(set(error.instance) - allowed)
        if extra:
            return _line_of_key(text, extra[0]), extra[0]
    keys = [k for k in error.absolute_path if isinstance(k, str)]
    if keys:
        return _line_of_key(text, keys[-1]), keys[-1]
    return None, ""


def parse_config(text: str, command_name: str, command_cls, source: Optional[str] = None) -> ExperimentConfig:
    """
    Parse and validate a config string for one subcommand.

    Args:
        text: JSON source
        command_name: Subcommand the config is used for
        command_cls: Command class declaring CONFIG_TYPES
        source: Path for messages

    Returns:
        ExperimentConfig with defaults filled in

    Raises:
        ConfigError: JSON syntax or schema violation, with the source line when known
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg}", e.lineno) from e
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object", 1)

    validator = jsonschema.Draft202012Validator(build_schema(command_name, command_cls))
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        error = errors[0]
        line, key = _locate(error, text)
        where = f" at '{key}'" if key else ""
        raise ConfigError(f"schema violation{where}: {error.message}", line)

    options = _defaults(command_cls)
    common = {"schema_version", "command", "seed", "data", "output_dir", "model"}
    options.update({k: v for k, v in raw.items() if k not in common})
    model = ModelConfig(**raw["model"]) if "model" in raw else None
    if model is not None and model.eigen_bounds is not None:
        lower, upper = model.eigen_bounds
        if not lower < upper:
            raise ConfigError("eigen_bounds must satisfy lower < upper", _line_of_key(text, "eigen_bounds"))
    return ExperimentConfig(
        command=command_name,
        seed=int(raw.get("seed", 0)),
        model=model,
        data=raw.get("data"),
        output_dir=raw.get("output_dir"),
        options=options,
        source=source,
    )


def load_config(path, command_name: str, command_cls) -> ExperimentConfig:
    """Read a config file; unreadable files are reported as ConfigError."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e.strerror}") from e
    return parse_config(text, command_name, command_cls, str(path))


# ============== Building ==============

def _copula(config: ModelConfig) -> Optional[NoiseCopula]:
    if not config.copula:
        return None
    return NoiseCopula.diagonal(int(config.copula["cells"]), float(config.copula["strength"]))


def build_model(config: ModelConfig) -> StructuralModel:
    """StructuralModel described by a ModelConfig."""
    p = config.dimension
    bounds = tuple(config.eigen_bounds) if config.eigen_bounds else None
    kind = config.kind
    if kind == "example1":
        kwargs = {"compliance": config.compliance, "copula": _copula(config)}
        if bounds:
            kwargs["eigen_bounds"] = bounds
        if config.instrument_probs:
            kwargs["instrument_probs"] = config.instrument_probs
        model = example1_model(
            np.asarray(config.A0) if config.A0 is not None else np.eye(p),
            np.asarray(config.A1) if config.A1 is not None else np.eye(p),
            config.b0,
            config.b1,
            **kwargs,
        )
    elif kind == "example2":
        utilities = config.utilities or [[0.0] * p, [0.5] + [-0.5] * (p - 1)]
        kwargs = {"compliance": config.compliance}
        if bounds:
            kwargs["eigen_bounds"] = bounds
        model = example2_model(utilities, **kwargs)
    elif kind == "identity":
        m = config.treatments
        if config.shares is not None:
            shares = np.asarray(config.shares, dtype=float)
        else:
            off = (1.0 - config.compliance) / (m - 1)
            shares = np.full((m, m), off) + (config.compliance - off) * np.eye(m)
        model = identity_model(shares, p, bounds) if bounds else identity_model(shares, p)
    elif kind == "degenerate":
        model = degenerate_model(p, config.treatments)
    elif kind == "rank-violation":
        kwargs = {"regularization": config.regularization, "identical": config.identical, "compliance": config.compliance}
        if config.copula:
            kwargs["cells"] = int(config.copula["cells"])
            kwargs["copula_strength"] = float(config.copula["strength"])
        if bounds:
            kwargs["eigen_bounds"] = bounds
        model = rank_violation_model(**kwargs)
    else:
        if not config.payload:
            raise ConfigError("model kind 'custom' needs a payload")
        return StructuralModel.from_dict(config.payload)

    if config.coupling != model.coupling or config.similarity_scale != model.similarity_scale:
        model = replace(model, coupling=config.coupling, similarity_scale=config.similarity_scale)
    return model


def load_sample(path) -> ObservedSample:
    """Observed sample CSV (y1..yp, d, z[, u1..up, nu])."""
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as e:
        raise ConfigError(f"cannot read data file {path}: {e}") from e
    missing = {"y1", "d", "z"} - set(frame.columns)
    if missing:
        raise ConfigError(f"data file {path} lacks columns {sorted(missing)}")
    return ObservedSample.from_frame(frame)


def build_fields(
    model: StructuralModel,
    densities: str = "exact",
    n: int = 100_000,
    seed: int = 0,
    bandwidth: float = 0.0,
    sample: Optional[ObservedSample] = None,
    max_workers: Optional[int] = None,
) -> dict:
    """
    Density fields for every (d, z).

    'exact' uses the model's closed forms; 'kernel' estimates them from the given
    sample, or from a fresh simulation of size n. A bandwidth of 0 selects the
    rule of thumb.
    """
    if densities == "exact" and sample is None:
        return exact_fields(model)
    if sample is None:
        sample = simulate(model, n, seed, max_workers=max_workers)
    return estimated_fields(sample, model.treatments, bandwidth=bandwidth if bandwidth > 0 else None)
