"""Run configuration: one JSON document, defaults filled per section, every
invariant checked, all problems reported together with their key paths."""

from __future__ import annotations

import copy
import json
from dataclasses import MISSING, fields
from typing import Any

from .cmtpp import ProjectorConfig, ProjectorError
from .decoding import GuidanceConfig
from .model import ModelConfig, ModelError
from .training import BACKBONE_TRAINING_DEFAULTS, ConfigError, TrainingConfig


def _defaults(cls, **overrides) -> dict:
    out = {}
    for f in fields(cls):
        v = f.default if f.default is not MISSING else f.default_factory()
        if isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    out.update(overrides)
    return out


EVAL_DEFAULTS = {
    "holdout_fraction": 0.05,
    "n_prompts": 50,
    "prompt_len": 32,
    "max_new_tokens": 128,
}


def default_document() -> dict:
    return {
        "model": _defaults(ModelConfig),
        "amateur_model": _defaults(ModelConfig, d_model=64, n_layers=2, n_heads=2, seed=1),
        "backbone_training": _defaults(TrainingConfig, **BACKBONE_TRAINING_DEFAULTS),
        "amateur_training": _defaults(TrainingConfig, **BACKBONE_TRAINING_DEFAULTS, total_steps=1500, seed=1),
        "projector": _defaults(ProjectorConfig),
        "projector_training": _defaults(TrainingConfig),
        "guidance": _defaults(GuidanceConfig),
        "eval": dict(EVAL_DEFAULTS),
    }


SECTIONS = {
    "model": ModelConfig,
    "amateur_model": ModelConfig,
    "backbone_training": TrainingConfig,
    "amateur_training": TrainingConfig,
    "projector": ProjectorConfig,
    "projector_training": TrainingConfig,
    "guidance": GuidanceConfig,
}


def _type_problem(path: str, value: Any, default: Any) -> str | None:
    if default is None:
        if value is None or isinstance(value, list):
            return None
        return f"{path}: expected a list or null"
    if isinstance(default, bool):
        return None if isinstance(value, bool) else f"{path}: expected a boolean"
    if isinstance(default, int):
        return None if isinstance(value, int) and not isinstance(value, bool) else f"{path}: expected an integer"
    if isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        return None if ok else f"{path}: expected a number"
    if isinstance(default, list):
        return None if isinstance(value, list) else f"{path}: expected a list"
    if isinstance(default, str):
        return None if isinstance(value, str) else f"{path}: expected a string"
    return None


def _merge(base: dict, doc: dict, errors: list[str]) -> dict:
    out = copy.deepcopy(base)
    if not isinstance(doc, dict):
        errors.append("<root>: config must be a JSON object")
        return out
    for section, body in doc.items():
        if section not in out:
            errors.append(f"{section}: unknown section")
            continue
        if not isinstance(body, dict):
            errors.append(f"{section}: expected an object")
            continue
        for key, value in body.items():
            if key not in out[section]:
                errors.append(f"{section}.{key}: unknown key")
                continue
            problem = _type_problem(f"{section}.{key}", value, base[section][key])
            if problem:
                errors.append(problem)
                continue
            out[section][key] = value
    return out


def _build(section: str, body: dict, errors: list[str]):
    cls = SECTIONS[section]
    try:
        obj = cls(**body)
    except (ModelError, ProjectorError, ValueError, TypeError) as e:
        errors.append(f"{section}: {e}")
        return None
    # model/projector configs raise in their constructors; these two report
    if isinstance(obj, (TrainingConfig, GuidanceConfig)):
        errors.extend(obj.problems(prefix=f"{section}."))
    return obj


def validate_config(document: dict | None) -> dict:
    """Fill defaults and check invariants. Returns the resolved document; raises
    :class:`ConfigError` listing every problem."""
    errors: list[str] = []
    doc = document or {}
    if "projector" not in doc or "d_model" not in doc.get("projector", {}):
        d = doc.get("model", {}).get("d_model") if isinstance(doc.get("model"), dict) else None
        if isinstance(d, int):
            doc = copy.deepcopy(doc)
            doc.setdefault("projector", {})["d_model"] = d
    resolved = _merge(default_document(), doc, errors)
    if errors:
        raise ConfigError(errors)

    built = {name: _build(name, resolved[name], errors) for name in SECTIONS}
    model, proj = built["model"], built["projector"]
    if model and proj and proj.d_model != model.d_model:
        errors.append("projector.d_model: must equal model.d_model")
    if proj:
        for section in ("projector_training", "guidance"):
            cfg = built[section]
            if cfg and cfg.offsets and max(cfg.offsets) > proj.max_offset:
                errors.append(f"{section}.offsets: offset {max(cfg.offsets)} exceeds projector.max_offset {proj.max_offset}")
    for mname, tname in (("model", "backbone_training"), ("amateur_model", "amateur_training"),
                         ("model", "projector_training")):
        m, t = built[mname], built[tname]
        if m and t and t.seq_len > m.max_seq_len:
            errors.append(f"{tname}.seq_len: exceeds {mname}.max_seq_len {m.max_seq_len}")
    ev = resolved["eval"]
    if not 0.0 < ev["holdout_fraction"] < 1.0:
        errors.append("eval.holdout_fraction: must be in (0, 1)")
    for key in ("n_prompts", "prompt_len", "max_new_tokens"):
        if ev[key] < 1:
            errors.append(f"eval.{key}: must be >= 1")
    if errors:
        raise ConfigError(errors)
    # canonical form: weights filled in
    resolved["guidance"]["weights"] = list(built["guidance"].weights)
    for t in ("backbone_training", "amateur_training", "projector_training"):
        resolved[t]["offset_weights"] = list(built[t].offset_weights)
    return resolved


def parse_override(text: str) -> tuple[list[str], Any]:
    """``section.key=value``; the value is parsed as JSON, falling back to a string."""
    if "=" not in text:
        raise ConfigError([f"override {text!r}: expected dotted.key=value"])
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(document: dict, overrides: list[str]) -> dict:
    doc = copy.deepcopy(document or {})
    schema = default_document()
    errors = []
    for text in overrides:
        path, value = parse_override(text)
        if len(path) != 2 or path[0] not in schema or path[1] not in schema[path[0]]:
            errors.append(f"{'.'.join(path)}: unknown key")
            continue
        doc.setdefault(path[0], {})[path[1]] = value
    if errors:
        raise ConfigError(errors)
    return doc


def model_config(resolved: dict, section: str = "model") -> ModelConfig:
    return ModelConfig(**resolved[section])


def training_config(resolved: dict, section: str) -> TrainingConfig:
    return TrainingConfig(**resolved[section])


def projector_config(resolved: dict) -> ProjectorConfig:
    return ProjectorConfig(**resolved["projector"])


def guidance_config(resolved: dict) -> GuidanceConfig:
    return GuidanceConfig(**resolved["guidance"])
