"""Strict JSON run configuration.

A run file holds one object with optional sections::

    {"preset": "desk", "seed": 0,
     "world": {...GenConfig fields...},
     "model": {...ModelConfig fields...},
     "schedule": {"stage1": {...}, "phase1": {...}, "phase2": {...}},
     "stats": {...StatsParams fields...}}

Unknown keys are rejected with their key path. The master seed lives at
the top level only and feeds the world, model init, every phase and the
statistics; ``CDT_SEED`` in the environment overrides it.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass
from pathlib import Path

from .interpret import StatsParams
from .model import ConfigError, ModelConfig
from .synth import GenConfig
from .training import PhaseConfig, Schedule, desk_schedule

SEED_ENV = "CDT_SEED"
PRESETS = ("desk", "paper")
_PHASES = ("stage1", "phase1", "phase2")
_PHASE_KEYS = ("epochs_max", "patience", "lr_map", "batch_size")


@dataclass
class RunConfig:
    preset: str
    seed: int
    world: GenConfig
    model: ModelConfig
    schedule: Schedule
    stats: StatsParams

    def to_dict(self) -> dict:
        world = self.world.to_dict()
        world.pop("seed")
        sched = {k: {f: v for f, v in d.items() if f != "seed"} for k, d in self.schedule.to_dict().items()}
        stats = self.stats.to_dict()
        stats.pop("seed")
        return {"preset": self.preset, "seed": self.seed, "world": world, "model": self.model.to_dict(),
                "schedule": sched, "stats": stats}

    def canonical_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()


def _preset_defaults(preset: str, seed: int):
    if preset == "desk":
        world = GenConfig().to_dict()
        model = ModelConfig.desk().to_dict()
        sched = desk_schedule(seed).to_dict()
        # three planted sites per desk window; twenty bins would swamp them in 64
        stats = StatsParams(hic_k=3).to_dict()
    else:
        world = GenConfig(n_genes=2361, n_prot=189, n_expressed_prot=65, n_bins=896, d_dna=3072,
                          n_targets_train=2000, n_targets_val=200, n_targets_heldout=5).to_dict()
        model = ModelConfig.paper().to_dict()
        sched = Schedule(
            stage1=PhaseConfig(epochs_max=300, patience=30, lr_map={"vce_n": 1e-4}, batch_size=32, seed=seed),
            phase1=PhaseConfig.phase1(seed=seed),
            phase2=PhaseConfig.phase2(seed=seed),
        ).to_dict()
        stats = StatsParams().to_dict()
    return world, model, sched, stats


def _merge(base: dict, given, path: str) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"{path}: expected an object, got {type(given).__name__}")
    unknown = sorted(set(given) - set(base))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")
    out = dict(base)
    out.update(given)
    return out


def _build(cls, fields: dict, path: str):
    try:
        return cls(**fields)
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        hits = [k for k in fields if re.match(rf"{re.escape(k)}\b", msg) or f" {k}=" in msg]
        name = max(hits, key=len) if hits else None
        where = f"{path}.{name}" if name else path
        raise ConfigError(f"{where}: {exc}") from None


def _check_int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    return value


def config_from_dict(raw: dict, env: dict | None = None) -> RunConfig:
    """Validate ``raw`` against the preset defaults; environment seed wins."""
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object at top level")
    unknown = sorted(set(raw) - {"preset", "seed", "world", "model", "schedule", "stats"})
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key")
    preset = raw.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"preset: must be one of {PRESETS}, got {preset!r}")
    seed = _check_int(raw.get("seed", 0), "seed")
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "").strip():
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV}: not an integer: {env[SEED_ENV]!r}") from None
    world_d, model_d, sched_d, stats_d = _preset_defaults(preset, seed)
    world_d.pop("seed")
    stats_d.pop("seed")

    world = _build(GenConfig, {**_merge(world_d, raw.get("world", {}), "world"), "seed": seed}, "world")
    model = _build(ModelConfig, _merge(model_d, raw.get("model", {}), "model"), "model")
    given_sched = raw.get("schedule", {})
    if not isinstance(given_sched, dict):
        raise ConfigError("schedule: expected an object")
    bad = sorted(set(given_sched) - set(_PHASES))
    if bad:
        raise ConfigError(f"schedule.{bad[0]}: unknown key")
    phases = {}
    for name in _PHASES:
        base = {k: sched_d[name][k] for k in _PHASE_KEYS}
        fields = _merge(base, given_sched.get(name, {}), f"schedule.{name}")
        if not isinstance(fields["lr_map"], dict):
            raise ConfigError(f"schedule.{name}.lr_map: expected an object")
        for k in ("epochs_max", "patience", "batch_size"):
            _check_int(fields[k], f"schedule.{name}.{k}")
        phases[name] = _build(PhaseConfig, {**fields, "seed": seed}, f"schedule.{name}")
    stats = _build(StatsParams, {**_merge(stats_d, raw.get("stats", {}), "stats"), "seed": seed}, "stats")
    return RunConfig(preset, seed, world, model, Schedule(**phases), stats)


def parse_config(path, env: dict | None = None) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return config_from_dict(raw, env)


def default_config(preset: str = "desk", seed: int = 0) -> RunConfig:
    return config_from_dict({"preset": preset, "seed": seed}, env={})


def serialize_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n"


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    raw = cfg.to_dict()
    raw["seed"] = seed
    return config_from_dict(raw, env={})
