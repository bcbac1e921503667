"""Flat ``key: value`` experiment configuration.

One key per line, ``#`` starts a comment. Unknown keys are rejected. Every
key has a default, taken from the chosen preset (``desk`` unless a
``preset:`` line says otherwise), so an empty file is a complete experiment.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .losses import DomainError
from .nets import BackboneConfig
from .synthdata import MANIP_KINDS
from .trainer import TrainConfig

PRESETS = ("desk", "paper-parity", "baseline")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    source_kind: str = "patch_swap"
    target_kinds: tuple = ("local_warp",)
    data_seed: int | None = None
    n_per_class: int = 320
    side: int = 32
    train_fraction: float = 0.8
    source_dir: str = ""
    target_dirs: tuple = ()

    def seeds(self, train_seed: int) -> tuple[int, tuple[int, ...]]:
        """Generator seeds for the source and each target domain."""
        base = train_seed if self.data_seed is None else self.data_seed
        return 100 + base, tuple(200 + 100 * i + base for i in range(len(self.target_kinds)))


@dataclass(frozen=True)
class ExperimentSpec:
    preset: str = "desk"
    run_id: str = "run"
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    backbone: BackboneConfig = field(default_factory=BackboneConfig.desk)
    out_dir: str = "runs"
    evaluate: bool = True
    heatmaps: int = 0

    def to_dict(self) -> dict:
        return {"preset": self.preset, "run_id": self.run_id, "scenario": asdict(self.scenario),
                "train": asdict(self.train), "backbone": asdict(self.backbone), "out_dir": self.out_dir,
                "evaluate": self.evaluate, "heatmaps": self.heatmaps}

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "ExperimentSpec":
        return replace(self, train=replace(self.train, seed=seed))


_SCENARIO_KEYS = {f.name: f.name for f in fields(ScenarioSpec)}
_WEIGHT_KEYS = ("alpha1", "alpha2", "alpha3", "alpha4", "tau")
_TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name != "weights")
_BACKBONE_KEYS = {"backbone": "kind", **{f.name: f.name for f in fields(BackboneConfig)
                                         if f.name not in ("kind", "image_side")}}
_TOP_KEYS = ("preset", "run_id", "out_dir", "evaluate", "heatmaps")
KNOWN_KEYS = frozenset((*_SCENARIO_KEYS, *_WEIGHT_KEYS, *_TRAIN_KEYS, *_BACKBONE_KEYS, *_TOP_KEYS))


def preset_spec(name: str = "desk") -> ExperimentSpec:
    if name == "desk":
        return ExperimentSpec()
    if name == "paper-parity":
        return ExperimentSpec(preset=name, scenario=ScenarioSpec(side=224), train=TrainConfig.paper_parity(),
                              backbone=BackboneConfig.paper_parity())
    if name == "baseline":
        # source-only: no adapter and no adversarial weight in the forward stage
        t = TrainConfig.desk()
        return ExperimentSpec(preset=name, train=replace(t, adapter="none", weights=replace(t.weights, alpha2=0.0)))
    raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")


def _coerce(raw: str, like, key: str, lineno: int):
    where = f"line {lineno}, key {key!r}"
    if isinstance(like, bool):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if isinstance(like, tuple):
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    if isinstance(like, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}") from None
    if like is None:
        if raw.lower() in ("none", "null"):
            return None
        return _coerce(raw, 0 if key == "data_seed" else 0.0, key, lineno)
    if isinstance(like, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {raw!r}") from None
    return raw


def _read_pairs(text: str, origin: str) -> list[tuple[int, str, str]]:
    pairs, seen = [], set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ConfigError(f"{origin}: line {lineno}: expected 'key: value', got {line!r}")
        key, value = (s.strip() for s in line.split(":", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{origin}: line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{origin}: line {lineno}: duplicate key {key!r}")
        seen.add(key)
        pairs.append((lineno, key, value))
    return pairs


def parse_text(text: str, origin: str = "<config>") -> ExperimentSpec:
    pairs = _read_pairs(text, origin)
    preset = next((v for _, k, v in pairs if k == "preset"), "desk")
    spec = preset_spec(preset)
    top, scen, weights, train, bb = {}, {}, {}, {}, {}
    for lineno, key, raw in pairs:
        if key == "preset":
            continue
        if key in _TOP_KEYS:
            top[key] = _coerce(raw, getattr(spec, key), key, lineno)
        elif key in _SCENARIO_KEYS:
            scen[key] = _coerce(raw, getattr(spec.scenario, key), key, lineno)
        elif key in _WEIGHT_KEYS:
            weights[key] = _coerce(raw, 0.0, key, lineno)
        elif key in _TRAIN_KEYS:
            train[key] = _coerce(raw, getattr(spec.train, key), key, lineno)
        else:
            bb[_BACKBONE_KEYS[key]] = _coerce(raw, getattr(spec.backbone, _BACKBONE_KEYS[key]), key, lineno)
    try:
        w = replace(spec.train.weights, **weights)
    except DomainError as exc:
        bad = "tau" if "tau" in str(exc) else ", ".join(sorted(weights))
        raise ConfigError(f"{origin}: invalid {bad}: {exc}") from exc
    try:
        scenario = replace(spec.scenario, **scen)
        for k in (scenario.source_kind, *scenario.target_kinds):
            if not scenario.source_dir and k not in MANIP_KINDS:
                raise ValueError(f"unknown manipulation kind {k!r}")
        t = replace(spec.train, weights=w, **train)
        b = replace(spec.backbone, image_side=scenario.side, **bb)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{origin}: {exc}") from exc
    return replace(spec, preset=preset, scenario=scenario, train=t, backbone=b, **top)


def parse_config(path: str | Path) -> ExperimentSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text, str(path))


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if v is None:
        return "none"
    return str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)


def serialize(spec: ExperimentSpec) -> str:
    """Inverse of :func:`parse_text`: every key written out explicitly."""
    lines = [f"preset: {spec.preset}"]
    lines += [f"{k}: {_fmt(getattr(spec, k))}" for k in _TOP_KEYS if k != "preset"]
    lines += [f"{k}: {_fmt(getattr(spec.scenario, k))}" for k in _SCENARIO_KEYS]
    lines += [f"{k}: {_fmt(getattr(spec.train.weights, k))}" for k in _WEIGHT_KEYS]
    lines += [f"{k}: {_fmt(getattr(spec.train, k))}" for k in _TRAIN_KEYS]
    lines += [f"{k}: {_fmt(getattr(spec.backbone, f))}" for k, f in _BACKBONE_KEYS.items()]
    return "\n".join(lines) + "\n"


def with_overrides(spec: ExperimentSpec, delta: dict) -> ExperimentSpec:
    """Apply flat ``key -> value`` overrides through the same parser as config files."""
    unknown = set(delta) - KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown override key(s): {sorted(unknown)}")
    lines = [ln for ln in serialize(spec).splitlines() if ln.split(":", 1)[0] not in delta]
    lines += [f"{k}: {_fmt(v) if not isinstance(v, str) else v}" for k, v in delta.items()]
    return parse_text("\n".join(lines), "<overrides>")
