"""Run settings: presets, ``key = value`` config files with ``[section]`` headers,
and command-line overrides.

Precedence is flags > config file > preset defaults.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .pointcloud import AugmentPolicy
from .simsource import SHAPES, PARAM_RANGES, ScenarioConfig, SimSourceSpec, default_sources
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioSettings:
    known: Tuple[str, ...] = ("real", "lattice", "fuzzy", "clumpy")
    unknown: Tuple[str, ...] = ("blurry", "skewed")
    seen_shapes: Tuple[str, ...] = ("airplane",)
    unseen_shapes: Tuple[str, ...] = ()
    clouds_per_cell: int = 200
    points: int = 64
    variation: float = 0.0
    train_ratio: float = 0.6
    validation_size: int = 100


@dataclass
class ModelSettings:
    encoder_widths: Tuple[int, ...] = (3, 32, 64, 128)
    classifier_hidden: Tuple[int, ...] = (512, 256)
    projection_hidden: Tuple[int, ...] = (512,)
    embed_dim: int = 32


@dataclass
class StageSettings:
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    temperature: float = 0.07
    early_stop_patience: Optional[int] = None
    checkpoint_every: int = 0
    grad_clip: Optional[float] = 5.0


@dataclass
class AugmentSettings:
    max_translation: float = 0.05
    jitter_sigma: float = 0.005
    rotate_axes: str = "z"
    max_angle: float = 0.13


@dataclass
class AttributionSettings:
    anchors_per_source: int = 100
    percentile: Optional[float] = None
    percentile_grid: Tuple[float, ...] = (70.0, 75.0, 80.0, 85.0, 90.0, 95.0, 100.0)
    gmm_covariance: str = "diag"


@dataclass
class ExplainSettings:
    resolution: int = 64
    fingerprint_m: int = 100
    plane: str = "xy"


@dataclass
class AblationSettings:
    dims: Tuple[int, ...] = (32, 64, 128, 256, 512)
    sweep_grid: Tuple[float, ...] = (50.0, 55.0, 60.0, 65.0, 70.0, 75.0, 80.0, 85.0, 90.0, 95.0, 100.0)
    pretrain_grid: Tuple[float, ...] = (85.0, 90.0, 95.0)
    far_translation_factor: float = 10.0


@dataclass
class Settings:
    preset: str = "desk"
    seed: int = 0
    scenario: ScenarioSettings = field(default_factory=ScenarioSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    closed: StageSettings = field(default_factory=StageSettings)
    open: StageSettings = field(
        default_factory=lambda: StageSettings(epochs=60, batch_size=20, early_stop_patience=20)
    )
    augment: AugmentSettings = field(default_factory=AugmentSettings)
    attribution: AttributionSettings = field(default_factory=AttributionSettings)
    explain: ExplainSettings = field(default_factory=ExplainSettings)
    ablation: AblationSettings = field(default_factory=AblationSettings)
    sources: Tuple[SimSourceSpec, ...] = field(default_factory=lambda: tuple(default_sources()))

    # -- derived objects --

    def scenario_config(self) -> ScenarioConfig:
        s = self.scenario
        return ScenarioConfig(
            known=tuple(s.known),
            unknown=tuple(s.unknown),
            seen_shapes=tuple(s.seen_shapes),
            unseen_shapes=tuple(s.unseen_shapes),
            clouds_per_cell=s.clouds_per_cell,
            points=s.points,
            variation=s.variation,
            train_ratio=s.train_ratio,
            validation_size=s.validation_size,
            seed=self.seed,
            sources=tuple(self.sources),
        )

    def train_config(self, stage: str) -> TrainConfig:
        st = self.closed if stage == "closed" else self.open
        return TrainConfig(
            epochs=st.epochs,
            batch_size=st.batch_size,
            learning_rate=st.learning_rate,
            momentum=st.momentum,
            temperature=st.temperature,
            seed=self.seed,
            early_stop_patience=st.early_stop_patience,
            embed_dim=self.model.embed_dim,
            projection_hidden=tuple(self.model.projection_hidden),
            grad_clip=st.grad_clip,
        )

    def augment_policy(self) -> AugmentPolicy:
        a = self.augment
        axes = tuple(ax in a.rotate_axes for ax in "xyz")
        return AugmentPolicy(a.max_translation, a.jitter_sigma, axes, (0.0, a.max_angle))

    def to_text(self) -> str:
        """Serialise every resolved value in the config file syntax."""
        lines = [f"preset = {self.preset}", f"seed = {self.seed}"]
        for name in SECTIONS:
            lines.append("")
            lines.append(f"[{name}]")
            for f in fields(getattr(self, name)):
                lines.append(f"{f.name} = {_format(getattr(getattr(self, name), f.name))}")
        lines.append("")
        lines.append("[sources]")
        for spec in self.sources:
            params = ",".join(f"{k}={_format(v)}" for k, v in spec.params)
            lines.append(f"{spec.name} = {spec.signature}" + (f":{params}" if params else "") + f"@{spec.seed}")
        return "\n".join(lines) + "\n"


SECTIONS = ("scenario", "model", "closed", "open", "augment", "attribution", "explain", "ablation")


def preset(name: str) -> Settings:
    if name == "desk":
        return Settings()
    if name == "paper":
        return Settings(
            preset="paper",
            scenario=ScenarioSettings(points=2048, clouds_per_cell=200, variation=0.0),
            model=ModelSettings((3, 64, 128, 1024), (512, 256), (512,), 128),
            closed=StageSettings(epochs=200, batch_size=32, learning_rate=0.1, momentum=0.9),
            open=StageSettings(
                epochs=300, batch_size=20, learning_rate=0.1, momentum=0.9, temperature=0.07, early_stop_patience=20
            ),
        )
    raise ConfigError(f"unknown preset {name!r} (expected 'desk' or 'paper')")


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, current: Any, annotation: str, key: str) -> Any:
    text = raw.strip()
    optional = "Optional" in annotation
    if optional and text.lower() in ("none", ""):
        return None
    try:
        if "Tuple[int" in annotation:
            return tuple(int(v) for v in text.split(",") if v.strip())
        if "Tuple[float" in annotation:
            return tuple(float(v) for v in text.split(",") if v.strip())
        if "Tuple[str" in annotation:
            return tuple(v.strip() for v in text.split(",") if v.strip())
        if "int" in annotation and "float" not in annotation:
            return int(text)
        if "float" in annotation:
            value = float(text)
            if not math.isfinite(value):
                raise ValueError
            return value
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return text


def _parse_source(name: str, text: str) -> SimSourceSpec:
    # "<signature>[:k=v,k=v][@seed]"
    try:
        seed = 0
        if "@" in text:
            text, seed_text = text.rsplit("@", 1)
            seed = int(seed_text)
        signature, _, params_text = text.partition(":")
        params = []
        for item in filter(None, (p.strip() for p in params_text.split(","))):
            k, _, v = item.partition("=")
            v = v.strip()
            params.append((k.strip(), int(v) if v.lstrip("-").isdigit() else float(v)))
        return SimSourceSpec(name, signature.strip(), tuple(params), seed)
    except ValueError as exc:
        raise ConfigError(f"sources.{name}: {exc}") from None


def parse_config_text(text: str) -> Dict[str, str]:
    """Flatten a config file into ``{"section.key": value}`` (top-level keys have no prefix)."""
    out: Dict[str, str] = {}
    section = ""
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        out[f"{section}.{key}" if section else key] = value.strip()
    return out


def apply_overrides(settings: Settings, values: Dict[str, str]) -> Settings:
    """Return a copy of ``settings`` with dotted-key overrides applied; unknown keys raise."""
    s = replace(settings)
    for name in SECTIONS:
        setattr(s, name, replace(getattr(settings, name)))
    sources = {spec.name: spec for spec in settings.sources}
    order = [spec.name for spec in settings.sources]
    for key, raw in values.items():
        if key == "preset":
            continue
        if key == "seed":
            try:
                s.seed = int(raw)
            except ValueError:
                raise ConfigError(f"bad value for seed: {raw!r}") from None
            continue
        section, _, name = key.partition(".")
        if section == "sources" and name:
            sources[name] = _parse_source(name, raw)
            if name not in order:
                order.append(name)
            continue
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        target = getattr(s, section)
        known = {f.name: f for f in fields(target)}
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        annotation = str(known[name].type)
        setattr(target, name, _coerce(raw, getattr(target, name), annotation, key))
    s.sources = tuple(sources[n] for n in order)
    validate(s)
    return s


def validate(s: Settings) -> None:
    names = {spec.name for spec in s.sources}
    for src in (*s.scenario.known, *s.scenario.unknown):
        if src not in names:
            raise ConfigError(f"scenario refers to undefined source {src!r}")
    for shape in (*s.scenario.seen_shapes, *s.scenario.unseen_shapes):
        if shape not in SHAPES:
            raise ConfigError(f"unknown shape {shape!r}")
    if s.attribution.percentile is not None and not 0 < s.attribution.percentile <= 100:
        raise ConfigError(f"attribution.percentile must be in (0, 100], got {s.attribution.percentile}")
    if any(not 0 < p <= 100 for p in s.attribution.percentile_grid):
        raise ConfigError("attribution.percentile_grid values must be in (0, 100]")
    if set(s.augment.rotate_axes) - set("xyz"):
        raise ConfigError(f"augment.rotate_axes must use letters x, y, z; got {s.augment.rotate_axes!r}")
    if not 0 <= s.augment.max_angle <= 2 * math.pi:
        raise ConfigError("augment.max_angle must be within [0, 2pi]")
    if s.open.batch_size < 2:
        raise ConfigError("open.batch_size must be >= 2")


def load_settings(path: Optional[Path] = None, overrides: Optional[Dict[str, str]] = None) -> Settings:
    values: Dict[str, str] = {}
    if path is not None:
        try:
            values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    values.update(overrides or {})
    base = preset(values.get("preset", "desk"))
    return apply_overrides(base, values)
