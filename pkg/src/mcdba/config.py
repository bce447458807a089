"""Run configuration: one INI file with a section per module; unknown keys are errors."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .covis import GraphParams
from .dba import DbaConfig
from .errors import ValidationError
from .pipeline import PipelineConfig
from .simulator import NoiseSpec, RigSpec, TrajectorySpec


@dataclass(frozen=True)
class SceneSpec:
    depth_near: float = 3.0
    depth_far: float = 20.0

    def __post_init__(self):
        if not 0 < self.depth_near < self.depth_far:
            raise ValidationError("need 0 < depth_near < depth_far")

    @property
    def depth_range(self) -> tuple[float, float]:
        return (self.depth_near, self.depth_far)


@dataclass(frozen=True)
class RunConfig:
    rig: RigSpec = field(default_factory=RigSpec)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    scene: SceneSpec = field(default_factory=SceneSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    graph: GraphParams = field(default_factory=GraphParams)
    dba: DbaConfig = field(default_factory=lambda: DbaConfig(damping=1e-3))
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    seed: int = 0

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=seed, noise=dataclasses.replace(self.noise, seed=seed))

    def pipeline_config(self) -> PipelineConfig:
        return dataclasses.replace(self.pipeline, graph=self.graph, dba=self.dba)

    def echo(self) -> dict:
        """Flat ``{section: {key: value}}`` record of every setting."""
        out = {"run": {"seed": self.seed}}
        for name in _SECTIONS:
            obj = getattr(self, name)
            out[name] = {f.name: _plain(getattr(obj, f.name)) for f in _fields(name)}
        return out

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        for sec, values in self.echo().items():
            cp[sec] = {k: str(v) for k, v in values.items()}
        import io

        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


_SECTIONS = ("rig", "trajectory", "scene", "noise", "graph", "dba", "pipeline")
_TYPES = {
    "rig": RigSpec,
    "trajectory": TrajectorySpec,
    "scene": SceneSpec,
    "noise": NoiseSpec,
    "graph": GraphParams,
    "dba": DbaConfig,
    "pipeline": PipelineConfig,
}


def _fields(section: str):
    # nested module configs of the pipeline live in their own sections
    return [f for f in dataclasses.fields(_TYPES[section]) if f.name not in ("graph", "dba")]


def _plain(v):
    return v.value if hasattr(v, "value") else v


def _parse(raw: str, current, where: str):
    try:
        if isinstance(current, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ValidationError(f"{where}: cannot parse {raw!r}") from exc


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"malformed config: {exc}") from exc
    unknown = set(cp.sections()) - set(_SECTIONS) - {"run"}
    if unknown:
        raise ValidationError(f"unknown config sections: {sorted(unknown)}")
    base = RunConfig()
    parts = {}
    for name in _SECTIONS:
        obj = getattr(base, name)
        known = {f.name for f in _fields(name)}
        values = {}
        if cp.has_section(name):
            extra = set(cp[name]) - known
            if extra:
                raise ValidationError(f"unknown keys in [{name}]: {sorted(extra)}")
            for key in cp[name]:
                values[key] = _parse(cp[name][key], _plain(getattr(obj, key)), f"[{name}] {key}")
        try:
            parts[name] = dataclasses.replace(obj, **values)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"[{name}]: {exc}") from exc
    seed = 0
    if cp.has_section("run"):
        extra = set(cp["run"]) - {"seed"}
        if extra:
            raise ValidationError(f"unknown keys in [run]: {sorted(extra)}")
        seed = _parse(cp["run"].get("seed", "0"), 0, "[run] seed")
    return RunConfig(**parts).with_seed(seed)


def load_config(path: Path | str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        from .errors import IoError

        raise IoError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
