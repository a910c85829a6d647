"""Layered run configuration stored as flat ``section.key = value`` text."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .evaluation import DEFAULT_D_THR, DEFAULT_SAMPLES, PSNR_CAP
from .losses import LossWeights
from .meshing import DEFAULT_TRUNCATION, DEFAULT_VOXEL, MAX_VOXELS
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Bad key or value; the CLI maps this to exit code 2."""


@dataclass
class MeshConfig:
    voxel_size: float = DEFAULT_VOXEL
    truncation: float = DEFAULT_TRUNCATION
    max_voxels: int = MAX_VOXELS
    alpha_threshold: float = 0.5
    min_component_fraction: float = 0.0


@dataclass
class EvalConfig:
    d_thr: float = DEFAULT_D_THR
    n_samples: int = DEFAULT_SAMPLES
    psnr_cap: float = PSNR_CAP
    crop: bool = True
    seed: int = 0


@dataclass
class RunOptions:
    preset: str = "default"  # default | desk
    seed: int = 0
    deterministic: bool = False
    threads: int = 0  # 0 = all available
    preview_interval: int = 500


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunOptions = field(default_factory=RunOptions)

    def train_config(self) -> TrainConfig:
        """TrainConfig with the loss weights and run seed folded in."""
        return replace(self.train, losses=self.loss, seed=self.run.seed)

    # -- flat view ---------------------------------------------------------

    def flat(self) -> dict[str, object]:
        out = {}
        for sec in SECTIONS:
            for k, v in asdict(getattr(self, sec)).items():
                if sec == "train" and k in _TRAIN_HIDDEN:
                    continue
                out[f"{sec}.{k}"] = v
        return out

    def dumps(self) -> str:
        lines = []
        current = None
        for key, value in self.flat().items():
            sec = key.split(".")[0]
            if sec != current:
                if current is not None:
                    lines.append("")
                lines.append(f"# {sec}")
                current = sec
            lines.append(f"{key} = {format_value(value)}")
        return "\n".join(lines) + "\n"

    def with_values(self, values: dict[str, str]) -> RunConfig:
        """Apply string-valued overrides; unknown keys raise ConfigError naming the key."""
        sections = {sec: asdict(getattr(self, sec)) for sec in SECTIONS}
        for k in _TRAIN_HIDDEN:
            sections["train"].pop(k, None)
        for key, raw in values.items():
            sec, _, name = key.partition(".")
            if sec not in sections or name not in sections[sec]:
                raise ConfigError(f"unknown config key: {key}")
            sections[sec][name] = parse_value(key, raw, sections[sec][name])
        try:
            loss = LossWeights(**sections["loss"])
            train = TrainConfig(**sections["train"], losses=loss, seed=sections["run"]["seed"])
            return RunConfig(train, loss, MeshConfig(**sections["mesh"]),
                             EvalConfig(**sections["eval"]), RunOptions(**sections["run"]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


SECTIONS = ("train", "loss", "mesh", "eval", "run")
_TRAIN_HIDDEN = ("losses", "seed")


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(key: str, raw: str, default):
    raw = str(raw).strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def base_config(preset: str = "default") -> RunConfig:
    if preset == "default":
        return RunConfig()
    if preset == "desk":
        return RunConfig(train=TrainConfig.desk(), run=RunOptions(preset="desk"))
    raise ConfigError(f"unknown preset: {preset}")


def env_overrides(environ=None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    out = {}
    if environ.get("SPLATCAR_THREADS"):
        out["run.threads"] = environ["SPLATCAR_THREADS"]
    if environ.get("SPLATCAR_SEED"):
        out["run.seed"] = environ["SPLATCAR_SEED"]
    return out


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None,
                preset: str | None = None, environ=None) -> RunConfig:
    """defaults (per preset) < config file < environment < explicit overrides."""
    file_values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        file_values = parse_text(p.read_text(), str(p))
    overrides = dict(overrides or {})
    chosen = preset or overrides.get("run.preset") or file_values.get("run.preset") or "default"
    cfg = base_config(chosen)
    merged = {**file_values, **env_overrides(environ), **overrides}
    merged["run.preset"] = chosen
    return cfg.with_values(merged)


def config_field_names() -> list[str]:
    return list(RunConfig().flat())


def defaults_table(preset: str = "default") -> str:
    return "\n".join(f"  {k} = {format_value(v)}" for k, v in base_config(preset).flat().items())

