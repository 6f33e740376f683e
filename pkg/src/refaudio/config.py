"""
Run configuration
INI files (`[section]` + `key = value`) decoded into msgspec structs. Every run
writes `config.echo.ini` next to its outputs; loading the echo gives back the
same RunConfig.
"""

import configparser
import json
import os
import re
import zlib
from pathlib import Path
from typing import Any, Optional

import msgspec
import numpy as np
from dotenv import load_dotenv

from . import settings
from ._logging import get_logger
from .dataset_forge import ForgeConfig
from .errors import ConfigError, RefAudioOSError
from .mrc.training import TrainConfig
from .mrc.unet import MRCConfig
from .schemas import atomic_write_bytes

logger = get_logger(__name__)

ECHO_NAME = "config.echo.ini"
SEED_STREAMS = ("forge", "train", "sample", "eval")
PRESETS = ("desk", "paper", "paper-large")


class PathsConfig(msgspec.Struct, kw_only=True):
    bank_dir: str = "bank"
    manifest_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "runs"

    @property
    def checkpoint(self) -> Path:
        return Path(self.checkpoint_dir) / "mrc.ckpt"

    @property
    def classifier(self) -> Path:
        return Path(self.checkpoint_dir) / "classifier.pt"


class BankConfig(msgspec.Struct, kw_only=True):
    n_events: int = 12
    seed: int = 7


class CodecConfig(msgspec.Struct, kw_only=True):
    mode: str = "deterministic"
    griffin_lim_iterations: int = 60
    mel_inverse: str = "nnls"
    vae_epochs: int = 20
    vae_kl_weight: float = 1e-4


class SampleConfig(msgspec.Struct, kw_only=True):
    steps: int = settings.SAMPLE_STEPS
    cfg_weight: float = settings.CFG_WEIGHT
    # which forged split to generate for when no prompt is given
    split: str = "test"
    # checkpoint to sample from; defaults to paths.checkpoint
    checkpoint: Optional[str] = None


class EvalConfig(msgspec.Struct, kw_only=True):
    per_event: int = 24
    epochs: int = 30
    clap_scale: float = 1.0


class AdaptConfig(msgspec.Struct, kw_only=True):
    k_new: int = 4
    steps: int = 1000
    lr: float = 1e-3
    warmup_steps: int = 0


class RunConfig(msgspec.Struct, kw_only=True):
    seed: int = 0
    preset: str = "desk"
    paths: PathsConfig = msgspec.field(default_factory=PathsConfig)
    bank: BankConfig = msgspec.field(default_factory=BankConfig)
    forge: ForgeConfig = msgspec.field(default_factory=ForgeConfig)
    codec: CodecConfig = msgspec.field(default_factory=CodecConfig)
    model: MRCConfig = msgspec.field(default_factory=MRCConfig)
    train: TrainConfig = msgspec.field(default_factory=TrainConfig)
    sample: SampleConfig = msgspec.field(default_factory=SampleConfig)
    eval: EvalConfig = msgspec.field(default_factory=EvalConfig)
    adapt: AdaptConfig = msgspec.field(default_factory=AdaptConfig)


# [run] holds the top-level scalars; every other section maps to a struct field
_SECTIONS: dict[str, type] = {
    "paths": PathsConfig,
    "bank": BankConfig,
    "forge": ForgeConfig,
    "codec": CodecConfig,
    "model": MRCConfig,
    "train": TrainConfig,
    "sample": SampleConfig,
    "eval": EvalConfig,
    "adapt": AdaptConfig,
}
_RUN_KEYS = ("seed", "preset")

_ENV_PATHS = {
    "bank_dir": "BANK_DIR",
    "manifest_dir": "MANIFEST_DIR",
    "checkpoint_dir": "CHECKPOINT_DIR",
    "output_dir": "OUTPUT_DIR",
}


def seed_for(stream: str, seed: int) -> int:
    """Independent sub-seed for one of the named streams."""
    if stream not in SEED_STREAMS:
        raise ConfigError(f"unknown seed stream {stream!r}")
    return int(np.random.SeedSequence([seed, zlib.crc32(stream.encode())]).generate_state(1)[0])


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    lines: dict[tuple[str, str], int] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            lines.setdefault((section, ""), lineno)
        elif "=" in line:
            lines[(section, line.split("=", 1)[0].strip())] = lineno
    return lines


def _parse_value(raw: str) -> Any:
    value = raw.strip()
    if value[:1] in "[{":
        return json.loads(value)
    return value


def _field_names(struct_type: type) -> set[str]:
    return {f.name for f in msgspec.structs.fields(struct_type)}


def _raw_sections(text: str, source: str) -> tuple[dict[str, dict[str, Any]], dict[tuple[str, str], int]]:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text, source=source)
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"{source}: cannot parse {line!r}", line=lineno) from exc
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ConfigError(f"{source}: {exc.message}", line=exc.lineno) from exc
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"{source}: key outside of a [section]", line=exc.lineno) from exc

    lines = _key_lines(text)
    sections: dict[str, dict[str, Any]] = {}
    for name in parser.sections():
        if name != "run" and name not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{name}]", line=lines.get((name, "")))
        allowed = set(_RUN_KEYS) if name == "run" else _field_names(_SECTIONS[name])
        if name == "forge":
            allowed.add("preset")  # paper-scale counts
        values = {}
        for key, raw in parser.items(name):
            lineno = lines.get((name, key))
            if key not in allowed:
                raise ConfigError(f"{source}: unknown key {key!r} in [{name}]", line=lineno)
            try:
                values[key] = _parse_value(raw)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{source}: [{name}] {key}: malformed value: {exc}", line=lineno) from exc
        sections[name] = values
    return sections, lines


def _apply_presets(sections: dict[str, dict[str, Any]]) -> dict[str, Any]:
    run = sections.get("run", {})
    preset = run.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {PRESETS}")
    data: dict[str, Any] = {name: dict(values) for name, values in sections.items() if name != "run"}
    data.update(run)

    model = msgspec.to_builtins(MRCConfig.preset(preset))
    codec_mode = data.get("codec", {}).get("mode", "deterministic")
    model["latent_channels"] = settings.VAE_CHANNELS if codec_mode == "vae" else settings.DETERMINISTIC_CHANNELS
    model.update(data.get("model", {}))
    data["model"] = model
    data["train"] = {**msgspec.to_builtins(TrainConfig.preset(preset)), **data.get("train", {})}

    forge = data.get("forge", {})
    if forge.get("preset") == "paper-scale":
        mode = forge.get("mode", "concatenation")
        n_train, n_test = settings.PAPER_SCALE_COUNTS[mode]
        forge = {"n_examples": n_train + n_test, "n_test": n_test, **forge}
    forge.pop("preset", None)
    data["forge"] = forge
    return data


def _apply_env(config: RunConfig, env_file: Optional[str | os.PathLike[str]]) -> RunConfig:
    env_path = Path(env_file) if env_file is not None else Path(".env")
    if env_path.exists():
        load_dotenv(env_path)
        logger.debug("Loaded environment overrides", path=str(env_path))
    overrides = {
        field: os.environ[settings.ENV_PREFIX + suffix]
        for field, suffix in _ENV_PATHS.items()
        if os.environ.get(settings.ENV_PREFIX + suffix)
    }
    if not overrides:
        return config
    return msgspec.structs.replace(config, paths=msgspec.structs.replace(config.paths, **overrides))


_ERROR_PATH = re.compile(r"\$\.(\w+)(?:\.(\w+))?")


def parse_config(text: str, source: str = "<config>",
                 env_file: Optional[str | os.PathLike[str]] = None) -> RunConfig:
    sections, lines = _raw_sections(text, source)
    data = _apply_presets(sections)
    try:
        config = msgspec.convert(data, RunConfig, strict=False)
    except msgspec.ValidationError as exc:
        match = _ERROR_PATH.search(str(exc))
        lineno = None
        if match:
            section, key = match.group(1), match.group(2)
            lineno = lines.get((section, key or "")) or lines.get(("run", section))
        raise ConfigError(f"{source}: {exc}", line=lineno) from exc
    return _apply_env(config, env_file)


def load_config(path: Optional[str | os.PathLike[str]] = None,
                env_file: Optional[str | os.PathLike[str]] = None) -> RunConfig:
    """Load a run config; without a path the desk defaults are used."""
    if path is None:
        return parse_config("", env_file=env_file)
    source = Path(path)
    try:
        text = source.read_text(encoding="utf-8")
    except OSError as exc:
        raise RefAudioOSError(f"Cannot read config {source}: {exc}", path=source) from exc
    return parse_config(text, str(source), env_file)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, dict)):
        return json.dumps(value)
    return str(value)


def render_config(config: RunConfig) -> str:
    data = msgspec.to_builtins(config)
    lines = ["[run]"]
    lines += [f"{key} = {_format_value(data[key])}" for key in _RUN_KEYS]
    for name in _SECTIONS:
        lines += ["", f"[{name}]"]
        for key, value in data[name].items():
            if value is not None:
                lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def write_echo(config: RunConfig, out_dir: str | os.PathLike[str]) -> Path:
    target = Path(out_dir) / ECHO_NAME
    atomic_write_bytes(target, render_config(config).encode("utf-8"))
    return target
