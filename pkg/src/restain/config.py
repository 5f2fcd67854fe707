"""Declarative pipeline configuration.

One JSON document covers every stage; command-line flags override keys
by dotted path. Validation is collective: every offending key is listed
in a single error instead of failing on the first. The canonical JSON
serialization feeds a stable hash that stage manifests embed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .dataset import AugmentationConfig, PatchGridConfig
from .errors import ConfigError
from .maskops import MorphologyConfig, TissueConfig
from .stains import DeconvConfig
from .synth import SynthSpec
from .tma import ExtractorConfig


@dataclass(frozen=True)
class PipelineConfig:
    he_slide: str = ""
    ck_slide: str = ""
    annotations: str = ""
    metadata: str = ""
    output_dir: str = "out"
    seed: int = 0
    threads: int = 1
    extract_level_factor: int = 1
    registration_factor: int = 4
    stitch_patch_size: int = 1024
    stitch_overlap: float = 0.30
    predictor_exe: str = ""
    deconv: DeconvConfig = DeconvConfig()
    morphology: MorphologyConfig = MorphologyConfig()
    extractor: ExtractorConfig = ExtractorConfig()
    grid: PatchGridConfig = PatchGridConfig()
    augmentation: AugmentationConfig = AugmentationConfig()
    tissue: TissueConfig = TissueConfig()
    synth: SynthSpec = SynthSpec()

    def __post_init__(self) -> None:
        if self.seed < 0 or self.seed >= 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.extract_level_factor < 1:
            raise ValueError("extract_level_factor must be >= 1")
        if self.registration_factor < 1:
            raise ValueError("registration_factor must be >= 1")
        if not 0.0 <= self.stitch_overlap < 1.0:
            raise ValueError("stitch_overlap must be in [0, 1)")


def config_to_dict(cfg: PipelineConfig) -> dict:
    """Plain nested dict with JSON-friendly values (tuples become lists)."""

    def convert(value):
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            return {
                f.name: convert(getattr(value, f.name))
                for f in dataclasses.fields(value)
            }
        if isinstance(value, tuple):
            return [convert(v) for v in value]
        return value

    return convert(cfg)


def config_hash(cfg: PipelineConfig) -> str:
    """Stable digest of the behavior-relevant configuration.

    Where outputs land (output_dir) and how many workers run (threads)
    cannot change the artifacts, so they are left out; everything else,
    input paths included, is hashed.
    """
    tree = config_to_dict(cfg)
    tree.pop("output_dir", None)
    tree.pop("threads", None)
    canon = json.dumps(tree, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


_SCALARS = (int, float, str, bool)


def _coerce(default, value, path: str, errors: list[str]):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            errors.append(f"{path}: expected true/false, got {value!r}")
            return default
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{path}: expected an integer, got {value!r}")
            return default
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{path}: expected a number, got {value!r}")
            return default
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            errors.append(f"{path}: expected a string, got {value!r}")
            return default
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            errors.append(f"{path}: expected a list, got {value!r}")
            return default
        return tuple(value)
    return value


def _build(dc_type, defaults, data: dict, prefix: str, errors: list[str]):
    kwargs = {}
    known = {f.name for f in dataclasses.fields(dc_type)}
    for key in sorted(set(data) - known):
        errors.append(f"{prefix}{key}: unknown key")
    for f in dataclasses.fields(dc_type):
        default = getattr(defaults, f.name)
        if f.name not in data:
            kwargs[f.name] = default
            continue
        value = data[f.name]
        path = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(default) and not isinstance(default, type):
            if not isinstance(value, dict):
                errors.append(f"{path}: expected an object")
                kwargs[f.name] = default
            else:
                kwargs[f.name] = _build(type(default), default, value, path + ".", errors)
        else:
            kwargs[f.name] = _coerce(default, value, path, errors)
    try:
        return dc_type(**kwargs)
    except (ValueError, TypeError) as exc:
        errors.append(f"{prefix.rstrip('.') or 'config'}: {exc}")
        return defaults


def parse_override(text: str) -> tuple[str, object]:
    """`a.b.c=value`; the value parses as JSON, falling back to a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _set_dotted(tree: dict, key: str, value) -> None:
    parts = key.split(".")
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-object")
    node[parts[-1]] = value


def load_config(
    path: str | Path | None = None,
    overrides: tuple[str, ...] = (),
) -> PipelineConfig:
    """Merge defaults, an optional JSON file, and dotted overrides.

    All validation problems are reported together in one ConfigError.
    """
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a JSON object")

    for text in overrides:
        key, value = parse_override(text)
        _set_dotted(data, key, value)

    errors: list[str] = []
    cfg = _build(PipelineConfig, PipelineConfig(), data, "", errors)
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    return cfg
