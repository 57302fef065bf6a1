"""Run configuration: nested dataclasses loaded from YAML or JSON.

A config file holds one run, or a base run plus a ``runs`` list whose entries
override dotted key paths (``{"name": "no-mask", "fusion.use_mask": false}``)
so an ablation matrix can live in a single file.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    """Schema violations; ``errors`` lists every problem found."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


@dataclass
class StreamConfig:
    kind: str = "split_blobs"          # split_blobs | domain_blobs | manifest
    n_classes: int = 10
    per_class: int = 300
    image_size: int = 16
    latent_dim: int = 8
    separation: float = 2.0
    noise: float = 1.0
    modes_per_class: int = 1
    n_tasks: int = 5
    train_fraction: float = 0.8
    seed: int = 0
    angles: list[float] = field(default_factory=lambda: [0.0, 30.0, 60.0])
    colour_shifts: list[float] | None = None
    train_domains: list[int] = field(default_factory=lambda: [0, 1])
    test_domains: list[int] = field(default_factory=lambda: [2])
    manifest: str | None = None
    test_manifest: str | None = None


@dataclass
class ModelConfig:
    variant: str = "promptfusion"      # promptfusion | stabilizer | booster
    text_prompt_length: int = 8        # M
    booster_prompt_length: int = 8     # p
    image_prompt_length: int = 8       # L~
    vision_width: int = 32             # e_vis
    text_width: int = 32               # e_text
    depth: int = 2
    n_heads: int = 4
    patch_size: int = 4
    share_encoder: bool = False
    temperature: float = 0.07
    prompt_init_std: float = 0.02
    encoder_seed: int = 0


@dataclass
class FusionConfig:
    mask_mode: str = "auto"            # auto | rehearsal | memory_free
    use_mask: bool = True
    use_lambda: bool = True
    mask_at_inference: bool = True


@dataclass
class GateConfig:
    enabled: bool = False
    tau: float = 1.0
    rho: float = 0.5
    zeta: float = 0.1
    delta: float = 1.0
    hidden: int = 64
    feature: str = "stabilizer"        # stabilizer | plain


@dataclass
class RehearsalConfig:
    mode: str = "none"                 # none | buffer | gaussian
    capacity: int = 200
    feature_samples_per_class: int = 32
    finetune_steps: int = 20
    finetune_lr: float | None = None


@dataclass
class OptimConfig:
    learning_rate: float = 0.002
    weight_decay: float = 1e-4
    schedule: str = "cosine"           # cosine | constant
    epochs: int = 3
    batch_size: int = 32


@dataclass
class RunConfig:
    name: str = "run"
    seed: int = 0
    scenario: str = "class"            # class | domain
    output_dir: str = "runs/run"
    kde_grid_points: int = 256
    kde_seed: int = 0
    stream: StreamConfig = field(default_factory=StreamConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    rehearsal: RehearsalConfig = field(default_factory=RehearsalConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Digest of everything that affects results (the output directory does not)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def estimator_params(self) -> dict:
        m, f, g, r, o = self.model, self.fusion, self.gate, self.rehearsal, self.optim
        return dict(
            variant=m.variant, gate=g.enabled, scenario=self.scenario,
            text_prompt_length=m.text_prompt_length, booster_prompt_length=m.booster_prompt_length,
            image_prompt_length=m.image_prompt_length, vision_width=m.vision_width,
            text_width=m.text_width, depth=m.depth, n_heads=m.n_heads, patch_size=m.patch_size,
            share_encoder=m.share_encoder, temperature=m.temperature,
            prompt_init_std=m.prompt_init_std, encoder_seed=m.encoder_seed,
            mask_mode=f.mask_mode, use_mask=f.use_mask, use_lambda=f.use_lambda,
            mask_at_inference=f.mask_at_inference,
            gate_tau=g.tau, gate_rho=g.rho, gate_zeta=g.zeta, gate_delta=g.delta,
            gate_hidden=g.hidden, gate_feature=g.feature,
            rehearsal=r.mode, buffer_capacity=r.capacity,
            feature_samples_per_class=r.feature_samples_per_class,
            finetune_steps=r.finetune_steps, finetune_lr=r.finetune_lr,
            learning_rate=o.learning_rate, weight_decay=o.weight_decay, schedule=o.schedule,
            epochs=o.epochs, batch_size=o.batch_size, random_state=self.seed,
        )


_ENUMS = {
    "scenario": ("class", "domain"),
    "stream.kind": ("split_blobs", "domain_blobs", "manifest"),
    "model.variant": ("promptfusion", "stabilizer", "booster"),
    "fusion.mask_mode": ("auto", "rehearsal", "memory_free"),
    "gate.feature": ("stabilizer", "plain"),
    "rehearsal.mode": ("none", "buffer", "gaussian"),
    "optim.schedule": ("cosine", "constant"),
}
_POSITIVE = (
    "kde_grid_points", "stream.n_classes", "stream.per_class", "stream.image_size", "stream.latent_dim",
    "stream.n_tasks", "stream.modes_per_class", "model.vision_width", "model.text_width", "model.depth",
    "model.n_heads", "model.patch_size", "model.temperature", "gate.tau", "gate.hidden",
    "rehearsal.capacity", "optim.epochs", "optim.batch_size",
)
_NON_NEGATIVE = (
    "model.text_prompt_length", "model.booster_prompt_length", "model.image_prompt_length",
    "model.prompt_init_std", "gate.zeta", "gate.delta", "rehearsal.feature_samples_per_class",
    "rehearsal.finetune_steps", "optim.learning_rate", "optim.weight_decay", "stream.noise",
)


def _get(cfg, path: str):
    obj = cfg
    for part in path.split("."):
        obj = getattr(obj, part)
    return obj


def _build(cls, data, prefix: str, errors: list[str]):
    """Instantiate dataclass ``cls`` from a mapping, collecting type errors."""
    if not isinstance(data, dict):
        errors.append(f"{prefix or '<root>'}: expected a mapping, got {type(data).__name__}")
        return cls()
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in fields:
            errors.append(f"{path}: unknown key")
            continue
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, path + ".", errors)
            continue
        kwargs[key] = _coerce(path, value, default, fields[key].type, errors)
    return cls(**kwargs)


def _coerce(path: str, value, default, annotation: str, errors: list[str]):
    optional = "None" in str(annotation)
    if value is None:
        if optional:
            return None
        errors.append(f"{path}: may not be null")
        return default
    if isinstance(default, list) or "list" in str(annotation):
        if not isinstance(value, list):
            errors.append(f"{path}: expected a list, got {value!r}")
            return default
        return list(value)
    if annotation == "bool":
        if not isinstance(value, bool):
            errors.append(f"{path}: expected a boolean, got {value!r}")
            return default
        return value
    if annotation == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{path}: expected an integer, got {value!r}")
            return default
        return value
    if "float" in str(annotation):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{path}: expected a number, got {value!r}")
            return default
        return float(value)
    if not isinstance(value, str):
        errors.append(f"{path}: expected a string, got {value!r}")
        return default
    return value


def validate(cfg: RunConfig) -> list[str]:
    """Semantic checks; returns the list of violations (empty when valid)."""
    errors = []
    for path, allowed in _ENUMS.items():
        if _get(cfg, path) not in allowed:
            errors.append(f"{path}: {_get(cfg, path)!r} is not one of {list(allowed)}")
    for path in _POSITIVE:
        if not _get(cfg, path) > 0:
            errors.append(f"{path}: must be positive")
    for path in _NON_NEGATIVE:
        if _get(cfg, path) < 0:
            errors.append(f"{path}: must be non-negative")
    if not 0.0 <= cfg.gate.rho <= 1.0:
        errors.append("gate.rho: must lie in [0, 1]")
    if not 0.0 < cfg.stream.train_fraction < 1.0:
        errors.append("stream.train_fraction: must lie strictly between 0 and 1")
    if cfg.gate.enabled and cfg.model.variant != "promptfusion":
        errors.append("gate.enabled: the gate needs model.variant = promptfusion")
    if cfg.stream.kind == "manifest" and not cfg.stream.manifest:
        errors.append("stream.manifest: required when stream.kind = manifest")
    if cfg.scenario == "domain" and cfg.stream.kind == "split_blobs":
        errors.append("scenario: domain needs a domain_blobs or manifest stream")
    if cfg.scenario == "class" and cfg.stream.kind == "split_blobs" \
            and cfg.stream.n_classes % cfg.stream.n_tasks:
        errors.append("stream.n_tasks: must divide stream.n_classes")
    if cfg.model.patch_size > 0 and cfg.stream.image_size % cfg.model.patch_size:
        errors.append("model.patch_size: must divide stream.image_size")
    for width in ("vision_width", "text_width"):
        if _get(cfg, f"model.{width}") % max(cfg.model.n_heads, 1):
            errors.append(f"model.{width}: must be divisible by model.n_heads")
    return errors


def from_dict(data: dict) -> RunConfig:
    errors: list[str] = []
    cfg = _build(RunConfig, data, "", errors)
    if not errors:
        errors = validate(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def _set_path(data: dict, path: str, value) -> None:
    parts = path.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError([f"{path}: cannot override inside a non-mapping"])
    node[parts[-1]] = value


def expand(data: dict) -> list[RunConfig]:
    """Turn a (possibly multi-run) mapping into validated configs.

    Each ``runs`` entry is applied on top of the base; its own ``output_dir``
    defaults to ``<base output_dir>/<name>``.
    """
    if not isinstance(data, dict):
        raise ConfigError(["<root>: expected a mapping"])
    data = copy.deepcopy(data)
    runs = data.pop("runs", None)
    if runs is None:
        return [from_dict(data)]
    if not isinstance(runs, list) or not runs:
        raise ConfigError(["runs: expected a non-empty list"])
    out, errors, names = [], [], set()
    base_dir = data.get("output_dir", RunConfig.output_dir)
    for i, overrides in enumerate(runs):
        if not isinstance(overrides, dict) or "name" not in overrides:
            errors.append(f"runs[{i}]: each run needs a mapping with a name")
            continue
        if overrides["name"] in names:
            errors.append(f"runs[{i}]: duplicate run name {overrides['name']!r}")
        names.add(overrides["name"])
        merged = copy.deepcopy(data)
        for path, value in overrides.items():
            _set_path(merged, path, value)
        merged.setdefault("output_dir", base_dir)
        if "output_dir" not in overrides:
            merged["output_dir"] = str(Path(base_dir) / str(overrides["name"]))
        try:
            out.append(from_dict(merged))
        except ConfigError as exc:
            errors += [f"runs[{i}] ({overrides['name']}): {e}" for e in exc.errors]
    if errors:
        raise ConfigError(errors)
    return out


def load(path) -> list[RunConfig]:
    """Read a YAML or JSON file (JSON is valid YAML) into one or more configs."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML/JSON ({exc})"]) from None
    return expand(data if data is not None else {})
