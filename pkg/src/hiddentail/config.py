"""Run configuration: one JSON document, validated before any work starts."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .attack import AttackConfig
from .model import GenerationConfig, ModelDims, PretrainConfig

SEED_OVERRIDE_ENV = "HTF_SEED_OVERRIDE"

# Values used at full scale; shipped defaults are the desk-scale ones below.
FULL_SCALE_VALUES = {
    "attack.iterations": 5000,
    "attack.tail_length": 1024,
    "attack.alpha": 1 / 255,
    "attack.epsilon": 64 / 255,
    "attack.mu_sem": 1.0,
    "attack.mu_spe": 1e3,
    "attack.mu_eos": 1e4,
    "attack.lambda_min": 0.15,
    "attack.temperature": 2.0,
    "generation.max_new_tokens": 2048,
    "data.n_images": 10,
    "data.n_prompts": 60,
    "data.n_opt": 40,
    "data.n_test": 20,
}

BUILTIN_CHECKPOINTS = {"builtin:seed7": "toy_vlm_seed7.htvlm",
                       "builtin:seed11": "toy_vlm_seed11.htvlm"}


class ValidationError(ValueError):
    pass


@dataclass
class Seeds:
    model: int = 7
    data: int = 0
    attack: int = 0
    model_b: int | None = 11


@dataclass
class PretrainSection:
    checkpoint: str | None = "builtin:seed7"
    checkpoint_b: str | None = "builtin:seed11"
    corpus_size: int = 8000
    steps: int = 5000
    lr: float = 5e-3
    batch_size: int = 16


@dataclass
class DataSection:
    n_images: int = 1
    n_prompts: int = 60
    n_opt: int = 40
    n_test: int = 20
    response_cap: int = 48


@dataclass
class AblationSection:
    image_index: int = 0
    tokens: list[str] = field(default_factory=lambda: ["BOS", "IM_START", "BOX_START",
                                                       "BOX_END", "QUAD_START"])
    decode_limits: list[int] = field(default_factory=lambda: [160, 320])


@dataclass
class RunConfig:
    seeds: Seeds = field(default_factory=Seeds)
    model: ModelDims = field(default_factory=ModelDims)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    data: DataSection = field(default_factory=DataSection)
    attack: AttackConfig = field(default_factory=AttackConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    ablations: AblationSection = field(default_factory=AblationSection)
    checkpoint_every: int = 0
    output_dir: str = "runs"

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def digest(self) -> str:
        body = self.to_dict()
        body.pop("output_dir")
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:12]

    def run_dir(self, out: str | None = None) -> Path:
        return Path(out or self.output_dir) / f"run-{self.digest()}"

    def image_attack_seed(self, index: int) -> int:
        return int(np.random.SeedSequence([self.seeds.attack, index]).generate_state(1)[0])

    def image_data_seed(self, index: int) -> int:
        return int(np.random.SeedSequence([self.seeds.data, index]).generate_state(1)[0])

    def corpus_seed(self) -> int:
        return self.seeds.data + 1

    def pretrain_config(self) -> PretrainConfig:
        # batch order is data randomness; the model seed only sets the init
        return PretrainConfig(steps=self.pretrain.steps, lr=self.pretrain.lr,
                              batch_size=self.pretrain.batch_size, seed=self.seeds.data)

    def generation_config(self, **overrides) -> GenerationConfig:
        return replace(self.generation, seed=self.seeds.attack, **overrides)


# Filled from the named seeds, never read from the file.
_DERIVED_KEYS = {"attack": {"seed"}, "generation": {"seed"}}

_SECTIONS = {"seeds": Seeds, "model": ModelDims, "pretrain": PretrainSection,
             "data": DataSection, "attack": AttackConfig, "generation": GenerationConfig,
             "ablations": AblationSection}


def from_dict(raw: dict) -> RunConfig:
    raw = copy.deepcopy(raw)
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            known = set(cls.__dataclass_fields__) - _DERIVED_KEYS.get(key, set())
            extra = set(value) - known
            if extra:
                raise ValidationError(f"unknown keys in [{key}]: {sorted(extra)}")
            try:
                kwargs[key] = cls(**value)
            except (TypeError, ValueError) as err:
                raise ValidationError(f"[{key}] {err}") from err
        elif key in ("checkpoint_every", "output_dir"):
            kwargs[key] = value
        else:
            raise ValidationError(f"unknown top-level key {key!r}")
    cfg = RunConfig(**kwargs)
    override = os.environ.get(SEED_OVERRIDE_ENV)
    if override is not None:
        try:
            cfg.seeds.attack = int(override)
        except ValueError:
            raise ValidationError(f"{SEED_OVERRIDE_ENV} must be an integer, got {override!r}")
    cfg.attack = replace(cfg.attack, seed=cfg.seeds.attack)
    cfg.generation = replace(cfg.generation, seed=cfg.seeds.attack)
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file {p} does not exist")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise ValidationError(f"{p}: invalid JSON ({err})") from err
    return from_dict(raw)


def validate(cfg: RunConfig) -> None:
    d = cfg.data
    if d.n_images < 1:
        raise ValidationError("data.n_images must be at least 1")
    if d.n_opt + d.n_test != d.n_prompts:
        raise ValidationError("data.n_opt + data.n_test must equal data.n_prompts")
    if not 1 <= d.response_cap:
        raise ValidationError("data.response_cap must be positive")
    if cfg.model.d_model % cfg.model.n_heads:
        raise ValidationError("model.d_model must be divisible by model.n_heads")
    if not 0 <= cfg.ablations.image_index < d.n_images:
        raise ValidationError("ablations.image_index out of range")
    from .model import SPECIAL_NAMES, EOS
    for name in cfg.ablations.tokens:
        if name.upper() not in SPECIAL_NAMES:
            raise ValidationError(f"unknown special token {name!r}")
        if SPECIAL_NAMES.index(name.upper()) == EOS:
            raise ValidationError("EOS cannot be a tail token")
    for ck in (cfg.pretrain.checkpoint, cfg.pretrain.checkpoint_b):
        if ck is not None and not ck.startswith("builtin:") and not Path(ck).is_file():
            raise ValidationError(f"checkpoint {ck} does not exist")
        if ck is not None and ck.startswith("builtin:") and ck not in BUILTIN_CHECKPOINTS:
            raise ValidationError(f"unknown builtin checkpoint {ck}")


def resolve_checkpoint(ref: str) -> Path:
    if ref.startswith("builtin:"):
        return Path(str(resources.files("hiddentail") / "data" / BUILTIN_CHECKPOINTS[ref]))
    return Path(ref)


def full_vs_desk(cfg: RunConfig) -> list[tuple[str, object, object]]:
    flat = cfg.to_dict()
    rows = []
    for key, full in FULL_SCALE_VALUES.items():
        section, name = key.split(".")
        rows.append((key, full, flat[section][name]))
    return rows
