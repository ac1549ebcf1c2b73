"""Pipeline configuration: shipped defaults, declarative files and flag overrides.

Precedence, lowest to highest: built-in defaults, ``MISP_SEED`` (seed only),
the config file, command-line flags.
"""

import os
from dataclasses import asdict, dataclass, field, fields

import yaml

from mispdpo.errors import ConfigError
from mispdpo.negselect import SelectionConfig
from mispdpo.pl_dpo import DpoConfig

SEED_ENV = "MISP_SEED"

# Hyperparameters reported for the method: SAE latent size and sparsity
# weight, three negatives per instance, DPO beta and the text/image balance.
REFERENCE_HYPERPARAMETERS = {
    "hidden_dim": 128,
    "sparsity_weight": 1.0,
    "k": 3,
    "beta": 0.5,
    "lam": 1.0,
}


@dataclass
class SaeSection:
    hidden_dim: int = 128
    sparsity_weight: float = 1.0
    target_activation: float = 0.05
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    optimizer: str = "adam"


@dataclass
class ToySection:
    sampler: str = "diverse"
    steps: int = 500
    toy_learning_rate: float = 0.05
    vocab_size: int = 16
    num_features: int = 8
    response_length: int = 4
    n_train: int = 16
    n_heldout: int = 64
    variants_per_factor: int = 2
    context_noise: float = 0.05
    init_scale: float = 0.01


@dataclass
class PipelineConfig:
    sae: SaeSection = field(default_factory=SaeSection)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    dpo: DpoConfig = field(default_factory=DpoConfig)
    toy: ToySection = field(default_factory=ToySection)
    paths: dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self):
        return asdict(self)

    def sae_config(self, input_dim):
        from mispdpo.sae import SaeConfig

        return SaeConfig(input_dim=input_dim, seed=self.seed, **asdict(self.sae))

    def toy_config(self):
        from mispdpo.toy_lab import ToyTaskConfig

        t = asdict(self.toy)
        lr = t.pop("toy_learning_rate")
        return ToyTaskConfig(
            dpo=self.dpo,
            k=self.selection.k,
            diversity_weight=self.selection.diversity_weight,
            learning_rate=lr,
            seed=self.seed,
            **t,
        )


SECTIONS = {"sae": SaeSection, "selection": SelectionConfig, "dpo": DpoConfig, "toy": ToySection}


def field_names():
    """Flat map of every tunable field name to its section."""
    out = {}
    for sec, cls in SECTIONS.items():
        for f in fields(cls):
            out[f.name] = sec
    return out


def default_config() -> PipelineConfig:
    cfg = PipelineConfig()
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            cfg.seed = int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    return cfg


def apply_overrides(cfg: PipelineConfig, flat: dict) -> PipelineConfig:
    """Apply ``{field_name: value}`` overrides; ``None`` values are skipped."""
    names = field_names()
    sections = {k: asdict(getattr(cfg, k)) for k in SECTIONS}
    for key, value in flat.items():
        if value is None:
            continue
        key = key.replace("-", "_")
        if key == "seed":
            cfg.seed = int(value)
        elif key in names:
            sections[names[key]][key] = value
        else:
            raise ConfigError(f"unknown config field {key!r}")
    try:
        for sec, cls in SECTIONS.items():
            setattr(cfg, sec, cls(**sections[sec]))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must fit in 64 unsigned bits")
    return cfg


def load_config(path=None, overrides=None) -> PipelineConfig:
    """Defaults, then the YAML/JSON file at ``path``, then ``overrides``."""
    cfg = default_config()
    if path is not None:
        try:
            with open(path) as fh:
                doc = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a mapping")
        flat = {}
        for key, value in doc.items():
            if key in SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key!r} must be a mapping")
                flat.update(value)
            elif key == "paths":
                cfg.paths = dict(value)
            else:
                flat[key] = value
        apply_overrides(cfg, flat)
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg
