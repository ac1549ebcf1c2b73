"""Sparse autoencoder over difference vectors.

Single hidden layer, sigmoid hidden units, linear output. The objective is the
batch-mean squared reconstruction error plus ``gamma * sum_j KL(rho || rho_hat_j)``
where ``rho_hat_j`` is the mean activation of hidden unit ``j`` over the batch,
clamped to ``[1e-6, 1 - 1e-6]`` before the KL term.
"""

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from mispdpo.errors import (
    ConfigError,
    DataError,
    DimensionError,
    DivergenceError,
    DomainError,
    InsufficientDataError,
    NumericError,
)

CHECKPOINT_FORMAT = "misp-sae-v1"
RHO_HAT_CLAMP = 1e-6
PARAM_NAMES = ("encoder_weights", "encoder_bias", "decoder_weights", "decoder_bias")


@dataclass(frozen=True)
class SaeConfig:
    input_dim: int
    hidden_dim: int = 128
    sparsity_weight: float = 1.0
    target_activation: float = 0.05
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0
    optimizer: str = "adam"  # or "sgd"

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError("input_dim must be positive")
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be at least 1")
        if self.sparsity_weight < 0:
            raise ConfigError("sparsity_weight must be nonnegative")
        if not 0.0 < self.target_activation < 1.0:
            raise ConfigError("target_activation must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 unsigned bits")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class SaeModel:
    encoder_weights: np.ndarray  # (H, D)
    encoder_bias: np.ndarray  # (H,)
    decoder_weights: np.ndarray  # (D, H)
    decoder_bias: np.ndarray  # (D,)
    config: SaeConfig

    def __post_init__(self):
        h, d = self.config.hidden_dim, self.config.input_dim
        shapes = {
            "encoder_weights": (h, d),
            "encoder_bias": (h,),
            "decoder_weights": (d, h),
            "decoder_bias": (d,),
        }
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise DimensionError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains non-finite values")
            setattr(self, name, arr)

    def params(self):
        return [getattr(self, n) for n in PARAM_NAMES]

    def with_params(self, params):
        return SaeModel(*[np.array(p, dtype=np.float64) for p in params], config=self.config)

    def copy(self):
        return self.with_params(self.params())


@dataclass
class SaeBatchStats:
    mean_activation: np.ndarray
    reconstruction_loss: float
    sparsity_loss: float

    @property
    def total(self):
        return self.reconstruction_loss + self.sparsity_loss


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def init_model(config: SaeConfig) -> SaeModel:
    """Uniform +-1/sqrt(fan_in) weights and zero biases from the seeded generator."""
    rng = np.random.default_rng(config.seed)
    h, d = config.hidden_dim, config.input_dim
    enc = rng.uniform(-1.0, 1.0, size=(h, d)) / math.sqrt(d)
    dec = rng.uniform(-1.0, 1.0, size=(d, h)) / math.sqrt(h)
    return SaeModel(enc, np.zeros(h), dec, np.zeros(d), config)


def _batch(model, batch):
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if x.size == 0 or x.shape[0] == 0:
        raise InsufficientDataError("empty batch")
    if x.shape[1] != model.config.input_dim:
        raise DimensionError(f"input dimension {x.shape[1]} != model input_dim {model.config.input_dim}")
    return x


def encode(model: SaeModel, d) -> np.ndarray:
    """Hidden code ``sigmoid(W_e d + b_e)``; accepts one vector or a batch of rows."""
    x = np.asarray(d, dtype=np.float64)
    if x.shape[-1] != model.config.input_dim:
        raise DimensionError(f"input dimension {x.shape[-1]} != model input_dim {model.config.input_dim}")
    return sigmoid(x @ model.encoder_weights.T + model.encoder_bias)


def decode(model: SaeModel, code) -> np.ndarray:
    c = np.asarray(code, dtype=np.float64)
    if c.shape[-1] != model.config.hidden_dim:
        raise DimensionError(f"code length {c.shape[-1]} != hidden_dim {model.config.hidden_dim}")
    return c @ model.decoder_weights.T + model.decoder_bias


def kl_sparsity(rho, rho_hat):
    """``KL(Bernoulli(rho) || Bernoulli(rho_hat))``, elementwise over ``rho_hat``."""
    rh = np.asarray(rho_hat, dtype=np.float64)
    if not 0.0 < rho < 1.0 or np.any(rh <= 0.0) or np.any(rh >= 1.0):
        raise DomainError("kl_sparsity arguments must lie strictly inside (0, 1)")
    out = rho * np.log(rho / rh) + (1.0 - rho) * np.log((1.0 - rho) / (1.0 - rh))
    # Rounding can leave -1e-17 at rho_hat == rho.
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def batch_stats(model: SaeModel, batch) -> SaeBatchStats:
    x = _batch(model, batch)
    cfg = model.config
    code = encode(model, x)
    err = decode(model, code) - x
    recon = float(np.mean(np.sum(err * err, axis=1)))
    rho_hat = np.clip(code.mean(axis=0), RHO_HAT_CLAMP, 1.0 - RHO_HAT_CLAMP)
    sparsity = cfg.sparsity_weight * float(np.sum(kl_sparsity(cfg.target_activation, rho_hat)))
    return SaeBatchStats(rho_hat, recon, sparsity)


def sae_loss(model: SaeModel, batch):
    """Return ``(total, reconstruction, sparsity)`` on a batch."""
    st = batch_stats(model, batch)
    return st.total, st.reconstruction_loss, st.sparsity_loss


def sae_grad(model: SaeModel, batch):
    """Analytic gradient of ``sae_loss(...)[0]`` for each parameter block, in PARAM_NAMES order."""
    x = _batch(model, batch)
    cfg = model.config
    n = x.shape[0]
    code = encode(model, x)
    err = decode(model, code) - x

    g_out = (2.0 / n) * err
    g_dec_w = g_out.T @ code
    g_dec_b = g_out.sum(axis=0)
    g_code = g_out @ model.decoder_weights

    raw_mean = code.mean(axis=0)
    rho_hat = np.clip(raw_mean, RHO_HAT_CLAMP, 1.0 - RHO_HAT_CLAMP)
    rho = cfg.target_activation
    g_rho_hat = cfg.sparsity_weight * (-rho / rho_hat + (1.0 - rho) / (1.0 - rho_hat))
    inside = (raw_mean > RHO_HAT_CLAMP) & (raw_mean < 1.0 - RHO_HAT_CLAMP)
    g_code = g_code + np.where(inside, g_rho_hat, 0.0)[None, :] / n

    g_pre = g_code * code * (1.0 - code)
    g_enc_w = g_pre.T @ x
    g_enc_b = g_pre.sum(axis=0)
    return [g_enc_w, g_enc_b, g_dec_w, g_dec_b]


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params, lr):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g


@dataclass
class TrainResult:
    model: SaeModel
    history: list  # full-dataset total loss after each epoch
    initial_loss: float
    batch_history: list = field(default_factory=list)  # mean mini-batch loss per epoch

    def history_dict(self):
        return {
            "initial_loss": self.initial_loss,
            "epoch_loss": list(self.history),
            "epoch_batch_mean_loss": list(self.batch_history),
        }


def train(config: SaeConfig, dataset, log=None) -> TrainResult:
    """Train an SAE with seeded init, seeded shuffling and fixed batch order.

    The reported per-epoch loss is ``sae_loss`` evaluated on the whole dataset
    after the epoch; the sparsity statistic used for updates is per mini-batch.

    Raises:
        InsufficientDataError: empty dataset.
        NumericError: non-finite values in the dataset.
        DivergenceError: a non-finite loss; ``index`` is the 1-based epoch.
    """
    x = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    if x.shape[0] == 0 or x.size == 0:
        raise InsufficientDataError("cannot train on an empty dataset")
    if x.shape[1] != config.input_dim:
        raise DimensionError(f"dataset dimension {x.shape[1]} != config input_dim {config.input_dim}")
    if not np.isfinite(x).all():
        raise NumericError(f"dataset has {int(np.sum(~np.isfinite(x)))} non-finite values")

    model = init_model(config)
    params = model.params()
    opt = Adam(params, config.learning_rate) if config.optimizer == "adam" else SGD(params, config.learning_rate)
    # Separate stream from init so shuffling is independent of hidden_dim.
    shuffle_rng = np.random.default_rng([config.seed, 1])

    initial = sae_loss(model, x)[0]
    history, batch_history = [], []
    n = x.shape[0]
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            xb = x[order[start : start + config.batch_size]]
            batch_losses.append(sae_loss(model, xb)[0])
            opt.step(params, sae_grad(model, xb))
        total = sae_loss(model, x)[0]
        if not (math.isfinite(total) and all(math.isfinite(b) for b in batch_losses)):
            raise DivergenceError(f"SAE training diverged at epoch {epoch}", index=epoch)
        history.append(total)
        batch_history.append(float(np.mean(batch_losses)))
        if log is not None:
            log(epoch, total)
    return TrainResult(model, history, initial, batch_history)


def make_sparse_dataset(n_rows=2000, dim=256, n_atoms=32, active=2, noise=0.01, seed=0):
    """Rows built from a few active atoms of a random unit-norm dictionary, plus noise."""
    rng = np.random.default_rng(seed)
    atoms = rng.normal(size=(n_atoms, dim))
    atoms /= np.linalg.norm(atoms, axis=1, keepdims=True)
    coef = np.zeros((n_rows, n_atoms))
    for r in range(n_rows):
        idx = rng.choice(n_atoms, size=active, replace=False)
        coef[r, idx] = rng.uniform(0.5, 1.5, size=active)
    return coef @ atoms + noise * rng.normal(size=(n_rows, dim))


def _config_to_json(cfg: SaeConfig):
    return asdict(cfg)


def checkpoint_dict(model: SaeModel):
    return {
        "format": CHECKPOINT_FORMAT,
        "config": _config_to_json(model.config),
        "encoder_weights": model.encoder_weights.tolist(),
        "encoder_bias": model.encoder_bias.tolist(),
        "decoder_weights": model.decoder_weights.tolist(),
        "decoder_bias": model.decoder_bias.tolist(),
    }


def save_checkpoint(model: SaeModel, path):
    # json writes the shortest repr that round-trips, i.e. full double precision.
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(model), fh)


def model_from_dict(doc) -> SaeModel:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"not a {CHECKPOINT_FORMAT} checkpoint: format={doc.get('format')!r}")
    try:
        cfg = SaeConfig(**doc["config"])
        return SaeModel(
            np.array(doc["encoder_weights"], dtype=np.float64),
            np.array(doc["encoder_bias"], dtype=np.float64),
            np.array(doc["decoder_weights"], dtype=np.float64),
            np.array(doc["decoder_bias"], dtype=np.float64),
            cfg,
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed checkpoint: {exc}") from exc


def load_checkpoint(path) -> SaeModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def with_config(cfg: SaeConfig, **overrides) -> SaeConfig:
    return replace(cfg, **overrides)
