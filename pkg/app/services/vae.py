"""
Desk-scale variational autoencoder for normalized trajectories.

Encoder: x -> ReLU(affine) -> (mu_Z, log sigma_Z) by two linear maps, and
z = mu_Z + sigma_Z * eps. Decoder: z -> ReLU(affine) -> sigmoid(affine) = mu_X,
and Dec(z, omega) = mu_X(z) + sigma_X * omega.

Training minimizes, averaged over a minibatch,

    J = |x - mu_X(Enc(x, eps))|^2 / (2 sigma_X^2) + KL(N(mu_Z, sigma_Z^2) || N(0, I))

which is the negative evidence lower bound without its constant
(k/2) log(2 pi sigma_X^2).
"""
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, Field
from torch import nn

from app.config import settings
from app.services.errors import DataError, ModelError, TrainingError
from app.services.synthetic import box_muller, make_rng
from app.utils.logger import log_epoch, training_logger


DTYPE = torch.float64
LAYERS = ("encoder_hidden", "latent_mean", "latent_log_scale", "decoder_hidden", "decoder_output")


class VaeConfig(BaseModel):
    """Network shape and training hyperparameters."""

    k: int = Field(default=2 * settings.VAE_TRAJECTORY_STEPS, ge=1)
    d: int = Field(default=settings.VAE_LATENT_DIM, ge=1)
    h: int = Field(default=settings.VAE_HIDDEN, ge=1)
    sigma_x: float = Field(default=settings.VAE_SIGMA_X, gt=0)
    seed: int = 0
    epochs: int = Field(default=settings.VAE_EPOCHS, ge=1)
    batch_size: int = Field(default=settings.VAE_BATCH_SIZE, ge=1)
    learning_rate: float = Field(default=settings.VAE_LEARNING_RATE, gt=0)
    rho: float = Field(default=settings.VAE_RHO, gt=0, lt=1)
    epsilon: float = Field(default=settings.VAE_EPSILON, gt=0)


class VaeParams(nn.Module):
    """Encoder and decoder weights."""

    def __init__(self, config: VaeConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.config = config
        k, d, h = config.k, config.d, config.h
        self.encoder_hidden = nn.Linear(k, h)
        self.latent_mean = nn.Linear(h, d, bias=False)
        self.latent_log_scale = nn.Linear(h, d, bias=False)
        self.decoder_hidden = nn.Linear(d, h)
        self.decoder_output = nn.Linear(h, k)
        self.to(DTYPE)
        self.reset_parameters(rng if rng is not None else make_rng(config.seed))

    @torch.no_grad()
    def reset_parameters(self, rng: np.random.Generator):
        """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases."""
        for name in LAYERS:
            layer = getattr(self, name)
            fan_out, fan_in = layer.weight.shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            layer.weight.copy_(torch.as_tensor(rng.uniform(-bound, bound, size=(fan_out, fan_in)), dtype=DTYPE))
            if layer.bias is not None:
                layer.bias.zero_()

    def encoder_moments(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """(mu_Z(x), sigma_Z(x)); sigma is exp of a linear map, hence positive."""
        hidden = torch.relu(self.encoder_hidden(x))
        return self.latent_mean(hidden), torch.exp(self.latent_log_scale(hidden))

    def decoder_mean(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decoder_output(torch.relu(self.decoder_hidden(z))))

    def forward(self, x: torch.Tensor, epsilon: torch.Tensor):
        mu, sigma = self.encoder_moments(x)
        z = mu + sigma * epsilon
        return self.decoder_mean(z), mu, sigma


@dataclass(frozen=True)
class EpochStats:
    """Mean objective and its two terms over one epoch."""

    epoch: int
    loss: float
    reconstruction: float
    kl: float


@dataclass(eq=False)
class TrainingResult:
    params: VaeParams
    history: List[EpochStats]

    @property
    def losses(self) -> List[float]:
        return [s.loss for s in self.history]


def _tensor(values, width: int, name: str) -> torch.Tensor:
    array = np.asarray(values, dtype=float)
    if array.shape[-1] != width:
        raise DataError(f"{name} has dimension {array.shape[-1]}, expected {width}")
    return torch.as_tensor(array, dtype=DTYPE)


def _unit_input(x, k: int) -> torch.Tensor:
    x = _tensor(x, k, "x")
    if torch.isnan(x).any() or (x < 0).any() or (x > 1).any():
        raise DataError("Inputs must lie in [0, 1]")
    return x


def encode(params: VaeParams, x: np.ndarray, epsilon: np.ndarray) -> np.ndarray:
    """z = mu_Z(x) + sigma_Z(x) * epsilon."""
    config = params.config
    x = _unit_input(x, config.k)
    eps = _tensor(epsilon, config.d, "epsilon")
    with torch.no_grad():
        mu, sigma = params.encoder_moments(x)
        return (mu + sigma * eps).numpy()


def decode(params: VaeParams, z: np.ndarray, omega: Optional[np.ndarray] = None) -> np.ndarray:
    """Dec(z, omega) = mu_X(z) + sigma_X * omega; omega=None means zero noise."""
    config = params.config
    z = _tensor(z, config.d, "z")
    with torch.no_grad():
        out = params.decoder_mean(z).numpy()
    if omega is not None:
        omega = np.asarray(omega, dtype=float)
        if omega.shape != out.shape:
            raise DataError(f"omega has shape {omega.shape}, expected {out.shape}")
        out = out + config.sigma_x * omega
    return out


def _kl(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.sum(mu ** 2 + sigma ** 2 - 1.0 - 2.0 * torch.log(sigma), dim=-1)


def kl_diag_gaussian(mu: np.ndarray, sigma: np.ndarray) -> float:
    """
    KL(N(mu, diag sigma^2) || N(0, I)) = 1/2 sum(mu^2 + sigma^2 - 1 - log sigma^2).

    Raises:
        DataError: Nonpositive sigma or mismatched lengths
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if mu.shape != sigma.shape:
        raise DataError(f"mu and sigma shapes differ: {mu.shape} vs {sigma.shape}")
    if (sigma <= 0).any():
        raise DataError("sigma must be strictly positive")
    return float(0.5 * np.sum(mu ** 2 + sigma ** 2 - 1.0 - np.log(sigma ** 2)))


def _objective(params: VaeParams, sigma_x: float, x: torch.Tensor, eps: torch.Tensor):
    """Batch means of (J, reconstruction term, KL term)."""
    mean_x, mu, sigma = params(x, eps)
    reconstruction = torch.sum((x - mean_x) ** 2, dim=-1) / (2.0 * sigma_x ** 2)
    kl = _kl(mu, sigma)
    return (reconstruction + kl).mean(), reconstruction.mean(), kl.mean()


def loss(params: VaeParams, config: VaeConfig, x: np.ndarray, epsilon: np.ndarray) -> float:
    """
    Training objective J for one example (or the mean over a batch).

    Args:
        params: Network weights
        config: Supplies sigma_X
        x: Point(s) in [0, 1]^k
        epsilon: Encoder noise, same leading shape as x
    """
    x = _unit_input(x, config.k)
    eps = _tensor(epsilon, config.d, "epsilon")
    with torch.no_grad():
        value, _, _ = _objective(params, config.sigma_x, x, eps)
    return float(value)


def loss_gradient(params: VaeParams, config: VaeConfig, x: np.ndarray, epsilon: np.ndarray) -> Dict[str, np.ndarray]:
    """Gradient of `loss` with respect to every parameter, by reverse-mode autograd."""
    x = _unit_input(x, config.k)
    eps = _tensor(epsilon, config.d, "epsilon")
    params.zero_grad(set_to_none=True)
    value, _, _ = _objective(params, config.sigma_x, x, eps)
    value.backward()
    grads = {
        name: (p.grad.detach().numpy().copy() if p.grad is not None else np.zeros(tuple(p.shape)))
        for name, p in params.named_parameters()
    }
    params.zero_grad(set_to_none=True)
    return grads


def train(dataset: np.ndarray, config: VaeConfig) -> TrainingResult:
    """
    Minibatch RMSProp on the objective J.

    One seeded numpy generator drives, in order, the weight initialization,
    the per-epoch shuffle and the per-example encoder noise, so the loss
    history is a function of (dataset, config).

    Raises:
        DataError: Empty dataset, wrong width or values outside [0, 1]
        TrainingError: Non-finite objective
    """
    data = np.asarray(dataset, dtype=float)
    if data.ndim != 2 or data.shape[0] == 0:
        raise DataError("Training needs a nonempty (n, k) dataset")
    x_all = _unit_input(data, config.k)

    torch.use_deterministic_algorithms(True)
    rng = make_rng(config.seed)
    params = VaeParams(config, rng)
    optimizer = torch.optim.RMSprop(
        params.parameters(), lr=config.learning_rate, alpha=config.rho, eps=config.epsilon,
    )

    n = data.shape[0]
    history = []
    training_logger.info(f"Training VAE k={config.k} d={config.d} h={config.h} on {n} samples for {config.epochs} epochs")
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(n)
        totals = np.zeros(3)
        for batch, first in enumerate(range(0, n, config.batch_size), start=1):
            index = order[first:first + config.batch_size]
            eps = torch.as_tensor(box_muller(rng, (index.size, config.d)), dtype=DTYPE)
            value, reconstruction, kl = _objective(params, config.sigma_x, x_all[index], eps)
            if not torch.isfinite(value):
                raise TrainingError("Non-finite training objective", epoch=epoch, batch=batch)
            optimizer.zero_grad()
            value.backward()
            optimizer.step()
            totals += index.size * np.array([value.item(), reconstruction.item(), kl.item()])

        mean_loss, mean_rec, mean_kl = totals / n
        history.append(EpochStats(epoch=epoch, loss=mean_loss, reconstruction=mean_rec, kl=mean_kl))
        log_epoch(epoch, mean_loss, mean_kl, (time.perf_counter() - started) * 1000)

    training_logger.info(f"Training finished: loss {history[0].loss:.4f} -> {history[-1].loss:.4f}")
    return TrainingResult(params=params, history=history)


def generate(params: VaeParams, z: np.ndarray, omega: Optional[np.ndarray] = None) -> np.ndarray:
    """Decode latent codes; zero-noise unless omega is given."""
    return decode(params, z, omega)


def reconstruct(params: VaeParams, x: np.ndarray) -> np.ndarray:
    """decode(encode(x, 0), 0)."""
    x = np.asarray(x, dtype=float)
    zeros = np.zeros(x.shape[:-1] + (params.config.d,))
    return decode(params, encode(params, x, zeros))


@dataclass(frozen=True)
class ReconstructionMetrics:
    """Errors per coordinate per time step, in unit coordinates."""

    mean_abs_dev: float
    mean_sq_err: float
    mean_max_err: float


def reconstruction_metrics(original: np.ndarray, reconstructed: np.ndarray) -> ReconstructionMetrics:
    original = np.atleast_2d(np.asarray(original, dtype=float))
    reconstructed = np.atleast_2d(np.asarray(reconstructed, dtype=float))
    if original.shape != reconstructed.shape:
        raise DataError(f"Shape mismatch: {original.shape} vs {reconstructed.shape}")
    err = np.abs(original - reconstructed)
    return ReconstructionMetrics(
        mean_abs_dev=float(err.mean()),
        mean_sq_err=float((err ** 2).mean()),
        mean_max_err=float(err.max(axis=1).mean()),
    )


def boundary_fraction(trajectories: np.ndarray, margin: float = 0.02) -> float:
    """Share of generated points with a coordinate within `margin` of the unit square's edge."""
    points = np.asarray(trajectories, dtype=float).reshape(-1, 2)
    near = (points < margin) | (points > 1.0 - margin)
    return float(near.any(axis=1).mean())


class VaeDocument(BaseModel):
    """JSON form of trained parameters with their configuration."""

    config: VaeConfig
    weights: Dict[str, List]
    history: List[Dict[str, float]] = []


def params_to_json(params: VaeParams, history: Optional[List[EpochStats]] = None) -> str:
    doc = VaeDocument(
        config=params.config,
        weights={name: p.detach().numpy().tolist() for name, p in params.named_parameters()},
        history=[s.__dict__ for s in (history or [])],
    )
    return doc.model_dump_json()


def params_from_json(text: str) -> VaeParams:
    """
    Rebuild parameters from a VaeDocument.

    Raises:
        ModelError: Weights missing or shaped inconsistently with the config
    """
    doc = VaeDocument.model_validate_json(text)
    params = VaeParams(doc.config)
    state = params.state_dict()
    if set(doc.weights) != set(state):
        raise ModelError(f"Weight names {sorted(doc.weights)} do not match {sorted(state)}")
    loaded = {}
    for name, tensor in state.items():
        value = torch.as_tensor(np.array(doc.weights[name], dtype=float), dtype=DTYPE)
        if value.shape != tensor.shape:
            raise ModelError(f"Weight {name} has shape {tuple(value.shape)}, expected {tuple(tensor.shape)}")
        loaded[name] = value
    params.load_state_dict(loaded)
    return params
