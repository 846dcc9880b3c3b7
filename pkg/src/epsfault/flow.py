"""Real NVP density model: affine coupling layers over a standard normal base."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import MLP, Module


class StandardNormal:
    """Zero-mean, identity-covariance Gaussian in ``dim`` dimensions."""

    def __init__(self, dim: int):
        self.dim = dim

    def log_density(self, z) -> Tensor:
        z = ad.as_tensor(z)
        const = -0.5 * self.dim * math.log(2.0 * math.pi)
        return const - 0.5 * ad.sum_(ad.square(z), axis=1)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((count, self.dim))


def alternating_mask(dim: int, parity: int) -> np.ndarray:
    """1 on flattened indices whose parity equals ``parity`` (pass-through)."""
    return (np.arange(dim) % 2 == parity).astype(np.float64)


class CouplingLayer(Module):
    def __init__(self, dim: int, mask: np.ndarray, hidden_layers: int = 4, hidden_units: int = 128,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (dim,):
            raise ShapeError(f"coupling: mask shape {mask.shape} does not match width {dim}")
        self.dim = dim
        self.mask = mask
        self.inv_mask = 1.0 - mask
        hidden = [hidden_units] * hidden_layers
        self.s_net = MLP(dim, hidden, dim, out_activation="tanh", rng=rng, zero_init_output=True)
        self.t_net = MLP(dim, hidden, dim, out_activation="linear", rng=rng, zero_init_output=True)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"s.{k}": v for k, v in self.s_net.named_parameters().items()}
        out.update({f"t.{k}": v for k, v in self.t_net.named_parameters().items()})
        return out

    def _check(self, x: Tensor, op: str) -> None:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"{op}: expected width {self.dim}, got shape {x.shape}")

    def scale_shift(self, x_masked: Tensor) -> tuple[Tensor, Tensor]:
        s = self.s_net(x_masked) * self.inv_mask
        t = self.t_net(x_masked) * self.inv_mask
        return s, t


def coupling_forward(layer: CouplingLayer, x) -> tuple[Tensor, Tensor]:
    """Data-to-latent direction; returns ``(y, log|det dy/dx|)``."""
    x = ad.as_tensor(x)
    layer._check(x, "coupling_forward")
    x_masked = x * layer.mask
    s, t = layer.scale_shift(x_masked)
    y = x_masked + layer.inv_mask * (x * ad.exp(s) + t)
    return y, ad.sum_(s, axis=1)


def coupling_inverse(layer: CouplingLayer, y) -> Tensor:
    y = ad.as_tensor(y)
    layer._check(y, "coupling_inverse")
    y_masked = y * layer.mask
    s, t = layer.scale_shift(y_masked)
    return y_masked + layer.inv_mask * ((y - t) * ad.exp(-s))


class FlowModel(Module):
    """Stack of coupling layers with alternating even/odd masks."""

    kind = "realnvp"

    def __init__(self, input_width: int, coupling_layers: int = 4, hidden_layers: int = 4,
                 hidden_units: int = 128, seed: int = 0):
        if coupling_layers < 1:
            raise ValueError("coupling_layers must be >= 1")
        rng = np.random.default_rng(seed)
        self.config = dict(input_width=input_width, coupling_layers=coupling_layers,
                           hidden_layers=hidden_layers, hidden_units=hidden_units, seed=seed)
        self.input_width = input_width
        self.base = StandardNormal(input_width)
        self.layers = [
            CouplingLayer(input_width, alternating_mask(input_width, k % 2), hidden_layers, hidden_units, rng)
            for k in range(coupling_layers)
        ]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.named_parameters().items():
                out[f"layers.{i}.{k}"] = v
        return out

    def forward(self, x) -> tuple[Tensor, Tensor]:
        """Map data to latent space; returns ``(z, summed log-det)``."""
        z = ad.as_tensor(x)
        if z.ndim != 2 or z.shape[1] != self.input_width:
            raise ShapeError(f"flow: expected width {self.input_width}, got shape {z.shape}")
        total = None
        for layer in self.layers:
            z, ld = coupling_forward(layer, z)
            total = ld if total is None else total + ld
        return z, total

    def inverse(self, z) -> Tensor:
        x = ad.as_tensor(z)
        if x.ndim != 2 or x.shape[1] != self.input_width:
            raise ShapeError(f"flow: expected width {self.input_width}, got shape {x.shape}")
        for layer in reversed(self.layers):
            x = coupling_inverse(layer, x)
        return x

    def log_prob(self, x) -> Tensor:
        return log_prob(self, x)

    def sample(self, count: int, rng: np.random.Generator) -> Tensor:
        return sample(self, count, rng)


def log_prob(model: FlowModel, x) -> Tensor:
    """Exact per-row log-likelihood under the change of variables."""
    z, log_det = model.forward(x)
    return model.base.log_density(z) + log_det


def sample(model: FlowModel, count: int, rng: np.random.Generator) -> Tensor:
    """Draw ``count`` base-normal vectors and push them through the inverse.

    The result stays on the tape so losses on generated arrays reach the
    coupling-layer parameters.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    return model.inverse(Tensor(model.base.sample(count, rng)))
