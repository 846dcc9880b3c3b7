"""Dense layers, GRU cells and the two reconstruction baselines."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

CHECKPOINT_FORMAT_VERSION = 1

ACTIVATIONS = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "linear": lambda x: x,
}


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Module:
    """Anything holding named parameter tensors."""

    def named_parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"load_state_dict: {name} expects {p.shape}, got {value.shape}")
            p.data = value.copy()

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class DenseLayer(Module):
    """Fully connected layer ``activation(x @ W + b)``."""

    def __init__(self, n_in: int, n_out: int, activation: str = "relu",
                 rng: np.random.Generator | None = None, zero_init: bool = False):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng or np.random.default_rng(0)
        self.n_in, self.n_out, self.activation = n_in, n_out, activation
        w = np.zeros((n_in, n_out)) if zero_init else glorot_uniform(rng, n_in, n_out)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return dense_forward(self, x)

    def named_parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


def dense_forward(layer: DenseLayer, x) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != layer.n_in:
        raise ShapeError(f"dense: input shape {x.shape} does not match weight {layer.weight.shape}")
    return ACTIVATIONS[layer.activation](x @ layer.weight + layer.bias)


class MLP(Module):
    """Stack of dense layers; hidden layers share one activation."""

    def __init__(self, n_in: int, hidden: list[int], n_out: int, hidden_activation: str = "relu",
                 out_activation: str = "linear", rng=None, zero_init_output: bool = False):
        rng = rng or np.random.default_rng(0)
        widths = [n_in, *hidden]
        self.layers = [DenseLayer(a, b, hidden_activation, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.layers.append(DenseLayer(widths[-1], n_out, out_activation, rng, zero_init=zero_init_output))

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.named_parameters().items():
                out[f"{i}.{k}"] = v
        return out


class GRUCell(Module):
    """GRU cell, ``h' = (1 - z) * h + z * tanh(x Wn + (r * h) Un + bn)``.

    Input-path weights for the update, reset and candidate gates are packed
    column-wise in ``weight_input`` as ``[z | r | n]``.
    """

    def __init__(self, n_in: int, n_hidden: int, rng=None):
        rng = rng or np.random.default_rng(0)
        h = n_hidden
        self.n_in, self.n_hidden = n_in, n_hidden
        self.weight_input = Tensor(
            np.concatenate([glorot_uniform(rng, n_in, h) for _ in range(3)], axis=1), requires_grad=True)
        self.weight_hidden_gates = Tensor(
            np.concatenate([glorot_uniform(rng, h, h) for _ in range(2)], axis=1), requires_grad=True)
        self.weight_hidden_candidate = Tensor(glorot_uniform(rng, h, h), requires_grad=True)
        self.bias = Tensor(np.zeros(3 * h), requires_grad=True)

    def named_parameters(self) -> dict[str, Tensor]:
        return {
            "weight_input": self.weight_input,
            "weight_hidden_gates": self.weight_hidden_gates,
            "weight_hidden_candidate": self.weight_hidden_candidate,
            "bias": self.bias,
        }

    def project_input(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"gru: input width {x.shape[-1]} does not match cell input {self.n_in}")
        return x @ self.weight_input + self.bias

    def step_projected(self, xp: Tensor, h: Tensor) -> Tensor:
        hsz = self.n_hidden
        gates = ad.sigmoid(xp[:, : 2 * hsz] + h @ self.weight_hidden_gates)
        z = gates[:, :hsz]
        r = gates[:, hsz:]
        cand = ad.tanh(xp[:, 2 * hsz:] + (r * h) @ self.weight_hidden_candidate)
        return h + z * (cand - h)


def gru_cell_step(cell: GRUCell, x_t, h_prev) -> Tensor:
    x_t, h_prev = ad.as_tensor(x_t), ad.as_tensor(h_prev)
    if x_t.ndim != 2 or h_prev.ndim != 2 or x_t.shape[0] != h_prev.shape[0] \
            or h_prev.shape[1] != cell.n_hidden:
        raise ShapeError(f"gru_cell_step: x_t {x_t.shape} / h_prev {h_prev.shape} "
                         f"do not fit cell ({cell.n_in} -> {cell.n_hidden})")
    return cell.step_projected(cell.project_input(x_t), h_prev)


class GRUModel(Module):
    """Stacked GRU over ``[batch, past_length, features]`` with a dense head
    reconstructing the flattened window from the last hidden state."""

    kind = "gru"

    def __init__(self, n_features: int, past_length: int, hidden: int = 256, n_layers: int = 2,
                 seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = dict(n_features=n_features, past_length=past_length, hidden=hidden,
                           n_layers=n_layers, seed=seed)
        self.n_features, self.past_length = n_features, past_length
        self.cells = [GRUCell(n_features if i == 0 else hidden, hidden, rng) for i in range(n_layers)]
        self.head = DenseLayer(hidden, n_features * past_length, "linear", rng, zero_init=True)

    @property
    def input_width(self) -> int:
        return self.n_features * self.past_length

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, cell in enumerate(self.cells):
            for k, v in cell.named_parameters().items():
                out[f"cells.{i}.{k}"] = v
        for k, v in self.head.named_parameters().items():
            out[f"head.{k}"] = v
        return out

    def __call__(self, x) -> Tensor:
        return gru_forward(self, x)


def gru_forward(model: GRUModel, w) -> Tensor:
    """Run the stack over a sequence batch (oldest step first).

    Accepts ``[batch, past_length, features]`` or the flattened
    ``[batch, past_length * features]`` window layout.
    """
    w = ad.as_tensor(w)
    T, F = model.past_length, model.n_features
    if w.ndim == 2 and w.shape[1] == T * F:
        w = w.reshape(w.shape[0], T, F)
    if w.ndim != 3 or w.shape[1:] != (T, F):
        raise ShapeError(f"gru_forward: expected [batch, {T}, {F}], got {w.shape}")
    batch = w.shape[0]
    first = model.cells[0]
    projected = first.project_input(w.reshape(batch * T, F)).reshape(batch, T, 3 * first.n_hidden)
    hs = [Tensor(np.zeros((batch, c.n_hidden))) for c in model.cells]
    for t in range(T):
        hs[0] = first.step_projected(projected[:, t, :], hs[0])
        for i in range(1, len(model.cells)):
            cell = model.cells[i]
            hs[i] = cell.step_projected(cell.project_input(hs[i - 1]), hs[i])
    return model.head(hs[-1])


def autoencoder_widths(n_layers: int, neurons: int) -> tuple[list[int], list[int]]:
    """Encoder/decoder hidden widths for a symmetric under-complete stack.

    ``n_layers=4, neurons=256`` gives encoder ``[256, 64]`` and decoder ``[256]``
    (the output layer is added separately).
    """
    if n_layers < 2 or n_layers % 2:
        raise ValueError("autoencoder needs an even number of layers >= 2")
    half = n_layers // 2
    enc = [max(2, neurons // 4 ** i) for i in range(half)]
    dec = enc[:-1][::-1]
    return enc, dec


class AutoencoderModel(Module):
    kind = "autoencoder"

    def __init__(self, input_width: int, encoder: list[int] = (256, 64), decoder: list[int] = (256,),
                 seed: int = 0):
        rng = np.random.default_rng(seed)
        encoder, decoder = list(encoder), list(decoder)
        self.config = dict(input_width=input_width, encoder=encoder, decoder=decoder, seed=seed)
        self.input_width = input_width
        widths = [input_width, *encoder, *decoder]
        self.layers = [DenseLayer(a, b, "relu", rng) for a, b in zip(widths[:-1], widths[1:])]
        self.layers.append(DenseLayer(widths[-1], input_width, "linear", rng, zero_init=True))

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.named_parameters().items():
                out[f"layers.{i}.{k}"] = v
        return out

    def __call__(self, x) -> Tensor:
        return autoencoder_forward(self, x)


def autoencoder_forward(model: AutoencoderModel, w) -> Tensor:
    x = ad.as_tensor(w)
    if x.ndim != 2 or x.shape[1] != model.input_width:
        raise ShapeError(f"autoencoder_forward: expected width {model.input_width}, got {x.shape}")
    for layer in model.layers:
        x = layer(x)
    return x


# -- checkpoints -------------------------------------------------------------
def _model_classes() -> dict[str, type]:
    from .flow import FlowModel

    return {"gru": GRUModel, "autoencoder": AutoencoderModel, "realnvp": FlowModel}


def build_model(kind: str, config: dict[str, Any]) -> Module:
    try:
        cls = _model_classes()[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}") from None
    return cls(**config)


def save_checkpoint(path: str | Path, model: Module, meta: dict[str, Any] | None = None,
                    extra_arrays: dict[str, np.ndarray] | None = None) -> Path:
    """Write parameters plus JSON metadata to an ``.npz`` archive.

    Metadata always carries ``format_version``, the model kind, its
    constructor config and per-parameter shapes.
    """
    path = Path(path)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": model.kind,
        "config": model.config,
        "shapes": {k: list(v.shape) for k, v in model.named_parameters().items()},
        "meta": meta or {},
    }
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    for k, v in (extra_arrays or {}).items():
        arrays[f"extra/{k}"] = np.asarray(v)
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: str | Path) -> tuple[Module, dict[str, Any], dict[str, np.ndarray]]:
    """Inverse of :func:`save_checkpoint`: ``(model, meta, extra_arrays)``."""
    with np.load(Path(path), allow_pickle=False) as npz:
        header = json.loads(npz["header"].tobytes().decode())
        version = header.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version!r}")
        model = build_model(header["kind"], header["config"])
        state = {k[len("param/"):]: npz[k] for k in npz.files if k.startswith("param/")}
        extra = {k[len("extra/"):]: npz[k] for k in npz.files if k.startswith("extra/")}
    model.load_state_dict(state)
    return model, header["meta"], extra
