"""Minimal MLP stack with hand-written gradients.

Everything learnable in the system (policy trunk, critics, targets) is an
``Mlp`` built from dense layers with tanh/relu/identity activations. Math is
float64 throughout; checkpoints store float32.

Shapes: ``forward``/``backward`` accept a single input vector ``(in,)`` or a
batch ``(B, in)`` and return the matching rank. Parameter gradients from a
batched backward are summed over the batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import substream

ACTIVATIONS = ("tanh", "relu", "identity")

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_BLOB = "params.bin"


class DimensionError(ValueError):
    """Input shape does not match the layer chain."""


class NonFiniteError(RuntimeError):
    """A gradient or loss stopped being finite; the step was not applied."""


@dataclass
class ParamTensor:
    name: str
    values: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.values)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass
class Layer:
    weight: ParamTensor  # (in, out)
    bias: ParamTensor  # (out,)
    activation: str

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


def _act_inplace(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z, out=z)
    if kind == "relu":
        return np.maximum(z, 0.0, out=z)
    return z


def _act_grad_from_post(y: np.ndarray, kind: str) -> np.ndarray:
    # activation derivatives recoverable from post-activation values alone
    if kind == "tanh":
        return 1.0 - y * y
    if kind == "relu":
        return (y > 0.0).astype(np.float64)
    return np.ones_like(y)


class Mlp:
    """Dense feedforward net; consecutive layer dims must chain."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValueError("Mlp needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise DimensionError(f"layer chain broken: {a.out_dim} -> {b.in_dim}")
        for layer in layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
        self.layers = layers

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @classmethod
    def build(
        cls,
        name: str,
        dims: list[int],
        master_seed: int,
        hidden_activation: str = "relu",
        output_activation: str = "identity",
    ) -> "Mlp":
        """Init weights U[-1/sqrt(fan_in), +1/sqrt(fan_in)], biases 0.

        Each tensor draws from its own named stream so resizing one net never
        shifts another net's init.
        """
        layers = []
        for k, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
            rng = substream(master_seed, f"init/{name}/layer{k}/weight")
            bound = 1.0 / np.sqrt(d_in)
            w = ParamTensor(f"{name}.layer{k}.weight", rng.uniform(-bound, bound, size=(d_in, d_out)))
            b = ParamTensor(f"{name}.layer{k}.bias", np.zeros(d_out))
            act = output_activation if k == len(dims) - 2 else hidden_activation
            layers.append(Layer(w, b, act))
        return cls(layers)

    def params(self) -> list[ParamTensor]:
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad[...] = 0.0

    def forward(self, x: np.ndarray, cache: list | None = None) -> np.ndarray:
        """Evaluate the net; pass ``cache=[]`` to capture per-layer activations
        for a later ``backward`` call on the same input."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[-1] != self.input_dim:
            raise DimensionError(f"expected input dim {self.input_dim}, got {h.shape[-1]}")
        if cache is not None:
            cache.append(h)
        for layer in self.layers:
            z = h @ layer.weight.values
            z += layer.bias.values
            h = _act_inplace(z, layer.activation)
            if cache is not None:
                cache.append(h)
        return h[0] if single else h

    def backward(self, x: np.ndarray, output_grad: np.ndarray, accumulate: bool = True, cache: list | None = None) -> np.ndarray:
        """Accumulate d<output, output_grad>/dparams; return the input gradient.

        Re-runs the forward pass for ``x`` unless ``cache`` from a previous
        ``forward(x, cache=[])`` is supplied.
        """
        x = np.asarray(x, dtype=np.float64)
        g = np.asarray(output_grad, dtype=np.float64)
        single = x.ndim == 1
        g = g[None, :] if g.ndim == 1 else g
        if g.shape[-1] != self.output_dim:
            raise DimensionError(f"expected output_grad dim {self.output_dim}, got {g.shape[-1]}")
        if cache is None:
            cache = []
            self.forward(x, cache=cache)

        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            dz = g * _act_grad_from_post(cache[k + 1], layer.activation)
            if accumulate:
                layer.weight.grad += cache[k].T @ dz
                layer.bias.grad += dz.sum(axis=0)
            g = dz @ layer.weight.values.T
        return g[0] if single else g

    def value_snapshot(self) -> list[np.ndarray]:
        return [p.values.copy() for p in self.params()]

    def load_values(self, values: list[np.ndarray]) -> None:
        for p, v in zip(self.params(), values):
            if p.values.shape != v.shape:
                raise DimensionError(f"{p.name}: shape {v.shape} != {p.values.shape}")
            p.values[...] = v


def forward(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    return mlp.forward(x)


def backward(mlp: Mlp, x: np.ndarray, output_grad: np.ndarray) -> np.ndarray:
    return mlp.backward(x, output_grad)


class Adam:
    """Adam with bias correction; grads are zeroed after a successful step."""

    def __init__(self, params: list[ParamTensor], lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ValueError("lr must be >= 0")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError("betas must be in [0, 1)")
        if eps <= 0:
            raise ValueError("eps must be > 0")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.first_moment = [np.zeros_like(p.values) for p in self.params]
        self.second_moment = [np.zeros_like(p.values) for p in self.params]
        self._scratch = [(np.empty_like(p.values), np.empty_like(p.values)) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient in tensor {p.name!r}; step rejected")
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for p, m, v, (s1, s2) in zip(self.params, self.first_moment, self.second_moment, self._scratch):
            g = p.grad
            m *= self.beta1
            np.multiply(g, 1.0 - self.beta1, out=s1)
            m += s1
            v *= self.beta2
            np.multiply(g, g, out=s1)
            s1 *= 1.0 - self.beta2
            v += s1
            np.divide(v, c2, out=s1)
            np.sqrt(s1, out=s1)
            s1 += self.eps
            np.divide(m, c1, out=s2)
            s2 /= s1
            s2 *= self.lr
            p.values -= s2
            g[...] = 0.0


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Manifest (JSON) + little-endian float32 blob, in manifest order."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": 1,
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors.items()],
        "meta": meta or {},
    }
    (path / CHECKPOINT_MANIFEST).write_text(json.dumps(manifest, indent=1))
    with open(path / CHECKPOINT_BLOB, "wb") as f:
        for t in tensors.values():
            f.write(np.asarray(t, dtype="<f4").tobytes(order="C"))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest_path = path / CHECKPOINT_MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    blob = (path / CHECKPOINT_BLOB).read_bytes()
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        raw = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
        offset += 4 * n
        tensors[entry["name"]] = raw.astype(np.float64).reshape(entry["shape"])
    if offset != len(blob):
        raise ValueError(f"checkpoint blob has {len(blob)} bytes, manifest expects {offset}")
    return tensors, manifest.get("meta", {})
