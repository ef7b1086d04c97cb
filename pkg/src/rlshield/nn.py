"""Network building blocks for the defense policies and critics.

Dense stacks with tanh hidden layers, a GRU cell for the recurrent belief
state, Adam-style optimisation and a deterministic checkpoint format.
Everything is float64 numpy; small enough that gradients can be verified
against central finite differences in the test suite.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"RLSHIELD-CKPT/1\n"


class DimensionError(ValueError):
    """Operand shapes do not compose."""


class NumericError(RuntimeError):
    """A non-finite value appeared where the math requires finite numbers."""


class CheckpointError(RuntimeError):
    """Checkpoint file is unreadable or does not match the expected shapes."""


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class DenseLayer:
    weight: Tensor
    bias: Tensor
    activation: str  # "tanh" | "linear"

    @classmethod
    def create(cls, rng: np.random.Generator, n_in: int, n_out: int, activation: str, name: str) -> "DenseLayer":
        w = Tensor(xavier_uniform(rng, n_in, n_out), requires_grad=True, name=f"{name}.weight")
        b = Tensor(np.zeros(n_out), requires_grad=True, name=f"{name}.bias")
        return cls(w, b, activation)

    def forward(self, x) -> Tensor:
        out = ad.add(ad.matmul(x, self.weight), self.bias)
        if self.activation == "tanh":
            return ad.tanh(out)
        if self.activation == "linear":
            return out
        raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class DenseNetParams:
    """A feed-forward stack. The last layer is linear; heads apply softmax outside."""

    layers: list[DenseLayer]

    @classmethod
    def create(cls, rng: np.random.Generator, sizes: list[int], name: str) -> "DenseNetParams":
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = "linear" if i == len(sizes) - 2 else "tanh"
            layers.append(DenseLayer.create(rng, n_in, n_out, act, f"{name}.l{i}"))
        return cls(layers)

    def forward(self, x) -> Tensor:
        h = ad.as_tensor(x)
        if h.data.shape[-1] != self.layers[0].weight.data.shape[0]:
            raise DimensionError(
                f"input width {h.data.shape[-1]} does not match first layer "
                f"({self.layers[0].weight.data.shape[0]})"
            )
        for layer in self.layers:
            h = layer.forward(h)
        return h

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out


@dataclass
class GruParams:
    """Gate parameters of a single GRU cell (update z, reset r, candidate h)."""

    wz: Tensor
    uz: Tensor
    bz: Tensor
    wr: Tensor
    ur: Tensor
    br: Tensor
    wh: Tensor
    uh: Tensor
    bh: Tensor
    hidden: int
    inputs: int

    @classmethod
    def create(cls, rng: np.random.Generator, inputs: int, hidden: int, name: str) -> "GruParams":
        def w(tag: str) -> Tensor:
            return Tensor(xavier_uniform(rng, inputs, hidden), requires_grad=True, name=f"{name}.{tag}")

        def u(tag: str) -> Tensor:
            return Tensor(xavier_uniform(rng, hidden, hidden), requires_grad=True, name=f"{name}.{tag}")

        def b(tag: str) -> Tensor:
            return Tensor(np.zeros(hidden), requires_grad=True, name=f"{name}.{tag}")

        return cls(w("wz"), u("uz"), b("bz"), w("wr"), u("ur"), b("br"), w("wh"), u("uh"), b("bh"), hidden, inputs)

    def parameters(self) -> list[Tensor]:
        return [self.wz, self.uz, self.bz, self.wr, self.ur, self.br, self.wh, self.uh, self.bh]


def gru_step(params: GruParams, h_prev, x) -> Tensor:
    """One GRU recurrence: h = z*h_prev + (1-z)*cand, components in (-1, 1)."""
    h_prev = ad.as_tensor(h_prev)
    x = ad.as_tensor(x)
    if x.data.shape[-1] != params.inputs or h_prev.data.shape[-1] != params.hidden:
        raise DimensionError(
            f"gru_step got input {x.data.shape} / hidden {h_prev.data.shape}, "
            f"expected ({params.inputs},) / ({params.hidden},)"
        )
    z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, params.wz), ad.matmul(h_prev, params.uz)), params.bz))
    r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, params.wr), ad.matmul(h_prev, params.ur)), params.br))
    cand = ad.tanh(ad.add(ad.add(ad.matmul(x, params.wh), ad.matmul(ad.mul(r, h_prev), params.uh)), params.bh))
    one_minus_z = ad.sub(1.0, z)
    return ad.add(ad.mul(z, h_prev), ad.mul(one_minus_z, cand))


def forward_policy(params: DenseNetParams, belief) -> Tensor:
    """Action distribution for one agent given the current belief."""
    b = ad.as_tensor(belief)
    if not np.all(np.isfinite(b.data)):
        raise NumericError("policy forward received a non-finite belief")
    return ad.softmax_rows(params.forward(b))


def dense_forward_np(params: DenseNetParams, x: np.ndarray) -> np.ndarray:
    """Gradient-free forward pass for sampling, targets and counterfactuals."""
    h = np.asarray(x, dtype=np.float64)
    for layer in params.layers:
        h = h @ layer.weight.data + layer.bias.data
        if layer.activation == "tanh":
            h = np.tanh(h)
    return h


def gru_step_np(params: GruParams, h_prev: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Gradient-free GRU recurrence, matching gru_step exactly."""
    z = ad._sigmoid_np(x @ params.wz.data + h_prev @ params.uz.data + params.bz.data)
    r = ad._sigmoid_np(x @ params.wr.data + h_prev @ params.ur.data + params.br.data)
    cand = np.tanh(x @ params.wh.data + (r * h_prev) @ params.uh.data + params.bh.data)
    return z * h_prev + (1.0 - z) * cand


class Adam:
    """Per-parameter adaptive steps with first/second moment accumulators."""

    def __init__(self, params: list[Tensor], lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {p.name or i}")
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self._m[i] / b1t
            v_hat = self._v[i] / b2t
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class BeliefEncoderParams:
    """Alert encoder: one dense tanh layer feeding the recurrent cell."""

    psi: DenseLayer
    gru: GruParams

    @classmethod
    def create(cls, rng: np.random.Generator, obs_dim: int, enc_dim: int, hidden: int) -> "BeliefEncoderParams":
        return cls(
            psi=DenseLayer.create(rng, obs_dim, enc_dim, "tanh", "encoder.psi"),
            gru=GruParams.create(rng, enc_dim, hidden, "encoder.gru"),
        )

    def parameters(self) -> list[Tensor]:
        return [self.psi.weight, self.psi.bias] + self.gru.parameters()


# ---------------------------------------------------------------------------
# checkpoints: magic line, JSON header with shapes, raw little-endian float64
# payload in header order. Fully deterministic bytes for identical arrays.
# ---------------------------------------------------------------------------

def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    header = {
        "version": 1,
        "meta": meta or {},
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(json.dumps(header, sort_keys=True).encode("utf-8"))
    buf.write(b"\n")
    for v in arrays.values():
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_arrays(path: str | Path, expected: dict[str, tuple[int, ...]] | None = None) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    body = raw[len(CHECKPOINT_MAGIC):]
    nl = body.index(b"\n")
    try:
        header = json.loads(body[:nl].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    if header.get("version") != 1:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    offset = nl + 1
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        chunk = body[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated payload for array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if expected is not None:
        for name, shape in expected.items():
            if name not in arrays:
                raise CheckpointError(f"{path}: missing array {name!r}")
            if arrays[name].shape != tuple(shape):
                raise CheckpointError(
                    f"{path}: shape mismatch for {name!r}: file has {arrays[name].shape}, expected {tuple(shape)}"
                )
        extra = set(arrays) - set(expected)
        if extra:
            raise CheckpointError(f"{path}: unexpected arrays {sorted(extra)}")
    return arrays, header.get("meta", {})
