"""Minimal differentiable kernel: dense layers, a gated recurrent cell,
elementwise/reduction ops with exact reverse-mode gradients, and Adam.

Only the fixed op set used by the residual predictor and the gain
estimator is provided; this is not a general autograd. All arithmetic is
float64. Ops accept either single vectors ``(d,)`` or batches ``(B, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class TrainingDivergedError(RuntimeError):
    """Raised when a gradient, parameter, or loss stops being finite."""


class Tensor:
    """A value plus an accumulated-gradient slot."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad: bool = True):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


class Tape:
    """Ordered record of forward ops; backward replays them in reverse."""

    def __init__(self):
        self._ops: list[Callable[[], None]] = []

    def __len__(self) -> int:
        return len(self._ops)

    def _emit(self, value: np.ndarray, inputs: Sequence[Tensor],
              backward: Callable[[Tensor], None]) -> Tensor:
        needs = any(t.requires_grad for t in inputs)
        out = Tensor(value, requires_grad=needs)
        if needs:
            self._ops.append(lambda: None if out.grad is None else backward(out))
        return out

    def backward(self, output: Tensor, output_grad=1.0) -> None:
        output.grad = np.broadcast_to(
            np.asarray(output_grad, dtype=np.float64), output.value.shape
        ).copy()
        for op in reversed(self._ops):
            op()

    # ---- primitive ops -------------------------------------------------

    def matmul(self, x: Tensor, w: Tensor) -> Tensor:
        """``x @ w.T`` with ``w`` stored (out, in); x is (B, in) or (in,)."""
        if x.value.shape[-1] != w.value.shape[1]:
            raise ValueError(
                f"matmul shape mismatch: input {x.value.shape} vs weight {w.value.shape}"
            )
        y = x.value @ w.value.T

        def bwd(out: Tensor):
            g = out.grad
            if x.value.ndim == 1:
                w.accumulate(np.outer(g, x.value))
                x.accumulate(g @ w.value)
            else:
                w.accumulate(g.T @ x.value)
                x.accumulate(g @ w.value)

        return self._emit(y, (x, w), bwd)

    def add_bias(self, x: Tensor, b: Tensor) -> Tensor:
        y = x.value + b.value

        def bwd(out: Tensor):
            g = out.grad
            x.accumulate(g)
            b.accumulate(g.sum(axis=0) if g.ndim == 2 else g)

        return self._emit(y, (x, b), bwd)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.value.shape != b.value.shape:
            raise ValueError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")

        def bwd(out: Tensor):
            a.accumulate(out.grad)
            b.accumulate(out.grad)

        return self._emit(a.value + b.value, (a, b), bwd)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        if a.value.shape != b.value.shape:
            raise ValueError(f"sub shape mismatch: {a.value.shape} vs {b.value.shape}")

        def bwd(out: Tensor):
            a.accumulate(out.grad)
            b.accumulate(-out.grad)

        return self._emit(a.value - b.value, (a, b), bwd)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.value.shape != b.value.shape:
            raise ValueError(f"mul shape mismatch: {a.value.shape} vs {b.value.shape}")

        def bwd(out: Tensor):
            a.accumulate(out.grad * b.value)
            b.accumulate(out.grad * a.value)

        return self._emit(a.value * b.value, (a, b), bwd)

    def scale(self, x: Tensor, c: float) -> Tensor:
        c = float(c)

        def bwd(out: Tensor):
            x.accumulate(out.grad * c)

        return self._emit(x.value * c, (x,), bwd)

    def relu(self, x: Tensor) -> Tensor:
        mask = x.value > 0

        def bwd(out: Tensor):
            x.accumulate(out.grad * mask)

        return self._emit(np.where(mask, x.value, 0.0), (x,), bwd)

    def tanh(self, x: Tensor) -> Tensor:
        y = np.tanh(x.value)

        def bwd(out: Tensor):
            x.accumulate(out.grad * (1.0 - y * y))

        return self._emit(y, (x,), bwd)

    def sigmoid(self, x: Tensor) -> Tensor:
        y = 1.0 / (1.0 + np.exp(-x.value))

        def bwd(out: Tensor):
            x.accumulate(out.grad * y * (1.0 - y))

        return self._emit(y, (x,), bwd)

    def concat(self, parts: Sequence[Tensor], axis: int = -1) -> Tensor:
        y = np.concatenate([p.value for p in parts], axis=axis)
        widths = [p.value.shape[axis] for p in parts]

        def bwd(out: Tensor):
            offset = 0
            for p, width in zip(parts, widths):
                sl = [slice(None)] * out.grad.ndim
                sl[axis if axis >= 0 else out.grad.ndim + axis] = slice(offset, offset + width)
                p.accumulate(out.grad[tuple(sl)])
                offset += width

        return self._emit(y, tuple(parts), bwd)

    def slice_cols(self, x: Tensor, start: int, stop: int) -> Tensor:
        y = x.value[..., start:stop].copy()

        def bwd(out: Tensor):
            g = np.zeros_like(x.value)
            g[..., start:stop] = out.grad
            x.accumulate(g)

        return self._emit(y, (x,), bwd)

    def reshape(self, x: Tensor, shape) -> Tensor:
        def bwd(out: Tensor):
            x.accumulate(out.grad.reshape(x.value.shape))

        return self._emit(x.value.reshape(shape), (x,), bwd)

    def bmatvec(self, k: Tensor, v: Tensor) -> Tensor:
        """Batched matrix-vector product: (B, n, n) x (B, n) -> (B, n)."""
        y = np.einsum("bij,bj->bi", k.value, v.value)

        def bwd(out: Tensor):
            g = out.grad
            k.accumulate(g[:, :, None] * v.value[:, None, :])
            v.accumulate(np.einsum("bij,bi->bj", k.value, g))

        return self._emit(y, (k, v), bwd)

    def wrap_columns(self, x: Tensor, cols: Sequence[int]) -> Tensor:
        """Wrap the given columns into [-pi, pi); gradient is the identity."""
        y = x.value.copy()
        for c in cols:
            col = y[..., c]
            col = (col + math.pi) % (2.0 * math.pi) - math.pi
            y[..., c] = np.where(col >= math.pi, col - 2.0 * math.pi, col)

        def bwd(out: Tensor):
            x.accumulate(out.grad)

        return self._emit(y, (x,), bwd)

    def abs_sum(self, x: Tensor) -> Tensor:
        """Scalar sum of absolute values; subgradient 0 at zero entries."""
        sign = np.sign(x.value)

        def bwd(out: Tensor):
            x.accumulate(out.grad * sign)

        return self._emit(np.abs(x.value).sum(), (x,), bwd)

    def sum_rownorm(self, x: Tensor) -> Tensor:
        """Scalar sum over rows of the Euclidean row norms."""
        norms = np.sqrt((x.value * x.value).sum(axis=-1))

        def bwd(out: Tensor):
            safe = np.where(norms > 0, norms, 1.0)
            x.accumulate(out.grad * x.value / safe[..., None] * (norms > 0)[..., None])

        return self._emit(norms.sum(), (x,), bwd)

    def normalize_rows(self, x: Tensor, eps: float) -> Tensor:
        """Rows scaled to ``x / (|x| + eps)``."""
        norms = np.sqrt((x.value * x.value).sum(axis=-1, keepdims=True))
        denom = norms + eps
        y = x.value / denom

        def bwd(out: Tensor):
            g = out.grad
            dot = (g * x.value).sum(axis=-1, keepdims=True)
            safe = np.where(norms > 0, norms, 1.0)
            correction = x.value * dot / (safe * denom * denom) * (norms > 0)
            x.accumulate(g / denom - correction)

        return self._emit(y, (x,), bwd)


def backward(tape: Tape, output: Tensor, output_grad=1.0) -> None:
    """Accumulate gradients for everything recorded on ``tape``."""
    tape.backward(output, output_grad)


# ---- layers ------------------------------------------------------------

_ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass
class DenseLayer:
    weights: Tensor  # (out, in)
    bias: Tensor     # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.value.shape[0] != self.bias.value.shape[0]:
            raise ValueError("bias length must match weight rows")


def dense_forward(layer: DenseLayer, x: Tensor, tape: Tape) -> Tensor:
    y = tape.add_bias(tape.matmul(x, layer.weights), layer.bias)
    if layer.activation == "relu":
        return tape.relu(y)
    if layer.activation == "tanh":
        return tape.tanh(y)
    return y


@dataclass
class RecurrentCell:
    """Gated recurrent cell (update gate z, reset gate r, candidate n)."""

    w_update: Tensor   # (H, in)
    u_update: Tensor   # (H, H)
    b_update: Tensor   # (H,)
    w_reset: Tensor
    u_reset: Tensor
    b_reset: Tensor
    w_cand: Tensor
    u_cand: Tensor
    b_cand: Tensor

    @property
    def hidden_size(self) -> int:
        return self.b_update.value.shape[0]


def rnn_step(cell: RecurrentCell, x: Tensor, hidden: Tensor, tape: Tape) -> Tensor:
    """One gated-recurrent update; returns the new hidden state.

    h' = (1 - z) * n + z * h,  z = sigmoid(Wz x + Uz h + bz),
    r = sigmoid(Wr x + Ur h + br),  n = tanh(Wn x + r * (Un h) + bn)
    """
    z = tape.sigmoid(tape.add_bias(
        tape.add(tape.matmul(x, cell.w_update), tape.matmul(hidden, cell.u_update)),
        cell.b_update))
    r = tape.sigmoid(tape.add_bias(
        tape.add(tape.matmul(x, cell.w_reset), tape.matmul(hidden, cell.u_reset)),
        cell.b_reset))
    n = tape.tanh(tape.add_bias(
        tape.add(tape.matmul(x, cell.w_cand), tape.mul(r, tape.matmul(hidden, cell.u_cand))),
        cell.b_cand))
    one_minus_z = tape.scale(tape.sub(z, constant(np.ones_like(z.value))), -1.0)
    return tape.add(tape.mul(one_minus_z, n), tape.mul(z, hidden))


# ---- parameter registry and optimizer -----------------------------------


class Parameters:
    """Named, ordered collection of learnable tensors plus Adam buffers."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._adam_m: dict[str, np.ndarray] = {}
        self._adam_v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def register(self, name: str, value) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def n_parameters(self) -> int:
        return sum(t.value.size for t in self._tensors.values())

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def assert_finite(self) -> None:
        for name, t in self._tensors.items():
            if not np.all(np.isfinite(t.value)):
                raise TrainingDivergedError(f"parameter {name!r} is not finite")

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: t.value.copy() for name, t in self._tensors.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self._tensors) - set(values)
        extra = set(values) - set(self._tensors)
        if missing or extra:
            raise ValueError(
                f"tensor table mismatch: missing={sorted(missing)} unexpected={sorted(extra)}"
            )
        for name, arr in values.items():
            t = self._tensors[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != t.value.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: file {arr.shape} vs model {t.value.shape}"
                )
            t.value = arr.copy()


def adam_step(params: Parameters, lr: float = 1e-3, weight_decay: float = 1e-5,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update with bias correction and decoupled weight decay.

    Consumes the accumulated gradients (they are reset to empty).
    """
    params.step_count += 1
    t = params.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, tensor in params.items():
        g = tensor.grad
        if g is None:
            g = np.zeros_like(tensor.value)
        elif not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"gradient for {name!r} is not finite")
        m = params._adam_m.get(name)
        if m is None:
            m = params._adam_m[name] = np.zeros_like(tensor.value)
        v = params._adam_v.get(name)
        if v is None:
            v = params._adam_v[name] = np.zeros_like(tensor.value)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            tensor.value -= lr * weight_decay * tensor.value
        tensor.value -= lr * update
        tensor.grad = None


# ---- initialization ------------------------------------------------------


def init_dense(rng: np.random.Generator, n_in: int, n_out: int,
               activation: str = "identity", zero: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Weight/bias arrays for a dense layer: uniform +-1/sqrt(fan_in), zero bias."""
    if zero:
        w = np.zeros((n_out, n_in))
    else:
        bound = 1.0 / math.sqrt(n_in)
        w = rng.uniform(-bound, bound, size=(n_out, n_in))
    return w, np.zeros(n_out)


def init_gru(rng: np.random.Generator, n_in: int, n_hidden: int) -> dict[str, np.ndarray]:
    out = {}
    bi = 1.0 / math.sqrt(n_in)
    bh = 1.0 / math.sqrt(n_hidden)
    for gate in ("update", "reset", "cand"):
        out[f"w_{gate}"] = rng.uniform(-bi, bi, size=(n_hidden, n_in))
        out[f"u_{gate}"] = rng.uniform(-bh, bh, size=(n_hidden, n_hidden))
        out[f"b_{gate}"] = np.zeros(n_hidden)
    return out
