from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import ShapeError, Tensor, concat, matmul, relu, shift

DTYPES = {"float64": np.float64, "float32": np.float32}


class ParameterStore:
    """Trainable arrays addressed by dotted path, plus SGD state."""

    def __init__(self, precision: str = "float64"):
        if precision not in DTYPES:
            raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}")
        self.precision = precision
        self.dtype = DTYPES[precision]
        self.entries: dict[str, Tensor] = {}
        self.velocity: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, path: str, value) -> Tensor:
        if path in self.entries:
            raise KeyError(f"duplicate parameter path {path!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=path)
        self.entries[path] = t
        self.velocity[path] = np.zeros_like(t.data)
        return t

    def replace(self, path: str, value) -> Tensor:
        """Swap in a fresh array (new shape allowed) and reset its velocity."""
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=path)
        self.entries[path] = t
        self.velocity[path] = np.zeros_like(t.data)
        return t

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self.entries[path]
        except KeyError:
            raise KeyError(f"unknown parameter path {path!r}") from None

    def __contains__(self, path: str) -> bool:
        return path in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def paths(self, prefix: str = "") -> list[str]:
        return [p for p in self.entries if p.startswith(prefix)]

    def tensors(self) -> list[Tensor]:
        return list(self.entries.values())

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.entries.values()))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p: t.data for p, t in self.entries.items()}


def mlp_layers(store: ParameterStore, path: str) -> int:
    n = 0
    while f"{path}.{n}.weight" in store:
        n += 1
    if n == 0:
        raise KeyError(f"unknown MLP path {path!r}")
    return n


def init_mlp(store: ParameterStore, path: str, widths: list[int], rng: np.random.Generator,
             bias: bool = True) -> None:
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        store.add(f"{path}.{i}.weight", glorot(rng, fan_in, fan_out, (fan_in, fan_out)))
        if bias:
            store.add(f"{path}.{i}.bias", np.zeros(fan_out))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def mlp_forward(store: ParameterStore, path: str, x: Tensor) -> Tensor:
    """Affine layers with ReLU between them; the last layer stays affine."""
    n = mlp_layers(store, path)
    vector = x.ndim == 1
    if vector:
        x = x.reshape(1, x.shape[0])
    for i in range(n):
        w = store[f"{path}.{i}.weight"]
        if x.shape[-1] != w.shape[0]:
            raise ShapeError(f"{path}.{i}: input extent {x.shape[-1]} does not match weight {w.shape}")
        x = matmul(x, w)
        b_path = f"{path}.{i}.bias"
        if b_path in store:
            x = x + store[b_path]
        if i < n - 1:
            x = relu(x)
    return x.reshape(x.shape[-1]) if vector else x


def conv_time_major(x: Tensor, weight: Tensor, bias: Tensor | None, dilation: int) -> Tensor:
    """Kernel-3 dilated convolution on ``[..., time, channels]`` with zero padding.

    ``weight`` is ``[3, c_in, c_out]``; tap k reads ``x[t + (k - 1) * dilation]``.
    """
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    if weight.ndim != 3 or weight.shape[0] != 3:
        raise ShapeError(f"conv weight must be [3, c_in, c_out], got {weight.shape}")
    c_in, c_out = weight.shape[1], weight.shape[2]
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv input has {x.shape[-1]} channels, weight expects {c_in}")
    taps = [shift(x, (k - 1) * dilation, axis=-2) for k in range(3)]
    stacked = concat(taps, axis=-1)
    out = matmul(stacked, weight.reshape(3 * c_in, c_out))
    if bias is not None:
        out = out + bias
    return out


def conv1d_dilated(store: ParameterStore, path: str, x: Tensor, dilation: int) -> Tensor:
    """Same-length dilated convolution of a ``[..., channels, time]`` signal."""
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    bias = store[f"{path}.bias"] if f"{path}.bias" in store else None
    tm = x.transpose(tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2))
    out = conv_time_major(tm, store[f"{path}.weight"], bias, dilation)
    return out.transpose(tuple(range(out.ndim - 2)) + (out.ndim - 1, out.ndim - 2))


def sgd_step(store: ParameterStore, lr: float, momentum: float = 0.9,
             weight_decay: float = 1e-4) -> None:
    """v <- momentum * v + grad + weight_decay * w;  w <- w - lr * v."""
    missing = [p for p, t in store.entries.items() if t.grad is None]
    if missing:
        raise RuntimeError(f"missing gradient for {len(missing)} parameter(s), e.g. {missing[0]!r}")
    dt = store.dtype
    lr_c, mom_c, wd_c = dt(lr), dt(momentum), dt(weight_decay)
    for path, t in store.entries.items():
        v = store.velocity[path]
        v *= mom_c
        v += t.grad
        v += wd_c * t.data
        t.data -= lr_c * v
        t.grad = None
    store.step_count += 1
