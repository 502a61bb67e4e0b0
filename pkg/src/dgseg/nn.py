"""Layers, parameter containers, the AdamW optimiser and a gradient checker."""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor owned by a :class:`Module`; ``requires_grad`` doubles as the trainable flag."""

    def __init__(self, data, trainable: bool = True, dtype=None):
        super().__init__(np.array(data, dtype=dtype if dtype is not None else np.asarray(data).dtype),
                         requires_grad=trainable)

    @property
    def trainable(self) -> bool:
        return self.requires_grad


class Module:
    """Minimal parameter container.

    Parameters and sub-modules are discovered from instance attributes
    (including lists of modules), in attribute insertion order, so naming is
    stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise ContractError(f"state dict is missing parameters: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"parameter {name}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, bound: float, shape, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=T.DEFAULT_DTYPE,
                 zero_init: bool = False):
        bound = 1.0 / np.sqrt(d_in)
        w = np.zeros((d_in, d_out), dtype) if zero_init else _uniform(rng, bound, (d_in, d_out), dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 dilation: int = 1, padding: int | None = None, dtype=T.DEFAULT_DTYPE):
        if kernel < 1 or stride < 1 or dilation < 1:
            raise ConfigurationError(f"kernel/stride/dilation must be ≥ 1, got {kernel}/{stride}/{dilation}")
        fan_in = c_in * kernel * kernel
        # He-uniform for ReLU stacks
        self.weight = Parameter(_uniform(rng, np.sqrt(6.0 / fan_in), (c_out, c_in, kernel, kernel), dtype))
        self.bias = Parameter(np.zeros(c_out, dtype))
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (kernel - 1) // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.padding)

    @staticmethod
    def count(c_in: int, c_out: int, kernel: int) -> int:
        return c_out * c_in * kernel * kernel + c_out


class LayerNorm(Module):
    def __init__(self, d: int, dtype=T.DEFAULT_DTYPE, eps: float = 1e-5):
        self.weight = Parameter(np.ones(d, dtype))
        self.bias = Parameter(np.zeros(d, dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``heads`` heads with an output projection.

    Inputs are ``(..., L, d)``; keys and values carry no positional encoding, so
    the result is invariant to a joint permutation of their rows.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=T.DEFAULT_DTYPE,
                 zero_out: bool = False):
        if heads < 1 or d % heads:
            raise ConfigurationError(f"embedding width {d} is not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(d, d, rng, dtype)
        self.k_proj = Linear(d, d, rng, dtype)
        self.v_proj = Linear(d, d, rng, dtype)
        self.out_proj = Linear(d, d, rng, dtype, zero_init=zero_out)

    def attend(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        """Per-head attention, heads concatenated, before the output projection."""
        if q.shape[-1] != k.shape[-1] or k.shape[-1] != v.shape[-1] or k.shape[-2] != v.shape[-2]:
            raise DimensionError(f"attention widths disagree: q {q.shape}, k {k.shape}, v {v.shape}")
        d = q.shape[-1]
        h = self.heads
        dh = d // h
        qh = _split_heads(self.q_proj(q), h)
        kh = _split_heads(self.k_proj(k), h)
        vh = _split_heads(self.v_proj(v), h)
        scores = (qh @ T.swapaxes(kh, -1, -2)) * (1.0 / np.sqrt(dh))
        weights = T.softmax(scores, axis=-1)
        return _merge_heads(weights @ vh)

    def forward(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        return self.out_proj(self.attend(q, k, v))


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, L, d = x.shape
    return T.swapaxes(x.reshape(*lead, L, h, d // h), -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, L, dh = x.shape
    return T.swapaxes(x, -3, -2).reshape(*lead, L, h * dh)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, params: MultiHeadAttention) -> Tensor:
    return params(q, k, v)


class AdamW:
    """Adam with decoupled weight decay.

    Parameters whose ``requires_grad`` is false, or that received no gradient
    this step, are left untouched (not even decayed).
    """

    def __init__(self, named_params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params: "OrderedDict[str, Parameter]" = OrderedDict(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.steps: dict[str, int] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            n = self.steps.get(name, 0) + 1
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name], self.steps[name] = m, v, n
            upd = (m / (1.0 - b1 ** n)) / (np.sqrt(v / (1.0 - b2 ** n)) + self.eps)
            p.data = (p.data * (1.0 - self.lr * self.weight_decay) - self.lr * upd).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {"t": self.t, "steps": dict(self.steps), "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.steps = {k: int(n) for k, n in state["steps"].items()}
        self.m = {k: np.array(a) for k, a in state["m"].items()}
        self.v = {k: np.array(a) for k, a in state["v"].items()}


def adamw_step(opt: AdamW) -> None:
    opt.step()


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the reverse-mode gradient of ``f`` at ``x`` and
    central finite differences.

    The relative error of each component uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    x.data = np.ascontiguousarray(x.data)
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
