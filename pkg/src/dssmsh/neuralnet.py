"""Feed-forward heads, stacked GRU cells, Adam, and binary checkpoints."""

from __future__ import annotations

import struct
from collections.abc import MutableMapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, MissingParameterError, NonFiniteError, ShapeError

MAGIC = b"DSSH"
FORMAT_VERSION = 1


class ParameterStore(MutableMapping):
    """Named trainable tensors; iteration is sorted by name."""

    def __init__(self, items=None):
        self._data: dict[str, Tensor] = {}
        if items:
            for k, v in dict(items).items():
                self[k] = v

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._data[name]
        except KeyError:
            raise MissingParameterError(f"missing parameter {name!r}") from None

    def __setitem__(self, name: str, value) -> None:
        if not isinstance(value, Tensor):
            value = Tensor(value, requires_grad=True, name=name)
        value.requires_grad = True
        value.name = name
        self._data[name] = value

    def __delitem__(self, name: str) -> None:
        del self._data[name]

    def __iter__(self):
        return iter(sorted(self._data))

    def __len__(self):
        return len(self._data)

    def __repr__(self):
        return f"ParameterStore({len(self)} tensors, {self.num_values()} values)"

    def num_values(self) -> int:
        return int(np.sum([t.size for t in self._data.values()], dtype=np.int64))

    def zero_grad(self) -> None:
        for t in self._data.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: self._data[k].data for k in self}

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: self._data[k].data.copy() for k in self})

    def equals(self, other: "ParameterStore") -> bool:
        if list(self) != list(other):
            return False
        return all(np.array_equal(self[k].data, other[k].data) for k in self)


@dataclass(frozen=True)
class MLPConfig:
    """Feed-forward head: affine/tanh layers, then an affine output."""

    input_dim: int
    hidden_dims: tuple = (32, 32)
    output_dim: int = 1
    hidden_activation: str = "tanh"
    output_head: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d < 1 for d in dims):
            raise ConfigError(f"MLP dimensions must be >= 1, got {dims}")
        if self.hidden_activation != "tanh":
            raise ConfigError(f"unsupported hidden activation {self.hidden_activation!r}")
        if self.output_head not in ("linear", "softplus"):
            raise ConfigError(f"output_head must be 'linear' or 'softplus', got {self.output_head!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class GRUConfig:
    input_dim: int
    hidden_dim: int
    num_layers: int = 1

    def __post_init__(self):
        if self.num_layers < 1 or self.hidden_dim < 1 or self.input_dim < 1:
            raise ConfigError(f"invalid GRU configuration {self}")


def _uniform(rng, fan_in, shape):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg, seed, prefix: str = "") -> ParameterStore:
    """Initialize weights ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)) and zero biases.

    GRU update-gate biases start at +1 so the cell initially carries its state.
    """
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    pre = f"{prefix}." if prefix else ""
    if isinstance(cfg, MLPConfig):
        for i, (fan_in, fan_out) in enumerate(cfg.layer_dims):
            store[f"{pre}layer{i}.weight"] = _uniform(rng, fan_in, (fan_in, fan_out))
            store[f"{pre}layer{i}.bias"] = np.zeros(fan_out)
    elif isinstance(cfg, GRUConfig):
        h = cfg.hidden_dim
        for layer in range(cfg.num_layers):
            d_in = cfg.input_dim if layer == 0 else h
            base = f"{pre}layer{layer}"
            # gate order along the last axis: reset, update, candidate
            store[f"{base}.w_input"] = _uniform(rng, d_in, (d_in, 3 * h))
            store[f"{base}.u_gates"] = _uniform(rng, h, (h, 2 * h))
            store[f"{base}.u_cand"] = _uniform(rng, h, (h, h))
            bias = np.zeros(3 * h)
            bias[h:2 * h] = 1.0
            store[f"{base}.bias"] = bias
    else:
        raise ConfigError(f"cannot initialize parameters for {type(cfg).__name__}")
    return store


def mlp_forward(cfg: MLPConfig, params: ParameterStore, x: Tensor, prefix: str = "") -> Tensor:
    pre = f"{prefix}." if prefix else ""
    layers = cfg.layer_dims
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ShapeError(f"MLP {prefix or '<root>'} expects [batch x {cfg.input_dim}], got {x.shape}")
    out = x
    for i in range(len(layers)):
        out = dc.affine(out, params[f"{pre}layer{i}.weight"], params[f"{pre}layer{i}.bias"])
        if i < len(layers) - 1:
            out = dc.tanh(out)
    if cfg.output_head == "softplus":
        out = dc.softplus(out)
    return out


def gru_step(cfg: GRUConfig, params: ParameterStore, h_prev, x: Tensor, prefix: str = "gru"):
    """Advance a stacked GRU by one step.

    ``h_prev`` is either a single tensor (one layer) or a sequence holding one
    state per layer; the return value has the same form. The last layer's
    state is the cell output.
    """
    single = isinstance(h_prev, Tensor)
    states = [h_prev] if single else list(h_prev)
    if len(states) != cfg.num_layers:
        raise ShapeError(f"expected {cfg.num_layers} layer states, got {len(states)}")
    h = cfg.hidden_dim
    pre = f"{prefix}." if prefix else ""
    inp = x
    new_states = []
    for layer, hp in enumerate(states):
        d_in = cfg.input_dim if layer == 0 else h
        if inp.ndim != 2 or inp.shape[1] != d_in or hp.shape != (inp.shape[0], h):
            raise ShapeError(
                f"GRU layer {layer}: input {inp.shape} / state {hp.shape} do not match "
                f"input_dim={d_in}, hidden_dim={h}"
            )
        base = f"{pre}layer{layer}"
        gx = dc.affine(inp, params[f"{base}.w_input"], params[f"{base}.bias"])
        gates = dc.sigmoid(gx[:, :2 * h] + dc.matmul(hp, params[f"{base}.u_gates"]))
        reset, update = gates[:, :h], gates[:, h:]
        cand = dc.tanh(gx[:, 2 * h:] + dc.matmul(reset * hp, params[f"{base}.u_cand"]))
        # (1 - update) * cand + update * h_prev
        hn = cand + update * (hp - cand)
        new_states.append(hn)
        inp = hn
    return new_states[0] if single else new_states


def zero_state(cfg: GRUConfig, batch: int) -> list[Tensor]:
    return [Tensor._wrap(np.zeros((batch, cfg.hidden_dim))) for _ in range(cfg.num_layers)]


# optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: ParameterStore,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update; gradients are cleared afterwards.

    If any gradient is non-finite nothing is updated and NonFiniteError names
    the offending parameter.
    """
    grads = {}
    for name in params:
        g = params[name].grad
        if g is None:
            g = np.zeros_like(params[name].data)
        elif not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        grads[name] = g
    t = state.t + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.grad = None
    state.t = t
    return state


def clip_grad_norm(params: ParameterStore, max_norm: float) -> float:
    """Rescale all gradients jointly so their global L2 norm is at most max_norm."""
    total = np.sqrt(np.sum([np.sum(p.grad ** 2) for p in params.values() if p.grad is not None]))
    if total > max_norm:
        factor = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return float(total)


# binary framing


def write_framed(path, entries: Iterable[tuple[str, np.ndarray]]) -> None:
    """Write (name, array) pairs as little-endian f64 blocks behind a DSSH header."""
    entries = list(entries)
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", FORMAT_VERSION, len(entries))
    for name, arr in entries:
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr).tobytes()
    Path(path).write_bytes(bytes(buf))


def read_framed(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a DSSH file")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(dims)
        pos += 8 * size
        out[name] = arr.astype(np.float64)
    return out


def save_checkpoint(path, params: ParameterStore, opt_state: AdamState | None = None) -> None:
    entries = [(k, params[k].data) for k in params]
    if opt_state is not None:
        for k in params:
            if k in opt_state.m:
                entries.append((f"{k}.adam.m", opt_state.m[k]))
                entries.append((f"{k}.adam.v", opt_state.v[k]))
        entries.append((".adam.t", np.asarray(float(opt_state.t))))
    write_framed(path, entries)


def load_checkpoint(path) -> tuple[ParameterStore, AdamState | None]:
    raw = read_framed(path)
    params = ParameterStore()
    opt = None
    if ".adam.t" in raw:
        opt = AdamState(t=int(raw.pop(".adam.t")))
    for name, arr in raw.items():
        if name.endswith(".adam.m"):
            opt.m[name[:-7]] = arr
        elif name.endswith(".adam.v"):
            opt.v[name[:-7]] = arr
        else:
            params[name] = arr
    return params, opt


def merge_stores(stores: Sequence[ParameterStore]) -> ParameterStore:
    out = ParameterStore()
    for s in stores:
        for k in s:
            if k in out:
                raise ConfigError(f"duplicate parameter name {k!r}")
            out[k] = s[k]
    return out
