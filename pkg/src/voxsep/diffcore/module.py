"""Parameter registry: named trainable tensors, buffers, counting, dtype moves."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class Parameter:
    """Trainable tensor; dotted-path name is assigned when the owning model walks it."""

    def __init__(self, data: np.ndarray, init_spec: str = ""):
        self.tensor = Tensor(np.asarray(data), requires_grad=True)
        self.name = ""
        self.init_spec = init_spec

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray):
        self.tensor.data = value

    @property
    def grad(self):
        return self.tensor.grad

    @property
    def shape(self):
        return self.tensor.data.shape

    def __repr__(self):
        return f"Parameter({self.name or '?'}, shape={self.shape})"


class Module:
    """Composite of parameters, non-trainable buffers, and child modules.

    Attribute assignment registers Parameters and Modules automatically, so
    model code reads like plain object composition.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, ModuleList):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def _set_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            dotted = f"{prefix}{name}"
            p.name = dotted
            yield dotted, p
        for name, child in self._modules.items():
            yield from child.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield f"{prefix}{name}", b
        for name, child in self._modules.items():
            yield from child.named_buffers(prefix=f"{prefix}{name}.")

    def zero_grad(self):
        for p in self.parameters():
            p.tensor.grad = None

    def astype(self, dtype) -> "Module":
        """Convert parameters and buffers in place (e.g. float64 for grad checks)."""
        for _, p in self.named_parameters():
            p.tensor.data = p.tensor.data.astype(dtype)
            p.tensor.grad = None
        for holder, name, buf in self._walk_buffers():
            holder._set_buffer(name, buf.astype(dtype))
        return self

    def _walk_buffers(self):
        for name, buf in list(self._buffers.items()):
            yield self, name, buf
        for child in self._modules.values():
            yield from child._walk_buffers()

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Ordered (name, array) pairs: parameters then buffers."""
        out = [(name, p.data) for name, p in self.named_parameters()]
        out.extend((f"buffer.{name}", b) for name, b in self.named_buffers())
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for name, p in self.named_parameters():
            src = arrays[name]
            if src.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {p.data.shape}")
            p.tensor.data = src.copy()
        buf_index: dict[str, tuple[Module, str]] = {}
        self._index_buffers("", buf_index)
        for dotted, (holder, attr) in buf_index.items():
            key = f"buffer.{dotted}"
            if key in arrays:
                holder._set_buffer(attr, arrays[key].copy())

    def _index_buffers(self, prefix: str, out: dict):
        for name in self._buffers:
            out[f"{prefix}{name}"] = (self, name)
        for name, child in self._modules.items():
            child._index_buffers(f"{prefix}{name}.", out)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        self._modules[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, idx):
        return self._items[idx]


def param_count(model: Module) -> int:
    """Total trainable scalar count; running statistics and other buffers excluded."""
    seen_ids: set[int] = set()
    seen_names: set[str] = set()
    total = 0
    for name, p in model.named_parameters():
        if name in seen_names and id(p) not in seen_ids:
            raise ValueError(f"duplicate parameter name {name!r}")
        if id(p) in seen_ids:
            continue
        seen_ids.add(id(p))
        seen_names.add(name)
        total += int(np.prod(p.data.shape, dtype=np.int64)) if p.data.ndim else 1
    return total


def uniform_fan_limit(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
                 dtype=np.float32) -> np.ndarray:
    limit = uniform_fan_limit(fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
