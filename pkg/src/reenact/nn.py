"""Lightweight module system: parameter registration, init, layers, blocks."""

from __future__ import annotations

import numpy as np

from .optim import SpectralState, spectral_normalize
from .tensor import Tensor, avg_pool2d, conv2d, instance_norm, linear, nearest_upsample2d

__all__ = ["Module", "Linear", "Conv2d", "ResDown", "ResUp", "orthogonal_init"]


def orthogonal_init(shape: tuple, rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    """Orthogonal init for a weight viewed as (rows, prod(rest))."""
    rows = shape[0]
    cols = int(np.prod(shape[1:]))
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    q = q.T if rows < cols else q
    return gain * q[:rows, :cols].reshape(shape)


class Module:
    """Auto-registers Tensor attributes as parameters and Module attributes
    (or lists of them) as children."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, list) and value and all(isinstance(v, Module) for v in value):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for name, p in self._params.items():
            out[f"{prefix}{name}"] = p
        for name, child in self._children.items():
            if isinstance(child, list):
                for i, c in enumerate(child):
                    out.update(c.named_parameters(f"{prefix}{name}.{i}."))
            else:
                out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def spectral_states(self) -> dict[str, SpectralState]:
        out = {}
        if isinstance(self, (Linear, Conv2d)) and self.spectral is not None:
            out["sn"] = self.spectral
        for name, child in self._children.items():
            children = child if isinstance(child, list) else [child]
            for i, c in enumerate(children):
                key = f"{name}.{i}" if isinstance(child, list) else name
                for k, v in c.spectral_states().items():
                    out[f"{key}.{k}"] = v
        return out

    def set_training(self, flag: bool) -> None:
        object.__setattr__(self, "training", flag)
        for child in self._children.values():
            for c in (child if isinstance(child, list) else [child]):
                c.set_training(flag)

    def load_state(self, records: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix).items():
            if name not in records:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            arr = records[name]
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} vs model {p.data.shape}")
            p.data[...] = arr


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 spectral_norm: bool = False, bias: bool = True):
        super().__init__()
        self.w = Tensor(orthogonal_init((c_in, c_out), rng), requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        self.spectral = SpectralState((c_in, c_out), rng) if spectral_norm else None

    def normalized_weight(self) -> Tensor:
        if self.spectral is None:
            return self.w
        return spectral_normalize(self.w, self.spectral, update=self.training)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.normalized_weight(), self.b)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, spectral_norm: bool = False, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.w = Tensor(orthogonal_init((c_out, c_in, k, k), rng), requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        self.spectral = SpectralState((c_out, c_in, k, k), rng) if spectral_norm else None

    def normalized_weight(self) -> Tensor:
        if self.spectral is None:
            return self.w
        return spectral_normalize(self.w, self.spectral, update=self.training)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.normalized_weight(), self.b, stride=self.stride)


class ResDown(Module):
    """Residual downsampling block: two 3x3 convs then average pooling, with
    a pooled 1x1 skip. Instance norm is optional (absent in the target
    encoder and the discriminator)."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 norm: bool = True, spectral_norm: bool = False):
        super().__init__()
        self.norm = norm
        self.conv1 = Conv2d(c_in, c_out, 3, rng, spectral_norm=spectral_norm)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, spectral_norm=spectral_norm)
        self.skip = Conv2d(c_in, c_out, 1, rng, spectral_norm=spectral_norm)

    def __call__(self, x: Tensor) -> Tensor:
        h = instance_norm(x) if self.norm else x
        h = self.conv1(h.relu())
        h = instance_norm(h) if self.norm else h
        h = avg_pool2d(self.conv2(h.relu()))
        return h + avg_pool2d(self.skip(x))


class ResUp(Module):
    """Residual upsampling block: nearest x2 then two 3x3 convs, with an
    upsampled 1x1 skip."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 norm: bool = True, spectral_norm: bool = False):
        super().__init__()
        self.norm = norm
        self.conv1 = Conv2d(c_in, c_out, 3, rng, spectral_norm=spectral_norm)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, spectral_norm=spectral_norm)
        self.skip = Conv2d(c_in, c_out, 1, rng, spectral_norm=spectral_norm)

    def __call__(self, x: Tensor) -> Tensor:
        h = instance_norm(x) if self.norm else x
        h = nearest_upsample2d(h.relu())
        h = self.conv1(h)
        h = instance_norm(h) if self.norm else h
        h = self.conv2(h.relu())
        return h + self.skip(nearest_upsample2d(x))
