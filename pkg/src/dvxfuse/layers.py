"""Parameter initialisers and small composite layers shared by the fusion modules.

Parameters live in flat ``{name: array}`` dicts; module forwards receive a mapping
of :class:`Tensor` keyed by local names, obtained with :func:`scoped`.
"""

from __future__ import annotations

import math
from typing import Dict, Mapping, MutableMapping, Optional

import numpy as np

from . import ops
from .ops import BNState, Mode
from .tensor import ConvSpec, Tensor

Params = Dict[str, np.ndarray]


def scoped(params: Mapping, prefix: str) -> Dict:
    """Sub-mapping of ``params`` under ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


def prefixed(params: Mapping, prefix: str) -> Dict:
    return {f"{prefix}.{k}": v for k, v in params.items()}


def conv_init(rng: np.random.Generator, spec: ConvSpec, bias: bool = True, prefix: str = "") -> Params:
    """Weights and bias uniform in +-1/sqrt(fan_in), the usual default for conv layers."""
    fan_in = (spec.in_channels // spec.groups) * spec.kernel[0] * spec.kernel[1]
    bound = 1.0 / math.sqrt(fan_in)
    out = {prefix + "weight": rng.uniform(-bound, bound, size=spec.weight_shape)}
    if bias:
        out[prefix + "bias"] = rng.uniform(-bound, bound, size=spec.out_channels)
    return out


def linear_init(rng: np.random.Generator, n_out: int, n_in: int, bias: bool = True,
                prefix: str = "") -> Params:
    bound = 1.0 / math.sqrt(n_in)
    out = {prefix + "weight": rng.uniform(-bound, bound, size=(n_out, n_in))}
    if bias:
        out[prefix + "bias"] = rng.uniform(-bound, bound, size=n_out)
    return out


def bn_init(channels: int, prefix: str = "") -> Params:
    return {prefix + "gamma": np.ones(channels), prefix + "beta": np.zeros(channels)}


def conv(x: Tensor, p: Mapping[str, Tensor], spec: ConvSpec, prefix: str = "") -> Tensor:
    return ops.conv2d(x, p[prefix + "weight"], p.get(prefix + "bias"), spec)


def batchnorm(x: Tensor, p: Mapping[str, Tensor], state: BNState, mode: Mode,
              prefix: str = "", eps: float = 1e-5) -> Tensor:
    return ops.batchnorm2d(x, p[prefix + "gamma"], p[prefix + "beta"], state, mode, eps)


# -- depthwise-separable unit: depthwise k×k then pointwise 1×1 ---------------

def dwconv_init(rng: np.random.Generator, c_in: int, c_out: int, k: int = 3) -> Params:
    return {
        **conv_init(rng, ConvSpec.depthwise(c_in, k), prefix="dw."),
        **conv_init(rng, ConvSpec.pointwise(c_in, c_out), prefix="pw."),
    }


def dwconv(x: Tensor, p: Mapping[str, Tensor], c_out: Optional[int] = None, k: int = 3) -> Tensor:
    c_in = x.shape[1]
    c_out = c_in if c_out is None else c_out
    h = conv(x, p, ConvSpec.depthwise(c_in, k), "dw.")
    return conv(h, p, ConvSpec.pointwise(c_in, c_out), "pw.")


def mlp_init(rng: np.random.Generator, c: int, hidden: int) -> Params:
    return {**linear_init(rng, hidden, c, prefix="fc1."), **linear_init(rng, c, hidden, prefix="fc2.")}


def mlp(v: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Two-layer perceptron with a ReLU hidden layer on (N, C) rows."""
    h = ops.relu(ops.linear(v, p["fc1.weight"], p["fc1.bias"]))
    return ops.linear(h, p["fc2.weight"], p["fc2.bias"])


def as_tensors(params: Mapping[str, np.ndarray]) -> Dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


class BNBank(dict):
    """Name -> :class:`BNState`; created lazily so module code can ask for a state by name."""

    def __init__(self, momentum: float = 0.1):
        super().__init__()
        self.momentum = momentum

    def get_state(self, name: str, channels: int) -> BNState:
        st = self.get(name)
        if st is None:
            st = BNState.fresh(channels, self.momentum)
            self[name] = st
        return st

    def scoped(self, prefix: str) -> "ScopedBN":
        return ScopedBN(self, prefix)


class ScopedBN:
    def __init__(self, bank: MutableMapping, prefix: str):
        self.bank, self.prefix = bank, prefix

    def get_state(self, name: str, channels: int) -> BNState:
        return self.bank.get_state(f"{self.prefix}.{name}", channels)

    def scoped(self, prefix: str) -> "ScopedBN":
        return ScopedBN(self.bank, f"{self.prefix}.{prefix}")
