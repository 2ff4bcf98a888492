"""Reverse-mode differentiation over registered operations.

Every differentiable primitive is registered once with a forward kernel and a
vector-Jacobian product.  :func:`apply` runs the kernel and, when a :class:`Tape`
is active on the current thread, appends a :class:`TapeNode`.  Because taped and
untaped evaluation share the same kernel call, a taped forward is bit-identical
to an untaped one.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .tensor import ComplexGrid, DimensionError, Tensor

Value = Tensor | ComplexGrid


class UnregisteredOpError(KeyError):
    pass


class NonFiniteError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Op:
    name: str
    forward: Callable[..., Tuple[np.ndarray, Any]]
    backward: Callable[..., Sequence[Optional[np.ndarray]]]
    flops: Optional[Callable[..., int]] = None
    complex_out: bool = False


REGISTRY: Dict[str, Op] = {}


def register(name: str, *, backward, flops=None, complex_out: bool = False):
    """Decorator registering ``forward(*arrays, **attrs) -> (out, saved)`` under ``name``.

    ``backward(grad, saved, **attrs)`` returns one gradient (or None) per input.
    """

    def deco(fwd):
        if name in REGISTRY:
            raise ValueError(f"op {name!r} registered twice")
        REGISTRY[name] = Op(name, fwd, backward, flops, complex_out)
        return fwd

    return deco


@dataclass
class TapeNode:
    op: str
    inputs: Tuple[Value, ...]
    saved: Any
    attrs: Dict[str, Any]
    output: Value

    @property
    def input_ids(self) -> Tuple[int, ...]:
        return tuple(id(v) for v in self.inputs)


class Tape:
    """Records applied ops in execution (hence topological) order."""

    def __init__(self) -> None:
        self.nodes: List[TapeNode] = []
        self.watched: Dict[str, Value] = {}

    def watch(self, name: str, value) -> Value:
        if not isinstance(value, (Tensor, ComplexGrid)):
            value = Tensor(value)
        if name in self.watched:
            raise ValueError(f"parameter {name!r} watched twice")
        self.watched[name] = value
        return value

    def __enter__(self) -> "Tape":
        _stack("tapes").append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack("tapes").pop()


class FlopCounter:
    """Accumulates per-op FLOPs of every op applied while active."""

    def __init__(self) -> None:
        self.by_op: Dict[str, int] = {}

    @property
    def total(self) -> int:
        return sum(self.by_op.values())

    def __enter__(self) -> "FlopCounter":
        _stack("counters").append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack("counters").pop()


_local = threading.local()


def _stack(kind: str) -> list:
    s = getattr(_local, kind, None)
    if s is None:
        s = []
        setattr(_local, kind, s)
    return s


def apply(name: str, *inputs: Value, **attrs) -> Value:
    try:
        op = REGISTRY[name]
    except KeyError:
        raise UnregisteredOpError(f"op {name!r} is not registered") from None
    arrays = [v.data for v in inputs]
    out, saved = op.forward(*arrays, **attrs)
    value = ComplexGrid._wrap(out) if op.complex_out else Tensor._wrap(out)
    tapes = _stack("tapes")
    if tapes:
        tapes[-1].nodes.append(TapeNode(name, inputs, saved, attrs, value))
    counters = _stack("counters")
    if counters and op.flops is not None:
        n = int(op.flops(arrays, out, **attrs))
        for c in counters:
            c.by_op[name] = c.by_op.get(name, 0) + n
    return value


class GradientMap(dict):
    """Parameter name -> gradient array (same shape as the parameter)."""


def forward(graph: Callable[..., Value], params: Mapping[str, Any], inputs: Iterable = ()):
    """Evaluate ``graph(params, *inputs)`` on a fresh tape; returns (output, tape)."""
    tape = Tape()
    with tape:
        p = {k: tape.watch(k, v) for k, v in params.items()}
        out = graph(p, *inputs)
    return out, tape


def evaluate(graph: Callable[..., Value], params: Mapping[str, Any], inputs: Iterable = ()) -> Value:
    p = {k: v if isinstance(v, (Tensor, ComplexGrid)) else Tensor(v) for k, v in params.items()}
    return graph(p, *inputs)


def backward(tape: Tape, seed, output: Optional[Value] = None,
             wrt: Optional[Iterable[str]] = None) -> GradientMap:
    """Gradients of ``<seed, output>`` with respect to the watched parameters.

    ``output`` defaults to the last recorded node's output.  Complex values use the
    convention grad = dL/dRe + i dL/dIm.
    """
    if not tape.nodes:
        raise ValueError("empty tape")
    if output is None:
        output = tape.nodes[-1].output
    seed = np.asarray(seed.data if isinstance(seed, (Tensor, ComplexGrid)) else seed)
    if seed.shape != output.shape:
        raise DimensionError(f"seed shape {seed.shape} != output shape {output.shape}")
    grads: Dict[int, np.ndarray] = {id(output): seed.astype(output.data.dtype)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        op = REGISTRY[node.op]
        in_grads = op.backward(g, node.saved, **node.attrs)
        for v, gi in zip(node.inputs, in_grads):
            if gi is None:
                continue
            if np.iscomplexobj(gi) and not np.iscomplexobj(v.data):
                gi = gi.real
            key = id(v)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    names = list(tape.watched) if wrt is None else list(wrt)
    out = GradientMap()
    for name in names:
        v = tape.watched[name]
        g = grads.get(id(v))
        out[name] = np.zeros(v.shape, dtype=v.data.dtype) if g is None else np.asarray(g).reshape(v.shape)
    return out


@dataclass
class ParamCheck:
    max_rel_err: float
    worst_index: Tuple[int, ...]
    n_checked: int


@dataclass
class GradCheckReport:
    tol: float
    h: float
    entries: Dict[str, ParamCheck] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _projection(out: Value, rng: np.random.Generator) -> np.ndarray:
    if out.data.size == 1:
        return np.ones(out.shape, dtype=out.data.dtype)
    s = rng.standard_normal(out.shape)
    if np.iscomplexobj(out.data):
        s = s + 1j * rng.standard_normal(out.shape)
    return s


def _pairing(seed: np.ndarray, out: Value) -> float:
    val = float(np.sum(seed.real * out.data.real) + np.sum(seed.imag * out.data.imag)) \
        if np.iscomplexobj(out.data) or np.iscomplexobj(seed) else float(np.sum(seed * out.data))
    if not np.isfinite(val):
        raise NonFiniteError("non-finite loss in gradient check")
    return val


def grad_check(graph, params: Mapping[str, Any], inputs: Iterable = (), h: float = 1e-5,
               tol: float = 1e-3, wrt: Optional[Iterable[str]] = None,
               max_coords: Optional[int] = None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central differences ``(f(θ+h) − f(θ−h)) / 2h``.

    The scalar checked is ``<s, graph(params)>`` for a fixed random projection ``s``
    (``s = 1`` for scalar outputs).  Parameters not listed in ``wrt`` are held
    constant and do not appear in the report.  ``max_coords`` samples at most that
    many coordinates per parameter.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    inputs = tuple(inputs)
    rng = np.random.default_rng(seed)
    base = {k: np.array(v.data if isinstance(v, (Tensor, ComplexGrid)) else v, dtype=np.float64)
            for k, v in params.items()}
    names = list(base) if wrt is None else list(wrt)

    out, tape = forward(graph, base, inputs)
    proj = _projection(out, rng)
    _pairing(proj, out)
    analytic = backward(tape, proj, output=out, wrt=names)

    def f(p):
        return _pairing(proj, evaluate(graph, p, inputs))

    report = GradCheckReport(tol=tol, h=h)
    for name in names:
        arr = base[name]
        idx_all = list(np.ndindex(arr.shape))
        if max_coords is not None and len(idx_all) > max_coords:
            pick = rng.choice(len(idx_all), size=max_coords, replace=False)
            idx_all = [idx_all[i] for i in sorted(pick)]
        worst, worst_idx = 0.0, ()
        for idx in idx_all:
            plus = dict(base)
            minus = dict(base)
            p_arr = arr.copy()
            p_arr[idx] += h
            m_arr = arr.copy()
            m_arr[idx] -= h
            plus[name], minus[name] = p_arr, m_arr
            num = (f(plus) - f(minus)) / (2 * h)
            a = float(analytic[name][idx])
            rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
            if rel > worst:
                worst, worst_idx = rel, idx
        report.entries[name] = ParamCheck(worst, worst_idx, len(idx_all))
    return report
