"""Finite-difference suite: every registered op on small random instances, plus the
three fusion modules end to end.

Primitive ops are checked at ``PRIMITIVE_TOL`` and modules at ``MODULE_TOL``.
ReLU-like kinks (relu, max pooling) are kept away from the finite-difference
step by nudging inputs at least 1e-3 from zero or by spreading pooled values.
Modules are checked with BatchNorm in both Train and Eval mode (see :data:`MODULES`).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .autodiff import REGISTRY, apply, grad_check
from .cafm import cafm_forward, init_cafm
from .fdim import fdim_forward, init_fdim
from .layers import BNBank
from .mscfe import init_mscfe, mscfe_forward
from .ops import BNState, Mode
from .spectral import fft2, ifft2, spectral_scale
from .tensor import ConvSpec, PoolKind, Tensor
from .training import multilabel_soft_margin_loss

PRIMITIVE_TOL = 1e-5
MODULE_TOL = 1e-3
STEP = 1e-5

Case = Callable[[np.random.Generator], Tuple[Callable, Dict[str, np.ndarray], tuple]]


def _nudge(x: np.ndarray, gap: float = 1e-3) -> np.ndarray:
    small = np.abs(x) < gap
    return np.where(small, np.where(x >= 0, gap, -gap) * (1 + np.abs(x) / gap), x)


def _distinct(rng, shape) -> np.ndarray:
    """Values whose pairwise gaps exceed the finite-difference step (keeps max ties away)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 + rng.uniform(0, 0.001, n)).reshape(shape)


def _proj(out: Tensor, r: np.ndarray) -> Tensor:
    return ops.sum_all(apply("mul", out, Tensor._wrap(r)))


# -- primitive cases: each returns (graph, params, inputs) -----------------------

def _binary(name: str, b_shape):
    def case(rng):
        a = rng.standard_normal((2, 3, 4, 5))
        b = rng.standard_normal(b_shape)
        fn = ops.add if name == "add" else ops.mul
        return (lambda p: fn(p["a"], p["b"])), {"a": a, "b": b}, ()
    return case


def _conv(spec: ConvSpec, bias: bool, hw=(6, 7)):
    def case(rng):
        p = {"x": rng.standard_normal((2, spec.in_channels) + hw),
             "w": rng.standard_normal(spec.weight_shape)}
        if bias:
            p["b"] = rng.standard_normal(spec.out_channels)
        return (lambda q: ops.conv2d(q["x"], q["w"], q.get("b"), spec)), p, ()
    return case


def _pool(kind, **kw):
    def case(rng):
        x = _distinct(rng, (2, 3, 6, 6))
        return (lambda p: ops.pool2d(p["x"], kind, **kw)), {"x": x}, ()
    return case


def _cpool(kind):
    def case(rng):
        return (lambda p: ops.channel_pool(p["x"], kind)), {"x": _distinct(rng, (2, 4, 3, 5))}, ()
    return case


def _bn(mode: Mode):
    def case(rng):
        st = BNState(rng.standard_normal(3), rng.uniform(0.5, 2.0, 3))
        p = {"x": rng.standard_normal((4, 3, 3, 3)), "g": rng.standard_normal(3), "b": rng.standard_normal(3)}

        def graph(q):
            s = BNState(st.mean.copy(), st.var.copy())  # fresh copy: evaluations must not interact
            return ops.batchnorm2d(q["x"], q["g"], q["b"], s, mode)
        return graph, p, ()
    return case


def _matmul(a_shape, b_shape):
    def case(rng):
        return (lambda p: ops.matmul(p["a"], p["b"])), \
            {"a": rng.standard_normal(a_shape), "b": rng.standard_normal(b_shape)}, ()
    return case


def _fft2_case(rng):
    return (lambda p: fft2(p["x"])), {"x": rng.standard_normal((2, 2, 4, 6))}, ()


def _ifft2_case(rng):
    # ifft2 needs a Hermitian spectrum to stay real; perturb through a real-valued path
    def graph(p):
        z = spectral_scale(fft2(p["x"]), p["w"])
        return ifft2(z)
    return graph, {"x": rng.standard_normal((2, 3, 5, 4)), "w": rng.standard_normal((2, 3))}, ()


def _spectral_scale_case(rng):
    return (lambda p: spectral_scale(fft2(p["x"]), p["w"])), \
        {"x": rng.standard_normal((2, 3, 4, 4)), "w": rng.standard_normal((2, 3))}, ()


def _loss_case(rng):
    y = Tensor((rng.random((4, 5)) < 0.5).astype(np.float64))
    return (lambda p: multilabel_soft_margin_loss(p["x"], y)), {"x": 3 * rng.standard_normal((4, 5))}, ()


PRIMITIVES: Dict[str, List[Tuple[str, Case]]] = {
    "add": [("same shape", _binary("add", (2, 3, 4, 5))), ("per-channel", _binary("add", (1, 3, 1, 1))),
            ("per-position", _binary("add", (2, 1, 4, 5)))],
    "mul": [("same shape", _binary("mul", (2, 3, 4, 5))), ("per-channel", _binary("mul", (2, 3, 1, 1))),
            ("spatial map", _binary("mul", (2, 1, 4, 5))), ("shared map", _binary("mul", (1, 3, 4, 5)))],
    "scale": [("x*0.7", lambda r: ((lambda p: ops.scale(p["x"], 0.7)), {"x": r.standard_normal((3, 4))}, ()))],
    "add_bias": [("nchw", lambda r: ((lambda p: ops.add_bias(p["x"], p["b"])),
                                     {"x": r.standard_normal((2, 3, 2, 2)), "b": r.standard_normal(3)}, ()))],
    "add_last": [("rows", lambda r: ((lambda p: apply("add_last", p["x"], p["b"])),
                                     {"x": r.standard_normal((2, 3, 4)), "b": r.standard_normal(4)}, ()))],
    "conv2d": [("3x3 pad1", _conv(ConvSpec.square(3, 4, 3), True)),
               ("3x3 stride2", _conv(ConvSpec.square(2, 3, 3, stride=2), False)),
               ("7x7 2->1", _conv(ConvSpec.square(2, 1, 7), True, hw=(7, 7))),
               ("1x1", _conv(ConvSpec.pointwise(4, 3), True)),
               ("depthwise", _conv(ConvSpec.depthwise(4), True)),
               ("grouped", _conv(ConvSpec(4, 6, (3, 3), (1, 1), (1, 1), groups=2), True))],
    "pool2d": [("max 2x2", _pool(PoolKind.MAX, kernel=2)), ("avg 3x3/2", _pool(PoolKind.AVG, kernel=3, stride=2))],
    "global_pool": [("max", _pool(PoolKind.MAX, global_pool=True)), ("avg", _pool(PoolKind.AVG, global_pool=True))],
    "channel_pool": [("max", _cpool(PoolKind.MAX)), ("avg", _cpool(PoolKind.AVG))],
    "relu": [("nudged", lambda r: ((lambda p: ops.relu(p["x"])), {"x": _nudge(r.standard_normal((3, 5)))}, ()))],
    "sigmoid": [("wide", lambda r: ((lambda p: ops.sigmoid(p["x"])), {"x": 4 * r.standard_normal((3, 5))}, ()))],
    "softmax": [("axis1", lambda r: ((lambda p: ops.softmax(p["x"], axis=1)), {"x": r.standard_normal((3, 5))}, ())),
                ("axis-1", lambda r: ((lambda p: ops.softmax(p["x"], axis=-1)),
                                      {"x": r.standard_normal((2, 2, 3, 4))}, ()))],
    "batchnorm2d": [("train", _bn(Mode.TRAIN)), ("eval", _bn(Mode.EVAL))],
    "matmul": [("2d", _matmul((3, 4), (4, 2))), ("batched", _matmul((2, 3, 3, 4), (2, 3, 4, 2))),
               ("broadcast rhs", _matmul((2, 5, 3), (3, 4)))],
    "reshape": [("flatten", lambda r: ((lambda p: ops.reshape(p["x"], (2, 12))), {"x": r.standard_normal((2, 3, 2, 2))}, ()))],
    "transpose": [("perm", lambda r: ((lambda p: ops.transpose(p["x"], (0, 2, 3, 1))),
                                      {"x": r.standard_normal((2, 3, 2, 4))}, ()))],
    "concat_channels": [("2+3", lambda r: ((lambda p: ops.concat_channels(p["a"], p["b"])),
                                           {"a": r.standard_normal((2, 2, 3, 3)), "b": r.standard_normal((2, 3, 3, 3))}, ()))],
    "sum": [("all", lambda r: ((lambda p: ops.sum_all(p["x"])), {"x": r.standard_normal((2, 3, 4))}, ()))],
    "resize_bilinear": [("up", lambda r: ((lambda p: ops.resize_bilinear(p["x"], (5, 7))), {"x": r.standard_normal((1, 2, 3, 4))}, ())),
                        ("down", lambda r: ((lambda p: ops.resize_bilinear(p["x"], (2, 3))), {"x": r.standard_normal((1, 2, 5, 6))}, ()))],
    "fft2": [("4x6", _fft2_case)],
    "ifft2": [("hermitian path", _ifft2_case)],
    "spectral_scale": [("4x4", _spectral_scale_case)],
    "multilabel_soft_margin": [("random", _loss_case)],
}


# -- module cases ----------------------------------------------------------------

def _module_fdim(rng, cross: bool = False):
    params = {f"fdim.{k}": v for k, v in init_fdim(rng, 8, 4).items()}
    params["x"] = rng.standard_normal((2, 8, 4, 6))
    params["y"] = rng.standard_normal((2, 8, 4, 6))
    r1, r2 = rng.standard_normal((2, 8, 4, 6)), rng.standard_normal((2, 8, 4, 6))

    def graph(p):
        from .layers import scoped
        a, b = fdim_forward(p["x"], p["y"], scoped(p, "fdim"), cross_conditioning=cross)
        return ops.add(_proj(a, r1), _proj(b, r2))
    return graph, params, ()


def _module_mscfe(rng, last: bool, mode: Mode):
    c, h, w = 8, 4, 4
    params = {f"m.{k}": v for k, v in init_mscfe(rng, c, is_last_stage=last).items()}
    params["x"] = rng.standard_normal((2, c, h, w))
    params["y"] = rng.standard_normal((2, c, h, w))
    rs = [rng.standard_normal((2, c, h, w)) for _ in range(2)] + [rng.standard_normal((2, 1, h // 2, w // 2))
                                                                   for _ in range(2)]
    bank0 = BNBank()
    for v in ("ol", "sd"):
        bank0[f"{v}.bn"] = BNState(rng.standard_normal(c) * 0.1, rng.uniform(0.5, 2, c))

    def graph(p):
        from .layers import scoped
        bank = BNBank()
        for k, st in bank0.items():
            bank[k] = BNState(st.mean.copy(), st.var.copy())
        a, b, maps = mscfe_forward(p["x"], p["y"], scoped(p, "m"), bank, mode, heads=2, is_last_stage=last)
        out = ops.add(_proj(a, rs[0]), _proj(b, rs[1]))
        if maps is not None:
            out = ops.add(out, ops.add(_proj(maps.s_ol, rs[2]), _proj(maps.s_sd, rs[3])))
        return out
    return graph, params, ()


def _module_cafm(rng, mode: Mode):
    c, h, w = 16, 3, 4
    params = {f"c.{k}": v for k, v in init_cafm(rng, c, 8).items()}
    params["x"] = rng.standard_normal((3, c, h, w))
    params["y"] = rng.standard_normal((3, c, h, w))
    r = rng.standard_normal((3, c, h, w))
    st0 = BNState(rng.standard_normal(2 * c) * 0.1, rng.uniform(0.5, 2, 2 * c))

    def graph(p):
        from .layers import scoped
        bank = BNBank()
        bank["bn"] = BNState(st0.mean.copy(), st0.var.copy())
        return _proj(cafm_forward(p["x"], p["y"], scoped(p, "c"), bank, mode), r)
    return graph, params, ()


# In Train mode the attention output bias feeds BatchNorm directly, so its exact
# gradient is zero and the check compares rounding noise against the 1e-8 floor.
_TRAIN_BN_ZERO_GRAD = ("m.ol.attn.o.bias", "m.sd.attn.o.bias")

MODULES: Dict[str, Tuple[Callable, Optional[Sequence[str]]]] = {
    "fdim": (lambda r: _module_fdim(r), None),
    "fdim (cross-conditioned)": (lambda r: _module_fdim(r, cross=True), None),
    "mscfe (train BN)": (lambda r: _module_mscfe(r, False, Mode.TRAIN), _TRAIN_BN_ZERO_GRAD),
    "mscfe (eval BN)": (lambda r: _module_mscfe(r, False, Mode.EVAL), None),
    "mscfe (last stage)": (lambda r: _module_mscfe(r, True, Mode.TRAIN), _TRAIN_BN_ZERO_GRAD),
    "cafm (train BN)": (lambda r: _module_cafm(r, Mode.TRAIN), None),
    "cafm (eval BN)": (lambda r: _module_cafm(r, Mode.EVAL), None),
}


@dataclass
class SuiteRow:
    kind: str  # "op" | "module"
    name: str
    variant: str
    instances: int
    max_rel_err: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def uncovered_ops() -> List[str]:
    return sorted(set(REGISTRY) - set(PRIMITIVES))


def run_suite(instances: int = 20, seed: int = 0, h: float = STEP,
              primitive_tol: float = PRIMITIVE_TOL, module_tol: float = MODULE_TOL,
              module_instances: int = 2) -> List[SuiteRow]:
    rows: List[SuiteRow] = []
    for op_name, variants in PRIMITIVES.items():
        for k, (variant, case) in enumerate(variants):
            t0 = time.perf_counter()
            worst = 0.0
            for i in range(instances):
                rng = np.random.default_rng([seed, k, i, len(op_name)])
                graph, params, inputs = case(rng)
                rep = grad_check(lambda p, *a: graph(p), params, inputs, h=h, tol=primitive_tol, seed=i)
                worst = max(worst, rep.max_rel_err)
            rows.append(SuiteRow("op", op_name, variant, instances, worst, primitive_tol,
                                 time.perf_counter() - t0))
    for k, (name, (case, exclude)) in enumerate(MODULES.items()):
        t0 = time.perf_counter()
        worst = 0.0
        for i in range(module_instances):
            rng = np.random.default_rng([seed, 1000 + k, i])
            graph, params, inputs = case(rng)
            wrt = [n for n in params if not exclude or n not in exclude]
            rep = grad_check(lambda p, *a: graph(p), params, inputs, h=h, tol=module_tol, wrt=wrt, seed=i)
            worst = max(worst, rep.max_rel_err)
        rows.append(SuiteRow("module", name, "end-to-end", module_instances, worst, module_tol,
                             time.perf_counter() - t0))
    return rows


def format_table(rows: Sequence[SuiteRow]) -> str:
    lines = [f"{'kind':<7}{'name':<26}{'variant':<16}{'n':>4}{'max_rel_err':>14}{'tol':>9}  result"]
    for r in rows:
        lines.append(f"{r.kind:<7}{r.name:<26}{r.variant:<16}{r.instances:>4}{r.max_rel_err:>14.3e}"
                     f"{r.tol:>9.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
