"""Finite-difference gradient checks over every differentiable building block.

Each case builds a scalar loss ``sum(out * R)`` with a fixed random ``R`` (a
plain sum would hide errors behind batch norm, whose output sums to a
constant) and compares reverse-mode gradients against central differences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn, ssm
from .model import ModelConfig, SSConvSSMBlock, build_model
from .ss2d import ss2d_forward
from .tensor import GradCheckReport, Tensor, as_tensor, elementwise, finite_diff_check, \
    inject_gradient_fault, matmul, reduce


@dataclass
class GradCase:
    name: str
    loss: Callable[[], Tensor]
    params: dict
    max_elements: int | None = None


def _p(rng, *shape, scale=1.0, offset=0.0) -> Tensor:
    return Tensor(offset + scale * rng.normal(size=shape), requires_grad=True)


def _case(name, fn, params, rng, max_elements=None) -> GradCase:
    R_rng = np.random.default_rng(rng.integers(1 << 31))
    probe = fn()
    R = R_rng.normal(size=probe.shape)
    return GradCase(name, lambda: (fn() * R).sum(), params, max_elements)


def op_cases(seed: int = 0) -> list[GradCase]:
    rng = np.random.default_rng(seed)
    cases = []
    a, b = _p(rng, 3, 4), _p(rng, 3, 4)
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    for kind in ("add", "sub", "mul"):
        cases.append(_case(kind, lambda k=kind: elementwise(k, a, b), {"a": a, "b": b}, rng))
    cases.append(_case("div", lambda: elementwise("div", a, pos), {"a": a, "b": pos}, rng))
    for kind in ("neg", "exp", "relu", "silu", "sigmoid", "softplus"):
        cases.append(_case(kind, lambda k=kind: elementwise(k, a), {"x": a}, rng))
    cases.append(_case("log", lambda: elementwise("log", pos), {"x": pos}, rng))
    cases.append(_case("power", lambda: pos ** -0.5, {"x": pos}, rng))
    v = _p(rng, 4)
    cases.append(_case("broadcast_add", lambda: a + v, {"a": a, "v": v}, rng))
    m1, m2 = _p(rng, 2, 3, 4), _p(rng, 4, 5)
    cases.append(_case("matmul", lambda: matmul(m1, m2), {"a": m1, "b": m2}, rng))
    cases.append(_case("reduce_sum", lambda: reduce("sum", m1, axis=1), {"x": m1}, rng))
    cases.append(_case("reduce_mean", lambda: reduce("mean", m1, axis=(0, 2), keepdims=True),
                       {"x": m1}, rng))

    x = _p(rng, 2, 3, 5, 4)
    W, bias = _p(rng, 4, 6, scale=0.5), _p(rng, 6)
    cases.append(_case("linear", lambda: nn.linear(x, W, bias), {"x": x, "W": W, "b": bias}, rng))
    xc = _p(rng, 2, 4, 5, 6)
    k3, kb = _p(rng, 4, 4, 3, 3, scale=0.3), _p(rng, 4)
    cases.append(_case("conv2d_3x3", lambda: nn.conv2d(xc, k3, kb, padding=1),
                       {"x": xc, "kernel": k3, "bias": kb}, rng))
    kdw = _p(rng, 4, 1, 3, 3, scale=0.3)
    cases.append(_case("conv2d_depthwise", lambda: nn.conv2d(xc, kdw, kb, padding=1, groups=4),
                       {"x": xc, "kernel": kdw, "bias": kb}, rng))
    kg = _p(rng, 4, 2, 3, 3, scale=0.3)
    cases.append(_case("conv2d_grouped_strided", lambda: nn.conv2d(xc, kg, None, stride=2, padding=1, groups=2),
                       {"x": xc, "kernel": kg}, rng))
    xp = _p(rng, 2, 1, 8, 8)
    kp = _p(rng, 3, 1, 4, 4, scale=0.3)
    cases.append(_case("conv2d_patch", lambda: nn.conv2d(xp, kp, None, stride=4), {"x": xp, "kernel": kp}, rng))
    bn = nn.BatchNorm2d(4)
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, 4)
    bn.beta.data[:] = rng.normal(size=4)
    cases.append(_case("batchnorm2d_train", lambda: nn.batchnorm2d(xc, bn, "train"),
                       {"x": xc, "gamma": bn.gamma, "beta": bn.beta}, rng))
    cases.append(_case("batchnorm2d_eval", lambda: nn.batchnorm2d(xc, bn, "eval"),
                       {"x": xc, "gamma": bn.gamma, "beta": bn.beta}, rng))
    g, be = _p(rng, 4, offset=1.0, scale=0.2), _p(rng, 4)
    cases.append(_case("layernorm", lambda: nn.layernorm(x, g, be), {"x": x, "gamma": g, "beta": be}, rng))
    cases.append(_case("channel_split_concat",
                       lambda: nn.channel_concat(*reversed(nn.channel_split(x))), {"x": x}, rng))
    cases.append(_case("channel_shuffle", lambda: nn.channel_shuffle(x, 2), {"x": x}, rng))
    cases.append(_case("permute_layout", lambda: nn.permute_layout(x, "channels_first"), {"x": x}, rng))
    cases.append(_case("global_avg_pool", lambda: nn.adaptive_global_avg_pool(x), {"x": x}, rng))
    logits = _p(rng, 5, 3)
    labels = rng.integers(0, 3, size=5)
    from .train import cross_entropy
    cases.append(_case("cross_entropy", lambda: cross_entropy(logits, labels), {"logits": logits}, rng))
    return cases


def ssm_cases(seed: int = 0) -> list[GradCase]:
    rng = np.random.default_rng(seed + 1)
    cases = []
    N, L, ch = 4, 7, 3
    A = Tensor(-rng.uniform(0.2, 2.0, size=(ch, N)), requires_grad=True)
    B = _p(rng, ch, N)
    C = _p(rng, ch, N)
    delta = Tensor(rng.uniform(0.05, 1.0, size=(ch, 1)), requires_grad=True)
    x = _p(rng, 2, L, ch)
    cases.append(_case("zoh_discretize", lambda: ssm.zoh_discretize(A, B, delta).B_bar,
                       {"A": A, "B": B, "delta": delta}, rng))
    cases.append(_case("ssm_recurrence",
                       lambda: ssm.ssm_recurrence(ssm.zoh_discretize(A, B, delta), C, x),
                       {"A": A, "B": B, "C": C, "delta": delta, "x": x}, rng))
    cases.append(_case("ssm_convolution",
                       lambda: ssm.ssm_apply_conv(x, ssm.ssm_conv_kernel(ssm.zoh_discretize(A, B, delta), C, L)),
                       {"A": A, "B": B, "C": C, "delta": delta, "x": x}, rng))

    Bn, K, d = 2, 2, 3
    u = _p(rng, Bn, K, L, d)
    dl = Tensor(rng.uniform(0.05, 1.0, size=(Bn, K, L, d)), requires_grad=True)
    As = Tensor(-rng.uniform(0.2, 2.0, size=(K, d, N)), requires_grad=True)
    Bs, Cs, Ds = _p(rng, Bn, K, L, N), _p(rng, Bn, K, L, N), _p(rng, K, d)
    params = {"u": u, "delta": dl, "A": As, "B": Bs, "C": Cs, "D": Ds}
    backends = ["numpy"] + (["numba"] if ssm._numba_available() else [])
    for be in backends:
        cases.append(_case(f"selective_scan[{be}]",
                           lambda be=be: ssm.selective_scan(u, dl, As, Bs, Cs, Ds, backend=be), params, rng))
    w = ssm.init_s6_weights(d, N, rng=rng)
    xs = _p(rng, 2, L, d)
    cases.append(_case("s6_selective_scan", lambda: ssm.s6_selective_scan(xs, w),
                       {"x": xs, **w.tensors()}, rng))
    w4 = ssm.init_s6_weights(d, N, copies=4, rng=rng)
    xm = _p(rng, 2, 3, 4, d)
    cases.append(_case("ss2d_forward", lambda: ss2d_forward(xm, w4), {"x": xm, **w4.tensors()}, rng))
    return cases


def model_cases(cfg: ModelConfig | None = None, seed: int = 0,
                max_elements: int | None = 4) -> list[GradCase]:
    """The SS-Conv-SSM block at full width on a small map, and the whole model on a tiny input."""
    cfg = cfg or ModelConfig()
    rng = np.random.default_rng(seed + 2)
    block = SSConvSSMBlock(cfg.base_dim, cfg.state_size, cfg.dt_rank, cfg.ssm_expand, cfg.d_skip,
                           rng=np.random.default_rng(seed))
    xb = _p(rng, 2, 3, 4, cfg.base_dim)
    cases = [_case("ss_conv_ssm_block", lambda: block(xb),
                   {"x": xb, **{f"block.{k}": v for k, v in block.named_parameters()}}, rng, max_elements)]
    model = build_model(cfg)
    xin = Tensor(rng.normal(size=(2, 8, 16)), requires_grad=True)
    cases.append(_case("model", lambda: model(xin),
                       {"input": xin, **{f"model.{k}": v for k, v in model.named_parameters()}},
                       rng, max_elements))
    tiny = build_model(ModelConfig(input_height=8, input_width=8, base_dim=8, state_size=4,
                                   init_seed=seed))
    xt = Tensor(rng.normal(size=(2, 8, 8)), requires_grad=True)
    cases.append(_case("model_tiny_c8_8x8", lambda: tiny(xt),
                       {"input": xt, **{f"tiny.{k}": v for k, v in tiny.named_parameters()}},
                       rng, None))
    return cases


def all_cases(cfg: ModelConfig | None = None, seed: int = 0) -> list[GradCase]:
    return op_cases(seed) + ssm_cases(seed) + model_cases(cfg, seed)


@dataclass
class SuiteResult:
    reports: dict          # case name -> GradCheckReport

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports.values())

    @property
    def failed_cases(self) -> list[str]:
        return [n for n, r in self.reports.items() if not r.passed]

    def lines(self) -> list[str]:
        out = []
        for name, r in self.reports.items():
            worst = max(r.errors, key=r.errors.get) if r.errors else "-"
            max_abs = max(r.abs_errors.values(), default=0.0)
            out.append(f"{'PASS' if r.passed else 'FAIL'} {name:28s} "
                       f"max_rel_err={r.max_error:.3e} max_abs_err={max_abs:.3e} ({worst})")
        return out


def run_suite(cases: list[GradCase], step: float = 1e-5, tolerance: float = 1e-4,
              inject_fault: str | None = None) -> SuiteResult:
    """Check every case; ``inject_fault`` names an op whose gradient rule is deliberately
    corrupted (negative control for the checker itself)."""
    reports: dict[str, GradCheckReport] = {}
    for case in cases:
        if inject_fault:
            with inject_gradient_fault(inject_fault):
                reports[case.name] = finite_diff_check(case.loss, case.params, step, tolerance,
                                                       max_elements=case.max_elements)
        else:
            reports[case.name] = finite_diff_check(case.loss, case.params, step, tolerance,
                                                   max_elements=case.max_elements)
    return SuiteResult(reports)
