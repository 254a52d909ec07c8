"""Randomized finite-difference checks for every hand-written backward pass.

Each check draws a case from an ``Rng``, evaluates the analytic gradient and
compares it with central differences through ``net.fd_check``. Cases are only
drawn at differentiable points: sample coordinates at least ``LATTICE_MARGIN``
from the integer lattice, ``|z| >= Z_MARGIN``, and no kink crossed by the
finite-difference probes.

In f32 mode the analytic pass runs in float32 while the finite-difference
reference evaluates the forward in float64 at the same float32 inputs, so the
check measures the rounding cost of the float32 backward rather than the
noise of float32 differencing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import net, regionlet
from .geometry import cell_init_transforms
from .rng import Rng
from .sampler import (
    sample_backward_input,
    sample_backward_theta,
    sample_forward,
)

TOLERANCE = {"f64": 1e-3, "f32": 1e-2}
LAYER_TOLERANCE = 1e-5
LATTICE_MARGIN = 1e-3
Z_MARGIN = 0.1
EPS_INPUT = 1e-3
EPS_THETA = 1e-4
EPS_SMOOTH = 1e-5

DTYPES = {"f64": np.float64, "f32": np.float32}


@dataclass
class SamplerCase:
    U: np.ndarray
    theta: np.ndarray
    roi: np.ndarray
    H: int
    W: int
    grad_V: np.ndarray


def _lattice_distance(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    return float(np.abs(v - np.rint(v)).min())


def _cells(region) -> tuple[np.ndarray, np.ndarray]:
    rec = region.records
    return np.floor(rec.x_abs), np.floor(rec.y_abs)


def _is_smooth(U, theta, roi, H, W, eps) -> bool:
    region = sample_forward(U, theta, roi, H, W)
    src = region.source
    if np.abs(src.z).min() < Z_MARGIN:
        return False
    rec = region.records
    if min(_lattice_distance(rec.x_abs), _lattice_distance(rec.y_abs)) < LATTICE_MARGIN:
        return False
    base = _cells(region)
    for i in range(8):
        for sign in (1.0, -1.0):
            t = theta.astype(np.float64).copy()
            t[i] += sign * eps
            cx, cy = _cells(sample_forward(U, t.astype(theta.dtype), roi, H, W))
            if not (np.array_equal(cx, base[0]) and np.array_equal(cy, base[1])):
                return False
    return True


def random_sampler_case(rng: Rng, precision: str = "f64", max_tries: int = 1000) -> SamplerCase:
    """A random projective sampling problem at a differentiable point."""
    dtype = DTYPES[precision]
    for _ in range(max_tries):
        C = rng.integers(1, 4)
        Hin, Win = rng.integers(4, 10), rng.integers(4, 10)
        H, W = rng.integers(2, 6), rng.integers(2, 6)
        U = rng.normal_array((C, Hin, Win)).astype(dtype)
        cell = cell_init_transforms(2, 2)[rng.integers(0, 4)].theta
        theta = cell + np.concatenate([rng.uniform_array(6, -0.3, 0.3),
                                       rng.uniform_array(2, -0.4, 0.4), [0.0]])
        theta = theta.astype(dtype)
        w, h = rng.uniform(2.5, Win + 1.0), rng.uniform(2.5, Hin + 1.0)
        roi = np.array([rng.uniform(-1.0, Win - w + 1.0), rng.uniform(-1.0, Hin - h + 1.0), w, h])
        if not _is_smooth(U, theta, roi, H, W, EPS_THETA):
            continue
        grad_V = rng.normal_array((C, H, W)).astype(dtype)
        return SamplerCase(U, theta, roi, H, W, grad_V)
    raise RuntimeError("could not draw a differentiable sampler case")


def _loss(values, grad_V) -> float:
    return float((np.asarray(values, dtype=np.float64) * grad_V.astype(np.float64)).sum())


def check_sampler_input(case: SamplerCase) -> float:
    region = sample_forward(case.U, case.theta, case.roi, case.H, case.W)
    analytic = sample_backward_input(region, case.grad_V, *case.U.shape[1:])
    theta = case.theta.astype(np.float64)

    def f(u):
        return _loss(sample_forward(u, theta, case.roi, case.H, case.W).values, case.grad_V)

    return net.fd_check(f, case.U.astype(np.float64), analytic, EPS_INPUT)


def check_sampler_theta(case: SamplerCase) -> float:
    region = sample_forward(case.U, case.theta, case.roi, case.H, case.W)
    analytic = sample_backward_theta(region, case.U, case.grad_V)
    U = case.U.astype(np.float64)

    def f(t8):
        return _loss(sample_forward(U, np.append(t8, 1.0), case.roi, case.H, case.W).values,
                     case.grad_V)

    return net.fd_check(f, case.theta[:8].astype(np.float64), analytic, EPS_THETA)


# ---------------------------------------------------------------- regionlet stack


@dataclass
class StackCase:
    heads: list
    gate: regionlet.GatingLayer
    U: np.ndarray
    roi: np.ndarray
    x: np.ndarray
    H: int
    W: int
    pool_mode: str
    grad: np.ndarray


def _stack_forward(case: StackCase):
    return regionlet.regionlet_extract_forward(
        case.heads, case.gate, case.U, case.roi, case.x, case.H, case.W, case.pool_mode, True)


def _stack_is_smooth(case: StackCase, eps: float) -> bool:
    feat = _stack_forward(case)
    for st in feat.cache.states:
        rec = st.region.records
        if min(_lattice_distance(rec.x_abs), _lattice_distance(rec.y_abs)) < max(LATTICE_MARGIN, 100 * eps):
            return False
        if np.abs(st.region.source.z).min() < Z_MARGIN:
            return False
        if np.any(np.abs(np.abs(st.rsn.raw[..., :8]) - 1.0) < 1e-3):
            return False
        for pre in (st.rsn.fc2, st.rsn.h2):
            if np.any((np.abs(pre) < 1e-4) & (pre != 0)):
                return False
        if case.pool_mode == "max":
            flat = np.sort(st.gate.gated.reshape(st.gate.gated.shape[0], -1), axis=-1)
            if np.any(flat[:, -1] - flat[:, -2] < 1e-4):
                return False
    return True


def random_stack_case(rng: Rng, pool_mode: str = "max", C: int = 2, Hin: int = 6, K: int = 4,
                      H: int = 2, D: int = 6, max_tries: int = 200) -> StackCase:
    side = int(round(np.sqrt(K)))
    for _ in range(max_tries):
        heads = regionlet.rsn_init(K, D, side, K // side, rng.spawn())
        for head in heads:
            head.w3.value[:] = 0.01 * rng.normal_array(head.w3.shape)
            head.b3.value[6:8] = rng.uniform_array(2, -0.2, 0.2)
        gate = regionlet.gating_init(C, H, H, rng.spawn())
        gate.b.value[:] = rng.uniform_array(gate.b.shape, -0.5, 0.5)
        U = rng.normal_array((C, Hin, Hin))
        roi = np.array([rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0),
                        rng.uniform(3.5, Hin - 1.0), rng.uniform(3.5, Hin - 1.0)])
        x = rng.normal_array(D)
        case = StackCase(heads, gate, U, roi, x, H, H, pool_mode, rng.normal_array((K, C)))
        if _stack_is_smooth(case, 1e-6):
            return case
    raise RuntimeError("could not draw a differentiable regionlet case")


def _pick(rng: Rng, size: int, count: int) -> np.ndarray:
    if size <= count:
        return np.arange(size)
    return rng.permutation(size)[:count]


def check_regionlet_stack(case: StackCase, rng: Rng, per_tensor: int = 12, eps: float = 1e-6) -> float:
    """FD over U, roi features, gate parameters and a random subset of each
    head parameter tensor."""
    feat = _stack_forward(case)
    grads = regionlet.regionlet_extract_backward(feat, case.grad)

    def loss():
        return float((_stack_forward(case).pooled * case.grad).sum())

    targets = [(case.U, grads.U), (case.x, grads.roi_feature),
               (case.gate.w.value, grads.gate["w"]), (case.gate.b.value, grads.gate["b"])]
    for head, hg in zip(case.heads, grads.heads):
        for name, p in head.parameters().items():
            targets.append((p.value, hg[name]))
    worst = 0.0
    for arr, analytic in targets:
        idx = _pick(rng, arr.size, per_tensor)
        flat = arr.reshape(-1)
        orig = flat[idx].copy()

        def f(v, flat=flat, idx=idx):
            flat[idx] = v
            return loss()

        try:
            err = net.fd_check(f, orig, analytic.reshape(-1)[idx], eps)
        finally:
            flat[idx] = orig
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- layers


def _away_from_zero(rng: Rng, shape, margin: float = 1e-2) -> np.ndarray:
    x = rng.normal_array(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def layer_checks(rng: Rng) -> dict[str, float]:
    """FD errors for conv2d (strides 1, 2), fc, relu, sigmoid, softmax-CE and smooth-L1."""
    out = {}
    for stride in (1, 2):
        x = rng.normal_array((2, 2, 6, 7))
        w = rng.normal_array((3, 2, 3, 3))
        b = rng.normal_array(3)
        y, cache = net.conv2d_forward(x, w, b, stride)
        G = rng.normal_array(y.shape)
        gx, gw, gb = net.conv2d_backward(cache, G)
        err = max(
            net.fd_check(lambda v: float((net.conv2d_forward(v, w, b, stride)[0] * G).sum()), x, gx, EPS_SMOOTH),
            net.fd_check(lambda v: float((net.conv2d_forward(x, v, b, stride)[0] * G).sum()), w, gw, EPS_SMOOTH),
            net.fd_check(lambda v: float((net.conv2d_forward(x, w, v, stride)[0] * G).sum()), b, gb, EPS_SMOOTH),
        )
        out[f"conv2d.stride{stride}"] = err
    x = rng.normal_array((4, 5))
    w = rng.normal_array((5, 3))
    b = rng.normal_array(3)
    y, cache = net.fc_forward(x, w, b)
    G = rng.normal_array(y.shape)
    gx, gw, gb = net.fc_backward(cache, w, G)
    out["fc"] = max(
        net.fd_check(lambda v: float((net.fc_forward(v, w, b)[0] * G).sum()), x, gx, EPS_SMOOTH),
        net.fd_check(lambda v: float((net.fc_forward(x, v, b)[0] * G).sum()), w, gw, EPS_SMOOTH),
        net.fd_check(lambda v: float((net.fc_forward(x, w, v)[0] * G).sum()), b, gb, EPS_SMOOTH),
    )
    x = _away_from_zero(rng, (3, 4))
    G = rng.normal_array(x.shape)
    _, rc = net.relu_forward(x)
    out["relu"] = net.fd_check(lambda v: float((net.relu_forward(v)[0] * G).sum()), x,
                               net.relu_backward(rc, G), EPS_SMOOTH)
    x = 2.0 * rng.normal_array((3, 4))
    _, sc = net.sigmoid_forward(x)
    out["sigmoid"] = net.fd_check(lambda v: float((net.sigmoid_forward(v)[0] * G).sum()), x,
                                  net.sigmoid_backward(sc, G), EPS_SMOOTH)
    logits = rng.normal_array((5, 4))
    labels = np.array([rng.integers(0, 4) for _ in range(5)])
    _, g = net.softmax_ce(logits, labels)
    out["softmax_ce"] = net.fd_check(lambda v: net.softmax_ce(v, labels)[0], logits, g, EPS_SMOOTH)
    pred = rng.normal_array((3, 4)) * 2.0
    target = rng.normal_array((3, 4))
    d = pred - target
    pred = np.where(np.abs(np.abs(d) - 1.0) < 1e-2, pred + 0.05, pred)
    _, g = net.smooth_l1(pred, target)
    out["smooth_l1"] = net.fd_check(lambda v: net.smooth_l1(v, target)[0], pred, g, EPS_SMOOTH)
    return out


# ---------------------------------------------------------------- suite


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    cases: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<22} max_rel_err={self.max_error:.3e} "
                f"tol={self.tolerance:.0e} cases={self.cases}")


def run_suite(seed: int = 0, cases: int = 100, precision: str = "f64") -> list[CheckResult]:
    """Run every gradient check; sampler ops honour ``precision``, the
    regionlet stack and layers are float64-only."""
    if precision not in DTYPES:
        raise ValueError(f"precision must be one of {sorted(DTYPES)}")
    rng = Rng(seed)
    tol = TOLERANCE[precision]
    err_u = err_t = 0.0
    for _ in range(cases):
        case = random_sampler_case(rng, precision)
        err_u = max(err_u, check_sampler_input(case))
        err_t = max(err_t, check_sampler_theta(case))
    results = [
        CheckResult("sampler.input", err_u, tol, cases),
        CheckResult("sampler.theta", err_t, tol, cases),
    ]
    stack_cases = max(1, min(cases, 4))
    for mode in regionlet.POOL_MODES:
        worst = 0.0
        for _ in range(stack_cases):
            worst = max(worst, check_regionlet_stack(random_stack_case(rng, mode), rng))
        results.append(CheckResult(f"regionlet.stack.{mode}", worst, TOLERANCE["f64"], stack_cases))
    layer_errs: dict[str, float] = {}
    for _ in range(max(1, min(cases, 5))):
        for name, err in layer_checks(rng).items():
            layer_errs[name] = max(layer_errs.get(name, 0.0), err)
    for name, err in layer_errs.items():
        results.append(CheckResult(f"net.{name}", err, LAYER_TOLERANCE, max(1, min(cases, 5))))
    return results
