"""Finite-difference verification of every backward pass and loss gradient.

All suites run in float64 with central differences.  The error measure
for a gradient tensor is

    max_i |analytic_i - numeric_i| / max(scale, 1e-8)

with scale = the largest magnitude in either gradient, i.e. the
worst absolute deviation normalized by the gradient's own scale.  This
keeps components whose true derivative is 0 from drowning in
finite-difference roundoff.

The objective for layer ops is L = sum(d_out * op(x)) with a fixed
random d_out, whose analytic input gradient is exactly what backward
returns.  `fault` multiplies one suite's analytic gradients by 1.001
(1.01 for the sampled end-to-end suite, whose tolerance is 10x looser),
a regression canary proving the harness can actually fail.
"""

import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from . import layers, losses, model as model_mod
from .errors import DomainError
from .tensor import Tensor

FD_TOL = 1e-4
ADJOINT_TOL = 1e-6
MODEL_TOL = 1e-3

_SUITE_SEED_BASE = 7001   # local to gradcheck; keeps suites independent


def _rng(seed: int, suite: int, case: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, _SUITE_SEED_BASE, suite, case])))


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float) -> np.ndarray:
    """Central finite differences of scalar f with respect to array x in place."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def grad_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(analytic).max(initial=0.0)),
                float(np.abs(numeric).max(initial=0.0)), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def _t(arr: np.ndarray) -> Tensor:
    return Tensor(arr, copy=True, check=False)


@dataclass
class SuiteResult:
    name: str
    cases: int
    worst_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst_rel_err < self.tolerance


@dataclass
class GradcheckReport:
    results: List[SuiteResult]
    elapsed_s: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)


def _conv_case(rng, transpose: bool):
    B = int(rng.integers(1, 3))
    C = int(rng.integers(1, 4))
    O = int(rng.integers(1, 4))
    k = int(rng.choice([1, 2, 3]))
    s = int(rng.choice([1, 2]))
    p = int(rng.choice([0, 1])) if k > 1 else 0
    if transpose:
        h = int(rng.integers(2, 5))
        w = int(rng.integers(2, 5))
    else:
        # forward conv needs (dim + 2p - k) divisible by s
        h = w = 0
        while True:
            h = int(rng.integers(k, k + 6))
            w = int(rng.integers(k, k + 6))
            if (h + 2 * p - k) % s == 0 and (w + 2 * p - k) % s == 0 \
               and h + 2 * p >= k and w + 2 * p >= k:
                break
    x = rng.standard_normal((B, C, h, w))
    wt = rng.standard_normal((O, C, k, k))
    bias = rng.standard_normal(O)
    return x, wt, bias, s, p


def _check_conv(seed, eps, cases, transpose: bool, fault: Optional[str]):
    name = "convtranspose2d" if transpose else "conv2d"
    fwd = layers.convtranspose2d_forward if transpose else layers.conv2d_forward
    bwd = layers.convtranspose2d_backward if transpose else layers.conv2d_backward
    worst = 0.0
    for case in range(cases):
        rng = _rng(seed, 10 + transpose, case)
        x, wt, bias, s, p = _conv_case(rng, transpose)
        params = layers.ConvParams(_t(wt), bias.copy(), stride=s, padding=p)
        y = fwd(_t(x), params)
        d_out = rng.standard_normal(y.data.shape)

        def objective():
            pp = layers.ConvParams(_t(wt), bias, stride=s, padding=p)
            return float(np.sum(d_out * fwd(_t(x), pp).data))

        lg = bwd(_t(x), params, _t(d_out))
        dx, dw, db = lg.d_input.data.copy(), lg.d_weights.data.copy(), lg.d_bias.copy()
        if fault == name:
            dx = dx * 1.001
        worst = max(worst,
                    grad_error(dx, numeric_grad(objective, x, eps)),
                    grad_error(dw, numeric_grad(objective, wt, eps)),
                    grad_error(db, numeric_grad(objective, bias, eps)))
    return SuiteResult(name, cases, worst, FD_TOL)


def _check_maxpool(seed, eps, cases, fault):
    worst = 0.0
    for case in range(cases):
        rng = _rng(seed, 20, case)
        B, C = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        h, w = 2 * int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4))
        # spread values far apart so +/-eps cannot flip a window argmax
        x = rng.permutation(B * C * h * w).astype(np.float64).reshape(B, C, h, w)
        d_out_shape = (B, C, h // 2, w // 2)
        d_out = rng.standard_normal(d_out_shape)

        def objective():
            y, _ = layers.maxpool2x2_forward(_t(x))
            return float(np.sum(d_out * y.data))

        _, mask = layers.maxpool2x2_forward(_t(x))
        dx = layers.maxpool2x2_backward(mask, _t(d_out)).data.copy()
        if fault == "maxpool2x2":
            dx = dx * 1.001
        worst = max(worst, grad_error(dx, numeric_grad(objective, x, eps)))
    return SuiteResult("maxpool2x2", cases, worst, FD_TOL)


def _check_dropout(seed, eps, cases, fault):
    worst = 0.0
    for case in range(cases):
        rng = _rng(seed, 30, case)
        shape = (1, 2, int(rng.integers(2, 5)), int(rng.integers(2, 5)))
        x = rng.standard_normal(shape)
        d_out = rng.standard_normal(shape)
        mask_seed = int(rng.integers(0, 2 ** 31))

        def mask_rng():
            return np.random.Generator(np.random.PCG64(mask_seed))

        def objective():
            y, _ = layers.dropout(_t(x), 0.2, mask_rng(), training=True)
            return float(np.sum(d_out * y.data))

        _, keep = layers.dropout(_t(x), 0.2, mask_rng(), training=True)
        dx = layers.dropout_backward(_t(d_out), keep, 0.2).data.copy()
        if fault == "dropout":
            dx = dx * 1.001
        worst = max(worst, grad_error(dx, numeric_grad(objective, x, eps)))
    return SuiteResult("dropout", cases, worst, FD_TOL)


def _check_padcrop(seed, eps, cases, fault, crop: bool):
    name = "crop_rows" if crop else "zeropad_rows"
    worst = 0.0
    for case in range(cases):
        rng = _rng(seed, 40 + crop, case)
        top, bottom = int(rng.integers(0, 3)), int(rng.integers(0, 3))
        h = int(rng.integers(top + bottom + 1, top + bottom + 5))
        shape = (1, 2, h, int(rng.integers(2, 5)))
        x = rng.standard_normal(shape)
        if crop:
            fn = lambda t: layers.crop_rows(t, top, bottom)
            adj = lambda d: layers.zeropad_rows(d, top, bottom)
        else:
            fn = lambda t: layers.zeropad_rows(t, top, bottom)
            adj = lambda d: layers.crop_rows(d, top, bottom)
        d_out = rng.standard_normal(fn(_t(x)).data.shape)

        def objective():
            return float(np.sum(d_out * fn(_t(x)).data))

        dx = adj(_t(d_out)).data.copy()
        if fault == name:
            dx = dx * 1.001
        worst = max(worst, grad_error(dx, numeric_grad(objective, x, eps)))
    return SuiteResult(name, cases, worst, FD_TOL)


def _check_activation(seed, eps, cases, fault, which: str):
    worst = 0.0
    for case in range(cases):
        rng = _rng(seed, 50 + (which == "sigmoid"), case)
        shape = (1, 2, int(rng.integers(2, 5)), int(rng.integers(2, 5)))
        x = rng.standard_normal(shape) * 2.0
        if which == "relu":
            # keep samples off the kink; the subgradient there is a convention
            x = np.where(np.abs(x) < 0.05, 0.5, x)
        d_out = rng.standard_normal(shape)

        def objective():
            if which == "relu":
                return float(np.sum(d_out * layers.relu_forward(_t(x)).data))
            return float(np.sum(d_out * layers.sigmoid_forward(_t(x)).data))

        if which == "relu":
            dx = layers.relu_backward(_t(x), _t(d_out)).data.copy()
        else:
            y = layers.sigmoid_forward(_t(x))
            dx = layers.sigmoid_backward(y, _t(d_out)).data.copy()
        if fault == which:
            dx = dx * 1.001
        worst = max(worst, grad_error(dx, numeric_grad(objective, x, eps)))
    return SuiteResult(which, cases, worst, FD_TOL)


def _check_loss(seed, eps, cases, fault, which: str):
    fn = {"dice_loss": losses.dice_loss, "bce_loss": losses.bce_loss,
          "mse_loss": losses.mse_loss}[which]
    worst = 0.0
    for case in range(cases):
        rng = _rng(seed, 60 + ["dice_loss", "bce_loss", "mse_loss"].index(which), case)
        shape = (1, 1, int(rng.integers(2, 6)), int(rng.integers(2, 6)))
        p = (rng.random(shape) < 0.4).astype(np.float64)
        if p.sum() == 0:
            p.reshape(-1)[0] = 1.0
        # keep predictions off the [0,1] boundary so +/-eps stays in domain
        q = rng.uniform(0.02, 0.98, shape)

        def objective():
            return fn(_t(p), _t(q)).value

        dq = fn(_t(p), _t(q)).d_pred.data.copy()
        if fault == which:
            dq = dq * 1.001
        worst = max(worst, grad_error(dq, numeric_grad(objective, q, eps)))
    return SuiteResult(which, cases, worst, FD_TOL)


def _check_adjoint(seed, cases, fault):
    """<Conv(x), y> == <x, ConvT(y)> with shared weights and zero bias."""
    worst = 0.0
    for case in range(cases):
        rng = _rng(seed, 70, case)
        x, wt, _, s, p = _conv_case(rng, transpose=False)
        zero_bias = np.zeros(wt.shape[0])
        params = layers.ConvParams(_t(wt), zero_bias, stride=s, padding=p)
        cx = layers.conv2d_forward(_t(x), params)
        y = rng.standard_normal(cx.data.shape)
        # ConvT maps the conv's output space back to its input space, so
        # its own (out,in) orientation is the swap of the conv weights
        wt_t = np.ascontiguousarray(wt.transpose(1, 0, 2, 3))
        t_params = layers.ConvParams(_t(wt_t), np.zeros(wt.shape[1]),
                                     stride=s, padding=p)
        ty = layers.convtranspose2d_forward(_t(y), t_params)
        lhs = float(np.sum(cx.data * y))
        rhs = float(np.sum(x * ty.data))
        if fault == "adjoint":
            rhs *= 1.001
        worst = max(worst, abs(lhs - rhs) / (abs(lhs) + 1e-12))
    return SuiteResult("adjoint", cases, worst, ADJOINT_TOL)


def _check_model(seed, eps, fault, coords_per_tensor: int = 2):
    """End-to-end dice-loss gradient at a 16x32 reduced input, sampled coords.

    Runs at eps <= 1e-6: through 12 ReLUs and 3 pools a 1e-5 nudge on one
    weight shifts thousands of pre-activations, and any that cross zero
    contaminate the difference quotient.  Failing coordinates are retried
    with shrinking steps until the contamination decays; a coordinate whose
    FD never stabilizes sits on a kink and is skipped.  A wrong backward
    pass gives a stable, converged FD that still disagrees with the
    analytic value, so it is still caught.
    """
    eps = min(eps, 1e-6)
    graph, params32 = model_mod.build_model(seed, input_hw=(16, 32))
    params = {k: v.astype(np.float64) for k, v in params32.items()}
    rng = _rng(seed, 80, 0)
    x = _t(rng.random((1, 3, 16, 32)))
    p_mask = (rng.random((1, 1, 16, 32)) < 0.3).astype(np.float64)
    p_mask.reshape(-1)[0] = 1.0
    target = _t(p_mask)

    def loss_at() -> float:
        y, _ = model_mod.forward(graph, params, x, training=False)
        return losses.dice_loss(target, y).value

    y, tape = model_mod.forward(graph, params, x, training=False)
    d_y = losses.dice_loss(target, y).d_pred
    grads, _ = model_mod.backward(graph, tape, d_y)
    if fault == "model_end_to_end":
        grads = {k: v * 1.01 for k, v in grads.items()}

    def fd_at(flat, i, step) -> float:
        orig = flat[i]
        flat[i] = orig + step
        fp = loss_at()
        flat[i] = orig - step
        fm = loss_at()
        flat[i] = orig
        return (fp - fm) / (2.0 * step)

    worst = 0.0
    for name in params:
        flat = params[name].reshape(-1)
        gflat = grads[name].reshape(-1)
        scale = max(float(np.abs(gflat).max(initial=0.0)), 1e-8)
        n_coords = min(coords_per_tensor, flat.size)
        picks = set(rng.choice(flat.size, size=n_coords, replace=False).tolist())
        picks.add(int(np.abs(gflat).argmax()))   # largest-signal coordinate
        for i in sorted(picks):
            num = fd_at(flat, i, eps)
            err = abs(float(gflat[i]) - num) / scale
            if err >= MODEL_TOL:
                # Refine with shrinking steps: kink contamination decays with
                # the step size, a wrong backward disagrees at every step.
                # Bias coordinates need this most; one bias nudge shifts a
                # whole channel of pre-activations.
                prev, step = num, eps
                for _ in range(3):
                    step /= 4.0
                    prev, num = num, fd_at(flat, i, step)
                    err = abs(float(gflat[i]) - num) / scale
                    if err < MODEL_TOL:
                        break
                else:
                    if abs(num - prev) > 0.1 * max(abs(num), abs(prev), 1e-8):
                        continue   # FD never stabilized: sampling onto a kink
            worst = max(worst, err)
    return SuiteResult("model_end_to_end", 1, worst, MODEL_TOL)


SUITE_NAMES = ("conv2d", "convtranspose2d", "maxpool2x2", "dropout",
               "zeropad_rows", "crop_rows", "relu", "sigmoid",
               "dice_loss", "bce_loss", "mse_loss", "adjoint",
               "model_end_to_end")


def run_all(seed: int = 0, eps: float = 1e-5, cases: int = 20,
            fault: Optional[str] = None) -> GradcheckReport:
    """Run every suite; each layer type appears exactly once in the report."""
    if eps <= 0:
        raise DomainError(f"eps must be positive, got {eps}")
    if fault is not None and fault not in SUITE_NAMES:
        # a typo here would otherwise just report a clean pass
        raise DomainError(f"unknown fault target {fault!r}")
    start = time.monotonic()
    results = [
        _check_conv(seed, eps, cases, transpose=False, fault=fault),
        _check_conv(seed, eps, cases, transpose=True, fault=fault),
        _check_maxpool(seed, eps, cases, fault),
        _check_dropout(seed, eps, cases, fault),
        _check_padcrop(seed, eps, cases, fault, crop=False),
        _check_padcrop(seed, eps, cases, fault, crop=True),
        _check_activation(seed, eps, cases, fault, "relu"),
        _check_activation(seed, eps, cases, fault, "sigmoid"),
        _check_loss(seed, eps, cases, fault, "dice_loss"),
        _check_loss(seed, eps, cases, fault, "bce_loss"),
        _check_loss(seed, eps, cases, fault, "mse_loss"),
        _check_adjoint(seed, cases, fault),
        _check_model(seed, eps, fault),
    ]
    return GradcheckReport(results, time.monotonic() - start)


def format_report(report: GradcheckReport) -> str:
    lines = [f"{'suite':<20} {'cases':>5} {'worst rel err':>14} {'tol':>8}  status"]
    for r in report.results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name:<20} {r.cases:>5} {r.worst_rel_err:>14.3e} "
                     f"{r.tolerance:>8.0e}  {status}")
    lines.append(f"total {report.elapsed_s:.1f}s: "
                 + ("all suites passed" if report.passed else "FAILURES detected"))
    return "\n".join(lines)
