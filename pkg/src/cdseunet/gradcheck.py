"""Central finite-difference gradient checks for every differentiable piece.

Relative error is measured norm-wise over the checked coordinates:
``max|analytic - numeric| / max(max|numeric|, max|analytic|)``, and is 0 when
both are identically zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import ops
from .blocks import FusionBlock, MSConvBlock, SENetBlock
from .losses import bce_loss, combined_loss, dice_loss
from .model import ModelConfig, build
from .tensor import Param, Tensor, backward

OP_TOL = 1e-4
E2E_TOL = 1e-3
STEP = 1e-4
# the full model has thousands of ReLU/max-pool kinks; a 1e-4 step crosses some
E2E_STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def gradient_error(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    step: float = STEP,
    coords: Optional[Sequence[tuple]] = None,
) -> float:
    """Compare backprop against central differences.

    ``coords`` restricts the check to (tensor_index, flat_index) pairs;
    otherwise every element of every tensor is perturbed.
    """
    for t in tensors:
        t.grad = None
    backward(loss_fn())
    if coords is None:
        coords = [(k, i) for k, t in enumerate(tensors) for i in range(t.size)]
    analytic, numeric = [], []
    for k, i in coords:
        t = tensors[k]
        flat = t.data.reshape(-1)
        g = t.grad.reshape(-1)[i] if t.grad is not None else 0.0
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn().item()
        flat[i] = orig - step
        down = loss_fn().item()
        flat[i] = orig
        analytic.append(g)
        numeric.append((up - down) / (2 * step))
    return relative_error(np.array(analytic), np.array(numeric))


def _projected(out_fn: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    """Turn a tensor-valued function into a scalar via a fixed random projection."""
    cache = {}

    def loss():
        out = out_fn()
        if "w" not in cache:
            cache["w"] = Tensor(rng.standard_normal(out.shape))
        return ops.total(ops.mul(out, cache["w"]))

    return loss


def _leaf(rng, shape, away_from_zero: bool = False) -> Tensor:
    data = rng.standard_normal(shape)
    if away_from_zero:
        data = np.where(np.abs(data) < 0.05, np.sign(data) * 0.05 + data, data)
    return Tensor(data, requires_grad=True)


def op_checks(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    def run(name, out_fn, tensors):
        results.append(CheckResult(name, gradient_error(_projected(out_fn, rng), tensors), OP_TOL))

    x = _leaf(rng, (2, 3, 4, 4))
    w = _leaf(rng, (2, 3, 3, 3))
    b = _leaf(rng, (2,))
    run("conv2d k3 pad1", lambda: ops.conv2d(x, w, b, 1, 1), [x, w, b])
    run("conv2d k3 stride2", lambda: ops.conv2d(x, w, b, 2, 1), [x, w, b])
    w1 = _leaf(rng, (4, 3, 1, 1))
    run("conv2d k1", lambda: ops.conv2d(x, w1, None, 1, 0), [x, w1])

    gamma, beta = _leaf(rng, (3,)), _leaf(rng, (3,))
    rm, rv = np.zeros(3), np.ones(3)
    run("batchnorm2d train", lambda: ops.batchnorm2d(x, gamma, beta, rm, rv, True), [x, gamma, beta])
    rm2, rv2 = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    run("batchnorm2d eval", lambda: ops.batchnorm2d(x, gamma, beta, rm2, rv2, False), [x, gamma, beta])

    xr = _leaf(rng, (2, 3, 4, 4), away_from_zero=True)
    run("relu", lambda: ops.relu(xr), [xr])
    run("sigmoid", lambda: ops.sigmoid(x), [x])
    run("maxpool2d", lambda: ops.maxpool2d(x), [x])
    run("upsample2d", lambda: ops.upsample2d(x), [x])
    run("global_avg_pool", lambda: ops.global_avg_pool(x), [x])
    run("flatten", lambda: ops.flatten(x), [x])

    xl, wl, bl = _leaf(rng, (3, 4)), _leaf(rng, (2, 4)), _leaf(rng, (2,))
    run("linear", lambda: ops.linear(xl, wl, bl), [xl, wl, bl])
    y = _leaf(rng, (2, 2, 4, 4))
    run("concat_channels", lambda: ops.concat_channels(x, y), [x, y])
    s = _leaf(rng, (2, 3))
    run("scale_channels", lambda: ops.scale_channels(x, s), [x, s])
    x2 = _leaf(rng, (2, 3, 4, 4))
    run("mul", lambda: ops.mul(x, x2), [x, x2])
    run("add", lambda: ops.add(x, x2), [x, x2])
    run("slice_channels", lambda: ops.slice_channels(x, 1, 3), [x])
    return results



def block_checks(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    x = _leaf(rng, (2, 4, 4, 4))
    a = _leaf(rng, (2, 4, 4, 4))
    se = SENetBlock(4, rng, reduction=2, dtype=np.float64)
    results.append(CheckResult("senet", gradient_error(_projected(lambda: se(x), rng), [x] + se.parameters()), OP_TOL))
    for variant in ("simple", "single", "double"):
        fb = FusionBlock(4, variant, rng, reduction=2, dtype=np.float64)
        err = gradient_error(_projected(lambda: fb(x, a), rng), [x, a] + fb.parameters())
        results.append(CheckResult(f"fusion {variant}", err, OP_TOL))
    ms = MSConvBlock(4, 8, rng, dtype=np.float64)
    xm = _leaf(rng, (2, 4, 4, 4))
    err = gradient_error(_projected(lambda: ms(xm), rng), [xm] + ms.parameters())
    results.append(CheckResult("msconv", err, OP_TOL))
    return results


def loss_checks(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    logits = _leaf(rng, (2, 1, 4, 4))
    y = (rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64)
    results = []
    for name, fn in (("bce", bce_loss), ("dice", dice_loss), ("combined", lambda p, t: combined_loss(p, t).total)):
        err = gradient_error(lambda: fn(ops.sigmoid(logits), y), [logits])
        results.append(CheckResult(name, err, OP_TOL))
    return results


def model_check(seed: int = 0, samples: int = 10, batch: int = 4) -> CheckResult:
    """Tiny end-to-end model (16x16, base width 4) against 10 sampled coordinates."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(base_width=4, input_size=16, senet_reduction=2)
    model = build(cfg, seed=seed, dtype=np.float64)
    image = Tensor(rng.random((batch, 1, 16, 16)))
    # continuous edge input: binary maps create exact max-pool ties (kinks)
    edge = Tensor(rng.random((batch, 1, 16, 16)))
    target = (rng.random((batch, 1, 16, 16)) > 0.6).astype(np.float64)
    params = model.parameters()
    sizes = np.array([p.size for p in params], dtype=np.float64)
    chosen = rng.choice(len(params), size=samples, replace=False, p=sizes / sizes.sum())
    coords = [(int(k), int(rng.integers(params[k].size))) for k in chosen]
    err = gradient_error(lambda: combined_loss(model(image, edge), target).total, params, step=E2E_STEP, coords=coords)
    return CheckResult("end-to-end model", err, E2E_TOL)


def run_all(seed: int = 0) -> List[CheckResult]:
    return op_checks(seed) + block_checks(seed) + loss_checks(seed) + [model_check(seed)]
