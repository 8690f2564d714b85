"""Finite-difference verification of every hand-written backward pass.

All checks run in float64 with central differences (default h = 1e-6); the
reported error is the largest absolute deviation normalized by the largest
gradient magnitude. Dropout layers are checked under a pinned mask so the
perturbed forward passes stay deterministic.
"""

from dataclasses import dataclass

import numpy as np

from .layers import Layer, LayerSpec
from .models import ARCHITECTURE_SPECS
from .seeding import derive_seed

DEFAULT_H = 1e-6
DEFAULT_TOLERANCE = 1e-5


def fd_gradient(f, arr: np.ndarray, h: float = DEFAULT_H) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.ravel(), grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f()
        flat[i] = orig - h
        f_minus = f()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max deviation scaled by the largest gradient magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_layer_detailed(
    layer: Layer, in_shape: tuple[int, ...], seed: int, h: float = DEFAULT_H
) -> tuple[float, str]:
    """Max relative FD error over a layer's gradients, plus which one it was.

    The scalar objective is a random projection of the output, plus the
    layer's own L2 penalty so regularized gradients are exercised too.
    Returns (error, gradient label) where the label is "input" or "param N".
    """
    out_shape = layer.build(in_shape, np.random.default_rng(derive_seed(seed, "build")))
    for i, p in enumerate(layer.params):
        layer.params[i] = p.astype(np.float64)
        layer.grads[i] = np.zeros_like(layer.params[i])

    x = np.random.default_rng(derive_seed(seed, "input")).standard_normal(in_shape)
    proj = np.random.default_rng(derive_seed(seed, "proj")).standard_normal(out_shape)
    mask_seed = derive_seed(seed, "mask")

    def objective() -> float:
        out = layer.forward(x, True, np.random.default_rng(mask_seed))
        value = float(np.sum(out * proj))
        for penalty, w in layer.l2_terms():
            value += penalty * float(np.sum(w * w))
        return value

    objective()  # populate caches for the analytic pass
    analytic_x = layer.backward(proj.copy())
    analytic_params = [g.copy() for g in layer.grads]

    worst = relative_error(analytic_x, fd_gradient(objective, x, h))
    worst_part = "input"
    for i, (analytic, param) in enumerate(zip(analytic_params, layer.params)):
        err = relative_error(analytic, fd_gradient(objective, param, h))
        if err > worst:
            worst, worst_part = err, f"param {i}"
    return worst, worst_part


def check_layer(layer: Layer, in_shape: tuple[int, ...], seed: int, h: float = DEFAULT_H) -> float:
    return check_layer_detailed(layer, in_shape, seed, h)[0]


_TOY_INPUTS = {
    "conv2d": (2, 12, 12),
    "maxpool2d": (2, 12, 12),
    "relu": (2, 12, 12),
    "dropout": (2, 12, 12),
    "flatten": (2, 6, 6),
    "dense": (24,),
    "softmax": (7,),
}


def _toy_twin(spec: LayerSpec) -> LayerSpec:
    hyper = dict(spec.hyper)
    if spec.kind == "conv2d":
        hyper["filters"] = min(hyper.get("filters", 8), 8)
    elif spec.kind == "dense":
        hyper["units"] = min(hyper.get("units", 8), 8)
    return LayerSpec(spec.kind, hyper)


@dataclass
class LayerResult:
    label: str
    error: float
    worst_part: str


@dataclass
class GradcheckReport:
    entries: list[LayerResult]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e.error < self.tolerance for e in self.entries)

    @property
    def worst(self) -> LayerResult:
        return max(self.entries, key=lambda e: e.error)


def gradcheck_architecture(
    model_name: str,
    seed: int = 42,
    tolerance: float = DEFAULT_TOLERANCE,
    corrupt_layer: int | None = None,
) -> GradcheckReport:
    """Finite-difference check of every layer of an architecture at toy sizes.

    Each layer is rebuilt as a small twin (channels and units capped at 8,
    spatial extent 12x12) and checked independently. ``corrupt_layer`` is a
    test hook that perturbs that layer's analytic input gradient so the
    harness can prove it catches a broken backward pass.
    """
    if model_name not in ARCHITECTURE_SPECS:
        raise ValueError(f"unknown architecture {model_name!r}")
    entries = []
    for idx, spec in enumerate(ARCHITECTURE_SPECS[model_name]()):
        twin = _toy_twin(spec)
        layer = twin.materialize()
        if corrupt_layer == idx:
            original = layer.backward

            def corrupted(grad, _orig=original):
                out = _orig(grad)
                out = out.copy()
                out.ravel()[0] += 1e-2
                return out

            layer.backward = corrupted
        err, part = check_layer_detailed(
            layer, _TOY_INPUTS[spec.kind], derive_seed(seed, "layer", idx)
        )
        detail = ",".join(f"{k}={v}" for k, v in spec.hyper.items())
        label = f"{idx:02d}:{spec.kind}({detail})" if detail else f"{idx:02d}:{spec.kind}"
        entries.append(LayerResult(label, err, part))
    return GradcheckReport(entries, tolerance)
