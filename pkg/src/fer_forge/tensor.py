"""Dense array kernels: convolution, max pooling and matrix multiply.

Tensors are plain numpy arrays in row-major (C) order. Training runs in
float32; gradient checking promotes to float64 because finite differences
are unreliable in single precision. Every kernel accepts a single sample
([C,H,W]) or a batch ([N,C,H,W]) and returns the matching rank.

Convolution has two implementations: a window-unrolling fast path used
everywhere, and a direct sliding-window loop kept as an independent
reference. The test suite asserts they agree.
"""

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names the offending axes."""


@dataclass(frozen=True)
class ConvGeometry:
    """Spatial geometry of a convolution: kernel size, stride and zero padding."""

    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ShapeError(f"kernel dims must be >= 1, got {self.kernel_h}x{self.kernel_w}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")

    def out_dim(self, in_dim: int, kernel: int) -> int:
        out = (in_dim + 2 * self.padding - kernel) // self.stride + 1
        if out < 1:
            raise ShapeError(
                f"geometry yields non-positive output dim: in={in_dim} "
                f"kernel={kernel} stride={self.stride} padding={self.padding}"
            )
        return out

    def out_hw(self, in_h: int, in_w: int) -> tuple[int, int]:
        return self.out_dim(in_h, self.kernel_h), self.out_dim(in_w, self.kernel_w)


def _as_batch(x: np.ndarray, name: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{name} must be [C,H,W] or [N,C,H,W], got shape {x.shape}")


def _check_conv_operands(x: np.ndarray, kernels: np.ndarray, geom: ConvGeometry):
    if kernels.ndim != 4:
        raise ShapeError(f"kernels must be [C_out,C_in,kh,kw], got shape {kernels.shape}")
    if x.shape[1] != kernels.shape[1]:
        raise ShapeError(
            f"input channel axis ({x.shape[1]}) does not match kernel C_in axis ({kernels.shape[1]})"
        )
    if (kernels.shape[2], kernels.shape[3]) != (geom.kernel_h, geom.kernel_w):
        raise ShapeError(
            f"kernel spatial axes {kernels.shape[2:]} do not match geometry "
            f"{(geom.kernel_h, geom.kernel_w)}"
        )


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _im2col(xp: np.ndarray, geom: ConvGeometry, oh: int, ow: int) -> np.ndarray:
    """Gather sliding windows of a padded batch into a [N*oh*ow, C*kh*kw] matrix.

    The window view is strided (no copy); the reshape performs the single
    gather copy, leaving the patch matrix gemm-ready.
    """
    s = geom.stride
    view = np.lib.stride_tricks.sliding_window_view(
        xp, (geom.kernel_h, geom.kernel_w), axis=(2, 3)
    )[:, :, ::s, ::s]
    view = view.transpose(0, 2, 3, 1, 4, 5)  # [N,oh,ow,C,kh,kw]
    return view.reshape(xp.shape[0] * oh * ow, -1)


def conv2d_forward(
    x: np.ndarray,
    kernels: np.ndarray,
    bias: np.ndarray,
    geom: ConvGeometry,
    _cols: np.ndarray | None = None,
) -> np.ndarray:
    """Cross-correlate ``x`` with ``kernels`` and add per-channel ``bias``.

    Each output element is the dot product of one kernel with the
    corresponding (zero-padded) input window plus that kernel's bias.
    ``_cols`` accepts a patch matrix from a previous call on the same input.
    """
    xb, squeeze = _as_batch(x, "input")
    _check_conv_operands(xb, kernels, geom)
    if bias.shape != (kernels.shape[0],):
        raise ShapeError(f"bias axis {bias.shape} does not match C_out ({kernels.shape[0]})")
    n = xb.shape[0]
    oh, ow = geom.out_hw(xb.shape[2], xb.shape[3])
    cols = _im2col(_pad(xb, geom.padding), geom, oh, ow) if _cols is None else _cols
    wmat = kernels.reshape(kernels.shape[0], -1)
    out = (cols @ wmat.T).reshape(n, oh, ow, kernels.shape[0])
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    out += bias[None, :, None, None]
    return out[0] if squeeze else out


def conv_patches(x: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Patch matrix of ``x`` under ``geom``, reusable across forward/backward."""
    xb, _ = _as_batch(x, "input")
    oh, ow = geom.out_hw(xb.shape[2], xb.shape[3])
    return _im2col(_pad(xb, geom.padding), geom, oh, ow)


def conv2d_forward_direct(
    x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, geom: ConvGeometry
) -> np.ndarray:
    """Sliding-window reference convolution. Slow; kept as an oracle."""
    xb, squeeze = _as_batch(x, "input")
    _check_conv_operands(xb, kernels, geom)
    oh, ow = geom.out_hw(xb.shape[2], xb.shape[3])
    xp = _pad(xb, geom.padding)
    n, c_out = xb.shape[0], kernels.shape[0]
    out = np.zeros((n, c_out, oh, ow), dtype=xb.dtype)
    for b in range(n):
        for co in range(c_out):
            for oy in range(oh):
                for ox in range(ow):
                    y0 = oy * geom.stride
                    x0 = ox * geom.stride
                    window = xp[b, :, y0 : y0 + geom.kernel_h, x0 : x0 + geom.kernel_w]
                    out[b, co, oy, ox] = np.sum(window * kernels[co]) + bias[co]
    return out[0] if squeeze else out


def conv2d_backward(
    x: np.ndarray,
    kernels: np.ndarray,
    geom: ConvGeometry,
    grad_out: np.ndarray,
    _cols: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a scalar loss through conv2d_forward.

    Returns (grad_input, grad_kernels, grad_bias) for upstream ``grad_out``.
    grad_kernels correlates the input windows with grad_out; grad_input
    scatters kernel-weighted grad_out back onto the (padded) input.
    ``_cols`` accepts the forward pass's patch matrix to skip the re-gather.
    """
    xb, squeeze = _as_batch(x, "input")
    gb_, gsqueeze = _as_batch(grad_out, "grad_out")
    _check_conv_operands(xb, kernels, geom)
    if squeeze != gsqueeze or xb.shape[0] != gb_.shape[0]:
        raise ShapeError(
            f"grad_out batch axis {grad_out.shape} does not match input {x.shape}"
        )
    n, c_out = xb.shape[0], kernels.shape[0]
    oh, ow = geom.out_hw(xb.shape[2], xb.shape[3])
    if gb_.shape != (n, c_out, oh, ow):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match conv output "
            f"{(n, c_out, oh, ow)}"
        )

    padded_h = xb.shape[2] + 2 * geom.padding
    padded_w = xb.shape[3] + 2 * geom.padding
    if _cols is None:
        _cols = _im2col(_pad(xb, geom.padding), geom, oh, ow)
    g2 = np.ascontiguousarray(gb_.transpose(0, 2, 3, 1)).reshape(-1, c_out)
    grad_kernels = (g2.T @ _cols).reshape(kernels.shape)
    grad_bias = gb_.sum(axis=(0, 2, 3))

    wmat = kernels.reshape(c_out, -1)
    gcols = (g2 @ wmat).reshape(n, oh, ow, xb.shape[1], geom.kernel_h, geom.kernel_w)
    gxp = np.zeros((n, xb.shape[1], padded_h, padded_w), dtype=xb.dtype)
    s = geom.stride
    for i in range(geom.kernel_h):
        for j in range(geom.kernel_w):
            gxp[:, :, i : i + s * oh : s, j : j + s * ow : s] += gcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    p = geom.padding
    grad_input = gxp[:, :, p : padded_h - p, p : padded_w - p] if p else gxp
    grad_input = np.ascontiguousarray(grad_input)
    if squeeze:
        grad_input = grad_input[0]
    return grad_input, grad_kernels.astype(kernels.dtype, copy=False), grad_bias


@dataclass(frozen=True)
class PoolIndexMap:
    """Winning flat input index per 2x2 window, plus the pooled input's shape."""

    indices: np.ndarray
    input_shape: tuple[int, ...]


def maxpool_forward(x: np.ndarray) -> tuple[np.ndarray, PoolIndexMap]:
    """2x2/stride-2 max pooling; odd trailing rows/columns are dropped.

    Returns the pooled tensor and the argmax map needed by the backward
    pass. Ties take the first element of the window in raster order.
    """
    xb, squeeze = _as_batch(x, "input")
    n, c, h, w = xb.shape
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"input spatial dims {h}x{w} too small for 2x2 pooling")
    xc = xb[:, :, : 2 * h2, : 2 * w2]
    windows = xc.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    local = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, local[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)

    rows = 2 * np.arange(h2)[None, None, :, None] + local // 2
    cols = 2 * np.arange(w2)[None, None, None, :] + local % 2
    chan = np.arange(n * c).reshape(n, c, 1, 1)
    flat = (chan * h + rows) * w + cols
    index_map = PoolIndexMap(indices=flat, input_shape=x.shape)
    return (out[0] if squeeze else out), index_map


def maxpool_backward(index_map: PoolIndexMap, grad_out: np.ndarray) -> np.ndarray:
    """Route each upstream gradient to its recorded argmax position."""
    idx = index_map.indices
    expected = idx.shape[1:] if len(index_map.input_shape) == 3 else idx.shape
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match pool map {expected}")
    grad_input = np.zeros(int(np.prod(index_map.input_shape)), dtype=grad_out.dtype)
    # stride equals window size, so window indices never collide
    grad_input[idx.ravel()] = grad_out.ravel()
    return grad_input.reshape(index_map.input_shape)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two 2-D tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"inner axes disagree: a columns ({a.shape[1]}) vs b rows ({b.shape[0]})"
        )
    return a @ b
