"""Layer primitives with explicit forward and backward passes.

Every function is pure: caches needed by a backward pass (argmax maps, inputs)
are returned to or supplied by the caller rather than stored on an object. All
kernels preserve the dtype of their inputs, so the same code runs in float32
for training and float64 for gradient checking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor


class DegenerateOutputError(ValueError):
    pass


class ChannelMismatchError(ValueError):
    pass


@dataclass
class ConvParams:
    weights: Tensor  # [out_channels, in_channels, n, m]
    bias: Tensor  # [out_channels]
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ValueError(f"conv weights must be rank 4, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"conv bias shape {self.bias.shape} does not match {self.weights.shape[0]} filters"
            )
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid stride {self.stride} / padding {self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


@dataclass(frozen=True)
class PoolParams:
    window: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.window < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid pooling parameters {self}")
        if self.padding >= self.window:
            raise ValueError("pooling padding must be smaller than the window")


@dataclass(frozen=True)
class LrnParams:
    local_size: int = 5
    alpha: float = 1e-4
    beta: float = 0.75
    k: float = 1.0

    def __post_init__(self):
        if self.local_size < 1 or self.local_size % 2 == 0:
            raise ValueError(f"local_size must be odd and >= 1, got {self.local_size}")
        if self.beta <= 0 or self.k <= 0:
            raise ValueError("LRN requires beta > 0 and k > 0")


@dataclass
class FcParams:
    W: Tensor  # [out_dim, in_dim]
    bias: Tensor  # [out_dim]

    def __post_init__(self):
        if self.W.ndim != 2 or self.bias.shape != (self.W.shape[0],):
            raise ValueError(f"inconsistent fc shapes W={self.W.shape} bias={self.bias.shape}")

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


# ---------------------------------------------------------------- shapes

def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0:
        raise DegenerateOutputError(
            f"kernel {kernel} exceeds padded input {size + 2 * padding}"
        )
    return span // stride + 1


def pool_output_extent(size: int, window: int, stride: int, padding: int) -> int:
    """Ceil-rounded pooling extent; the last window must start inside the padded input."""
    span = size + 2 * padding - window
    out = -(-span // stride) + 1
    if (out - 1) * stride >= size + padding:
        out -= 1
    if out < 1:
        raise DegenerateOutputError(f"pooling window {window} leaves no output for size {size}")
    return out


def conv_output_shape(in_shape, out_channels, kernel, stride, padding):
    c, h, w = in_shape
    n, m = kernel
    return (
        out_channels,
        conv_output_extent(h, n, stride, padding),
        conv_output_extent(w, m, stride, padding),
    )


def pool_output_shape(in_shape, window, stride, padding):
    c, h, w = in_shape
    return (
        c,
        pool_output_extent(h, window, stride, padding),
        pool_output_extent(w, window, stride, padding),
    )


# ---------------------------------------------------------------- convolution

def _im2col(x: Tensor, n: int, m: int, stride: int, padding: int) -> tuple[Tensor, int, int]:
    c, h, w = x.shape
    ho = conv_output_extent(h, n, stride, padding)
    wo = conv_output_extent(w, m, stride, padding)
    if n == 1 and m == 1 and stride == 1 and padding == 0:
        return x.reshape(c, h * w), ho, wo
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (n, m), axis=(1, 2))[:, : (ho - 1) * stride + 1 : stride,
                                                      : (wo - 1) * stride + 1 : stride]
    # [C, Ho, Wo, n, m] -> [C, n, m, Ho, Wo]
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * n * m, ho * wo)
    return cols, ho, wo


def conv_forward(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlate ``x`` [C,H,W] with every filter and add the bias.

    out[o,u,v] = bias[o] + sum_{c,i,j} weights[o,c,i,j] * x_pad[c, u*stride+i, v*stride+j]
    """
    if x.ndim != 3:
        raise ValueError(f"conv input must be [C,H,W], got {x.shape}")
    if x.shape[0] != p.in_channels:
        raise ChannelMismatchError(
            f"conv expects {p.in_channels} input channels, got {x.shape[0]}"
        )
    n, m = p.kernel
    cols, ho, wo = _im2col(x, n, m, p.stride, p.padding)
    out = p.weights.reshape(p.out_channels, -1) @ cols
    out += p.bias[:, None]
    return out.reshape(p.out_channels, ho, wo)


def conv_backward(x: Tensor, p: ConvParams, grad_out: Tensor,
                  input_grad: bool = True) -> tuple[Tensor | None, Tensor, Tensor]:
    """Gradients with respect to input, weights and bias.

    ``input_grad=False`` skips the input gradient (returned as None), which the
    first layer of a network never needs.
    """
    c, h, w = x.shape
    n, m = p.kernel
    s, pad = p.stride, p.padding
    cols, ho, wo = _im2col(x, n, m, s, pad)
    if grad_out.shape != (p.out_channels, ho, wo):
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match conv output {(p.out_channels, ho, wo)}"
        )
    g = grad_out.reshape(p.out_channels, ho * wo)
    grad_w = (g @ cols.T).reshape(p.weights.shape)
    grad_b = g.sum(axis=1)
    if not input_grad:
        return None, grad_w, grad_b
    gcols = p.weights.reshape(p.out_channels, -1).T @ g
    if n == 1 and m == 1 and s == 1 and pad == 0:
        return gcols.reshape(x.shape), grad_w, grad_b
    gcols = gcols.reshape(c, n, m, ho, wo)
    gpad = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    for i in range(n):
        for j in range(m):
            gpad[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += gcols[:, i, j]
    grad_x = gpad[:, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


# ---------------------------------------------------------------- max pooling

def maxpool_forward(x: Tensor, p: PoolParams) -> tuple[Tensor, np.ndarray]:
    """Max over each window; returns the pooled tensor and the flat argmax index map.

    Padding cells never win. Ties resolve to the first cell in row-major order.
    """
    c, h, w = x.shape
    k, s, pad = p.window, p.stride, p.padding
    ho = pool_output_extent(h, k, s, pad)
    wo = pool_output_extent(w, k, s, pad)
    # trailing pad covers windows that ceil rounding pushes past the edge
    extra_h = max(0, (ho - 1) * s + k - h - pad)
    extra_w = max(0, (wo - 1) * s + k - w - pad)
    if pad or extra_h or extra_w:
        xp = np.pad(x, ((0, 0), (pad, extra_h), (pad, extra_w)), constant_values=-np.inf)
    else:
        xp = x
    best = np.full((c, ho, wo), -np.inf, dtype=x.dtype)
    which = np.zeros((c, ho, wo), dtype=np.int64)
    for di in range(k):
        for dj in range(k):
            cand = xp[:, di : di + s * (ho - 1) + 1 : s, dj : dj + s * (wo - 1) + 1 : s]
            better = cand > best
            np.copyto(best, cand, where=better)
            which[better] = di * k + dj
    rows = np.arange(ho)[:, None] * s - pad + which // k
    cols = np.arange(wo)[None, :] * s - pad + which % k
    argmax = rows * w + cols + (np.arange(c, dtype=np.int64) * (h * w))[:, None, None]
    return best, argmax


def maxpool_backward(argmax: np.ndarray, grad_out: Tensor, input_shape) -> Tensor:
    """Scatter ``grad_out`` onto the recorded argmax positions, summing overlaps."""
    if argmax.shape != grad_out.shape:
        raise ValueError(f"argmax map {argmax.shape} does not match grad_out {grad_out.shape}")
    size = int(np.prod(input_shape))
    acc = np.bincount(argmax.ravel(), weights=grad_out.ravel(), minlength=size)
    return acc.astype(grad_out.dtype, copy=False).reshape(input_shape)


# ---------------------------------------------------------------- relu

def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    if x.shape != grad_out.shape:
        raise ValueError(f"relu grad_out shape {grad_out.shape} != input shape {x.shape}")
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


# ---------------------------------------------------------------- local response normalization

def _channel_window_sum(v: Tensor, local_size: int) -> Tensor:
    half = local_size // 2
    c = v.shape[0]
    acc = v.copy()
    for off in range(1, half + 1):
        if off >= c:
            break
        acc[off:] += v[:-off]
        acc[:-off] += v[off:]
    return acc


def _lrn_scale(x: Tensor, p: LrnParams) -> Tensor:
    return p.k + (p.alpha / p.local_size) * _channel_window_sum(x * x, p.local_size)


def lrn_forward(x: Tensor, p: LrnParams) -> Tensor:
    """Across-channel LRN: x / (k + alpha/n * sum of squares over n neighbouring channels)^beta."""
    if x.ndim != 3:
        raise ValueError(f"lrn input must be [C,H,W], got {x.shape}")
    return x * _lrn_scale(x, p) ** -p.beta


def lrn_backward(x: Tensor, p: LrnParams, grad_out: Tensor) -> Tensor:
    scale = _lrn_scale(x, p)
    pow_b = scale ** -p.beta
    t = grad_out * x * pow_b / scale
    coeff = 2.0 * p.alpha * p.beta / p.local_size
    return (grad_out * pow_b - coeff * x * _channel_window_sum(t, p.local_size)).astype(x.dtype, copy=False)


# ---------------------------------------------------------------- fully connected

def fc_forward(x: Tensor, p: FcParams) -> Tensor:
    """Affine map W @ x + bias on the flattened input; the activation is the identity."""
    flat = x.reshape(-1)
    if flat.size != p.in_dim:
        raise ValueError(f"fc expects {p.in_dim} inputs, got {flat.size}")
    return p.W @ flat + p.bias


def fc_backward(x: Tensor, p: FcParams, grad_out: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    flat = x.reshape(-1)
    if flat.size != p.in_dim or grad_out.shape != (p.out_dim,):
        raise ValueError(
            f"fc backward shape mismatch: x has {flat.size} elements, grad_out {grad_out.shape}"
        )
    grad_x = (p.W.T @ grad_out).reshape(x.shape)
    grad_w = np.outer(grad_out, flat)
    return grad_x, grad_w, grad_out.copy()


# ---------------------------------------------------------------- output layer

def softmax(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(x - x.max())
    return e / e.sum()


def argmax_class(x: Tensor) -> int:
    """Index of the largest component; the lowest index wins ties."""
    if x.size == 0:
        raise ValueError("argmax of an empty vector")
    return int(np.argmax(x))


def log_softmax(x: Tensor) -> Tensor:
    shifted = x - x.max()
    return shifted - np.log(np.exp(shifted).sum())


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    tolerance: float
    worst_name: str | None = None
    worst_index: tuple[int, ...] | None = None
    analytic: float = 0.0
    numeric: float = 0.0
    checked: int = 0
    skipped: int = 0
    per_tensor: dict[str, float] = field(default_factory=dict)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        line = (f"{status} max_rel_err={self.max_rel_error:.3e} (tol {self.tolerance:.0e}, "
                f"{self.checked} coords")
        if self.skipped:
            line += f", {self.skipped} skipped near kinks"
        line += ")"
        if self.worst_name is not None:
            line += (f" worst at {self.worst_name}{list(self.worst_index)}: "
                     f"analytic={self.analytic:.6e} numeric={self.numeric:.6e}")
        return line


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def gradient_check(
    forward: Callable[[Mapping[str, Tensor]], Tensor],
    backward: Callable[[Mapping[str, Tensor], Tensor], Mapping[str, Tensor]],
    inputs: Mapping[str, Tensor],
    tolerance: float = 1e-4,
    eps: float = 1e-3,
    seed: int = 0,
    max_coords: int | None = None,
    signature: Callable[[Mapping[str, Tensor]], object] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    The scalar objective is ``sum(forward(inputs) * r)`` for a fixed random
    projection ``r``. ``inputs`` should be float64. With ``max_coords`` only a
    seeded sample of coordinates per tensor is probed. If ``signature`` is
    given, probes whose perturbed evaluations change it (a ReLU mask or pooling
    argmax flipped) straddle a kink and are skipped.
    """
    rng = np.random.default_rng(seed)
    values = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    out = forward(values)
    proj = rng.standard_normal(out.shape)
    analytic = backward(values, proj)
    base_sig = signature(values) if signature else None

    report = GradCheckReport(passed=True, max_rel_error=0.0, tolerance=tolerance)
    for name, arr in values.items():
        grad = np.asarray(analytic[name], dtype=np.float64)
        if grad.shape != arr.shape:
            raise ValueError(f"analytic gradient for {name} has shape {grad.shape}, expected {arr.shape}")
        coords = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            coords = np.sort(rng.choice(arr.size, size=max_coords, replace=False))
        worst_here = 0.0
        flat = arr.reshape(-1)
        for ci in coords:
            orig = flat[ci]
            flat[ci] = orig + eps
            f_plus = float(np.sum(forward(values) * proj))
            sig_plus = signature(values) if signature else None
            flat[ci] = orig - eps
            f_minus = float(np.sum(forward(values) * proj))
            sig_minus = signature(values) if signature else None
            flat[ci] = orig
            if signature and not (_same(sig_plus, base_sig) and _same(sig_minus, base_sig)):
                report.skipped += 1
                continue
            num = (f_plus - f_minus) / (2 * eps)
            ana = float(grad.reshape(-1)[ci])
            err = relative_error(ana, num)
            report.checked += 1
            worst_here = max(worst_here, err)
            if report.worst_name is None or err > report.max_rel_error:
                report.max_rel_error = err
                report.worst_name = name
                report.worst_index = tuple(int(i) for i in np.unravel_index(ci, arr.shape))
                report.analytic = ana
                report.numeric = num
        report.per_tensor[name] = worst_here
    report.passed = report.max_rel_error < tolerance
    return report


def _same(a, b) -> bool:
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def check_layer(kind: str, seed: int = 0, tolerance: float = 1e-4, eps: float = 1e-3) -> GradCheckReport:
    """Gradient check one primitive on a small random float64 problem.

    ``kind`` is one of conv, fc, lrn, maxpool, relu. Inputs are drawn away from
    the non-differentiable points of maxpool (ties) and relu (zero).
    """
    rng = np.random.default_rng(seed)
    if kind == "conv":
        inputs = {
            "x": rng.standard_normal((2, 5, 5)),
            "weights": rng.standard_normal((3, 2, 3, 3)),
            "bias": rng.standard_normal(3),
        }

        def fwd(v):
            return conv_forward(v["x"], ConvParams(v["weights"], v["bias"], stride=2, padding=1))

        def bwd(v, g):
            gx, gw, gb = conv_backward(v["x"], ConvParams(v["weights"], v["bias"], stride=2, padding=1), g)
            return {"x": gx, "weights": gw, "bias": gb}

    elif kind == "fc":
        inputs = {
            "x": rng.standard_normal((2, 3, 2)),
            "W": rng.standard_normal((4, 12)),
            "bias": rng.standard_normal(4),
        }

        def fwd(v):
            return fc_forward(v["x"], FcParams(v["W"], v["bias"]))

        def bwd(v, g):
            gx, gw, gb = fc_backward(v["x"], FcParams(v["W"], v["bias"]), g)
            return {"x": gx, "W": gw, "bias": gb}

    elif kind == "lrn":
        # large alpha so the normalizer is far from 1 and the check is meaningful
        p = LrnParams(local_size=3, alpha=0.5, beta=0.75, k=2.0)
        inputs = {"x": rng.standard_normal((4, 2, 2))}

        def fwd(v):
            return lrn_forward(v["x"], p)

        def bwd(v, g):
            return {"x": lrn_backward(v["x"], p, g)}

    elif kind == "maxpool":
        p = PoolParams(window=3, stride=1)
        # distinct values spaced well beyond eps, so no probe can reorder a window
        x = rng.permutation(36).reshape(1, 6, 6) * 0.05
        inputs = {"x": x}

        def fwd(v):
            return maxpool_forward(v["x"], p)[0]

        def bwd(v, g):
            _, am = maxpool_forward(v["x"], p)
            return {"x": maxpool_backward(am, g, v["x"].shape)}

    elif kind == "relu":
        mag = rng.uniform(0.1 + 2 * eps, 1.0, size=(2, 4, 4))
        inputs = {"x": mag * rng.choice([-1.0, 1.0], size=mag.shape)}

        def fwd(v):
            return relu_forward(v["x"])

        def bwd(v, g):
            return {"x": relu_backward(v["x"], g)}

    else:
        raise ValueError(f"unknown layer kind {kind!r}; expected one of {LAYER_KINDS}")
    return gradient_check(fwd, bwd, inputs, tolerance=tolerance, eps=eps, seed=seed)


LAYER_KINDS = ("conv", "fc", "lrn", "maxpool", "relu")


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32) -> Tensor:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)
