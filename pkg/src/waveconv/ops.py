"""Dense tensor primitives: grouped convolution, pooling, and elementwise helpers.

All functions are pure and operate on plain numpy arrays in row-major,
channels-first layout ([C, spatial...] or [B, C, spatial...]).  Convolution
uses the correlation convention (no kernel flip), matching deep-learning
practice.  64-bit inputs are used on the test/oracle path; 32-bit is fine
for training.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with an operation."""


def _as_tuple(value, ndim: int, name: str) -> tuple[int, ...]:
    if isinstance(value, int):
        return (value,) * ndim
    out = tuple(int(v) for v in value)
    if len(out) != ndim:
        raise ShapeError(f"{name} must have {ndim} entries, got {len(out)}")
    return out


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a grouped cross-correlation.

    kernel/stride/padding carry one entry per spatial axis; padding counts
    zero cells added on each side.  Depthwise convolution is groups == input
    channels.
    """

    kernel: tuple[int, ...]
    stride: tuple[int, ...]
    padding: tuple[int, ...]
    groups: int = 1

    def __post_init__(self):
        ndim = len(self.kernel)
        if len(self.stride) != ndim or len(self.padding) != ndim:
            raise ShapeError(
                f"stride/padding rank must match kernel rank {ndim}: "
                f"got {len(self.stride)}/{len(self.padding)}"
            )
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ShapeError("kernel sizes and strides must be >= 1")
        if min(self.padding) < 0:
            raise ShapeError("padding must be >= 0")
        if self.groups < 1:
            raise ShapeError("groups must be >= 1")

    @property
    def ndim(self) -> int:
        return len(self.kernel)


def conv_spec(kernel, stride=1, padding=0, groups=1, ndim=None) -> ConvSpec:
    """Build a ConvSpec, broadcasting scalar kernel/stride/padding."""
    if ndim is None:
        if isinstance(kernel, int):
            raise ShapeError("ndim is required when kernel is a scalar")
        ndim = len(kernel)
    return ConvSpec(
        kernel=_as_tuple(kernel, ndim, "kernel"),
        stride=_as_tuple(stride, ndim, "stride"),
        padding=_as_tuple(padding, ndim, "padding"),
        groups=groups,
    )


def same_padding(kernel) -> tuple[int, ...]:
    """Padding that preserves spatial size at stride 1 (odd kernels only)."""
    ks = (kernel,) if isinstance(kernel, int) else tuple(kernel)
    if any(k % 2 == 0 for k in ks):
        raise ShapeError(f"same padding needs odd kernel sizes, got {ks}")
    return tuple((k - 1) // 2 for k in ks)


# --- MAC instrumentation ------------------------------------------------

class MacCounter:
    """Accumulates multiply-accumulate counts from conv/conv_transposed."""

    def __init__(self):
        self.macs = 0


_active = threading.local()


def _counters() -> list:
    stack = getattr(_active, "stack", None)
    if stack is None:
        stack = _active.stack = []
    return stack


@contextmanager
def count_macs():
    """Context manager yielding a MacCounter fed by enclosed convolutions."""
    counter = MacCounter()
    _counters().append(counter)
    try:
        yield counter
    finally:
        _counters().pop()


def _record_macs(n: int):
    for counter in _counters():
        counter.macs += n


# --- convolution ---------------------------------------------------------

def _split_batch(x: np.ndarray, ndim: int, what: str):
    if x.ndim == ndim + 2:
        return x, True
    if x.ndim == ndim + 1:
        return x[None], False
    raise ShapeError(
        f"{what} of rank {x.ndim} is incompatible with a {ndim}-d operation "
        f"(expected rank {ndim + 1} or {ndim + 2})"
    )


def conv_output_shape(spatial, spec: ConvSpec) -> tuple[int, ...]:
    out = tuple(
        (n + 2 * p - k) // s + 1
        for n, p, k, s in zip(spatial, spec.padding, spec.kernel, spec.stride)
    )
    if min(out) < 1:
        raise ShapeError(
            f"convolution output would be empty: input {tuple(spatial)} with "
            f"kernel {spec.kernel}, stride {spec.stride}, padding {spec.padding}"
        )
    return out


def _pad_spatial(x: np.ndarray, padding) -> np.ndarray:
    if not any(padding):
        return x
    lead = x.ndim - len(padding)
    width = [(0, 0)] * lead + [(p, p) for p in padding]
    return np.pad(x, width)


def _check_kernels(kernels: np.ndarray, cin: int, spec: ConvSpec):
    if kernels.ndim != spec.ndim + 2:
        raise ShapeError(
            f"kernel tensor must have rank {spec.ndim + 2} "
            f"[out, in/groups, kernel...], got rank {kernels.ndim}"
        )
    cout = kernels.shape[0]
    if cin % spec.groups or cout % spec.groups:
        raise ShapeError(
            f"channels in={cin}, out={cout} must be divisible by groups={spec.groups}"
        )
    if kernels.shape[1] != cin // spec.groups:
        raise ShapeError(
            f"kernels expect {kernels.shape[1]} input channels per group, "
            f"input provides {cin // spec.groups}"
        )
    if tuple(kernels.shape[2:]) != spec.kernel:
        raise ShapeError(
            f"kernel spatial shape {tuple(kernels.shape[2:])} does not match "
            f"spec kernel {spec.kernel}"
        )
    return cout


def _offset_slices(offset, stride, out_spatial):
    return tuple(
        slice(o, o + s * (n - 1) + 1, s)
        for o, s, n in zip(offset, stride, out_spatial)
    )


def conv(x: np.ndarray, kernels: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Grouped cross-correlation.

    x: [C, spatial...] or [B, C, spatial...]; kernels: [Cout, Cin/groups,
    kernel...].  Output spatial size per axis is (N + 2*pad - K)//S + 1; an
    empty output raises instead of returning a zero-size tensor.
    """
    x = np.asarray(x)
    kernels = np.asarray(kernels)
    xb, batched = _split_batch(x, spec.ndim, "conv input")
    b, cin = xb.shape[0], xb.shape[1]
    cout = _check_kernels(kernels, cin, spec)
    out_sp = conv_output_shape(xb.shape[2:], spec)
    g = spec.groups
    m, ci = cout // g, cin // g

    xp = _pad_spatial(xb, spec.padding)
    xg = xp.reshape(b, g, ci, *xp.shape[2:])
    kg = kernels.reshape(g, m, ci, *spec.kernel)
    dtype = np.result_type(x.dtype, kernels.dtype)
    out = np.zeros((b, g, m) + out_sp, dtype=dtype)

    lead = (slice(None),) * 3
    spatial_ones = (1,) * spec.ndim
    for offset in np.ndindex(*spec.kernel):
        xs = xg[lead + _offset_slices(offset, spec.stride, out_sp)]
        w = kg[(slice(None), slice(None), slice(None)) + offset]  # [g, m, ci]
        if ci == 1:
            out += xs * w.reshape((1, g, m) + spatial_ones)
        else:
            prod = np.matmul(
                w[None], xs.reshape(b, g, ci, -1)
            )  # [b, g, m, prod(out_sp)]
            out += prod.reshape(out.shape)

    _record_macs(b * cout * ci * math.prod(out_sp) * math.prod(spec.kernel))
    out = out.reshape((b, cout) + out_sp)
    return out if batched else out[0]


def conv_transposed(
    y: np.ndarray,
    kernels: np.ndarray,
    spec: ConvSpec,
    output_shape=None,
) -> np.ndarray:
    """Adjoint of conv with the same spec and kernels.

    For all compatible A, B: <conv(A, k), B> == <A, conv_transposed(B, k)>.
    output_shape fixes the spatial size of the result when the forward input
    size is not recoverable from floor division (defaults to the minimal
    compatible size).
    """
    y = np.asarray(y)
    kernels = np.asarray(kernels)
    yb, batched = _split_batch(y, spec.ndim, "conv_transposed input")
    b, cout = yb.shape[0], yb.shape[1]
    out_sp = yb.shape[2:]
    if output_shape is None:
        output_shape = tuple(
            (o - 1) * s + k - 2 * p
            for o, s, k, p in zip(out_sp, spec.stride, spec.kernel, spec.padding)
        )
    else:
        output_shape = tuple(int(n) for n in output_shape)
        if conv_output_shape(output_shape, spec) != tuple(out_sp):
            raise ShapeError(
                f"output_shape {output_shape} is inconsistent with input spatial "
                f"shape {tuple(out_sp)} under {spec}"
            )
    cin = kernels.shape[1] * spec.groups
    if kernels.shape[0] != cout:
        raise ShapeError(
            f"kernel tensor provides {kernels.shape[0]} output channels, "
            f"input has {cout}"
        )
    _check_kernels(kernels, cin, spec)
    g = spec.groups
    m, ci = cout // g, cin // g

    padded = tuple(n + 2 * p for n, p in zip(output_shape, spec.padding))
    dtype = np.result_type(y.dtype, kernels.dtype)
    buf = np.zeros((b, g, ci) + padded, dtype=dtype)
    yg = yb.reshape(b, g, m, *out_sp)
    kg = kernels.reshape(g, m, ci, *spec.kernel)

    lead = (slice(None),) * 3
    spatial_ones = (1,) * spec.ndim
    for offset in np.ndindex(*spec.kernel):
        w = kg[(slice(None), slice(None), slice(None)) + offset]  # [g, m, ci]
        if ci == 1 and m == 1:
            contrib = yg * w.reshape((1, g, m) + spatial_ones)
        else:
            contrib = np.matmul(
                np.swapaxes(w, 1, 2)[None], yg.reshape(b, g, m, -1)
            ).reshape((b, g, ci) + tuple(out_sp))
        buf[lead + _offset_slices(offset, spec.stride, out_sp)] += contrib

    _record_macs(b * cout * ci * math.prod(out_sp) * math.prod(spec.kernel))
    crop = tuple(slice(p, p + n) for p, n in zip(spec.padding, output_shape))
    out = buf.reshape((b, cin) + padded)[(slice(None), slice(None)) + crop]
    return out if batched else out[0]


def conv_kernel_grad(
    x: np.ndarray, grad: np.ndarray, spec: ConvSpec, kernel_shape
) -> np.ndarray:
    """Gradient of conv(x, kernels, spec) with respect to kernels."""
    x = np.asarray(x)
    grad = np.asarray(grad)
    xb, _ = _split_batch(x, spec.ndim, "conv input")
    gb, _ = _split_batch(grad, spec.ndim, "upstream gradient")
    b, cin = xb.shape[0], xb.shape[1]
    cout = gb.shape[1]
    out_sp = conv_output_shape(xb.shape[2:], spec)
    if tuple(gb.shape[2:]) != out_sp or gb.shape[0] != b:
        raise ShapeError(
            f"upstream gradient shape {grad.shape} does not match conv output"
        )
    g = spec.groups
    m, ci = cout // g, cin // g

    xp = _pad_spatial(xb, spec.padding)
    xg = xp.reshape(b, g, ci, *xp.shape[2:])
    gg = gb.reshape(b, g, m, -1)
    dk = np.zeros((g, m, ci) + spec.kernel, dtype=np.result_type(x, grad))
    lead = (slice(None),) * 3
    for offset in np.ndindex(*spec.kernel):
        xs = xg[lead + _offset_slices(offset, spec.stride, out_sp)]
        xs = xs.reshape(b, g, ci, -1)
        # sum over batch and output positions: [g, m, ci]
        dk[(slice(None), slice(None), slice(None)) + offset] = np.matmul(
            gg, np.swapaxes(xs, 2, 3)
        ).sum(axis=0)
    return dk.reshape(kernel_shape)


# --- pooling -------------------------------------------------------------

def avg_pool(x: np.ndarray, window) -> np.ndarray:
    """Mean over non-overlapping windows on the trailing axes.

    Every pooled axis must be divisible by its window (zero-pad to a
    multiple first, e.g. with pad_to_multiple, if it is not).
    """
    x = np.asarray(x)
    window = tuple(int(w) for w in window)
    nd = len(window)
    if x.ndim < nd:
        raise ShapeError(f"input rank {x.ndim} too small for window {window}")
    spatial = x.shape[-nd:]
    for n, w in zip(spatial, window):
        if w < 1:
            raise ShapeError("pooling window entries must be >= 1")
        if w > n:
            raise ShapeError(f"pooling window {w} larger than axis size {n}")
        if n % w:
            raise ShapeError(
                f"axis of size {n} is not divisible by window {w}; pad first"
            )
    lead = x.shape[:-nd]
    split = []
    for n, w in zip(spatial, window):
        split.extend((n // w, w))
    xr = x.reshape(lead + tuple(split))
    axes = tuple(len(lead) + 2 * i + 1 for i in range(nd))
    return xr.mean(axis=axes)


def pad_to_multiple(x: np.ndarray, multiple) -> np.ndarray:
    """Zero-pad the trailing axes at the far edge up to the next multiple."""
    multiple = tuple(int(m) for m in multiple)
    nd = len(multiple)
    spatial = x.shape[-nd:]
    extra = tuple((-n) % m for n, m in zip(spatial, multiple))
    if not any(extra):
        return x
    width = [(0, 0)] * (x.ndim - nd) + [(0, e) for e in extra]
    return np.pad(x, width)


# --- elementwise suite ---------------------------------------------------

def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"add requires equal shapes, got {a.shape} and {b.shape}")
    return a + b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x), 0)


def scale_per_channel(x: np.ndarray, factors: np.ndarray, channel_axis: int = 0):
    """Multiply each channel slice by its scalar factor."""
    x = np.asarray(x)
    factors = np.asarray(factors)
    if factors.ndim != 1 or factors.shape[0] != x.shape[channel_axis]:
        raise ShapeError(
            f"need one factor per channel: {factors.shape} vs "
            f"{x.shape[channel_axis]} channels"
        )
    shape = [1] * x.ndim
    shape[channel_axis] = factors.shape[0]
    return x * factors.reshape(shape)


def concat_channels(tensors, channel_axis: int = 0) -> np.ndarray:
    """Concatenate along the channel axis; all other dims must agree."""
    tensors = [np.asarray(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref):
            raise ShapeError("concat_channels requires equal ranks")
        for ax, (a, b) in enumerate(zip(ref, other)):
            if ax != channel_axis and a != b:
                raise ShapeError(
                    f"non-channel dims must agree: axis {ax} has {a} vs {b}"
                )
    return np.concatenate(tensors, axis=channel_axis)


def global_avg_pool(x: np.ndarray, channel_axis: int = 0) -> np.ndarray:
    """Mean over every axis after the channel axis."""
    x = np.asarray(x)
    axes = tuple(range(channel_axis + 1, x.ndim))
    if not axes:
        return x
    return x.mean(axis=axes)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b
