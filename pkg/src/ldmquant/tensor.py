"""Dense float64 kernels used to execute the toy UNet.

Tensors are plain ``numpy.ndarray`` objects in float64. Every kernel is a pure
function of its arguments and returns a fresh array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
GROUP_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when kernel operands have incompatible shapes."""


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.padding < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")

    def output_extent(self, extent: int) -> int:
        out = (extent + 2 * self.padding - self.kernel) // self.stride + 1
        if out < 1:
            raise ShapeError(
                f"spatial extent {extent} too small for kernel {self.kernel} "
                f"with padding {self.padding}"
            )
        return out


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None, spec: ConvSpec) -> np.ndarray:
    """2-D cross-correlation over an NCHW batch.

    Args:
        x: Input of shape ``[N, C, H, W]``.
        weight: Kernel of shape ``[C', C, k, k]``.
        bias: Optional bias of shape ``[C']``.
        spec: Channel counts, kernel size, stride and zero padding.

    Returns:
        Output of shape ``[N, C', H', W']``.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D [N,C,H,W], got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d input channels: expected {spec.in_channels}, got {x.shape[1]}")
    expected_w = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
    if weight.shape != expected_w:
        raise ShapeError(f"conv2d weight shape: expected {expected_w}, got {weight.shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"conv2d bias length: expected {spec.out_channels}, got {bias.shape}")
    h_out = spec.output_extent(x.shape[2])
    w_out = spec.output_extent(x.shape[3])

    p = spec.padding
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    k, s = spec.kernel, spec.stride
    # [N, C, H'', W'', k, k] -> keep every stride-th window
    patches = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :h_out, :w_out]
    out = np.tensordot(patches, weight, axes=([1, 4, 5], [1, 2, 3]))  # [N, H', W', C']
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    """``x @ weight.T + bias`` for ``x`` of shape ``[N, D]`` and weight ``[D', D]``."""
    if x.ndim != 2:
        raise ShapeError(f"linear input must be 2-D [N,D], got shape {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"linear inner dimension: input has D={x.shape[1]}, weight shape is {weight.shape}"
        )
    out = x @ weight.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear bias length: expected {weight.shape[0]}, got {bias.shape}")
        out += bias
    return out


def silu(x: np.ndarray) -> np.ndarray:
    # x * sigmoid(x), written with tanh so large |x| never overflows
    return 0.5 * x * (1.0 + np.tanh(0.5 * x))


def group_norm(
    x: np.ndarray,
    groups: int,
    gamma: np.ndarray,
    beta: np.ndarray,
    eps: float = GROUP_NORM_EPS,
) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"group_norm input must be 4-D [N,C,H,W], got shape {x.shape}")
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"group_norm: channels {c} not divisible by groups {groups}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm affine parameters must have length {c}")
    g = x.reshape(n, groups, -1)
    mean = g.mean(axis=2, keepdims=True)
    centered = g - mean
    var = (centered * centered).mean(axis=2, keepdims=True)
    normed = (centered / np.sqrt(var + eps)).reshape(n, c, h, w)
    return normed * gamma[None, :, None, None] + beta[None, :, None, None]


def resample(x: np.ndarray, mode: str) -> np.ndarray:
    """Nearest 2x upsampling (``up_nearest_2x``) or top-left stride-2 pick (``down_stride_2``)."""
    if x.ndim != 4:
        raise ShapeError(f"resample input must be 4-D [N,C,H,W], got shape {x.shape}")
    if mode == "up_nearest_2x":
        return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)
    if mode == "down_stride_2":
        h, w = x.shape[2:]
        if h % 2 or w % 2:
            raise ShapeError(f"down_stride_2 needs even spatial extents, got H={h}, W={w}")
        return np.ascontiguousarray(x[:, :, ::2, ::2])
    raise ValueError(f"unknown resample mode {mode!r}")


def combine(a: np.ndarray, b: np.ndarray, mode: str) -> np.ndarray:
    """Merge two tensors.

    ``add`` is an elementwise sum of equal shapes, ``concat_channels`` stacks along
    axis 1, and ``add_channel`` broadcasts a ``[N, C]`` vector over the spatial axes
    of an ``[N, C, H, W]`` map (used for timestep embeddings).
    """
    if mode == "add":
        if a.shape != b.shape:
            raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
        return a + b
    if mode == "concat_channels":
        if a.ndim != b.ndim or a.ndim < 2:
            raise ShapeError(f"concat needs tensors of equal rank >= 2, got {a.shape} and {b.shape}")
        if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
            raise ShapeError(
                f"concat needs matching batch and spatial dims, got {a.shape} and {b.shape}"
            )
        return np.concatenate([a, b], axis=1)
    if mode == "add_channel":
        if a.ndim != 4 or b.shape != a.shape[:2]:
            raise ShapeError(f"add_channel needs [N,C,H,W] and [N,C], got {a.shape} and {b.shape}")
        return a + b[:, :, None, None]
    raise ValueError(f"unknown combine mode {mode!r}")
