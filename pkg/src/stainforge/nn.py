"""Differentiable operator kit used by the generator and discriminators.

Thin, contract-checked layer over torch tensors: strided and
fractionally-strided convolution, instance normalisation, activations,
a from-scratch RoIAlign, the reverse-mode gradient entry point, the
Adam update and the binary checkpoint format.  Every forward op
validates shapes and raises on non-finite outputs instead of letting
NaNs propagate through an adversarial run.

Tensors follow the (N, C, H, W) layout.  Training runs in float32;
gradient-check suites run the same ops in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F


class ShapeMismatchError(ValueError):
    """Operand shapes are inconsistent with the operator contract."""


class NonFiniteValueError(FloatingPointError):
    """An operator produced NaN or Inf values."""


class NonScalarLossError(ValueError):
    """backward() requires a scalar loss node."""


class InvalidBoxError(ValueError):
    """A region box is degenerate or indexes outside the batch."""


class CheckpointFormatError(ValueError):
    """Checkpoint file is malformed or has an unsupported version."""


@dataclass(frozen=True)
class BoxSpec:
    """Axis-aligned box in input-image pixel units for one batch sample."""

    batch_index: int
    x0: float
    y0: float
    x1: float
    y1: float

    def validate(self, batch_size: int) -> None:
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise InvalidBoxError(f"degenerate box {self}")
        if not (0 <= self.batch_index < batch_size):
            raise InvalidBoxError(
                f"batch_index {self.batch_index} outside batch of {batch_size}"
            )


def _require_4d(x: torch.Tensor, op: str) -> None:
    if x.dim() != 4:
        raise ShapeMismatchError(f"{op}: expected a 4-D (N,C,H,W) tensor, got {tuple(x.shape)}")


def _check_finite(x: torch.Tensor, op: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteValueError(f"{op} produced non-finite values")
    return x


def conv2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    stride: int = 1,
    pad: int = 0,
) -> torch.Tensor:
    """Strided 2-D convolution with zero padding.

    Output spatial dims are floor((H + 2*pad - kH)/stride) + 1.
    """
    _require_4d(x, "conv2d")
    _require_4d(weight, "conv2d weight")
    if weight.shape[1] != x.shape[1]:
        raise ShapeMismatchError(
            f"conv2d: weight expects {weight.shape[1]} input channels, got {x.shape[1]}"
        )
    if x.shape[2] + 2 * pad < weight.shape[2] or x.shape[3] + 2 * pad < weight.shape[3]:
        raise ShapeMismatchError("conv2d: kernel larger than padded input")
    out = F.conv2d(x, weight, bias, stride=stride, padding=pad)
    return _check_finite(out, "conv2d")


def conv_transpose2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    stride: int = 1,
    pad: int = 0,
) -> torch.Tensor:
    """Fractionally-strided convolution (gradient of conv2d w.r.t. input).

    Output spatial dims are (H - 1)*stride - 2*pad + kH.
    """
    _require_4d(x, "conv_transpose2d")
    _require_4d(weight, "conv_transpose2d weight")
    if weight.shape[0] != x.shape[1]:
        raise ShapeMismatchError(
            f"conv_transpose2d: weight expects {weight.shape[0]} input channels, got {x.shape[1]}"
        )
    out = F.conv_transpose2d(x, weight, bias, stride=stride, padding=pad)
    return _check_finite(out, "conv_transpose2d")


def instance_norm(
    x: torch.Tensor,
    gamma: torch.Tensor,
    beta: torch.Tensor,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Per-(sample, channel) normalisation over H x W with affine terms."""
    _require_4d(x, "instance_norm")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeMismatchError(
            f"instance_norm: affine terms must have shape ({x.shape[1]},)"
        )
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    y = (x - mean) / torch.sqrt(var + eps)
    out = y * gamma.view(1, -1, 1, 1) + beta.view(1, -1, 1, 1)
    return _check_finite(out, "instance_norm")


def relu(x: torch.Tensor) -> torch.Tensor:
    return _check_finite(F.relu(x), "relu")


def leaky_relu(x: torch.Tensor, slope: float = 0.2) -> torch.Tensor:
    return _check_finite(F.leaky_relu(x, slope), "leaky_relu")


def tanh(x: torch.Tensor) -> torch.Tensor:
    return _check_finite(torch.tanh(x), "tanh")


def reflection_pad(x: torch.Tensor, pad: int) -> torch.Tensor:
    _require_4d(x, "reflection_pad")
    return F.pad(x, (pad, pad, pad, pad), mode="reflect")


def roi_align(
    features: torch.Tensor,
    boxes: Sequence[BoxSpec],
    out_size: tuple,
    spatial_scale: float,
    samples_per_bin: int = 2,
) -> torch.Tensor:
    """Quantisation-free pooling of boxes to a fixed (p, p) grid.

    Box coordinates are scaled into feature-map units without rounding;
    each output bin averages samples_per_bin^2 bilinear samples taken at
    regularly spaced points inside the bin.  Pixel centres sit at
    half-integer coordinates, and samples outside the feature map read
    zero.  Returns a (K, C, p, p) tensor ordered like ``boxes``.
    """
    _require_4d(features, "roi_align")
    n, c, h, w = features.shape
    p_h, p_w = int(out_size[0]), int(out_size[1])
    s = int(samples_per_bin)
    if p_h <= 0 or p_w <= 0 or s <= 0:
        raise ValueError("out_size and samples_per_bin must be positive")
    if len(boxes) == 0:
        return features.new_zeros((0, c, p_h, p_w))
    for b in boxes:
        b.validate(n)

    dtype = features.dtype
    device = features.device
    coords = torch.tensor(
        [[b.x0, b.y0, b.x1, b.y1] for b in boxes], dtype=dtype, device=device
    ) * float(spatial_scale)
    bidx = torch.tensor([b.batch_index for b in boxes], dtype=torch.long, device=device)
    k = len(boxes)

    def sample_axis(lo, hi, p, n_total):
        # (K, p*s) continuous sample coordinates along one axis.
        bin_size = (hi - lo) / p
        offs = (torch.arange(p * s, dtype=dtype, device=device) + 0.5) / s
        return lo[:, None] + offs[None, :] * bin_size[:, None] / 1.0

    xs = sample_axis(coords[:, 0], coords[:, 2], p_w, w)  # (K, p_w*s)
    ys = sample_axis(coords[:, 1], coords[:, 3], p_h, h)  # (K, p_h*s)

    # Half-integer pixel centres: index space = coordinate - 0.5.
    xi = xs - 0.5
    yi = ys - 0.5
    x0 = torch.floor(xi)
    y0 = torch.floor(yi)
    fx = xi - x0
    fy = yi - y0

    flat = features.reshape(n, c, h * w)[bidx]  # (K, C, H*W)
    out = None
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        yn = y0 + dy
        y_ok = (yn >= 0) & (yn <= h - 1)
        y_idx = yn.clamp(0, h - 1).long()
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xn = x0 + dx
            x_ok = (xn >= 0) & (xn <= w - 1)
            x_idx = xn.clamp(0, w - 1).long()
            # (K, pH*s, pW*s) gather indices and weights
            idx = y_idx[:, :, None] * w + x_idx[:, None, :]
            wgt = (wy * y_ok.to(dtype))[:, :, None] * (wx * x_ok.to(dtype))[:, None, :]
            vals = torch.gather(
                flat, 2, idx.reshape(k, 1, -1).expand(k, c, idx.shape[1] * idx.shape[2])
            ).reshape(k, c, idx.shape[1], idx.shape[2])
            term = vals * wgt[:, None, :, :]
            out = term if out is None else out + term

    pooled = out.reshape(k, c, p_h, s, p_w, s).mean(dim=(3, 5))
    return _check_finite(pooled, "roi_align")


def backward(loss: torch.Tensor, params: Sequence[torch.nn.Parameter]) -> None:
    """Populate ``p.grad`` with dLoss/dp for every parameter.

    Parameters the loss does not reach receive zero gradients.  Existing
    gradients are overwritten, not accumulated.
    """
    if loss.numel() != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    _check_finite(loss, "backward loss")
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    for p, g in zip(params, grads):
        p.grad = torch.zeros_like(p) if g is None else g


@dataclass
class AdamState:
    """Moment buffers and constants for the bias-corrected Adam update."""

    lr: float = 2e-4
    beta0: float = 0.5
    beta1: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    @classmethod
    def for_params(
        cls,
        params: Iterable[torch.nn.Parameter],
        lr: float = 2e-4,
        beta0: float = 0.5,
        beta1: float = 0.999,
        eps: float = 1e-8,
    ) -> "AdamState":
        params = list(params)
        return cls(
            lr=lr,
            beta0=beta0,
            beta1=beta1,
            eps=eps,
            step_count=0,
            first_moment=[torch.zeros_like(p) for p in params],
            second_moment=[torch.zeros_like(p) for p in params],
        )


def adam_step(params: Sequence[torch.nn.Parameter], state: AdamState) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards.

    Parameters with a missing gradient are treated as zero-gradient.
    """
    if len(state.first_moment) != len(params):
        raise ShapeMismatchError("optimizer state does not match the parameter list")
    state.step_count += 1
    t = state.step_count
    c0 = 1.0 - state.beta0**t
    c1 = 1.0 - state.beta1**t
    with torch.no_grad():
        for i, p in enumerate(params):
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            m = state.first_moment[i]
            v = state.second_moment[i]
            m.mul_(state.beta0).add_(g, alpha=1.0 - state.beta0)
            v.mul_(state.beta1).addcmul_(g, g, value=1.0 - state.beta1)
            m_hat = m / c0
            v_hat = v / c1
            p.add_(-state.lr * m_hat / (torch.sqrt(v_hat) + state.eps))
            p.grad = None


# ------------------------------------------------------------------ io

_MAGIC = b"SFCK"
_VERSION = 1


def save_checkpoint(path, blocks: dict, model_tag: str = "") -> None:
    """Write named parameter blocks as little-endian float32 with shapes."""
    tag = model_tag.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<H", len(tag)))
        fh.write(tag)
        fh.write(struct.pack("<I", len(blocks)))
        for name, tensor in blocks.items():
            arr = np.asarray(
                tensor.detach().cpu().numpy() if isinstance(tensor, torch.Tensor) else tensor,
                dtype="<f4",
            )
            nm = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nm)))
            fh.write(nm)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> tuple:
    """Read a checkpoint; returns (model_tag, {name: float32 ndarray})."""
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise CheckpointFormatError(f"truncated checkpoint {path}")
        chunk = data[off : off + n]
        off += n
        return chunk

    if take(4) != _MAGIC:
        raise CheckpointFormatError(f"{path} is not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != _VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (tag_len,) = struct.unpack("<H", take(2))
    tag = take(tag_len).decode("utf-8")
    (n_blocks,) = struct.unpack("<I", take(4))
    blocks = {}
    for _ in range(n_blocks):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).copy()
        blocks[name] = arr
    if off != len(data):
        raise CheckpointFormatError(f"trailing bytes in checkpoint {path}")
    return tag, blocks
