"""Small differentiable layer toolkit used by the autoencoder.

Tensors are float64 numpy arrays in NHWC layout. Convolutions are fixed to
3x3 kernels with stride 2 and "same" zero padding, so spatial extents halve
by ceiling division (12 -> 6 -> 3) and transposed convolutions double them
back (3 -> 6 -> 12).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

KERNEL = 3
STRIDE = 2

ACTIVATIONS = ("relu", "sigmoid", "identity")
# sigmoid saturates to exactly 0.0 or 1.0 in float64; keep it in the open interval
_SIG_LO = np.finfo(np.float64).tiny
_SIG_HI = np.nextafter(1.0, 0.0)
KINDS = ("conv2d", "deconv2d", "dense", "reshape")


class ShapeError(ValueError):
    """Raised when array shapes do not fit a layer."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    activation: str = "identity"
    # reshape target excluding batch axis
    shape: tuple[int, ...] = ()
    kernel: tuple[int, int] = (KERNEL, KERNEL)
    stride: int = STRIDE

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind in ("conv2d", "deconv2d"):
            if tuple(self.kernel) != (KERNEL, KERNEL) or self.stride != STRIDE:
                raise ValueError("convolutions are fixed to 3x3 kernels with stride 2")
        if self.kind != "reshape" and (self.in_channels < 1 or self.out_channels < 1):
            raise ValueError(f"{self.kind} needs positive channel counts")

    def weight_shape(self) -> tuple[int, ...]:
        if self.kind in ("conv2d", "deconv2d"):
            return (KERNEL, KERNEL, self.in_channels, self.out_channels)
        if self.kind == "dense":
            return (self.out_channels, self.in_channels)
        return ()

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "activation": self.activation,
            "shape": list(self.shape),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(
            kind=d["kind"],
            in_channels=int(d.get("in_channels", 0)),
            out_channels=int(d.get("out_channels", 0)),
            activation=d.get("activation", "identity"),
            shape=tuple(int(s) for s in d.get("shape", ())),
        )


# ---------------------------------------------------------------------------
# activations


def activate(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return np.clip(expit(x), _SIG_LO, _SIG_HI)
    if kind == "identity":
        return x
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(out: np.ndarray, upstream: np.ndarray, kind: str) -> np.ndarray:
    """Gradient with respect to the pre-activation, given the activated output."""
    if kind == "relu":
        return upstream * (out > 0.0)
    if kind == "sigmoid":
        return upstream * out * (1.0 - out)
    if kind == "identity":
        return upstream
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# stride-2 convolution machinery


def conv_output_extent(h: int) -> int:
    return -(-h // STRIDE)


def _pads(h_in: int, h_out: int) -> tuple[int, int]:
    total = max((h_out - 1) * STRIDE + KERNEL - h_in, 0)
    return total // 2, total - total // 2


def _gather(xpad: np.ndarray, ho: int, wo: int) -> np.ndarray:
    """(B, Hp, Wp, C) -> (B, ho, wo, 9*C) patch matrix."""
    b, _, _, c = xpad.shape
    cols = np.empty((b, ho, wo, KERNEL, KERNEL, c))
    for di in range(KERNEL):
        for dj in range(KERNEL):
            cols[:, :, :, di, dj, :] = xpad[
                :, di : di + STRIDE * ho : STRIDE, dj : dj + STRIDE * wo : STRIDE, :
            ]
    return cols.reshape(b, ho, wo, KERNEL * KERNEL * c)


def _scatter(cols: np.ndarray, hp: int, wp: int, c: int) -> np.ndarray:
    """Adjoint of _gather: (B, ho, wo, 9*C) -> (B, Hp, Wp, C)."""
    b, ho, wo, _ = cols.shape
    cols = cols.reshape(b, ho, wo, KERNEL, KERNEL, c)
    out = np.zeros((b, hp, wp, c))
    for di in range(KERNEL):
        for dj in range(KERNEL):
            out[
                :, di : di + STRIDE * ho : STRIDE, dj : dj + STRIDE * wo : STRIDE, :
            ] += cols[:, :, :, di, dj, :]
    return out


def _check_conv(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, spec: LayerSpec, kind: str):
    if spec.kind != kind:
        raise ValueError(f"expected a {kind} spec, got {spec.kind}")
    if x.ndim != 4:
        raise ShapeError(f"{kind} input must be 4-D (batch, height, width, channels), got {x.shape}")
    if weights.shape != spec.weight_shape():
        raise ShapeError(f"{kind} weights have shape {weights.shape}, spec expects {spec.weight_shape()}")
    if x.shape[3] != weights.shape[2]:
        raise ShapeError(
            f"{kind} input shape {x.shape} has {x.shape[3]} channels but weights {weights.shape} expect {weights.shape[2]}"
        )
    if bias.shape != (weights.shape[3],):
        raise ShapeError(f"{kind} bias shape {bias.shape} does not match weights {weights.shape}")


def conv2d_forward(x, weights, bias, spec: LayerSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_conv(x, weights, bias, spec, "conv2d")
    b, h, w, c = x.shape
    ho, wo = conv_output_extent(h), conv_output_extent(w)
    (pt, pb), (pl, pr) = _pads(h, ho), _pads(w, wo)
    xpad = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    cols = _gather(xpad, ho, wo)
    z = cols @ weights.reshape(-1, spec.out_channels) + bias
    return activate(z, spec.activation)


def conv2d_backward(x, weights, bias, upstream, spec: LayerSpec, out=None):
    """Return (grad_input, grad_weights, grad_bias) for conv2d_forward."""
    x = np.asarray(x, dtype=np.float64)
    _check_conv(x, weights, bias, spec, "conv2d")
    b, h, w, c = x.shape
    ho, wo = conv_output_extent(h), conv_output_extent(w)
    if upstream.shape != (b, ho, wo, spec.out_channels):
        raise ShapeError(f"upstream gradient shape {upstream.shape} != forward output shape {(b, ho, wo, spec.out_channels)}")
    if out is None:
        out = conv2d_forward(x, weights, bias, spec)
    gz = activation_grad(out, upstream, spec.activation)
    (pt, pb), (pl, pr) = _pads(h, ho), _pads(w, wo)
    xpad = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    cols = _gather(xpad, ho, wo)
    wmat = weights.reshape(-1, spec.out_channels)
    gz2 = gz.reshape(-1, spec.out_channels)
    grad_w = (cols.reshape(-1, wmat.shape[0]).T @ gz2).reshape(weights.shape)
    grad_b = gz2.sum(axis=0)
    gpad = _scatter(gz @ wmat.T, h + pt + pb, w + pl + pr, c)
    grad_x = gpad[:, pt : pt + h, pl : pl + w, :]
    return grad_x, grad_w, grad_b


def deconv2d_forward(x, weights, bias, spec: LayerSpec) -> np.ndarray:
    """Transposed stride-2 convolution; exact adjoint of a conv on the doubled grid."""
    x = np.asarray(x, dtype=np.float64)
    _check_conv(x, weights, bias, spec, "deconv2d")
    b, h, w, c = x.shape
    ho, wo = STRIDE * h, STRIDE * w
    (pt, pb), (pl, pr) = _pads(ho, h), _pads(wo, w)
    cols = x @ weights.reshape(KERNEL * KERNEL, c, spec.out_channels).transpose(1, 0, 2).reshape(c, -1)
    opad = _scatter(cols, ho + pt + pb, wo + pl + pr, spec.out_channels)
    z = opad[:, pt : pt + ho, pl : pl + wo, :] + bias
    return activate(z, spec.activation)


def deconv2d_backward(x, weights, bias, upstream, spec: LayerSpec, out=None):
    """Return (grad_input, grad_weights, grad_bias) for deconv2d_forward."""
    x = np.asarray(x, dtype=np.float64)
    _check_conv(x, weights, bias, spec, "deconv2d")
    b, h, w, c = x.shape
    ho, wo = STRIDE * h, STRIDE * w
    if upstream.shape != (b, ho, wo, spec.out_channels):
        raise ShapeError(f"upstream gradient shape {upstream.shape} != forward output shape {(b, ho, wo, spec.out_channels)}")
    if out is None:
        out = deconv2d_forward(x, weights, bias, spec)
    gz = activation_grad(out, upstream, spec.activation)
    (pt, pb), (pl, pr) = _pads(ho, h), _pads(wo, w)
    gpad = np.pad(gz, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    gcols = _gather(gpad, h, w).reshape(b, h, w, KERNEL * KERNEL, spec.out_channels)
    # weights as (9, C_in, C_out)
    w9 = weights.reshape(KERNEL * KERNEL, c, spec.out_channels)
    grad_x = np.einsum("bhwko,kco->bhwc", gcols, w9, optimize=True)
    grad_w = np.einsum("bhwc,bhwko->kco", x, gcols, optimize=True).reshape(weights.shape)
    grad_b = gz.sum(axis=(0, 1, 2))
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# dense


def _check_dense(x, weights, bias):
    if x.ndim != 2:
        raise ShapeError(f"dense input must be 2-D (batch, features), got {x.shape}")
    if weights.ndim != 2 or weights.shape[1] != x.shape[1]:
        raise ShapeError(f"dense weights {weights.shape} do not match input {x.shape}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense bias {bias.shape} does not match weights {weights.shape}")


def dense_forward(x, weights, bias, activation: str = "identity") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    _check_dense(x, weights, bias)
    out = activate(x @ weights.T + bias, activation)
    return out[0] if squeeze else out


def dense_backward(x, weights, bias, upstream, activation: str = "identity", out=None):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x, upstream = x[None, :], np.asarray(upstream)[None, :]
        out = None if out is None else np.asarray(out)[None, :]
    _check_dense(x, weights, bias)
    if upstream.shape != (x.shape[0], weights.shape[0]):
        raise ShapeError(f"upstream gradient {upstream.shape} != dense output {(x.shape[0], weights.shape[0])}")
    if out is None:
        out = dense_forward(x, weights, bias, activation)
    gz = activation_grad(out, upstream, activation)
    grad_x = gz @ weights
    grad_w = gz.T @ x
    grad_b = gz.sum(axis=0)
    return (grad_x[0] if squeeze else grad_x), grad_w, grad_b


# ---------------------------------------------------------------------------
# sequential stacks


def glorot_uniform(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if len(shape) == 4:
        receptive = shape[0] * shape[1]
        fan_in, fan_out = receptive * shape[2], receptive * shape[3]
    else:
        fan_out, fan_in = shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(specs: list[LayerSpec], rng: np.random.Generator) -> list[dict[str, np.ndarray]]:
    params = []
    for spec in specs:
        if spec.kind == "reshape":
            params.append({})
        else:
            params.append(
                {"w": glorot_uniform(spec.weight_shape(), rng), "b": np.zeros(spec.out_channels)}
            )
    return params


def forward_stack(specs, params, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run a layer stack; returns the output and every intermediate activation."""
    acts = [x]
    for spec, p in zip(specs, params):
        if spec.kind == "conv2d":
            x = conv2d_forward(x, p["w"], p["b"], spec)
        elif spec.kind == "deconv2d":
            x = deconv2d_forward(x, p["w"], p["b"], spec)
        elif spec.kind == "dense":
            x = dense_forward(x, p["w"], p["b"], spec.activation)
        else:
            x = x.reshape((x.shape[0],) + tuple(spec.shape))
        acts.append(x)
    return x, acts


def backward_stack(specs, params, acts, upstream):
    """Backpropagate through a stack run by forward_stack.

    Returns (grad wrt stack input, per-layer parameter gradients).
    """
    grads: list[dict[str, np.ndarray]] = [{} for _ in specs]
    g = upstream
    for i in range(len(specs) - 1, -1, -1):
        spec, p = specs[i], params[i]
        x_in, out = acts[i], acts[i + 1]
        if spec.kind == "conv2d":
            g, gw, gb = conv2d_backward(x_in, p["w"], p["b"], g, spec, out=out)
        elif spec.kind == "deconv2d":
            g, gw, gb = deconv2d_backward(x_in, p["w"], p["b"], g, spec, out=out)
        elif spec.kind == "dense":
            g, gw, gb = dense_backward(x_in, p["w"], p["b"], g, spec.activation, out=out)
        else:
            g = g.reshape(x_in.shape)
            continue
        grads[i] = {"w": gw, "b": gb}
    return g, grads


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], **hyper) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **hyper,
        )


class NonFiniteGradient(FloatingPointError):
    pass


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """One bias-corrected Adam update. Mutates ``state`` and returns new params."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and Adam accumulators differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ShapeError(f"parameter {i}: shape {p.shape} vs gradient {g.shape} vs state {state.m[i].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient entries in parameter {i} at step {state.t + 1}")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    new = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        step = state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        new.append(p - step)
    return new


def finite_difference_gradient(
    loss_fn: Callable[[np.ndarray], float], params: np.ndarray, step: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    if step <= 0:
        raise ValueError("step must be positive")
    p = np.array(params, dtype=np.float64)
    flat = p.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(loss_fn(p))
        flat[i] = orig - step
        fm = float(loss_fn(p))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite loss while differencing coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(p.shape)
