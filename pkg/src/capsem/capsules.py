"""Capsule layers: squash, primary capsules and a dense capsule layer with dynamic routing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import ConfigError, ConvParams, Module, conv2d, softmax
from .tensor import ShapeError, Tensor


@dataclass
class RoutingState:
    logits: np.ndarray  # b, [..., in, out]
    couplings: np.ndarray  # c after the last iteration
    history: list[np.ndarray] = field(default_factory=list)  # c at every iteration


@dataclass
class CapsuleBank:
    poses: Tensor  # [..., count, dim]
    routing: RoutingState | None = None

    def __post_init__(self):
        if self.poses.ndim < 2 or min(self.poses.shape[-2:]) < 1:
            raise ShapeError(f"capsule poses must be [..., count>=1, dim>=1], got {self.poses.shape}")

    @property
    def count(self) -> int:
        return self.poses.shape[-2]

    @property
    def dim(self) -> int:
        return self.poses.shape[-1]

    def lengths(self) -> np.ndarray:
        return np.linalg.norm(self.poses.data, axis=-1)


@dataclass(eq=False)
class DenseCapsParams(Module):
    W: Tensor  # [in_count, out_count, out_dim, in_dim]
    routing_iters: int = 3
    # Stop gradients through the agreement updates; only the last pass is then differentiated.
    detach_routing: bool = False

    def __post_init__(self):
        if self.W.ndim != 4:
            raise ConfigError(f"dense capsule weights must be rank 4, got {self.W.shape}")
        if self.routing_iters < 1:
            raise ConfigError("routing_iters must be >= 1")

    @classmethod
    def init(cls, in_count: int, out_count: int, in_dim: int, out_dim: int, routing_iters: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(in_dim)
        w = Tensor(rng.uniform(-bound, bound, size=(in_count, out_count, out_dim, in_dim)), requires_grad=True)
        return cls(w, routing_iters)

    @property
    def in_count(self) -> int:
        return self.W.shape[0]

    @property
    def out_count(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[2]

    @property
    def in_dim(self) -> int:
        return self.W.shape[3]


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """Rescale each vector along ``axis`` to length ``|s|^2 / (1 + |s|^2)``, keeping its direction."""
    n = T.norm2(s, axis=axis, keepdims=True)
    factor = n / (1.0 + n * n)
    return s * T.expand(factor, s.shape)


def predict(u: CapsuleBank | Tensor, p: DenseCapsParams) -> Tensor:
    """Prediction vectors u_hat[..., i, j, :] = W[i, j] @ u[..., i, :]."""
    poses = u.poses if isinstance(u, CapsuleBank) else u
    if poses.shape[-2:] != (p.in_count, p.in_dim):
        raise ShapeError(f"capsules {poses.shape[-2:]} do not match weights for ({p.in_count}, {p.in_dim})")
    n_in, n_out, d_out, d_in = p.W.shape
    lead = poses.shape[:-2]
    batch = int(np.prod(lead)) if lead else 1
    wm = p.W.data.reshape(n_in, n_out * d_out, d_in)
    ud = poses.data.reshape(batch, n_in, d_in).transpose(1, 2, 0)  # [in, d_in, B]
    out = np.matmul(wm, ud).transpose(2, 0, 1).reshape(*lead, n_in, n_out, d_out)

    def bw(g):
        g3 = g.reshape(batch, n_in, n_out * d_out).transpose(1, 2, 0)
        dw = np.matmul(g3, ud.transpose(0, 2, 1)).reshape(p.W.shape)
        du = np.matmul(wm.transpose(0, 2, 1), g3).transpose(2, 0, 1).reshape(poses.shape)
        return du, dw

    return Tensor.from_op(np.ascontiguousarray(out), (poses, p.W), bw)


def _weighted_sum(c: Tensor, u_hat: Tensor) -> Tensor:
    # s[..., o, d] = sum_i c[..., i, o] * u_hat[..., i, o, d]
    cd, ud = c.data, u_hat.data
    out = (cd[..., None] * ud).sum(axis=-3)

    def bw(g):
        ge = g[..., None, :, :]
        return (ud * ge).sum(axis=-1), cd[..., None] * ge

    return Tensor.from_op(out, (c, u_hat), bw)


def _agreement(u_hat: Tensor, v: Tensor) -> Tensor:
    # a[..., i, o] = <u_hat[..., i, o, :], v[..., o, :]>
    ud, vd = u_hat.data, v.data
    out = (ud * vd[..., None, :, :]).sum(axis=-1)

    def bw(g):
        return g[..., None] * vd[..., None, :, :], (g[..., None] * ud).sum(axis=-3)

    return Tensor.from_op(out, (u_hat, v), bw)


def dynamic_routing(u_hat: Tensor, iters: int, detach: bool = False) -> CapsuleBank:
    """Route predictions ``u_hat`` ([..., in, out, dim]) to ``out`` higher capsules.

    Couplings are a softmax over the higher capsules for every lower capsule;
    the agreement between a prediction and the current output raises its
    logit for the next iteration.
    """
    if iters < 1:
        raise ConfigError("routing needs at least one iteration")
    b = T.zeros(u_hat.shape[:-1])
    history = []
    v = None
    for r in range(iters):
        c = softmax(b, axis=-1)
        history.append(c.data)
        v = squash(_weighted_sum(c, u_hat))
        if r < iters - 1:
            if detach:
                agree = _agreement(Tensor(u_hat.data), Tensor(v.data))
            else:
                agree = _agreement(u_hat, v)
            b = b + agree
    return CapsuleBank(v, RoutingState(b.data, history[-1], history))


def primary_capsules(features: Tensor, conv: ConvParams, caps_dim: int) -> CapsuleBank:
    """Convolve, regroup channels into capsules of ``caps_dim`` and squash.

    Consecutive groups of ``caps_dim`` output channels form one capsule type;
    every spatial position of every type becomes a capsule.
    """
    if conv.out_channels % caps_dim:
        raise ConfigError(f"{conv.out_channels} conv channels are not divisible by capsule dim {caps_dim}")
    out = conv2d(features, conv)
    lead = out.shape[:-3]
    ch, h, w = out.shape[-3:]
    types = ch // caps_dim
    k = len(lead)
    x = out.reshape(*lead, types, caps_dim, h, w)
    x = x.transpose(*range(k), k, k + 2, k + 3, k + 1)
    x = x.reshape(*lead, types * h * w, caps_dim)
    return CapsuleBank(squash(x))


def dense_capsules(u: CapsuleBank, p: DenseCapsParams) -> CapsuleBank:
    return dynamic_routing(predict(u, p), p.routing_iters, detach=p.detach_routing)
