"""Parameterised layers: conv2d, batch norm, ELU, linear, softmax and an LSTM cell.

Layer functions accept either a single sample (``[C, H, W]`` / ``[n]``) or a
batch with a leading axis. Parameters live in small dataclasses that double
as :class:`Module` nodes so networks can enumerate them by name.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import ContractError, ShapeError, Tensor


class ConfigError(ValueError):
    """Layer or network configuration is inconsistent."""


class Module:
    """Anything that owns named tensors, directly or through child modules."""

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Tensor):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_tensors(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield from v.named_tensors(f"{prefix}{key}.{i}.")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self.named_tensors(prefix) if t.requires_grad)

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self.named_tensors(prefix) if not t.requires_grad)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        problems = []
        for name, t in own.items():
            if name not in state:
                problems.append(f"{name}: missing")
            elif tuple(state[name].shape) != t.shape:
                problems.append(f"{name}: expected {t.shape}, got {tuple(state[name].shape)}")
        problems += [f"{name}: unexpected" for name in state if name not in own]
        if problems:
            raise ConfigError("state mismatch: " + "; ".join(problems))
        for name, t in own.items():
            t.data = np.array(state[name], dtype=T.DTYPE)
            t.zero_grad()


def _uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ConvParams(Module):
    weight: Tensor  # [out_ch, in_ch, kh, kw]
    bias: Tensor  # [out_ch]
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4 or min(self.weight.shape[2:]) < 1:
            raise ConfigError(f"conv weight must be [out, in, kh>=1, kw>=1], got {self.weight.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ConfigError("conv needs stride >= 1 and padding >= 0")

    @classmethod
    def init(cls, in_ch: int, out_ch: int, kernel: int, stride: int, padding: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(in_ch * kernel * kernel)
        return cls(
            _uniform(rng, (out_ch, in_ch, kernel, kernel), bound),
            _uniform(rng, (out_ch,), bound),
            stride,
            padding,
        )

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass(eq=False)
class BatchNormParams(Module):
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps: float = 1e-5
    momentum: float = 0.1
    training: bool = True

    @classmethod
    def init(cls, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        return cls(
            Tensor(np.ones(channels), requires_grad=True),
            Tensor(np.zeros(channels), requires_grad=True),
            Tensor(np.zeros(channels)),
            Tensor(np.ones(channels)),
            eps,
            momentum,
        )


@dataclass(eq=False)
class LinearParams(Module):
    weight: Tensor  # [out, in]
    bias: Tensor  # [out]

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        if zero:
            return cls(Tensor(np.zeros((n_out, n_in)), requires_grad=True), Tensor(np.zeros(n_out), requires_grad=True))
        bound = 1.0 / np.sqrt(n_in)
        return cls(_uniform(rng, (n_out, n_in), bound), _uniform(rng, (n_out,), bound))


@dataclass(eq=False)
class LstmParams(Module):
    """Gate order along the first weight axis: input, forget, cell, output."""

    weight: Tensor  # [4*hidden, input+hidden]
    bias: Tensor  # [4*hidden]
    input_size: int
    hidden_size: int

    def __post_init__(self):
        h, n = self.hidden_size, self.input_size
        if self.weight.shape != (4 * h, n + h) or self.bias.shape != (4 * h,):
            raise ConfigError(
                f"LSTM(input={n}, hidden={h}) needs weight {(4 * h, n + h)} and bias {(4 * h,)}, "
                f"got {self.weight.shape} and {self.bias.shape}"
            )

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: np.random.Generator, forget_bias: float = 1.0):
        bound = 1.0 / np.sqrt(input_size + hidden_size)
        w = _uniform(rng, (4 * hidden_size, input_size + hidden_size), bound)
        b = _uniform(rng, (4 * hidden_size,), bound)
        b.data[hidden_size : 2 * hidden_size] = forget_bias
        return cls(w, b, input_size, hidden_size)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation of ``x`` ([C,H,W] or [B,C,H,W]) with ``p.weight`` plus bias."""
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d expects [C,H,W] or [B,C,H,W], got {x.shape}")
    xd = x.data if batched else x.data[None]
    n, ch, h, w = xd.shape
    out_ch, in_ch, kh, kw = p.weight.shape
    if ch != in_ch:
        raise ShapeError(f"conv2d: input has {ch} channels, weights expect {in_ch}")
    s, pad = p.stride, p.padding
    oh, ow = conv_output_size(h, kh, s, pad), conv_output_size(w, kw, s, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be {oh}x{ow} for input {h}x{w}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if pad:
        xp = np.zeros((n, ch, hp, wp))
        xp[:, :, pad : pad + h, pad : pad + w] = xd
    else:
        xp = xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : s * (oh - 1) + 1 : s, : s * (ow - 1) + 1 : s]
    # im2col rows ordered (n, oh, ow); columns (ch, kh, kw) match the weight layout
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, ch * kh * kw)
    wmat = p.weight.data.reshape(out_ch, -1)
    out = cols @ wmat.T
    out += p.bias.data
    out = out.reshape(n, oh * ow, out_ch).transpose(0, 2, 1).reshape(n, out_ch, oh, ow)
    if not batched:
        out = out[0]

    def bw(g):
        g2 = (g if batched else g[None]).reshape(n, out_ch, oh * ow).transpose(0, 2, 1).reshape(-1, out_ch)
        dw = (g2.T @ cols).reshape(p.weight.shape)
        db = g2.sum(axis=0)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, oh, ow, ch, kh, kw).transpose(4, 5, 0, 3, 1, 2).copy()
            dxp = np.zeros((n, ch, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s] += dcols[i, j]
            dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
            dx = np.ascontiguousarray(dx if batched else dx[0])
        return dx, dw, db

    return Tensor.from_op(out, (x, p.weight, p.bias), bw)


# ---------------------------------------------------------------------------
# Normalisation and activations
# ---------------------------------------------------------------------------


def _channel_axis(ndim: int) -> int:
    if ndim in (2, 4):
        return 1
    if ndim == 3:
        return 0
    raise ShapeError(f"batch_norm expects rank 2, 3 or 4, got {ndim}")


def batch_norm(x: Tensor, p: BatchNormParams, per_sample: bool = False, update_stats: bool = True) -> Tensor:
    """Normalise each channel, then scale by gamma and shift by beta.

    In training mode statistics come from the input itself; with
    ``per_sample`` each leading-axis entry of a batched input is normalised
    on its own, exactly as if it had been passed alone. Running statistics
    are refreshed when ``update_stats`` is set. Eval mode uses the running
    statistics.
    """
    if x.size == 0:
        raise ContractError("batch_norm on an empty batch")
    cax = _channel_axis(x.ndim)
    ch = x.shape[cax]
    if p.gamma.shape != (ch,):
        raise ShapeError(f"batch_norm: {ch} channels but params for {p.gamma.shape[0]}")
    axes = tuple(i for i in range(x.ndim) if i != cax and not (per_sample and i == 0 and x.ndim == 4))
    bshape = [1] * x.ndim
    bshape[cax] = ch
    gamma = p.gamma.data.reshape(bshape)
    beta = p.beta.data.reshape(bshape)
    xd = x.data
    stat_axes = tuple(i for i in range(x.ndim) if i != cax)

    if p.training:
        count = int(np.prod([xd.shape[i] for i in axes]))
        mu = xd.sum(axis=axes, keepdims=True) / count
        xc = xd - mu
        var = (xc * xc).sum(axis=axes, keepdims=True) / count
        inv = 1.0 / np.sqrt(var + p.eps)
        xhat = xc * inv
        if update_stats:
            m = p.momentum
            p.running_mean = Tensor((1 - m) * p.running_mean.data + m * mu.mean(axis=stat_axes))
            p.running_var = Tensor((1 - m) * p.running_var.data + m * var.mean(axis=stat_axes))

        def bw(g):
            gx = g * xhat
            dgamma = gx.sum(axis=stat_axes)
            dbeta = g.sum(axis=stat_axes)
            if not x.requires_grad:
                return None, dgamma, dbeta
            gam_inv = gamma * inv
            dx = gam_inv * (
                g
                - g.sum(axis=axes, keepdims=True) / count
                - xhat * gx.sum(axis=axes, keepdims=True) / count
            )
            return dx, dgamma, dbeta
    else:
        inv = 1.0 / np.sqrt(p.running_var.data.reshape(bshape) + p.eps)
        xhat = (xd - p.running_mean.data.reshape(bshape)) * inv

        def bw(g):
            return g * gamma * inv, (g * xhat).sum(axis=stat_axes), g.sum(axis=stat_axes)

    return Tensor.from_op(gamma * xhat + beta, (x, p.gamma, p.beta), bw)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    xd = x.data
    ex = np.exp(np.minimum(xd, 0.0))
    pos = xd >= 0
    out = np.where(xd > 0, xd, alpha * (ex - 1.0))
    return Tensor.from_op(out, (x,), lambda g: (g * np.where(pos, 1.0, alpha * ex),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``W x + b`` applied along the last axis of ``x``."""
    if weight.ndim != 2 or x.shape[-1:] != weight.shape[1:]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != weight.shape[:1]:
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        g2 = g.reshape(-1, wd.shape[0])
        x2 = xd.reshape(-1, wd.shape[1])
        grads = [g @ wd, g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, bw)


def dense(x: Tensor, p: LinearParams) -> Tensor:
    return linear(x, p.weight, p.bias)


def _softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    out = _softmax_np(logits.data, axis)
    return Tensor.from_op(
        out, (logits,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    )


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits.data
    shifted = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return Tensor.from_op(out, (logits,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def lstm_step(x: Tensor, h: Tensor, c: Tensor, p: LstmParams) -> tuple[Tensor, Tensor]:
    hid = p.hidden_size
    if x.shape[-1] != p.input_size or h.shape[-1] != hid or c.shape != h.shape or x.shape[:-1] != h.shape[:-1]:
        raise ShapeError(
            f"lstm_step: x {x.shape}, h {h.shape}, c {c.shape} do not fit LSTM({p.input_size}, {hid})"
        )
    z = linear(T.concat([x, h], axis=-1), p.weight, p.bias)
    i = T.sigmoid(z[..., :hid])
    f = T.sigmoid(z[..., hid : 2 * hid])
    g = T.tanh(z[..., 2 * hid : 3 * hid])
    o = T.sigmoid(z[..., 3 * hid :])
    c_new = f * c + i * g
    h_new = o * T.tanh(c_new)
    return h_new, c_new


def lstm_step_array(x: np.ndarray, h: np.ndarray, c: np.ndarray, p: LstmParams) -> tuple[np.ndarray, np.ndarray]:
    """``lstm_step`` on plain arrays, for inference without a tape."""
    hid = p.hidden_size
    z = np.concatenate([x, h], axis=-1) @ p.weight.data.T + p.bias.data
    i = T._sigmoid(z[..., :hid])
    f = T._sigmoid(z[..., hid : 2 * hid])
    g = np.tanh(z[..., 2 * hid : 3 * hid])
    o = T._sigmoid(z[..., 3 * hid :])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def lstm_sequence(xs: Tensor, h0: Tensor, c0: Tensor, p: LstmParams, dones=None):
    """Run ``lstm_step`` over ``xs`` ([T, input]) as one fused, differentiable op.

    ``dones[t]`` zeroes the state handed from step t to step t+1. Returns the
    hidden states [T, hidden] and the final (h, c) as plain arrays.
    """
    n_steps, hid, n_in = xs.shape[0], p.hidden_size, p.input_size
    if xs.ndim != 2 or xs.shape[1] != n_in or h0.shape != (hid,) or c0.shape != (hid,):
        raise ShapeError(f"lstm_sequence: xs {xs.shape}, h0 {h0.shape}, c0 {c0.shape} do not fit LSTM({n_in}, {hid})")
    dones = np.zeros(n_steps, dtype=bool) if dones is None else np.asarray(dones, dtype=bool)
    w = p.weight.data
    wx, wh = w[:, :n_in], np.ascontiguousarray(w[:, n_in:])
    wh_t = np.ascontiguousarray(wh.T)
    zx = xs.data @ wx.T + p.bias.data
    sig = T._sigmoid
    gates = np.empty((n_steps, 4 * hid))
    h_in = np.empty((n_steps, hid))
    c_in = np.empty((n_steps, hid))
    cs = np.empty((n_steps, hid))
    hs = np.empty((n_steps, hid))
    h, c = h0.data, c0.data
    for t in range(n_steps):
        h_in[t], c_in[t] = h, c
        z = zx[t] + wh @ h
        gt = gates[t]
        gt[: 2 * hid] = sig(z[: 2 * hid])
        gt[2 * hid : 3 * hid] = np.tanh(z[2 * hid : 3 * hid])
        gt[3 * hid :] = sig(z[3 * hid :])
        c = gt[hid : 2 * hid] * c + gt[:hid] * gt[2 * hid : 3 * hid]
        cs[t] = c
        h = gt[3 * hid :] * np.tanh(c)
        hs[t] = h
        if dones[t]:
            h, c = np.zeros(hid), np.zeros(hid)
    final = (h.copy(), c.copy())

    def bw(g):
        dz = np.empty((n_steps, 4 * hid))
        dh_next = np.zeros(hid)
        dc_next = np.zeros(hid)
        for t in range(n_steps - 1, -1, -1):
            if dones[t]:
                dh_next[:] = 0.0
                dc_next[:] = 0.0
            i, f, gg, o = (gates[t, k * hid : (k + 1) * hid] for k in range(4))
            tc = np.tanh(cs[t])
            dh = g[t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dzt = dz[t]
            dzt[:hid] = dc * gg * i * (1.0 - i)
            dzt[hid : 2 * hid] = dc * c_in[t] * f * (1.0 - f)
            dzt[2 * hid : 3 * hid] = dc * i * (1.0 - gg * gg)
            dzt[3 * hid :] = dh * tc * o * (1.0 - o)
            dh_next = wh_t @ dzt
            dc_next = dc * f
        dw = np.concatenate([dz.T @ xs.data, dz.T @ h_in], axis=1)
        return dz @ wx, dh_next, dc_next, dw, dz.sum(axis=0)

    out = Tensor.from_op(hs, (xs, h0, c0, p.weight, p.bias), bw)
    return out, final
