"""Actor-critic networks: the capsule agent, a CNN baseline, and the curiosity module.

Every policy network maps a 42x42 RGB frame and an LSTM state to four action
logits and a state value. A policy may carry an :class:`IcmNet` that turns
consecutive embeddings into an intrinsic reward.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .capsules import DenseCapsParams, dense_capsules, primary_capsules
from .layers import (
    BatchNormParams,
    ConfigError,
    ConvParams,
    LinearParams,
    LstmParams,
    Module,
    batch_norm,
    conv2d,
    conv_output_size,
    dense,
    elu,
    log_softmax,
    lstm_sequence,
    lstm_step,
)
from .tensor import ShapeError, Tensor

N_ACTIONS = 4
OBS_SHAPE = (3, 42, 42)
NET_KINDS = ("capsem", "capsem_ir", "cnn_baseline", "icm_cnn")

# Trainable-parameter totals reported for the original modules.
PUBLISHED_TOTALS = {"capsem": 515_301, "icm_cnn": 915_945, "capsem_ir": 733_705}


@dataclass
class ArchConfig:
    kind: str = "capsem"
    lstm_hidden: int = 256
    front_channels: int = 32
    primary_channels: int = 32
    caps_dim: int = 8
    dense_caps: int = 4
    dense_dim: int = 16
    routing_iters: int = 3
    detach_routing: bool = False
    embed_channels: int = 32
    embed_blocks: int = 4
    icm_hidden: int = 256
    icm_eta: float = 0.01
    zero_init_heads: bool = False

    def __post_init__(self):
        if self.kind not in NET_KINDS:
            raise ConfigError(f"unknown net kind {self.kind!r}; expected one of {NET_KINDS}")

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class PolicyOutput:
    logits: Tensor  # [..., 4]
    value: Tensor  # [...]
    state: tuple[Tensor, Tensor]


class CnnEmbedNet(Module):
    """Stack of (3x3 stride-2 conv, batch norm, ELU) blocks flattened to one vector."""

    def __init__(self, rng: np.random.Generator, channels: int = 32, blocks: int = 4, in_ch: int = 3):
        self.convs = []
        self.norms = []
        size = OBS_SHAPE[1]
        for i in range(blocks):
            self.convs.append(ConvParams.init(in_ch if i == 0 else channels, channels, 3, 2, 1, rng))
            self.norms.append(BatchNormParams.init(channels))
            size = conv_output_size(size, 3, 2, 1)
        self.width = channels * size * size

    def __call__(self, obs: Tensor, update_stats: bool = False) -> Tensor:
        if obs.shape[-3:] != OBS_SHAPE:
            raise ShapeError(f"embedding expects frames of shape {OBS_SHAPE}, got {obs.shape}")
        x = obs
        for conv, bn in zip(self.convs, self.norms):
            x = elu(batch_norm(conv2d(x, conv), bn, per_sample=True, update_stats=update_stats))
        return x.reshape(*obs.shape[:-3], self.width)


class IcmNet(Module):
    """Forward and inverse models over a private convolutional embedding."""

    def __init__(self, rng: np.random.Generator, arch: ArchConfig):
        self.embed = CnnEmbedNet(rng, arch.embed_channels, arch.embed_blocks)
        w, hid = self.embed.width, arch.icm_hidden
        self.fwd_in = LinearParams.init(w + N_ACTIONS, hid, rng)
        self.fwd_out = LinearParams.init(hid, w, rng)
        self.inv_in = LinearParams.init(2 * w, hid, rng)
        self.inv_out = LinearParams.init(hid, N_ACTIONS, rng)
        self._eta = float(arch.icm_eta)
        if self._eta <= 0:
            raise ConfigError("icm_eta must be positive")

    @property
    def eta(self) -> float:
        return self._eta

    def forward_model(self, phi_t: Tensor, actions) -> Tensor:
        onehot = np.eye(N_ACTIONS)[np.asarray(actions)]
        return dense(elu(dense(T.concat([phi_t, Tensor(onehot)], axis=-1), self.fwd_in)), self.fwd_out)

    def inverse_model(self, phi_t: Tensor, phi_next: Tensor) -> Tensor:
        return dense(elu(dense(T.concat([phi_t, phi_next], axis=-1), self.inv_in)), self.inv_out)

    def intrinsic(self, phi_t: Tensor, actions, phi_next: Tensor):
        """Return (intrinsic reward, forward loss, inverse logits).

        The forward model sees detached embeddings, so only the inverse
        model shapes the encoder; the loss is half the squared prediction
        error and the reward is that loss scaled by eta.
        """
        if phi_t.shape != phi_next.shape:
            raise ShapeError(f"embedding shapes differ: {phi_t.shape} vs {phi_next.shape}")
        pred = self.forward_model(phi_t.detach(), actions)
        diff = pred - phi_next.detach()
        fwd_loss = T.scale(T.square(diff).sum(axis=-1), 0.5)
        r_i = self._eta * fwd_loss.data
        return r_i, fwd_loss, self.inverse_model(phi_t, phi_next)


class RecurrentPolicy(Module):
    """Frame features -> LSTM -> policy logits and state value."""

    arch: ArchConfig

    def _init_core(self, rng: np.random.Generator, feat_width: int, arch: ArchConfig):
        self.lstm = LstmParams.init(feat_width, arch.lstm_hidden, rng)
        self.policy = LinearParams.init(arch.lstm_hidden, N_ACTIONS, rng, zero=arch.zero_init_heads)
        self.value = LinearParams.init(arch.lstm_hidden, 1, rng, zero=arch.zero_init_heads)
        self.icm = IcmNet(rng, arch) if arch.kind in ("capsem_ir", "icm_cnn") else None

    @property
    def hidden_size(self) -> int:
        return self.lstm.hidden_size

    def features(self, obs: Tensor, update_stats: bool = False) -> Tensor:
        raise NotImplementedError

    def initial_state(self, batch: int | None = None) -> tuple[Tensor, Tensor]:
        shape = (self.hidden_size,) if batch is None else (batch, self.hidden_size)
        return T.zeros(shape), T.zeros(shape)

    def heads(self, h: Tensor) -> tuple[Tensor, Tensor]:
        v = dense(h, self.value)
        return dense(h, self.policy), v.reshape(v.shape[:-1])

    def __call__(self, obs: Tensor, state: tuple[Tensor, Tensor], update_stats: bool = False) -> PolicyOutput:
        h, c = state
        if h.shape[-1] != self.hidden_size or c.shape != h.shape:
            raise ShapeError(f"LSTM state {h.shape}/{c.shape} does not match hidden size {self.hidden_size}")
        feat = self.features(obs, update_stats)
        h, c = lstm_step(feat, h, c, self.lstm)
        logits, value = self.heads(h)
        return PolicyOutput(logits, value, (h, c))

    def replay(self, obs_seq: Tensor, state: tuple[Tensor, Tensor], dones) -> tuple[Tensor, Tensor]:
        """Re-run a recorded sequence with gradients; LSTM state is zeroed after each done."""
        frames = obs_seq.data if isinstance(obs_seq, Tensor) else np.asarray(obs_seq)
        # repeated frames share one feature computation; gather sums their gradients
        slot: dict[bytes, int] = {}
        firsts, inverse = [], []
        for i, f in enumerate(frames):
            j = slot.setdefault(f.tobytes(), len(slot))
            if j == len(firsts):
                firsts.append(i)
            inverse.append(j)
        feats = self.features(Tensor(frames[firsts]), update_stats=True)
        if len(firsts) != len(frames):
            feats = feats[np.array(inverse)]
        hs, _ = lstm_sequence(feats, state[0], state[1], self.lstm, dones)
        return self.heads(hs)


class CapsEmNet(RecurrentPolicy):
    """Conv/BN/ELU front end, primary and dense capsule layers, then the recurrent heads."""

    def __init__(self, arch: ArchConfig, rng: np.random.Generator):
        self.arch = arch
        self.conv = ConvParams.init(OBS_SHAPE[0], arch.front_channels, 3, 2, 1, rng)
        self.bn = BatchNormParams.init(arch.front_channels)
        self.primary = ConvParams.init(arch.front_channels, arch.primary_channels, 9, 2, 0, rng)
        side = conv_output_size(conv_output_size(OBS_SHAPE[1], 3, 2, 1), 9, 2, 0)
        if arch.primary_channels % arch.caps_dim:
            raise ConfigError("primary channels must be a multiple of the capsule dimension")
        self.n_primary = side * side * (arch.primary_channels // arch.caps_dim)
        self.dense = DenseCapsParams.init(
            self.n_primary, arch.dense_caps, arch.caps_dim, arch.dense_dim, arch.routing_iters, rng
        )
        self.dense.detach_routing = arch.detach_routing
        self._init_core(rng, arch.dense_caps * arch.dense_dim, arch)

    def capsules(self, obs: Tensor, update_stats: bool = False):
        if obs.shape[-3:] != OBS_SHAPE:
            raise ShapeError(f"expected frames of shape {OBS_SHAPE}, got {obs.shape}")
        x = elu(batch_norm(conv2d(obs, self.conv), self.bn, per_sample=True, update_stats=update_stats))
        prim = primary_capsules(x, self.primary, self.arch.caps_dim)
        return prim, dense_capsules(prim, self.dense)

    def features(self, obs: Tensor, update_stats: bool = False) -> Tensor:
        _, caps = self.capsules(obs, update_stats)
        return caps.poses.reshape(*obs.shape[:-3], caps.count * caps.dim)


class CnnBaselineNet(RecurrentPolicy):
    """Convolutional embedding in place of the capsule layers."""

    def __init__(self, arch: ArchConfig, rng: np.random.Generator):
        self.arch = arch
        self.embed = CnnEmbedNet(rng, arch.embed_channels, arch.embed_blocks)
        self._init_core(rng, self.embed.width, arch)

    def features(self, obs: Tensor, update_stats: bool = False) -> Tensor:
        return self.embed(obs, update_stats)


def build_net(arch: ArchConfig, seed: int) -> RecurrentPolicy:
    rng = np.random.default_rng(seed)
    if arch.kind in ("capsem", "capsem_ir"):
        return CapsEmNet(arch, rng)
    return CnnBaselineNet(arch, rng)


def action_distribution(logits: Tensor) -> tuple[Tensor, Tensor]:
    """Log-probabilities and entropy of the categorical policy along the last axis."""
    logp = log_softmax(logits)
    probs = T.exp(logp)
    entropy = -(probs * logp).sum(axis=-1)
    return logp, entropy


# ---------------------------------------------------------------------------
# Parameter accounting
# ---------------------------------------------------------------------------


def param_count(net: Module) -> int:
    """Number of trainable scalars; batch-norm running statistics are excluded."""
    return net.num_parameters()


def param_breakdown(net: Module) -> list[tuple[str, int]]:
    """Trainable parameters grouped by owning layer, in definition order."""
    groups: dict[str, int] = {}
    for name, t in net.named_parameters():
        layer = name.rsplit(".", 1)[0]
        groups[layer] = groups.get(layer, 0) + t.size
    return list(groups.items())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"


def save_checkpoint(path, net: RecurrentPolicy, seed: int, extra: dict | None = None) -> None:
    """Write every named tensor as little-endian float64 plus a JSON manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = net.state_dict()
    manifest = {
        "format": 1,
        "arch": asdict(net.arch),
        "seed": seed,
        "tensors": {name: list(arr.shape) for name, arr in state.items()},
        **(extra or {}),
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        # fixed timestamps keep identical checkpoints byte-identical
        info = zipfile.ZipInfo(MANIFEST, date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(manifest, indent=2, sort_keys=True))
        for name, arr in state.items():
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arr, dtype="<f8"), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"tensors/{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read(MANIFEST))
        state = {}
        for name in manifest["tensors"]:
            state[name] = np.load(io.BytesIO(zf.read(f"tensors/{name}.npy")), allow_pickle=False)
    return manifest, state


def load_checkpoint(path) -> tuple[RecurrentPolicy, dict]:
    """Rebuild the network recorded in a checkpoint and fill in its tensors."""
    manifest, state = read_checkpoint(path)
    net = build_net(ArchConfig.from_dict(manifest["arch"]), manifest.get("seed", 0))
    net.load_state_dict(state)
    return net, manifest
