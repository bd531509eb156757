"""Encoder, decoder and per-feature policies.

Two layouts are provided:

* :class:`SharedModel` -- conv encoder whose 32-unit ReLU layer also feeds the
  policy heads, and a decoder mirroring the encoder with transposed convs.
* :class:`SeparateModel` -- encoder, decoder and each policy have their own
  parameters; policy ``k`` is ``softmax(s @ theta_k)`` on the raw pixels.

Everything works on batches: observations are ``(N, C, H, W)`` arrays,
features ``(N, n)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ModelShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "shared"  # shared | separate
    obs_shape: tuple = (1, 10, 10)
    n_features: int = 4
    num_actions: int = 4
    # shared layout
    conv_channels: int = 16
    kernel_size: int = 3
    conv_stride: int = 1
    conv_padding: str = "same"
    fc_units: int = 32
    policy_grad_into_trunk: bool = True
    head_init_scale: float = 0.1
    # separate layout
    hidden_units: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "obs_shape", tuple(int(x) for x in self.obs_shape))
        if self.variant not in ("shared", "separate"):
            raise ModelShapeError(f"unknown model variant {self.variant!r}")
        if min(self.n_features, self.num_actions, self.fc_units, self.hidden_units,
               self.conv_channels) < 1:
            raise ModelShapeError("layer widths must be positive")

    @property
    def n_policies(self) -> int:
        return self.n_features


def glorot(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _dense(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    y = ad.matmul(x, w)
    return y if b is None else y + b


def _as_batch(s, obs_shape: tuple) -> tuple[Tensor, bool]:
    s = s if isinstance(s, Tensor) else ad.tensor(s)
    if s.shape == obs_shape:
        return s.reshape((1,) + obs_shape), True
    if s.ndim == len(obs_shape) + 1 and s.shape[1:] == obs_shape:
        return s, False
    raise ModelShapeError(f"observation shape {s.shape} does not match {obs_shape}")


class Model:
    """Named parameter arrays plus the forward passes shared by both layouts."""

    config: ModelConfig
    params: dict[str, Tensor]

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params = {}
        self._init_params(np.random.default_rng(config.seed))

    # -- parameter groups --------------------------------------------------
    def _init_params(self, rng):
        raise NotImplementedError

    def group(self, name: str) -> list[str]:
        if name == "encoder":
            return [k for k in self.params if k.startswith("enc.")]
        if name == "decoder":
            return [k for k in self.params if k.startswith("dec.")]
        raise KeyError(name)

    def policy_group(self, k: int) -> list[str]:
        return [name for name in self.params if name.startswith(f"pi{k}.")]

    def tensors(self, names) -> list[Tensor]:
        return [self.params[n] for n in names]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise CheckpointError(
                f"parameter names differ: missing {sorted(set(self.params) - set(state))}, "
                f"unexpected {sorted(set(state) - set(self.params))}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise CheckpointError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def copy(self) -> "Model":
        other = type(self)(self.config)
        other.load_state_dict(self.state_dict())
        return other

    # -- forward -----------------------------------------------------------
    @property
    def n_features(self) -> int:
        return self.config.n_features

    @property
    def n_policies(self) -> int:
        return self.config.n_policies

    @property
    def num_actions(self) -> int:
        return self.config.num_actions

    def features(self, x: Tensor) -> tuple[Tensor | None, Tensor]:
        """Batched encoder: returns (policy trunk or None, h of shape (N, n))."""
        raise NotImplementedError

    def decode_batch(self, h: Tensor) -> Tensor:
        raise NotImplementedError

    def policy_logits(self, x: Tensor, k: int, trunk: Tensor | None = None) -> Tensor:
        raise NotImplementedError

    def encode(self, s) -> Tensor:
        """h = f(s); a single observation gives shape (n,), a batch (N, n)."""
        x, single = _as_batch(s, self.config.obs_shape)
        h = self.features(x)[1]
        return h.reshape(h.shape[1:]) if single else h

    def decode(self, h) -> Tensor:
        h = h if isinstance(h, Tensor) else ad.tensor(h)
        single = h.ndim == 1
        if h.shape[-1] != self.n_features or h.ndim not in (1, 2):
            raise ModelShapeError(f"latent shape {h.shape} does not match n={self.n_features}")
        out = self.decode_batch(h.reshape(1, -1) if single else h)
        return out.reshape(out.shape[1:]) if single else out

    def reconstruction_loss(self, s) -> Tensor:
        """0.5 * ||s - g(f(s))||^2, summed over the batch."""
        x, _ = _as_batch(s, self.config.obs_shape)
        diff = x - self.decode_batch(self.features(x)[1])
        return diff.square().sum() * 0.5

    def reconstruction_loss_from(self, h: Tensor, s) -> Tensor:
        """Same loss with a given latent, so only the decoder is in the graph."""
        x, _ = _as_batch(s, self.config.obs_shape)
        h = h.reshape(x.shape[0], -1)
        return (x - self.decode_batch(h)).square().sum() * 0.5

    def all_policy_probs(self, x) -> np.ndarray:
        """Plain array (N, K, A) of every policy's action distribution."""
        x, _ = _as_batch(x, self.config.obs_shape)
        with ad.no_grad():
            trunk = self.features(x)[0]
            return np.stack([ad.softmax(self.policy_logits(x, k, trunk), axis=-1).data
                             for k in range(self.n_policies)], axis=1)

    def _check_k(self, k: int) -> None:
        if not 0 <= k < self.n_policies:
            raise IndexError(f"policy index {k} out of range for {self.n_policies} policies")

    def policy_probs(self, s, k: int) -> Tensor:
        self._check_k(k)
        x, single = _as_batch(s, self.config.obs_shape)
        trunk = self.features(x)[0]
        p = ad.softmax(self.policy_logits(x, k, trunk), axis=-1)
        return p.reshape(p.shape[1:]) if single else p

    def log_policy(self, s, k: int) -> Tensor:
        self._check_k(k)
        x, single = _as_batch(s, self.config.obs_shape)
        trunk = self.features(x)[0]
        p = ad.log_softmax(self.policy_logits(x, k, trunk), axis=-1)
        return p.reshape(p.shape[1:]) if single else p

    def sample_action(self, s, k: int, rng: np.random.Generator) -> int:
        probs = self.policy_probs(s, k).data
        return int(rng.choice(len(probs), p=probs))


class SharedModel(Model):
    def _init_params(self, rng):
        c = self.config
        cin, h, w = c.obs_shape
        ch, ks = c.conv_channels, c.kernel_size
        h1 = ad.conv_output_size(h, ks, c.conv_stride, c.conv_padding)
        w1 = ad.conv_output_size(w, ks, c.conv_stride, c.conv_padding)
        h2 = ad.conv_output_size(h1, ks, c.conv_stride, c.conv_padding)
        w2 = ad.conv_output_size(w1, ks, c.conv_stride, c.conv_padding)
        self._hw = ((h, w), (h1, w1), (h2, w2))
        flat = ch * h2 * w2
        p = {}
        p["enc.conv1.w"] = glorot(rng, (ch, cin, ks, ks), cin * ks * ks, ch * ks * ks)
        p["enc.conv1.b"] = np.zeros((ch, 1, 1))
        p["enc.conv2.w"] = glorot(rng, (ch, ch, ks, ks), ch * ks * ks, ch * ks * ks)
        p["enc.conv2.b"] = np.zeros((ch, 1, 1))
        p["enc.fc.w"] = glorot(rng, (flat, c.fc_units), flat, c.fc_units)
        p["enc.fc.b"] = np.zeros(c.fc_units)
        p["enc.out.w"] = glorot(rng, (c.fc_units, c.n_features), c.fc_units, c.n_features)
        p["enc.out.b"] = np.zeros(c.n_features)
        p["dec.fc1.w"] = glorot(rng, (c.n_features, c.fc_units), c.n_features, c.fc_units)
        p["dec.fc1.b"] = np.zeros(c.fc_units)
        p["dec.fc2.w"] = glorot(rng, (c.fc_units, flat), c.fc_units, flat)
        p["dec.fc2.b"] = np.zeros(flat)
        p["dec.deconv2.w"] = glorot(rng, (ch, ch, ks, ks), ch * ks * ks, ch * ks * ks)
        p["dec.deconv2.b"] = np.zeros((ch, 1, 1))
        p["dec.deconv1.w"] = glorot(rng, (ch, cin, ks, ks), ch * ks * ks, cin * ks * ks)
        p["dec.deconv1.b"] = np.zeros((cin, 1, 1))
        for k in range(c.n_policies):
            p[f"pi{k}.w"] = c.head_init_scale * glorot(
                rng, (c.fc_units, c.num_actions), c.fc_units, c.num_actions)
            p[f"pi{k}.b"] = np.zeros(c.num_actions)
        self.params = {k: ad.parameter(v) for k, v in p.items()}

    def features(self, x):
        c, p = self.config, self.params
        z = ad.relu(ad.conv2d(x, p["enc.conv1.w"], c.conv_stride, c.conv_padding) + p["enc.conv1.b"])
        z = ad.relu(ad.conv2d(z, p["enc.conv2.w"], c.conv_stride, c.conv_padding) + p["enc.conv2.b"])
        z = z.reshape(z.shape[0], -1)
        trunk = ad.relu(_dense(z, p["enc.fc.w"], p["enc.fc.b"]))
        h = ad.tanh(_dense(trunk, p["enc.out.w"], p["enc.out.b"]))
        return trunk, h

    def decode_batch(self, h):
        c, p = self.config, self.params
        (hw0, hw1, hw2) = self._hw
        z = ad.relu(_dense(h, p["dec.fc1.w"], p["dec.fc1.b"]))
        z = ad.relu(_dense(z, p["dec.fc2.w"], p["dec.fc2.b"]))
        z = z.reshape(z.shape[0], c.conv_channels, *hw2)
        z = ad.relu(ad.conv2d_transpose(z, p["dec.deconv2.w"], c.conv_stride, c.conv_padding, hw1)
                    + p["dec.deconv2.b"])
        return ad.conv2d_transpose(z, p["dec.deconv1.w"], c.conv_stride, c.conv_padding, hw0) \
            + p["dec.deconv1.b"]

    def policy_logits(self, x, k, trunk=None):
        self._check_k(k)
        if trunk is None:
            trunk = self.features(x)[0]
        if not self.config.policy_grad_into_trunk:
            trunk = trunk.detach()
        return _dense(trunk, self.params[f"pi{k}.w"], self.params[f"pi{k}.b"])


class SeparateModel(Model):
    def _init_params(self, rng):
        c = self.config
        d = int(np.prod(c.obs_shape))
        hid, n = c.hidden_units, c.n_features
        p = {
            "enc.fc1.w": glorot(rng, (d, hid), d, hid),
            "enc.fc1.b": np.zeros(hid),
            "enc.fc2.w": glorot(rng, (hid, n), hid, n),
            "enc.fc2.b": np.zeros(n),
            "dec.fc1.w": glorot(rng, (n, hid), n, hid),
            "dec.fc1.b": np.zeros(hid),
            "dec.fc2.w": glorot(rng, (hid, d), hid, d),
            # positive bias keeps the ReLU output units alive at the start
            "dec.fc2.b": np.full(d, 0.01),
        }
        for k in range(c.n_policies):
            p[f"pi{k}.w"] = np.zeros((d, c.num_actions))
        self.params = {k: ad.parameter(v) for k, v in p.items()}

    def features(self, x):
        p = self.params
        z = x.reshape(x.shape[0], -1)
        z = ad.relu(_dense(z, p["enc.fc1.w"], p["enc.fc1.b"]))
        return None, ad.tanh(_dense(z, p["enc.fc2.w"], p["enc.fc2.b"]))

    def decode_batch(self, h):
        p = self.params
        z = ad.relu(_dense(h, p["dec.fc1.w"], p["dec.fc1.b"]))
        z = ad.relu(_dense(z, p["dec.fc2.w"], p["dec.fc2.b"]))
        return z.reshape(z.shape[0], *self.config.obs_shape)

    def policy_logits(self, x, k, trunk=None):
        self._check_k(k)
        return ad.matmul(x.reshape(x.shape[0], -1), self.params[f"pi{k}.w"])


def build_model(config: ModelConfig) -> Model:
    return SharedModel(config) if config.variant == "shared" else SeparateModel(config)


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: text header lines, then for each array a header line
# "param <name> <dims> <nbytes>" followed by raw little-endian float64 bytes,
# and a final "end" line. Nothing time-dependent is written, so identical
# parameters give identical files.

_MAGIC = b"ICF-CHECKPOINT 1\n"


def save_checkpoint(path, model: Model, extra: dict | None = None) -> None:
    meta = {"model": asdict(model.config), "extra": extra or {}}
    chunks = [_MAGIC, b"meta " + json.dumps(meta, sort_keys=True).encode() + b"\n",
              f"count {len(model.params)}\n".encode()]
    for name, t in model.params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        dims = ",".join(str(d) for d in t.shape) or "-"
        chunks.append(f"param {name} {dims} {len(raw)}\n".encode())
        chunks.append(raw)
        chunks.append(b"\n")
    chunks.append(b"end\n")
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (metadata, name -> array). Raises CheckpointError on any damage."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not buf.startswith(_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(_MAGIC)

    def line():
        nonlocal pos
        end = buf.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = buf[pos:end].decode()
        pos = end + 1
        return out

    try:
        head = line()
        if not head.startswith("meta "):
            raise CheckpointError(f"{path}: missing metadata")
        meta = json.loads(head[5:])
        count = int(line().split()[1])
        arrays = {}
        for _ in range(count):
            tag, name, dims, nbytes = line().split()
            if tag != "param":
                raise CheckpointError(f"{path}: malformed parameter header")
            nbytes = int(nbytes)
            if pos + nbytes + 1 > len(buf):
                raise CheckpointError(f"{path}: truncated checkpoint")
            shape = () if dims == "-" else tuple(int(d) for d in dims.split(","))
            arr = np.frombuffer(buf[pos:pos + nbytes], dtype="<f8").astype(np.float64)
            if arr.size != int(np.prod(shape)):
                raise CheckpointError(f"{path}: size mismatch for {name}")
            arrays[name] = arr.reshape(shape)
            pos += nbytes + 1
        if line() != "end":
            raise CheckpointError(f"{path}: missing end marker")
    except CheckpointError:
        raise
    except (ValueError, IndexError, UnicodeDecodeError, struct.error) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return meta, arrays


def load_checkpoint(path, expect: ModelConfig | None = None) -> Model:
    meta, arrays = read_checkpoint(path)
    config = ModelConfig(**meta["model"])
    if expect is not None and expect != config:
        raise CheckpointError(f"checkpoint model config {config} does not match expected {expect}")
    model = build_model(config)
    model.load_state_dict(arrays)
    return model
