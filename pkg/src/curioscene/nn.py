"""The three networks: convolutional image encoder, parameter heads, and critic.

The encoder maps an image to a latent vector, the heads decode the latent
into an explicit scene code (per-object parameter groups plus a global light
direction), and the critic scores an image with a single probability.  All
parameters live in plain name->array dicts; a forward pass lifts them onto a
tape, so gradients come back keyed by parameter name.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import FormatError, InvalidConfig, ShapeMismatch
from .rng import derive_rng

HEAD_NAMES = ("center", "rotation", "rgb", "confidence", "light")

# First-conv geometry (kernel, stride, pad) per supported input size; every
# variant lands on a 30x30 map so the rest of each stack is fixed.
_FIRST_CONV = {32: (5, 1, 1), 64: (7, 2, 1), 128: (11, 4, 1)}

_ENCODER_TAIL = ((5, 2, 1), (3, 2, 1), (3, 2, 1), (3, 2, 0))
_CRITIC_TAIL = ((8, 4, 1), (3, 2, 1), (2, 2, 0), (1, 2, 0))
_BODY_CHANNELS = (64, 192, 384, 256)

# Sub-stream ids under (seed, 2, id); 2 is this module's stream namespace.
_NET_STREAM = 2
_ID_ENCODER, _ID_HEADS, _ID_CRITIC = 0, 1, 2

# Reporting clamp so critic probabilities stay strictly inside (0, 1) even
# when float64 sigmoid would round to exactly 0 or 1.
_PROB_EPS = 1e-12


@dataclass
class NetworkConfig:
    """Sizes shared by encoder, heads, and critic."""

    image_size: int = 64
    width_scale: float = 0.5
    latent_dim: int = 64
    n_proposals: int = 1
    enabled_heads: frozenset = frozenset(HEAD_NAMES)
    center_dim: int = 3

    def validate(self) -> None:
        if self.image_size not in _FIRST_CONV:
            raise InvalidConfig(
                f"image_size must be one of {sorted(_FIRST_CONV)}, got {self.image_size}"
            )
        if self.latent_dim < 8:
            raise InvalidConfig(f"latent_dim must be >= 8, got {self.latent_dim}")
        if self.n_proposals < 1:
            raise InvalidConfig(f"n_proposals must be >= 1, got {self.n_proposals}")
        if not self.width_scale > 0:
            raise InvalidConfig(f"width_scale must be positive, got {self.width_scale}")
        unknown = set(self.enabled_heads) - set(HEAD_NAMES)
        if unknown:
            raise InvalidConfig(f"unknown heads {sorted(unknown)}; valid: {HEAD_NAMES}")
        if "center" not in self.enabled_heads:
            raise InvalidConfig("the center head cannot be disabled")
        if self.center_dim not in (2, 3):
            raise InvalidConfig(f"center_dim must be 2 or 3, got {self.center_dim}")


@dataclass
class SceneCode:
    """Explicit scene parameters: per-object groups plus global light.

    Rotations are stored as (i, j) direction pairs; the angle is
    arctan2(j, i).  Absent groups are None.
    """

    centers: np.ndarray
    rgbs: np.ndarray | None = None
    rotations: np.ndarray | None = None
    confidences: np.ndarray | None = None
    light: np.ndarray | None = None

    @property
    def n_objects(self) -> int:
        return self.centers.shape[0]

    def validate(self) -> None:
        n = self.n_objects
        if self.centers.ndim != 2 or self.centers.shape[1] not in (2, 3):
            raise ShapeMismatch(f"centers must be (n, 2|3), got {self.centers.shape}")
        if not np.all(np.isfinite(self.centers)):
            raise ShapeMismatch("centers must be finite")
        if self.rgbs is not None:
            if self.rgbs.shape != (n, 3):
                raise ShapeMismatch(f"rgbs must be ({n}, 3), got {self.rgbs.shape}")
            if self.rgbs.min() < 0.0 or self.rgbs.max() > 1.0:
                raise ShapeMismatch("rgbs must lie in [0, 1]")
        if self.rotations is not None:
            if self.rotations.shape != (n, 2):
                raise ShapeMismatch(f"rotations must be ({n}, 2), got {self.rotations.shape}")
            if np.linalg.norm(self.rotations, axis=1).max() > math.sqrt(2.0) + 1e-9:
                raise ShapeMismatch("rotation pairs must have norm <= sqrt(2)")
        if self.confidences is not None:
            if self.confidences.shape != (n,):
                raise ShapeMismatch(f"confidences must be ({n},), got {self.confidences.shape}")
            if self.confidences.min() < 0.0 or self.confidences.max() > 1.0:
                raise ShapeMismatch("confidences must lie in [0, 1]")
        if self.light is not None:
            if self.light.shape != (2,):
                raise ShapeMismatch(f"light must be (azimuth, elevation), got {self.light.shape}")
            if not 0.0 < self.light[1] <= math.pi / 2:
                raise ShapeMismatch(f"light elevation must be in (0, pi/2], got {self.light[1]}")

    def rotation_angles(self) -> np.ndarray:
        if self.rotations is None:
            raise ShapeMismatch("scene code has no rotations")
        return np.arctan2(self.rotations[:, 1], self.rotations[:, 0])

    def to_dict(self) -> dict:
        out = {"centers": self.centers.tolist()}
        for key in ("rgbs", "rotations", "confidences", "light"):
            val = getattr(self, key)
            out[key] = None if val is None else val.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SceneCode":
        def arr(key):
            val = d.get(key)
            return None if val is None else np.asarray(val, dtype=np.float64)

        code = cls(
            centers=np.asarray(d["centers"], dtype=np.float64),
            rgbs=arr("rgbs"),
            rotations=arr("rotations"),
            confidences=arr("confidences"),
            light=arr("light"),
        )
        code.validate()
        return code


def _scaled(channels: int, width_scale: float) -> int:
    return max(8, math.ceil(channels * width_scale))


def _kaiming(rng, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class _Network:
    """Parameter bookkeeping shared by the three networks."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.bn: dict[str, ad.BatchNormState] = {}

    def param_count(self) -> int:
        return sum(a.size for a in self.params.values())

    def lift(self, tape: ad.Tape, params: dict | None = None) -> dict[str, ad.Tensor]:
        """Put every parameter on the tape; returns name -> leaf Tensor."""
        src = self.params if params is None else params
        return {name: tape.leaf(arr) for name, arr in src.items()}

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters plus batch-norm running stats, for checkpointing."""
        out = dict(self.params)
        for name, state in self.bn.items():
            out[f"bn.{name}.mean"] = state.mean
            out[f"bn.{name}.var"] = state.var
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, arr in self.params.items():
            if name not in arrays:
                raise FormatError(f"checkpoint is missing parameter '{name}'")
            if arrays[name].shape != arr.shape:
                raise FormatError(
                    f"parameter '{name}' has shape {arrays[name].shape}, expected {arr.shape}"
                )
            self.params[name] = arrays[name].astype(np.float64)
        for name, state in self.bn.items():
            mean = arrays.get(f"bn.{name}.mean")
            var = arrays.get(f"bn.{name}.var")
            if mean is None or var is None:
                raise FormatError(f"checkpoint is missing batch-norm stats for '{name}'")
            state.mean = mean.astype(np.float64)
            state.var = var.astype(np.float64)


def collect_grads(handles: dict[str, ad.Tensor], grads: ad.Gradients) -> dict[str, np.ndarray]:
    """Gradient arrays by parameter name after one backward pass."""
    return {name: grads[h] for name, h in handles.items()}


class Encoder(_Network):
    """Five strided convolutions, each followed by batch norm and ReLU."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0) -> None:
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = derive_rng(seed, _NET_STREAM, _ID_ENCODER)
        chans = [_scaled(c, cfg.width_scale) for c in _BODY_CHANNELS] + [cfg.latent_dim]
        geoms = [_FIRST_CONV[cfg.image_size], *_ENCODER_TAIL]
        self._convs: list[tuple] = []
        cin = 3
        for i, (cout, (k, stride, pad)) in enumerate(zip(chans, geoms)):
            name = f"c{i + 1}"
            self.params[f"{name}.w"] = _kaiming(rng, (cout, cin, k, k), cin * k * k)
            self.params[f"{name}.b"] = np.zeros(cout)
            self.params[f"{name}.g"] = np.ones(cout)
            self.params[f"{name}.beta"] = np.zeros(cout)
            self.bn[name] = ad.BatchNormState(cout)
            self._convs.append((name, cout, k, stride, pad))
            cin = cout

    def feature_shapes(self) -> list[tuple[int, int, int]]:
        s = self.cfg.image_size
        shapes = []
        for _, cout, k, stride, pad in self._convs:
            s = (s + 2 * pad - k) // stride + 1
            shapes.append((cout, s, s))
        return shapes

    def forward(
        self,
        tape: ad.Tape,
        handles: dict[str, ad.Tensor],
        images,
        training: bool = False,
        shapes_out: list | None = None,
    ) -> ad.Tensor:
        """(B, 3, S, S) images -> (B, latent_dim) latent codes."""
        x = images if isinstance(images, ad.Tensor) else tape.constant(images)
        s = self.cfg.image_size
        if x.data.ndim != 4 or x.data.shape[1:] != (3, s, s):
            raise ShapeMismatch(f"expected (B, 3, {s}, {s}) images, got {x.data.shape}")
        for name, cout, _, stride, pad in self._convs:
            x = ad.conv2d(x, handles[f"{name}.w"], stride, pad)
            x = x + handles[f"{name}.b"].reshape(1, cout, 1, 1)
            x = ad.batch_norm(
                x, handles[f"{name}.g"], handles[f"{name}.beta"], self.bn[name], training
            )
            x = x.relu()
            if shapes_out is not None:
                shapes_out.append(x.data.shape[1:])
        return x.reshape(x.data.shape[0], self.cfg.latent_dim)


class Critic(_Network):
    """Fully convolutional scorer: conv stack, feature mean, bias, sigmoid.

    The first four convolutions carry biases and an affine-free batch
    normalization with LeakyReLU; the last is a bare 1x1 projection.
    """

    def __init__(self, cfg: NetworkConfig, seed: int = 0) -> None:
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = derive_rng(seed, _NET_STREAM, _ID_CRITIC)
        chans = [_scaled(c, cfg.width_scale) for c in (*_BODY_CHANNELS, 64)]
        geoms = [_FIRST_CONV[cfg.image_size], *_CRITIC_TAIL]
        self._convs: list[tuple] = []
        cin = 3
        for i, (cout, (k, stride, pad)) in enumerate(zip(chans, geoms)):
            name = f"c{i + 1}"
            body = i < 4
            self.params[f"{name}.w"] = _kaiming(rng, (cout, cin, k, k), cin * k * k)
            if body:
                self.params[f"{name}.b"] = np.zeros(cout)
                self.bn[name] = ad.BatchNormState(cout)
            self._convs.append((name, cout, k, stride, pad, body))
            cin = cout
        self.params["head.b"] = np.zeros(1)

    def feature_shapes(self) -> list[tuple[int, int, int]]:
        s = self.cfg.image_size
        shapes = []
        for _, cout, k, stride, pad, _ in self._convs:
            s = (s + 2 * pad - k) // stride + 1
            shapes.append((cout, s, s))
        return shapes

    def forward(
        self,
        tape: ad.Tape,
        handles: dict[str, ad.Tensor],
        images,
        training: bool = False,
        shapes_out: list | None = None,
    ) -> ad.Tensor:
        """(B, 3, S, S) images -> (B,) logits; sigmoid(logit) is the score."""
        x = images if isinstance(images, ad.Tensor) else tape.constant(images)
        s = self.cfg.image_size
        if x.data.ndim != 4 or x.data.shape[1:] != (3, s, s):
            raise ShapeMismatch(f"expected (B, 3, {s}, {s}) images, got {x.data.shape}")
        for name, cout, _, stride, pad, body in self._convs:
            x = ad.conv2d(x, handles[f"{name}.w"], stride, pad)
            if body:
                x = x + handles[f"{name}.b"].reshape(1, cout, 1, 1)
                x = ad.batch_norm(x, None, None, self.bn[name], training)
                x = x.leaky_relu(0.01)
            if shapes_out is not None:
                shapes_out.append(x.data.shape[1:])
        feats = x.reshape(x.data.shape[0], self._convs[-1][1])
        return feats.mean(axis=1) + handles["head.b"]

    def probability(self, images) -> np.ndarray:
        """Eval-mode scores in the open interval (0, 1)."""
        tape = ad.Tape()
        logits = self.forward(tape, self.lift(tape), images, training=False)
        return np.clip(logits.sigmoid().data, _PROB_EPS, 1.0 - _PROB_EPS)


class Heads(_Network):
    """Shared trunk plus independent two-layer branches per parameter group.

    The trunk expands the latent to n_proposals blocks of D features, so each
    proposal gets its own feature transformation; branch weights are shared
    across proposals.  The light branch pools the blocks into one global
    feature vector.
    """

    D = 64

    _OUT_ACT = {
        "center": "linear",
        "rotation": "tanh",
        "rgb": "sigmoid",
        "confidence": "sigmoid",
        "light": "linear",
    }

    def __init__(self, cfg: NetworkConfig, seed: int = 0) -> None:
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = derive_rng(seed, _NET_STREAM, _ID_HEADS)
        out_dims = {
            "center": cfg.center_dim,
            "rotation": 2,
            "rgb": 3,
            "confidence": 1,
            "light": 2,
        }
        self._out_dims = out_dims
        self._add_fc(rng, "trunk", cfg.latent_dim, cfg.n_proposals * self.D)
        for group in HEAD_NAMES:
            if group in cfg.enabled_heads:
                self._add_fc(rng, f"{group}.h", self.D, self.D)
                self._add_fc(rng, f"{group}.o", self.D, out_dims[group])

    def _add_fc(self, rng, name: str, nin: int, nout: int) -> None:
        self.params[f"{name}.w"] = _kaiming(rng, (nin, nout), nin)
        self.params[f"{name}.b"] = np.zeros(nout)

    def _branch(self, handles, group: str, x: ad.Tensor) -> ad.Tensor:
        h = (ad.matmul(x, handles[f"{group}.h.w"]) + handles[f"{group}.h.b"]).relu()
        y = ad.matmul(h, handles[f"{group}.o.w"]) + handles[f"{group}.o.b"]
        act = self._OUT_ACT[group]
        if act == "tanh":
            return y.tanh()
        if act == "sigmoid":
            return y.sigmoid()
        return y

    def forward(
        self,
        tape: ad.Tape,
        handles: dict[str, ad.Tensor],
        latent: ad.Tensor,
        training: bool = False,
    ) -> dict[str, ad.Tensor]:
        """(B, latent_dim) -> scene-code tensors, keyed by plural group name."""
        cfg = self.cfg
        if latent.data.ndim != 2 or latent.data.shape[1] != cfg.latent_dim:
            raise ShapeMismatch(
                f"expected (B, {cfg.latent_dim}) latents, got {latent.data.shape}"
            )
        b = latent.data.shape[0]
        n, d = cfg.n_proposals, self.D
        trunk = (ad.matmul(latent, handles["trunk.w"]) + handles["trunk.b"]).relu()
        per = trunk.reshape(b * n, d)
        out: dict[str, ad.Tensor] = {}
        if "center" in cfg.enabled_heads:
            out["centers"] = self._branch(handles, "center", per).reshape(b, n, cfg.center_dim)
        if "rotation" in cfg.enabled_heads:
            out["rotations"] = self._branch(handles, "rotation", per).reshape(b, n, 2)
        if "rgb" in cfg.enabled_heads:
            out["rgbs"] = self._branch(handles, "rgb", per).reshape(b, n, 3)
        if "confidence" in cfg.enabled_heads:
            out["confidences"] = self._branch(handles, "confidence", per).reshape(b, n)
        if "light" in cfg.enabled_heads:
            pooled = trunk.reshape(b, n, d).mean(axis=1)
            raw = self._branch(handles, "light", pooled)
            azimuth = raw[:, 0]
            # sigmoid keeps elevation inside the open hemisphere; a zero-init
            # bias starts it at pi/4.
            elevation = raw[:, 1].sigmoid() * (math.pi / 2.0)
            out["light"] = ad.stack_cols(azimuth, elevation)
        return out


def build_encoder(cfg: NetworkConfig, seed: int = 0) -> Encoder:
    return Encoder(cfg, seed)


def build_critic(cfg: NetworkConfig, seed: int = 0) -> Critic:
    return Critic(cfg, seed)


def build_heads(cfg: NetworkConfig, seed: int = 0) -> Heads:
    return Heads(cfg, seed)


def codes_from_outputs(outputs: dict[str, ad.Tensor | np.ndarray]) -> list[SceneCode]:
    """Split batched head outputs into per-sample SceneCodes (numpy)."""
    arrays = {
        key: (val.data if isinstance(val, ad.Tensor) else np.asarray(val))
        for key, val in outputs.items()
    }
    b = arrays["centers"].shape[0]
    codes = []
    for i in range(b):
        light = arrays.get("light")
        if light is not None:
            az, el = light[i]
            light_i = np.array([math.atan2(math.sin(az), math.cos(az)), el])
        else:
            light_i = None
        codes.append(
            SceneCode(
                centers=arrays["centers"][i].copy(),
                rgbs=None if "rgbs" not in arrays else arrays["rgbs"][i].copy(),
                rotations=None if "rotations" not in arrays else arrays["rotations"][i].copy(),
                confidences=None
                if "confidences" not in arrays
                else arrays["confidences"][i].copy(),
                light=light_i,
            )
        )
    return codes


def encode(images: np.ndarray, encoder: Encoder, heads: Heads):
    """Eval-mode image(s) -> SceneCode(s); single image in, single code out."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    batch = images[None] if single else images
    tape = ad.Tape()
    latent = encoder.forward(tape, encoder.lift(tape), batch, training=False)
    outputs = heads.forward(tape, heads.lift(tape), latent, training=False)
    codes = codes_from_outputs(outputs)
    return codes[0] if single else codes


# -- network files -----------------------------------------------------


def config_lines(kind: str, cfg: NetworkConfig) -> list[str]:
    """Plain-text topology header for a checkpoint."""
    return [
        f"curioscene-net {kind}",
        f"image_size={cfg.image_size}",
        f"width_scale={cfg.width_scale!r}",
        f"latent_dim={cfg.latent_dim}",
        f"n_proposals={cfg.n_proposals}",
        f"enabled_heads={','.join(h for h in HEAD_NAMES if h in cfg.enabled_heads)}",
        f"center_dim={cfg.center_dim}",
    ]


def parse_config_lines(lines: list[str]) -> tuple[str, NetworkConfig]:
    if not lines or not lines[0].startswith("curioscene-net "):
        raise FormatError("missing 'curioscene-net' topology header")
    kind = lines[0].split(" ", 1)[1]
    fields = {}
    for line in lines[1:]:
        key, _, val = line.partition("=")
        if not _:
            raise FormatError(f"malformed topology line {line!r}")
        fields[key] = val
    try:
        cfg = NetworkConfig(
            image_size=int(fields["image_size"]),
            width_scale=float(fields["width_scale"]),
            latent_dim=int(fields["latent_dim"]),
            n_proposals=int(fields["n_proposals"]),
            enabled_heads=frozenset(fields["enabled_heads"].split(",")),
            center_dim=int(fields["center_dim"]),
        )
    except KeyError as exc:
        raise FormatError(f"topology header is missing {exc}") from exc
    cfg.validate()
    return kind, cfg


_BUILDERS = {"encoder": build_encoder, "critic": build_critic, "heads": build_heads}


def save_network(path, kind: str, net) -> None:
    """One network to disk: topology text, blank line, parameter block."""
    if kind not in _BUILDERS:
        raise InvalidConfig(f"unknown network kind {kind!r}")
    header = "\n".join(config_lines(kind, net.cfg)) + "\n\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        ad.save_param_block(fh, net.state_arrays())


def load_network(path):
    """Rebuild a network saved by save_network; returns (kind, network)."""
    with open(path, "rb") as fh:
        lines = []
        while True:
            line = fh.readline()
            if not line:
                raise FormatError("truncated network file: no parameter block")
            text = line.decode("utf-8").rstrip("\n")
            if not text:
                break
            lines.append(text)
        kind, cfg = parse_config_lines(lines)
        if kind not in _BUILDERS:
            raise FormatError(f"unknown network kind {kind!r}")
        net = _BUILDERS[kind](cfg)
        net.load_state(ad.load_param_block(fh))
    return kind, net
