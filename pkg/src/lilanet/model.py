"""LiLa-Net encoder / latent / skip / decoder network."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class SkipVariant(str, Enum):
    NONE = "none"
    SS1 = "ss1"
    SS2 = "ss2"
    SS3 = "ss3"
    SS4 = "ss4"


def skip_routes(variant: SkipVariant | str, depth: int = 3) -> dict[int, int]:
    """Map decoder layer (1-based) -> encoder layer (1-based) whose features it receives.

    ss1 mirrors every encoder layer k onto decoder layer depth+1-k; ss2, ss3
    and ss4 keep one of those pairs (first, middle, last encoder layer).
    """
    variant = SkipVariant(variant)
    mirror = {depth + 1 - k: k for k in range(1, depth + 1)}
    if variant is SkipVariant.NONE:
        return {}
    if variant is SkipVariant.SS1:
        return mirror
    if depth != 3:
        raise ConfigError("skip", f"{variant.value} is defined for depth 3 only")
    enc = {SkipVariant.SS2: 1, SkipVariant.SS3: 2, SkipVariant.SS4: 3}[variant]
    return {depth + 1 - enc: enc}


@dataclass
class ModelConfig:
    encoder_widths: list[int] = field(default_factory=lambda: [64, 128, 1024])
    latent_dim: int = 1024
    decoder_widths: list[int] = field(default_factory=lambda: [512, 256])
    output_channels: int = 3
    skip: SkipVariant = SkipVariant.SS4
    points: int = 2048
    init_seed: int = 0
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    # multiplies the He bound of the output layer, which has no ReLU after it
    output_init_gain: float = 1.0

    def __post_init__(self):
        self.skip = SkipVariant(self.skip)
        self.encoder_widths = [int(w) for w in self.encoder_widths]
        self.decoder_widths = [int(w) for w in self.decoder_widths]

    def validate(self) -> None:
        if not self.encoder_widths or any(w < 1 for w in self.encoder_widths):
            raise ConfigError("encoder_widths", "must be a non-empty list of positive widths")
        if self.encoder_widths[-1] != self.latent_dim:
            raise ConfigError("latent_dim", f"last encoder width {self.encoder_widths[-1]} != latent_dim {self.latent_dim}")
        if len(self.decoder_widths) != len(self.encoder_widths) - 1:
            raise ConfigError("decoder_widths", "decoder depth (hidden widths + output layer) must equal encoder depth")
        if any(w < 1 for w in self.decoder_widths):
            raise ConfigError("decoder_widths", "widths must be positive")
        if self.output_channels != 3:
            raise ConfigError("output_channels", "must be 3")
        if self.points < 1:
            raise ConfigError("points", "must be positive")
        if not self.output_init_gain > 0:
            raise ConfigError("output_init_gain", "must be positive")
        skip_routes(self.skip, self.depth)

    @property
    def depth(self) -> int:
        return len(self.encoder_widths)

    def decoder_io(self) -> list[tuple[int, int]]:
        """(input width incl. skip, output width) per decoder layer."""
        routes = skip_routes(self.skip, self.depth)
        outs = self.decoder_widths + [self.output_channels]
        ins = [self.latent_dim] + self.decoder_widths
        io = []
        for j, (cin, cout) in enumerate(zip(ins, outs), start=1):
            if j in routes:
                cin += self.encoder_widths[routes[j] - 1]
            io.append((cin, cout))
        return io

    def to_dict(self) -> dict:
        d = asdict(self)
        d["skip"] = self.skip.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def param_count(config: ModelConfig) -> int:
    """Closed-form count of trainable values (weights, biases, batch-norm scale/shift)."""
    config.validate()
    total = 0
    cin = 3
    for w in config.encoder_widths:
        total += cin * w + w + 2 * w
        cin = w
    io = config.decoder_io()
    for j, (i, o) in enumerate(io):
        total += i * o + o
        if j < len(io) - 1:
            total += 2 * o
    return total


@dataclass
class EncoderFeatures:
    layers: list[Tensor]

    def widths(self) -> list[int]:
        return [t.shape[1] for t in self.layers]


class LiLaNet:
    """Parameter store plus forward passes. ``training`` selects the batch-norm mode."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], bn: dict[str, BatchNormState]):
        self.config = config
        self.params = params
        self.bn = bn
        self.training = True

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def train(self) -> "LiLaNet":
        self.training = True
        return self

    def eval(self) -> "LiLaNet":
        self.training = False
        return self

    def param_total(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every persisted array: trainable values plus batch-norm running statistics."""
        out = {name: p.data for name, p in self.params.items()}
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def __call__(self, X) -> Tensor:
        return forward(self, X)


def build(config: ModelConfig, dtype=np.float32) -> LiLaNet:
    """Allocate layers and draw He-uniform weights from ``config.init_seed``."""
    config.validate()
    rng = np.random.default_rng(config.init_seed)
    params: dict[str, Tensor] = {}
    bn: dict[str, BatchNormState] = {}

    def linear(prefix: str, cin: int, cout: int, gain: float = 1.0):
        bound = gain * np.sqrt(6.0 / cin)
        params[f"{prefix}.weight"] = Tensor(rng.uniform(-bound, bound, size=(cout, cin)).astype(dtype),
                                            requires_grad=True, name=f"{prefix}.weight")
        params[f"{prefix}.bias"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=f"{prefix}.bias")

    def norm(prefix: str, c: int):
        params[f"{prefix}.gamma"] = Tensor(np.ones(c, dtype=dtype), requires_grad=True, name=f"{prefix}.gamma")
        params[f"{prefix}.beta"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True, name=f"{prefix}.beta")
        bn[prefix] = BatchNormState.initialized(c, dtype=dtype, momentum=config.bn_momentum, eps=config.bn_eps)

    cin = 3
    for k, w in enumerate(config.encoder_widths, start=1):
        linear(f"enc{k}", cin, w)
        norm(f"enc{k}", w)
        cin = w
    io = config.decoder_io()
    for j, (i, o) in enumerate(io, start=1):
        linear(f"dec{j}", i, o, 1.0 if j < len(io) else config.output_init_gain)
        if j < len(io):
            norm(f"dec{j}", o)
    return LiLaNet(config, params, bn)


def _as_input(model: LiLaNet, X) -> Tensor:
    if isinstance(X, Tensor):
        return X
    arr = np.asarray(X, dtype=model.dtype)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1] != 3:
        raise ad.ShapeError(f"expected input [B,3,M], got {arr.shape}")
    return Tensor(arr)


def _block(model: LiLaNet, prefix: str, x: Tensor) -> Tensor:
    p = model.params
    h = ad.pointwise_linear(x, p[f"{prefix}.weight"], p[f"{prefix}.bias"])
    h = ad.batch_norm(h, p[f"{prefix}.gamma"], p[f"{prefix}.beta"], model.bn[prefix], model.training)
    return ad.relu(h)


def encode(model: LiLaNet, X) -> tuple[Tensor, EncoderFeatures]:
    """Returns the pooled latent ``[B, L, 1]`` and the per-layer activations."""
    h = _as_input(model, X)
    feats = []
    for k in range(1, model.config.depth + 1):
        try:
            h = _block(model, f"enc{k}", h)
        except ad.NumericError as e:
            raise ad.NumericError(f"encoder layer {k}: {e}") from e
        feats.append(h)
    latent = ad.max_pool_points(h)
    return latent, EncoderFeatures(feats)


def decode(model: LiLaNet, latent: Tensor, feats: EncoderFeatures,
           variant: SkipVariant | str | None = None) -> Tensor:
    cfg = model.config
    variant = cfg.skip if variant is None else SkipVariant(variant)
    if variant is not cfg.skip:
        raise ConfigError("skip", f"model was built for {cfg.skip.value}, cannot decode with {variant.value}")
    routes = skip_routes(variant, cfg.depth)
    M = feats.layers[0].shape[2]
    if not isinstance(latent, Tensor):
        arr = np.asarray(latent, dtype=model.dtype)
        latent = Tensor(arr[:, :, None] if arr.ndim == 2 else arr)
    if latent.shape[1] != cfg.latent_dim:
        raise ConfigError("latent_dim", f"latent has {latent.shape[1]} channels, model expects {cfg.latent_dim}")
    h = ad.replicate_points(latent, M)
    n_dec = cfg.depth
    p = model.params
    for j in range(1, n_dec + 1):
        if j in routes:
            s = feats.layers[routes[j] - 1]
            if s.shape[1] != cfg.encoder_widths[routes[j] - 1]:
                raise ConfigError("skip", f"skip feature width {s.shape[1]} does not match encoder layer {routes[j]}")
            h = ad.concat_channels(h, s)
        W = p[f"dec{j}.weight"]
        if W.shape[1] != h.shape[1]:
            raise ConfigError("skip", f"decoder layer {j} expects {W.shape[1]} channels, got {h.shape[1]}")
        if j < n_dec:
            h = _block(model, f"dec{j}", h)
        else:
            h = ad.pointwise_linear(h, W, p[f"dec{j}.bias"])
    return h


def forward(model: LiLaNet, X) -> Tensor:
    latent, feats = encode(model, X)
    return decode(model, latent, feats)


def random_latent(latent_dim: int, seed: int, dtype=np.float32) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(latent_dim).astype(dtype)


def forward_random_latent(model: LiLaNet, X, rng_seed: int) -> Tensor:
    """Forward pass with the latent swapped for a seeded N(0, 1) vector shared by the batch."""
    latent, feats = encode(model, X)
    B = latent.shape[0]
    z = random_latent(model.config.latent_dim, rng_seed, model.dtype)
    fake = Tensor(np.broadcast_to(z[None, :, None], (B, z.size, 1)).copy())
    return decode(model, fake, feats)


def latent_vectors(model: LiLaNet, X) -> np.ndarray:
    """Latents as a ``[B, L]`` array, computed without recording a graph."""
    with ad.no_grad():
        latent, _ = encode(model, X)
    return latent.data[:, :, 0]


class IdentityModel:
    """Test hook standing in for a trained network: reconstruction == input."""

    training = False

    def eval(self):
        return self

    def train(self):
        return self

    def __call__(self, X) -> Tensor:
        arr = X.data if isinstance(X, Tensor) else np.asarray(X)
        return Tensor(arr.copy())
