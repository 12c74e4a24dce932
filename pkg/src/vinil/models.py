"""Embedding network, projector head and the expandable instance classifier.

All parameters live in a single flat ``name -> Tensor`` mapping so that the
optimizer, the EwC anchor and the checkpoint writer can treat them alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .optim import OptimizerState
from .tensor import ShapeError, Tensor

ENCODER_KINDS = ("mlp", "smallconv")
# fixed affine map of [0, 1] pixels to roughly zero mean, unit spread
PIXEL_MEAN = 0.5
PIXEL_SCALE = 4.0
_DEFAULT_HIDDEN = {"mlp": (256, 128), "smallconv": (16, 32)}


@dataclass
class EncoderConfig:
    kind: str = "mlp"
    input_shape: tuple[int, int, int] = (3, 32, 32)
    hidden: tuple[int, ...] | None = None
    embed_dim: int = 64
    projector_hidden: int = 256
    projector_dim: int = 128
    use_projector: bool = True

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}; expected one of {ENCODER_KINDS}")
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if len(self.input_shape) != 3 or min(self.input_shape) <= 0:
            raise ValueError(f"input_shape must be (C, H, W) with positive sizes, got {self.input_shape}")
        self.hidden = tuple(_DEFAULT_HIDDEN[self.kind] if self.hidden is None else self.hidden)
        if not self.hidden or min(self.hidden) <= 0:
            raise ValueError("hidden widths must be a nonempty list of positive ints")
        if self.embed_dim < 2:
            raise ValueError(f"embed_dim must be >= 2, got {self.embed_dim}")
        if self.projector_hidden <= 0 or self.projector_dim <= 0:
            raise ValueError("projector widths must be positive")


@dataclass
class ModelState:
    config: EncoderConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    num_instances: int = 0

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def shared_params(self) -> dict[str, Tensor]:
        """Encoder and projector parameters; the classifier is excluded."""
        return {k: v for k, v in self.params.items() if not k.startswith("classifier.")}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


# He-uniform for layers feeding a relu, variance-preserving otherwise; zero biases
def _linear(params, name, fan_in, fan_out, rng, gain=2.0):
    bound = math.sqrt(3.0 * gain / fan_in)
    params[f"{name}.weight"] = Tensor(_uniform(rng, bound, (fan_in, fan_out)), requires_grad=True)
    params[f"{name}.bias"] = Tensor(np.zeros(fan_out), requires_grad=True)


def _conv(params, name, c_in, c_out, k, rng, gain=2.0):
    bound = math.sqrt(3.0 * gain / (c_in * k * k))
    params[f"{name}.weight"] = Tensor(_uniform(rng, bound, (c_out, c_in, k, k)), requires_grad=True)
    params[f"{name}.bias"] = Tensor(np.zeros(c_out), requires_grad=True)


def init_model(config: EncoderConfig, seed: int | np.random.Generator = 0) -> ModelState:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    c, h, w = config.input_shape
    if config.kind == "mlp":
        widths = [c * h * w, *config.hidden, config.embed_dim]
        last = len(widths) - 2
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            _linear(params, f"encoder.fc{i}", a, b, rng, gain=1.0 if i == last else 2.0)
    else:
        channels = [c, *config.hidden]
        for i, (a, b) in enumerate(zip(channels[:-1], channels[1:])):
            _conv(params, f"encoder.conv{i}", a, b, 3, rng)
        _linear(params, "encoder.head", channels[-1], config.embed_dim, rng, gain=1.0)
    if config.use_projector:
        _linear(params, "projector.fc0", config.embed_dim, config.projector_hidden, rng)
        _linear(params, "projector.fc1", config.projector_hidden, config.projector_dim, rng, gain=1.0)
    return ModelState(config=config, params=params)


def encode(model: ModelState, batch) -> Tensor:
    """Map images (B, C, H, W) to embeddings (B, D)."""
    x = T.as_tensor(batch)
    cfg = model.config
    if x.ndim != 4 or x.shape[1:] != cfg.input_shape:
        raise ShapeError("encode", x.shape, ("B", *cfg.input_shape))
    p = model.params
    x = T.mul(T.sub(x, PIXEL_MEAN), PIXEL_SCALE)
    if cfg.kind == "mlp":
        n = len(cfg.hidden) + 1
        h = T.flatten(x)
        for i in range(n):
            h = T.affine(h, p[f"encoder.fc{i}.weight"], p[f"encoder.fc{i}.bias"])
            if i < n - 1:
                h = T.relu(h)
        return h
    h = x
    for i in range(len(cfg.hidden)):
        h = T.relu(T.conv2d(h, p[f"encoder.conv{i}.weight"], p[f"encoder.conv{i}.bias"],
                            stride=2, padding=1))
    pooled = T.mean(h, axis=(2, 3))
    return T.affine(pooled, p["encoder.head.weight"], p["encoder.head.bias"])


def project(model: ModelState, h) -> Tensor:
    """Two-layer relu projector; identity when the projector is disabled."""
    h = T.as_tensor(h)
    if h.ndim != 2 or h.shape[1] != model.embed_dim:
        raise ShapeError("project", h.shape, ("B", model.embed_dim))
    if not model.config.use_projector:
        return h
    p = model.params
    z = T.relu(T.affine(h, p["projector.fc0.weight"], p["projector.fc0.bias"]))
    return T.affine(z, p["projector.fc1.weight"], p["projector.fc1.bias"])


def classify(model: ModelState, h) -> Tensor:
    if model.num_instances < 1:
        raise ValueError("classify: classifier is empty; call expand_classifier first")
    h = T.as_tensor(h)
    if h.ndim != 2 or h.shape[1] != model.embed_dim:
        raise ShapeError("classify", h.shape, ("B", model.embed_dim))
    return T.affine(h, model.params["classifier.weight"], model.params["classifier.bias"])


def expand_classifier(model: ModelState, n_new: int,
                      rng: np.random.Generator | int = 0,
                      optimizer: OptimizerState | None = None) -> ModelState:
    """Append ``n_new`` output units; existing units are left untouched."""
    if n_new <= 0:
        raise ValueError(f"expand_classifier: n_new must be >= 1, got {n_new}")
    rng = np.random.default_rng(rng)
    d = model.embed_dim
    bound = 1.0 / math.sqrt(d)
    new_w = _uniform(rng, bound, (d, n_new))
    new_b = _uniform(rng, bound, (n_new,))
    if model.num_instances == 0:
        w, b = new_w, new_b
    else:
        w = np.concatenate([model.params["classifier.weight"].values, new_w], axis=1)
        b = np.concatenate([model.params["classifier.bias"].values, new_b])
    model.params["classifier.weight"] = Tensor(w, requires_grad=True)
    model.params["classifier.bias"] = Tensor(b, requires_grad=True)
    model.num_instances += n_new
    if optimizer is not None:
        optimizer.grow("classifier.weight", w.shape)
        optimizer.grow("classifier.bias", b.shape)
    return model
