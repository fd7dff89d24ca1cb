"""Subnet and hybrid-model assembly.

Two subnet variants share the three-conv skeleton and end in a 512-D feature
vector (at default widths): type1 keeps full resolution cheap via stride-2
convs, a 1x1 top conv, and one big average pool; type2 interleaves 3x3 convs
with progressive average pools.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .layers import AvgPool2d, BatchNorm2d, Conv2d, Dense, Flatten, ReLU, Sequential

HEAD_WIDTHS = (800, 400, 200)
N_CLASSES = 2


class ConfigError(ValueError):
    """Layer stack cannot realize the requested feature geometry."""


@dataclass(frozen=True)
class SubnetConfig:
    variant: str  # "type1" | "type2"
    in_channels: int
    widths: tuple
    first_stride: int = 2
    use_bn: bool = True
    feature_len: int = 512

    def __post_init__(self):
        if self.variant not in ("type1", "type2"):
            raise ConfigError(f"unknown subnet variant {self.variant!r}")
        if len(self.widths) != 3:
            raise ConfigError("exactly three conv widths required")


def default_subnet_config(
    variant: str, in_channels: int, width_scale: float = 1.0, use_bn: bool = True,
    first_stride: int | None = None,
) -> SubnetConfig:
    base = (16, 64, 512) if variant == "type1" else (16, 32, 128)
    widths = tuple(max(1, round(w * width_scale)) for w in base)
    feature = widths[2] if variant == "type1" else 4 * widths[2]
    if first_stride is None:
        first_stride = 2 if variant == "type1" else 1
    return SubnetConfig(
        variant=variant,
        in_channels=in_channels,
        widths=widths,
        first_stride=first_stride,
        use_bn=use_bn,
        feature_len=feature,
    )


def _conv_block(name, in_ch, out_ch, kernel, stride, pad, use_bn, rng, dtype, input_grad=True):
    conv = Conv2d(in_ch, out_ch, kernel, stride, pad, rng, dtype, input_grad=input_grad)
    layers = [(f"{name}.conv", conv)]
    if use_bn:
        layers.append((f"{name}.bn", BatchNorm2d(out_ch, dtype)))
    layers.append((f"{name}.relu", ReLU()))
    return layers


def build_subnet(cfg: SubnetConfig, input_size: int, rng=None, dtype=np.float32) -> Sequential:
    """Assemble one subnet; raises ConfigError unless the stack ends at
    exactly cfg.feature_len features per image."""
    rng = rng or np.random.default_rng(0)
    c = cfg.in_channels
    w1, w2, w3 = cfg.widths
    layers = []
    if cfg.variant == "type1":
        layers += _conv_block(
            "b1", c, w1, 5, cfg.first_stride, 2, cfg.use_bn, rng, dtype, input_grad=False
        )
        layers += _conv_block("b2", w1, w2, 3, 2, 1, cfg.use_bn, rng, dtype)
        layers += _conv_block("b3", w2, w3, 1, 2, 0, cfg.use_bn, rng, dtype)
        spatial = Sequential(layers).out_shape((1, c, input_size, input_size))[2]
        layers.append(("pool", AvgPool2d(spatial)))
    else:
        layers += _conv_block(
            "b1", c, w1, 5, cfg.first_stride, 2, cfg.use_bn, rng, dtype, input_grad=False
        )
        layers.append(("pool1", AvgPool2d(3, stride=2, pad=1)))
        layers += _conv_block("b2", w1, w2, 3, 1, 1, cfg.use_bn, rng, dtype)
        layers.append(("pool2", AvgPool2d(3, stride=2, pad=1)))
        layers += _conv_block("b3", w2, w3, 3, 2, 1, cfg.use_bn, rng, dtype)
        spatial = Sequential(layers).out_shape((1, c, input_size, input_size))[2]
        if spatial % 2:
            raise ConfigError(f"type2 spatial size {spatial} not reducible to 2x2")
        layers.append(("pool3", AvgPool2d(spatial // 2)))
    layers.append(("flatten", Flatten()))
    net = Sequential(layers)
    features = net.out_shape((1, c, input_size, input_size))
    if features != (1, cfg.feature_len):
        raise ConfigError(
            f"subnet yields {features[1]} features on {input_size}x{input_size} input, "
            f"expected {cfg.feature_len}"
        )
    return net


@dataclass(frozen=True)
class HybridConfig:
    """Everything needed to rebuild a model skeleton from a checkpoint."""

    variant: str = "type1"
    kernel_size: int = 5
    qt_labels: tuple = ("4:1", "4:2", "4:4")
    input_size: int = 256
    widths: tuple = (16, 64, 512)
    head_widths: tuple = HEAD_WIDTHS
    use_bn: bool = True
    first_stride: int = 2

    @property
    def n_groups(self) -> int:
        return len(self.qt_labels)

    def subnet_config(self) -> SubnetConfig:
        feature = self.widths[2] if self.variant == "type1" else 4 * self.widths[2]
        return SubnetConfig(
            variant=self.variant,
            in_channels=self.kernel_size**2,
            widths=tuple(self.widths),
            first_stride=self.first_stride,
            use_bn=self.use_bn,
            feature_len=feature,
        )

    def to_json_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json_dict(d: dict) -> "HybridConfig":
        d = dict(d)
        for key in ("qt_labels", "widths", "head_widths"):
            d[key] = tuple(d[key])
        return HybridConfig(**d)


class HybridModel:
    """Per-group subnets feeding a shared fully-connected head.

    Group order is fixed by config.qt_labels and serialized with checkpoints.
    """

    def __init__(self, config: HybridConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.dtype = dtype
        self.training = True
        rng = np.random.default_rng([seed, 0])
        sub_cfg = config.subnet_config()
        self.subnets = [
            build_subnet(sub_cfg, config.input_size, rng, dtype)
            for _ in range(config.n_groups)
        ]
        self.feature_len = sub_cfg.feature_len
        head_layers = []
        width_in = config.n_groups * self.feature_len
        for i, width in enumerate(config.head_widths):
            head_layers.append((f"fc{i}", Dense(width_in, width, rng, dtype)))
            head_layers.append((f"relu{i}", ReLU()))
            width_in = width
        head_layers.append(("logits", Dense(width_in, N_CLASSES, rng, dtype)))
        self.head = Sequential(head_layers)

    # -- mode ---------------------------------------------------------------
    def train_mode(self):
        self.training = True
        return self

    def eval_mode(self):
        self.training = False
        return self

    # -- passes ---------------------------------------------------------------
    def forward(self, groups, training: bool | None = None) -> np.ndarray:
        """groups: one (N, k*k, H, W) array per Q&T group -> logits (N, 2)."""
        if len(groups) != len(self.subnets):
            raise ValueError(
                f"model expects {len(self.subnets)} residual groups, got {len(groups)}"
            )
        training = self.training if training is None else training
        feats = [net.forward(g, training) for net, g in zip(self.subnets, groups)]
        return self.head.forward(np.concatenate(feats, axis=1), training)

    def backward(self, grad_logits: np.ndarray) -> None:
        grad_feat = self.head.backward(grad_logits)
        splits = np.split(grad_feat, len(self.subnets), axis=1)
        for net, g in zip(self.subnets, splits):
            net.backward(np.ascontiguousarray(g))

    def predict_proba(self, groups) -> np.ndarray:
        return ops.softmax(self.forward(groups, training=False))

    def predict(self, groups) -> np.ndarray:
        return np.argmax(self.forward(groups, training=False), axis=1)

    # -- parameter plumbing ----------------------------------------------------
    def named_layers(self):
        for gi, net in enumerate(self.subnets):
            for name, layer in net.named_layers:
                yield f"g{gi}.{name}", layer
        for name, layer in self.head.named_layers:
            yield f"head.{name}", layer

    def named_params(self):
        """Yields (path, layer, attr, decayed) in a fixed order."""
        for lname, layer in self.named_layers():
            for attr in layer.param_names():
                yield f"{lname}.{attr}", layer, attr, attr in layer.decayed

    def named_state(self):
        for lname, layer in self.named_layers():
            for attr in layer.state_names():
                yield f"{lname}.{attr}", layer, attr

    def param_count(self) -> int:
        return sum(getattr(layer, attr).size for _, layer, attr, _ in self.named_params())


def build_hybrid_model(config: HybridConfig, seed: int = 0, dtype=np.float32) -> HybridModel:
    return HybridModel(config, seed=seed, dtype=dtype)


def hybrid_forward(stack, model: HybridModel) -> np.ndarray:
    """Class probabilities for one ResidualStack (or a list of them).

    Runs in eval mode; rows sum to 1.
    """
    stacks = stack if isinstance(stack, (list, tuple)) else [stack]
    n_groups = len(stacks[0].groups)
    if n_groups != len(model.subnets):
        raise ValueError(f"model expects {len(model.subnets)} groups, stack has {n_groups}")
    labels = tuple(s.label() for s in stacks[0].specs)
    if labels != tuple(model.config.qt_labels):
        raise ValueError(f"Q&T order {labels} does not match model {model.config.qt_labels}")
    groups = [
        np.stack([s.groups[g] for s in stacks]).astype(model.dtype)
        for g in range(n_groups)
    ]
    return model.predict_proba(groups)
