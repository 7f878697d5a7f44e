"""SE-DenseNet building blocks, the two-head backbone, the fusion MLP, and losses."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .optim import he_normal_init
from .tensor import RunningStats, Tensor

HEADS = ("classification", "regression")
PROB_CLAMP = 1e-7
BACKBONE_BN_MOMENTUM = 0.99
FUSION_BN_MOMENTUM = 0.9


class Parameter(Tensor):
    """Trainable tensor. ``decay`` marks kernels that receive L2 regularization."""

    __slots__ = ("decay",)

    def __init__(self, data, decay: bool = False, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)
        self.decay = decay


@dataclass(frozen=True)
class NetworkSpec:
    growth_rate: int = 18
    modules_per_block: int = 16
    num_dense_blocks: int = 5
    compression: float = 0.5
    se_ratio: int = 16
    input_size: Tuple[int, int, int] = (299, 299, 3)
    num_classes: int = 5
    head: str = "classification"
    bn_momentum: float = BACKBONE_BN_MOMENTUM

    def __post_init__(self):
        if self.growth_rate < 1 or self.modules_per_block < 1 or self.num_dense_blocks < 1:
            raise ValueError("growth_rate, modules_per_block and num_dense_blocks must all be >= 1")
        if not 0.0 < self.compression <= 1.0:
            raise ValueError(f"compression must lie in (0, 1], got {self.compression}")
        if self.se_ratio < 1:
            raise ValueError(f"se_ratio must be >= 1, got {self.se_ratio}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if len(self.input_size) != 3 or min(self.input_size) < 1:
            raise ValueError(f"input_size must be (H, W, C) with positive entries, got {self.input_size}")
        if not 0.0 <= self.bn_momentum < 1.0:
            raise ValueError(f"bn_momentum must lie in [0, 1), got {self.bn_momentum}")

    @classmethod
    def full_scale(cls, head: str = "classification") -> "NetworkSpec":
        return cls(head=head)

    @classmethod
    def desk(cls, head: str = "classification") -> "NetworkSpec":
        return cls(
            growth_rate=6,
            modules_per_block=2,
            num_dense_blocks=2,
            compression=0.5,
            se_ratio=4,
            input_size=(32, 32, 3),
            head=head,
        )

    @property
    def stem_channels(self) -> int:
        return 2 * self.growth_rate

    @property
    def filters_per_module(self) -> int:
        # 2 x growth rate x compression ratio
        return max(1, int(math.floor(2 * self.growth_rate * self.compression + 1e-9)))

    @property
    def min_spatial(self) -> int:
        return 2 ** (self.num_dense_blocks - 1)

    def channel_plan(self) -> List[int]:
        """Channels at each boundary: stem, then block/transition outputs
        alternating, ending with the last dense block."""
        f = self.filters_per_module
        c = self.stem_channels
        plan = [c]
        for b in range(self.num_dense_blocks):
            c = c + self.modules_per_block * f
            plan.append(c)
            if b < self.num_dense_blocks - 1:
                c = transition_channels(c, self.compression)
                plan.append(c)
        return plan

    @property
    def feature_dim(self) -> int:
        return self.channel_plan()[-1]

    def to_dict(self) -> Dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            out[k] = "x".join(str(i) for i in v) if k == "input_size" else str(v)
        return out

    @classmethod
    def from_dict(cls, d: Dict[str, str]) -> "NetworkSpec":
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            raw = d[f.name]
            if f.name == "input_size":
                kwargs[f.name] = tuple(int(x) for x in raw.split("x"))
            elif f.name in ("compression", "bn_momentum"):
                kwargs[f.name] = float(raw)
            elif f.name == "head":
                kwargs[f.name] = raw
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


def se_reduced_channels(channels: int, ratio: int) -> int:
    return max(1, channels // ratio)


def transition_channels(channels: int, compression: float) -> int:
    return max(1, int(math.floor(channels * compression + 1e-9)))


# ---------------------------------------------------------------------------
# Losses and output activations
# ---------------------------------------------------------------------------


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Row-wise softmax with max-subtraction."""
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return T.apply(out, (logits,), backward, "softmax")


def cross_entropy(pred_probs: Tensor, true_onehot, class_weights: Optional[Sequence[float]] = None) -> Tensor:
    """Batch mean of ``-sum_i w_class * y_i * log(p_i)``.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]`` before the log. With
    ``class_weights`` each sample is scaled by the weight of its true class.
    """
    y = T.as_tensor(true_onehot, pred_probs.dtype)
    if y.shape != pred_probs.shape:
        raise ValueError(f"cross_entropy shape mismatch: {pred_probs.shape} vs {y.shape}")
    logp = T.log(T.clip(pred_probs, PROB_CLAMP, 1.0 - PROB_CLAMP))
    per_sample = -(y * logp).sum(axis=1)
    if class_weights is not None:
        w = np.asarray(class_weights, dtype=pred_probs.dtype)
        if w.shape != (pred_probs.shape[1],):
            raise ValueError(f"class_weights must have {pred_probs.shape[1]} entries")
        per_sample = per_sample * (y.data @ w)
    return per_sample.mean()


def mse(pred: Tensor, target) -> Tensor:
    target = T.as_tensor(target, pred.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return (diff * diff).mean()


def se_block(
    x: Tensor,
    reduce_w: Tensor,
    reduce_b: Optional[Tensor],
    expand_w: Tensor,
    expand_b: Optional[Tensor],
) -> Tensor:
    """Squeeze (global average pool), excite (two 1x1 projections with ReLU
    then sigmoid), and rescale every channel of ``x`` by its gate."""
    squeezed = T.global_avg_pool(x)
    hidden = T.relu(T.dense(squeezed, reduce_w, reduce_b))
    gates = T.sigmoid(T.dense(hidden, expand_w, expand_b))
    return T.scale_channels(x, gates)


# ---------------------------------------------------------------------------
# Module system
# ---------------------------------------------------------------------------


_nonfinite_probe: Optional[List["Module"]] = None


def first_nonfinite_layer(model: "Module", x) -> Optional[str]:
    """Re-run ``model`` on ``x`` and name the first layer whose output holds
    NaN or Inf (``"input"`` if the batch itself is bad, None if all finite)."""
    global _nonfinite_probe
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all(np.isfinite(data)):
        return "input"
    names = {id(m): name for name, m in model.named_modules()}
    _nonfinite_probe = []
    try:
        with T.no_grad():
            model(x)
        hits = list(_nonfinite_probe)
    finally:
        _nonfinite_probe = None
    if not hits:
        return None
    first = hits[0]
    return f"{names.get(id(first), '?')} ({type(first).__name__})"


class Module:
    training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        out = self.forward(*args, **kwargs)
        if _nonfinite_probe is not None and isinstance(out, Tensor) and not np.all(np.isfinite(out.data)):
            _nonfinite_probe.append(self)
        return out

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix.rstrip(".") or type(self).__name__, self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(prefix + name + ".")

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module, RunningStats)):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in self._children():
            if isinstance(value, RunningStats):
                yield prefix + name + ".mean", value.mean
                yield prefix + name + ".var", value.var
            elif isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(own) | set(buffers)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise ValueError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, arr in state.items():
            target = own[name].data if name in own else buffers[name]
            if target.shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match expected {target.shape}")
            target[...] = arr

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            if isinstance(child, Module):
                child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding="same", bias=False, dtype=np.float32):
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(he_normal_init((out_ch, in_ch, kernel, kernel), fan_in, rng, dtype), decay=True)
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Dense(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True, dtype=np.float32):
        self.weight = Parameter(he_normal_init((in_dim, out_dim), in_dim, rng, dtype), decay=True)
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype)) if bias else None

    def forward(self, x):
        return T.dense(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, channels, momentum=BACKBONE_BN_MOMENTUM, dtype=np.float32):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running = RunningStats(channels, dtype)
        self.momentum = momentum

    def forward(self, x):
        return T.batch_norm(x, self.gamma, self.beta, self.running, self.momentum, self.training)


class SEBlock(Module):
    def __init__(self, channels, ratio, rng, dtype=np.float32):
        reduced = se_reduced_channels(channels, ratio)
        self.reduce = Dense(channels, reduced, rng, dtype=dtype)
        self.expand = Dense(reduced, channels, rng, dtype=dtype)

    def forward(self, x):
        return se_block(x, self.reduce.weight, self.reduce.bias, self.expand.weight, self.expand.bias)


class SEDenseModule(Module):
    """BN -> ReLU -> 3x3 conv -> SE, concatenated after the untouched input."""

    def __init__(self, in_ch, filters, ratio, rng, dtype=np.float32, bn_momentum=BACKBONE_BN_MOMENTUM):
        self.bn = BatchNorm(in_ch, bn_momentum, dtype)
        self.conv = Conv2d(in_ch, filters, 3, rng, dtype=dtype)
        self.se = SEBlock(filters, ratio, rng, dtype=dtype)
        self.out_channels = in_ch + filters

    def forward(self, x):
        new = self.se(self.conv(T.relu(self.bn(x))))
        return T.concat([x, new], axis=1)


class DenseBlock(Module):
    def __init__(self, in_ch, num_modules, filters, ratio, rng, dtype=np.float32, bn_momentum=BACKBONE_BN_MOMENTUM):
        self.layers = []
        c = in_ch
        for _ in range(num_modules):
            self.layers.append(SEDenseModule(c, filters, ratio, rng, dtype, bn_momentum))
            c += filters
        self.out_channels = c

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class TransitionBlock(Module):
    """BN -> ReLU -> 1x1 conv (compress) -> SE -> 2x2 average pool."""

    def __init__(self, in_ch, compression, ratio, rng, dtype=np.float32, bn_momentum=BACKBONE_BN_MOMENTUM):
        self.out_channels = transition_channels(in_ch, compression)
        self.bn = BatchNorm(in_ch, bn_momentum, dtype)
        self.conv = Conv2d(in_ch, self.out_channels, 1, rng, dtype=dtype)
        self.se = SEBlock(self.out_channels, ratio, rng, dtype)

    def forward(self, x):
        if x.shape[2] < 2 or x.shape[3] < 2:
            raise ValueError(f"transition block needs spatial dims >= 2, got {x.shape[2]}x{x.shape[3]}")
        return T.avg_pool2d(self.se(self.conv(T.relu(self.bn(x)))), 2, 2)


class SEDenseNet(Module):
    """SE-DenseNet trunk with either a softmax classification head or a
    single linear regression output.

    The head is global average pooling followed by a linear projection; the
    pooled vector is what :meth:`features` returns for fusion.
    """

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        in_ch = spec.input_size[2]
        f = spec.filters_per_module
        self.stem = Conv2d(in_ch, spec.stem_channels, 3, rng, dtype=dtype)
        c = spec.stem_channels
        self.blocks = []
        self.transitions = []
        for b in range(spec.num_dense_blocks):
            block = DenseBlock(c, spec.modules_per_block, f, spec.se_ratio, rng, dtype, spec.bn_momentum)
            self.blocks.append(block)
            c = block.out_channels
            if b < spec.num_dense_blocks - 1:
                trans = TransitionBlock(c, spec.compression, spec.se_ratio, rng, dtype, spec.bn_momentum)
                self.transitions.append(trans)
                c = trans.out_channels
        self.final_bn = BatchNorm(c, spec.bn_momentum, dtype)
        out_dim = spec.num_classes if spec.head == "classification" else 1
        self.head = Dense(c, out_dim, rng, dtype=dtype)
        self.feature_dim = c

    def check_input(self, x: Tensor) -> None:
        expected_c = self.spec.input_size[2]
        if x.ndim != 4 or x.shape[1] != expected_c:
            raise ValueError(f"expected input [N, {expected_c}, H, W], got {x.shape}")
        if min(x.shape[2:]) < self.spec.min_spatial:
            raise ValueError(
                f"input {x.shape[2]}x{x.shape[3]} too small for {self.spec.num_dense_blocks} dense blocks; "
                f"minimum is {self.spec.min_spatial}x{self.spec.min_spatial}"
            )

    def features(self, x, trace: Optional[List[Tuple[str, Tuple[int, ...]]]] = None) -> Tensor:
        x = T.as_tensor(x)
        self.check_input(x)
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad)
        h = self.stem(x)
        if trace is not None:
            trace.append(("stem", h.shape))
        for i, block in enumerate(self.blocks):
            h = block(h)
            if trace is not None:
                trace.append((f"block{i + 1}", h.shape))
            if i < len(self.transitions):
                h = self.transitions[i](h)
                if trace is not None:
                    trace.append((f"transition{i + 1}", h.shape))
        h = T.relu(self.final_bn(h))
        pooled = T.global_avg_pool(h)
        if trace is not None:
            trace.append(("pool", pooled.shape))
        return pooled

    def forward(self, x, trace=None) -> Tensor:
        out = self.head(self.features(x, trace))
        if self.spec.head == "classification":
            return softmax(out, axis=1)
        return T.linear(out)


class FusionMLP(Module):
    """BN -> dense(512, ReLU) -> dense(M, softmax) over concatenated features."""

    def __init__(self, in_dim, num_classes, rng, hidden=512, dtype=np.float32):
        self.in_dim = in_dim
        self.bn = BatchNorm(in_dim, momentum=FUSION_BN_MOMENTUM, dtype=dtype)
        self.fc1 = Dense(in_dim, hidden, rng, dtype=dtype)
        self.fc2 = Dense(hidden, num_classes, rng, dtype=dtype)

    def forward(self, features: Tensor) -> Tensor:
        features = T.as_tensor(features)
        if features.ndim != 2 or features.shape[1] != self.in_dim:
            raise ValueError(f"fusion MLP expects [N, {self.in_dim}] features, got {features.shape}")
        h = T.relu(self.fc1(self.bn(features)))
        return softmax(self.fc2(h), axis=1)


class FusionModel(Module):
    """Frozen classification and regression backbones plus a trainable MLP."""

    def __init__(self, cls_net: SEDenseNet, reg_net: SEDenseNet, mlp: FusionMLP):
        if cls_net.spec.input_size != reg_net.spec.input_size:
            raise ValueError(
                f"backbones built for different input sizes: {cls_net.spec.input_size} vs {reg_net.spec.input_size}"
            )
        if mlp.in_dim != cls_net.feature_dim + reg_net.feature_dim:
            raise ValueError(
                f"MLP input {mlp.in_dim} != {cls_net.feature_dim} + {reg_net.feature_dim} backbone features"
            )
        self.cls = cls_net.freeze().eval()
        self.reg = reg_net.freeze().eval()
        self.mlp = mlp

    def train(self, mode: bool = True) -> "FusionModel":
        # backbones stay frozen in inference mode; only the MLP switches
        self.training = mode
        self.cls.eval()
        self.reg.eval()
        self.mlp.train(mode)
        return self

    def fused_features(self, x) -> Tensor:
        with T.no_grad():
            return T.concat([self.cls.features(x), self.reg.features(x)], axis=1)

    def forward(self, x) -> Tensor:
        return self.mlp(self.fused_features(x))

    def predict(self, x) -> Tuple[np.ndarray, np.ndarray]:
        """Class probabilities [N, M] and raw severity scores [N]."""
        with T.no_grad():
            x = T.as_tensor(x)
            cls_feat = self.cls.features(x)
            reg_feat = self.reg.features(x)
            severity = self.reg.head(reg_feat)
            probs = self.mlp(T.concat([cls_feat, reg_feat], axis=1))
        return probs.data, severity.data[:, 0]


def build_sedensenet(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> SEDenseNet:
    """Build a backbone, rejecting specs whose input cannot survive the
    transition-block halvings."""
    h, w, _ = spec.input_size
    if min(h, w) < spec.min_spatial:
        raise ValueError(
            f"input {h}x{w} collapses after {spec.num_dense_blocks - 1} halvings; "
            f"minimum input size is {spec.min_spatial}x{spec.min_spatial}"
        )
    return SEDenseNet(spec, np.random.default_rng(seed), dtype)


def build_fusion_mlp(cls_feature_dim: int, reg_feature_dim: int, num_classes: int = 5, seed: int = 0, dtype=np.float32) -> FusionMLP:
    if cls_feature_dim < 1 or reg_feature_dim < 1:
        raise ValueError("feature dims must be positive")
    return FusionMLP(cls_feature_dim + reg_feature_dim, num_classes, np.random.default_rng(seed), dtype=dtype)
