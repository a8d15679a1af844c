"""Three-stream embedding network with stripe dropping.

A small residual backbone produces feature maps F. The global stream
average-pools F and reduces it with a linear layer (the pooled-vector
equivalent of a 1x1 convolution). The drop stream refines F through two
residual bottleneck blocks into G (same shape as F), zeroes its most
activated rows during training, max-pools and reduces. The regularizer
stream average-pools G directly and exists only at training time.

Every stream ends in a batch-norm neck: the triplet loss consumes the
pre-norm feature, a bias-free linear classifier consumes the post-norm
feature. At test time the global and drop stream neck features are
concatenated (global and regularizer for the variant without dropping).
"""

from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from . import tensorcore as tc
from . import topdrop

VARIANTS = ("full", "no_drop", "no_reg", "baseline_bdb")


def active_streams(variant: str) -> tuple:
    """Streams trained (and therefore contributing loss terms)."""
    if variant in ("full", "baseline_bdb"):
        return ("global", "drop", "reg")
    if variant == "no_drop":
        return ("global", "reg")
    if variant == "no_reg":
        return ("global", "drop")
    raise ValueError(f"unknown variant {variant!r}")


def embed_streams(variant: str) -> tuple:
    """Streams concatenated at inference time."""
    if variant == "no_drop":
        return ("global", "reg")
    if variant in ("full", "no_reg", "baseline_bdb"):
        return ("global", "drop")
    raise ValueError(f"unknown variant {variant!r}")


def mask_mode(variant: str) -> str:
    if variant in ("full", "no_reg"):
        return "top"
    if variant == "baseline_bdb":
        return "random"
    if variant == "no_drop":
        return "none"
    raise ValueError(f"unknown variant {variant!r}")


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 16
    stage_channels: tuple = (16, 32, 64)
    strides: tuple = (2, 2, 1)
    input_size: tuple = (64, 32)

    def __post_init__(self):
        if len(self.stage_channels) != len(self.strides):
            raise ValueError("stage_channels and strides must align")
        if self.strides[-1] != 1:
            raise ValueError("final stage must keep stride 1 (taller feature map)")
        if self.feature_height() < 4:
            raise ValueError(f"feature height {self.feature_height()} < 4; stripe dropping needs taller maps")

    def feature_height(self) -> int:
        h = self.input_size[0] // 2  # stem max-pool
        for s in self.strides:
            h = (h + 2 - 3) // s + 1  # 3x3 conv, pad 1
        return h

    def feature_width(self) -> int:
        w = self.input_size[1] // 2
        for s in self.strides:
            w = (w + 2 - 3) // s + 1
        return w

    def feature_channels(self) -> int:
        return self.stage_channels[-1]


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "full"
    d_global: int = 128
    d_drop: int = 128
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass
class StreamOutputs:
    """Per-stream (pre-neck feature, post-neck feature, class logits)."""

    triplet_feature: tc.Tensor
    neck_feature: tc.Tensor
    logits: tc.Tensor


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Conv2d(tc.Module):
    def __init__(self, cin, cout, ksize, stride=1, pad=0, init_rng=None):
        fan_in = cin * ksize * ksize
        w = init_rng.standard_normal((cout, cin, ksize, ksize)) * np.sqrt(2.0 / fan_in)
        self.weight = tc.parameter(w)
        self._stride = stride
        self._pad = pad

    def __call__(self, x):
        return tc.conv2d(x, self.weight, self._stride, self._pad)


class Linear(tc.Module):
    def __init__(self, din, dout, bias=True, init_rng=None, init_std=None):
        std = init_std if init_std is not None else np.sqrt(2.0 / din)
        self.weight = tc.parameter(init_rng.standard_normal((din, dout)) * std)
        if bias:
            self.bias = tc.parameter(np.zeros(dout))
        self._has_bias = bias

    def __call__(self, x):
        y = tc.matmul(x, self.weight)
        if self._has_bias:
            y = tc.add_bias(y, self.bias)
        return y


class BatchNorm(tc.Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, zero_init=False):
        self.gamma = tc.parameter(np.zeros(channels) if zero_init else np.ones(channels))
        self.beta = tc.parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self._momentum = momentum
        self._eps = eps

    def __call__(self, x):
        return tc.batchnorm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self._momentum,
            eps=self._eps,
        )


class Bottleneck(tc.Module):
    """Residual 1x1 reduce / 3x3 / 1x1 expand block.

    With ``zero_init_last`` the final batch-norm scale starts at zero, so
    the block is the identity on non-negative inputs at initialization.
    """

    def __init__(self, cin, cout, stride=1, init_rng=None, zero_init_last=False, momentum=0.1, eps=1e-5):
        mid = max(cout // 4, 1)
        self.conv1 = Conv2d(cin, mid, 1, init_rng=init_rng)
        self.bn1 = BatchNorm(mid, momentum, eps)
        self.conv2 = Conv2d(mid, mid, 3, stride=stride, pad=1, init_rng=init_rng)
        self.bn2 = BatchNorm(mid, momentum, eps)
        self.conv3 = Conv2d(mid, cout, 1, init_rng=init_rng)
        self.bn3 = BatchNorm(cout, momentum, eps, zero_init=zero_init_last)
        self._project = stride != 1 or cin != cout
        if self._project:
            self.proj_conv = Conv2d(cin, cout, 1, stride=stride, init_rng=init_rng)
            self.proj_bn = BatchNorm(cout, momentum, eps)

    def __call__(self, x):
        y = tc.relu(self.bn1(self.conv1(x)))
        y = tc.relu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        shortcut = self.proj_bn(self.proj_conv(x)) if self._project else x
        return tc.relu(tc.add(y, shortcut))


class Backbone(tc.Module):
    """Stem conv + max-pool, then one bottleneck per stage; the final
    stage keeps stride 1 so the feature map stays tall."""

    def __init__(self, cfg: BackboneConfig, init_rng, momentum=0.1, eps=1e-5):
        self.stem_conv = Conv2d(3, cfg.stem_channels, 3, stride=1, pad=1, init_rng=init_rng)
        self.stem_bn = BatchNorm(cfg.stem_channels, momentum, eps)
        self.stages = []
        cin = cfg.stem_channels
        for cout, stride in zip(cfg.stage_channels, cfg.strides):
            self.stages.append(Bottleneck(cin, cout, stride, init_rng, momentum=momentum, eps=eps))
            cin = cout
        self._cfg = cfg

    def __call__(self, x):
        h, w = self._cfg.input_size
        if x.shape[2:] != (h, w) or x.shape[1] != 3:
            raise tc.TensorError(f"backbone expects (n, 3, {h}, {w}), got {x.shape}")
        y = tc.relu(self.stem_bn(self.stem_conv(x)))
        y = tc.maxpool2d(y, 2, 2)
        for stage in self.stages:
            y = stage(y)
        return y


class BNNeckHead(tc.Module):
    """Batch-norm neck plus a bias-free linear classifier.

    The triplet loss uses the input feature, classification the post-norm
    feature; inference uses the post-norm feature.
    """

    def __init__(self, dim, num_classes, init_rng, momentum=0.1, eps=1e-5):
        self.bn = BatchNorm(dim, momentum, eps)
        self.classifier = Linear(dim, num_classes, bias=False, init_rng=init_rng, init_std=0.01)

    def __call__(self, feature) -> StreamOutputs:
        neck = self.bn(feature)
        return StreamOutputs(feature, neck, self.classifier(neck))


# ---------------------------------------------------------------------------
# The model
# ---------------------------------------------------------------------------


class ReidModel(tc.Module):
    def __init__(self, num_classes: int, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        init_rng = rng_mod.generator(seed, "init")
        bb = cfg.backbone
        c = bb.feature_channels()
        mom, eps = cfg.bn_momentum, cfg.bn_eps

        self.backbone = Backbone(bb, init_rng, mom, eps)
        self.refine = [
            Bottleneck(c, c, 1, init_rng, zero_init_last=True, momentum=mom, eps=eps),
            Bottleneck(c, c, 1, init_rng, zero_init_last=True, momentum=mom, eps=eps),
        ]
        self.global_reduce = Linear(c, cfg.d_global, bias=True, init_rng=init_rng)
        self.global_head = BNNeckHead(cfg.d_global, num_classes, init_rng, mom, eps)
        self.drop_reduce = Linear(c, cfg.d_drop, bias=True, init_rng=init_rng)
        self.drop_head = BNNeckHead(cfg.d_drop, num_classes, init_rng, mom, eps)
        self.reg_head = BNNeckHead(c, num_classes, init_rng, mom, eps)

        self.cfg = cfg
        self.num_classes = num_classes
        self.variant = cfg.variant

    # -- streams ----------------------------------------------------------

    def backbone_forward(self, images: tc.Tensor) -> tc.Tensor:
        return self.backbone(images)

    def bottleneck_pair(self, features: tc.Tensor) -> tc.Tensor:
        g = features
        for block in self.refine:
            g = block(g)
        return g

    def global_stream(self, features: tc.Tensor) -> StreamOutputs:
        pooled = tc.global_avg_pool(features)
        return self.global_head(self.global_reduce(pooled))

    def topdrop_stream(self, g: tc.Tensor, masks=None) -> StreamOutputs:
        """Masked max-pooled drop-stream feature; eval mode never masks."""
        if self.training and masks is not None:
            g = topdrop.apply_mask(g, masks)
        pooled = tc.global_max_pool(g)
        return self.drop_head(self.drop_reduce(pooled))

    def reg_stream(self, g: tc.Tensor) -> StreamOutputs:
        return self.reg_head(tc.global_avg_pool(g))

    # -- orchestration ------------------------------------------------------

    def forward_train(self, images: tc.Tensor, masks=None) -> dict:
        """All active streams; masks come from the trainer (built from the
        backbone output, applied to the refined tensor)."""
        streams = active_streams(self.variant)
        features = self.backbone_forward(images)
        refined = self.bottleneck_pair(features)
        out = {"global": self.global_stream(features)}
        if "drop" in streams:
            out["drop"] = self.topdrop_stream(refined, masks)
        if "reg" in streams:
            out["reg"] = self.reg_stream(refined)
        return out

    def embed_dim(self) -> int:
        dims = {"global": self.cfg.d_global, "drop": self.cfg.d_drop, "reg": self.cfg.backbone.feature_channels()}
        return sum(dims[s] for s in embed_streams(self.variant))

    def inference_embed(self, images: tc.Tensor) -> np.ndarray:
        """Concatenated neck features of the inference streams.

        Eval mode only; the regularizer stream never contributes unless
        the variant has no drop stream.
        """
        if self.training:
            raise tc.TensorError("inference_embed requires eval mode")
        features = self.backbone_forward(images)
        refined = self.bottleneck_pair(features)
        parts = []
        for stream in embed_streams(self.variant):
            if stream == "global":
                parts.append(self.global_stream(features).neck_feature.data)
            elif stream == "drop":
                parts.append(self.topdrop_stream(refined).neck_feature.data)
            else:
                parts.append(self.reg_stream(refined).neck_feature.data)
        return np.concatenate(parts, axis=1)


def normalize_images(images: np.ndarray, dtype=np.float64) -> tc.Tensor:
    """uint8 (n, h, w, 3) pixels -> (n, 3, h, w) floats in [-1, 1]."""
    x = np.asarray(images, dtype=dtype) / 255.0
    x = (x - 0.5) / 0.5
    return tc.Tensor(x.transpose(0, 3, 1, 2).copy(), dtype=dtype)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def ce_label_smoothing(logits: tc.Tensor, labels, epsilon: float = 0.1) -> tc.Tensor:
    """Cross entropy against (1 - eps) one-hot + eps / K targets."""
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must be in [0, 1), got {epsilon}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    targets = np.full((n, k), epsilon / k)
    targets[np.arange(n), labels] += 1.0 - epsilon
    weighted = tc.mul(tc.log_softmax(logits), tc.Tensor(targets, dtype=logits.data.dtype))
    return tc.scalar_mul(tc.sum_all(weighted), -1.0 / n)


def triplet_batch_hard(features: tc.Tensor, ids, margin: float = 0.3) -> tc.Tensor:
    """Batch-hard triplet loss with Euclidean distances.

    Per anchor: hinge on margin + (farthest same-id distance) - (nearest
    different-id distance), averaged over the batch. Mining ties break to
    the lowest index; the distance gradient at coincident points is the
    zero subgradient.
    """
    ids = np.asarray(ids)
    n = features.shape[0]
    if ids.shape != (n,):
        raise ValueError(f"ids shape {ids.shape} does not match batch {n}")
    same = ids[:, None] == ids[None, :]
    if np.unique(ids).size < 2:
        raise ValueError("triplet loss needs at least two distinct ids in the batch")
    if np.any(same.sum(axis=1) < 2):
        raise ValueError("every id in the batch needs at least two instances")

    f = features.data
    diff = f[:, None, :] - f[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))

    pos_idx = np.where(same, dist, -np.inf).argmax(axis=1)
    neg_idx = np.where(same, np.inf, dist).argmin(axis=1)
    d_pos = dist[np.arange(n), pos_idx]
    d_neg = dist[np.arange(n), neg_idx]
    hinge = np.maximum(0.0, margin + d_pos - d_neg)
    out = tc.Tensor(hinge.mean())

    def back(gout):
        g = np.zeros_like(f)
        scale = float(gout) / n
        for a in np.flatnonzero(hinge > 0):
            p, ng = pos_idx[a], neg_idx[a]
            if d_pos[a] > 0:
                u = (f[a] - f[p]) / d_pos[a]
                g[a] += scale * u
                g[p] -= scale * u
            if d_neg[a] > 0:
                v = (f[a] - f[ng]) / d_neg[a]
                g[a] -= scale * v
                g[ng] += scale * v
        tc.accumulate_grad(features, g)

    return tc.record_op(out, (features,), back)


def total_loss(outputs: dict, labels, margin: float = 0.3, epsilon: float = 0.1):
    """Sum of (smoothed cross entropy + batch-hard triplet) per active
    stream. Returns the scalar tensor and per-stream float metrics."""
    if not outputs:
        raise ValueError("need at least one active stream")
    total = None
    metrics = {}
    for name, stream in outputs.items():
        ce = ce_label_smoothing(stream.logits, labels, epsilon)
        tri = triplet_batch_hard(stream.triplet_feature, labels, margin)
        stream_loss = tc.add(ce, tri)
        metrics[f"loss_{name}"] = stream_loss.item()
        total = stream_loss if total is None else tc.add(total, stream_loss)
    metrics["loss_total"] = total.item()
    return total, metrics
