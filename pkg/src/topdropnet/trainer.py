"""Training loop: Adam, linear warmup with step decay, checkpoints.

The schedule stores its warmup length and decay milestones as fractions
of the total epoch count, so a 40-epoch desk run keeps the shape of the
reference 400-epoch routine (warmup over the first eighth, decays at one
half and three quarters).

Every random stream (batch sampling, augmentation, drop masks) is derived
from (master seed, stream name, epoch), which makes checkpoint resume
bitwise identical to an uninterrupted run and keeps augmentation draws
identical across model variants for paired comparisons.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import network, synthdata, tensorcore as tc, topdrop
from . import rng as rng_mod


@dataclass(frozen=True)
class TrainConfig:
    total_epochs: int = 40
    base_lr: float = 1e-3
    warmup_fraction: float = 0.125
    decay_milestones: tuple = (0.5, 0.75)
    decay_factor: float = 0.1
    batch: synthdata.BatchSpec = field(default_factory=synthdata.BatchSpec)
    variant: str = "full"
    margin: float = 0.3
    label_epsilon: float = 0.1
    height_ratio: float = 0.3
    activation_power: float = 2.0
    d_global: int = 128
    d_drop: int = 128
    augment: synthdata.AugmentationConfig = field(default_factory=synthdata.AugmentationConfig)
    seed: int = 1

    def __post_init__(self):
        if self.variant not in network.VARIANTS:
            raise ValueError(f"variant must be one of {network.VARIANTS}")
        ms = self.decay_milestones
        if not 0.0 < self.warmup_fraction < min(ms):
            raise ValueError("warmup must end before the first milestone")
        if any(b <= a for a, b in zip(ms, ms[1:])) or max(ms) >= 1.0:
            raise ValueError("milestones must be strictly increasing and < 1")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")


def config_hash(cfg: TrainConfig) -> str:
    blob = repr(dataclasses.asdict(cfg)).encode("utf-8")
    return hashlib.blake2b(blob, digest_size=16).hexdigest()


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate at the start of an epoch.

    Linear warmup from base_lr / 10 up to base_lr over the warmup epochs
    (the end value equals the plateau exactly), then multiplication by the
    decay factor at each milestone epoch.
    """
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    warmup = topdrop.round_half_up(cfg.total_epochs * cfg.warmup_fraction)
    if warmup > 0 and epoch < warmup:
        start = cfg.base_lr / 10.0
        return start + (cfg.base_lr - start) * epoch / warmup
    passed = sum(
        1 for m in cfg.decay_milestones if epoch >= topdrop.round_half_up(cfg.total_epochs * m)
    )
    return cfg.base_lr * cfg.decay_factor**passed


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(named_params, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, mutating parameters in place.

    ``named_params`` is an iterable of (name, Tensor) whose gradients are
    populated; moment buffers are keyed by name.
    """
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name, p in named_params:
        g = p.grad
        if g is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {name!r}")
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# Epoch and fit
# ---------------------------------------------------------------------------

HISTORY_COLUMNS = ("epoch", "lr", "loss_global", "loss_drop", "loss_reg", "loss_total")


def build_model(cfg: TrainConfig, dataset: synthdata.LoadedDataset) -> network.ReidModel:
    num_classes = len(dataset.train_label_map())
    if num_classes < 2:
        raise ValueError("training needs at least two identities")
    backbone = network.BackboneConfig(input_size=tuple(dataset.image_size))
    model_cfg = network.ModelConfig(
        variant=cfg.variant, d_global=cfg.d_global, d_drop=cfg.d_drop, backbone=backbone
    )
    return network.ReidModel(num_classes, model_cfg, seed=cfg.seed)


def _batch_masks(mode: str, features: tc.Tensor, cfg: TrainConfig, mask_gen):
    if mode == "none":
        return None
    if mode == "top":
        drop_cfg = topdrop.DropConfig(cfg.height_ratio, cfg.activation_power, "top")
        return topdrop.masks_from_features(features.data, drop_cfg)
    n, c, h, w = features.shape
    return topdrop.batch_drop_mask(h, w, cfg.height_ratio, mask_gen, channels=c)


def train_epoch(model, dataset, cfg: TrainConfig, state: AdamState, epoch: int) -> dict:
    """One pass over the PK batches of an epoch; returns mean losses."""
    model.train()
    lr = lr_at(epoch, cfg)
    label_map = dataset.train_label_map()
    aug_gen = rng_mod.generator(cfg.seed, "augment", epoch)
    mask_gen = rng_mod.generator(cfg.seed, "mask", epoch)
    mode = network.mask_mode(cfg.variant)
    streams = network.active_streams(cfg.variant)

    sums = {}
    batches = synthdata.epoch_batches(dataset.records, cfg.batch, cfg.seed, epoch)
    for batch_no, batch in enumerate(batches):
        raw = dataset.images[batch].astype(np.float64)
        augmented = np.stack([synthdata.augment(img, cfg.augment, aug_gen) for img in raw])
        x = network.normalize_images(augmented)
        labels = np.array([label_map[dataset.records[i].person_id] for i in batch])

        with tc.Tape() as tape:
            features = model.backbone_forward(x)
            masks = _batch_masks(mode, features, cfg, mask_gen)
            refined = model.bottleneck_pair(features)
            outputs = {"global": model.global_stream(features)}
            if "drop" in streams:
                outputs["drop"] = model.topdrop_stream(refined, masks)
            if "reg" in streams:
                outputs["reg"] = model.reg_stream(refined)
            loss, metrics = network.total_loss(outputs, labels, cfg.margin, cfg.label_epsilon)
            if not np.isfinite(loss.item()):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch {batch_no}: {metrics}"
                )
            tc.backward(loss, tape)

        trained = [(n, p) for n, p in model.named_parameters() if p.grad is not None]
        adam_step(trained, state, lr)
        model.zero_grad()
        for key, value in metrics.items():
            sums[key] = sums.get(key, 0.0) + value

    out = {"epoch": epoch, "lr": lr}
    for key in ("loss_global", "loss_drop", "loss_reg", "loss_total"):
        out[key] = sums[key] / len(batches) if key in sums else None
    return out


@dataclass
class FitResult:
    model: network.ReidModel
    history: list
    adam: AdamState
    next_epoch: int
    config: TrainConfig


def fit(cfg: TrainConfig, dataset: synthdata.LoadedDataset, resume=None, stop_after=None) -> FitResult:
    """Run the full schedule (or resume one from a checkpoint).

    ``stop_after`` ends training early after that many total epochs, which
    is how callers produce a mid-run checkpoint.
    """
    state = AdamState()
    start_epoch = 0
    if resume is not None:
        arrays, meta = load_checkpoint(resume)
        if meta["config_hash"] != config_hash(cfg):
            raise ValueError("checkpoint was written by a different configuration")
        model = build_model(cfg, dataset)
        model.load_state_arrays(arrays)
        _load_adam(arrays, state, model)
        state.t = meta["adam_t"]
        start_epoch = meta["epoch"]
    else:
        model = build_model(cfg, dataset)

    end = cfg.total_epochs if stop_after is None else min(stop_after, cfg.total_epochs)
    history = []
    for epoch in range(start_epoch, end):
        history.append(train_epoch(model, dataset, cfg, state, epoch))
    return FitResult(model, history, state, end, cfg)


# ---------------------------------------------------------------------------
# Checkpoints and history files
# ---------------------------------------------------------------------------


def _model_meta(model: network.ReidModel) -> dict:
    bb = model.cfg.backbone
    return {
        "num_classes": model.num_classes,
        "variant": model.cfg.variant,
        "d_global": model.cfg.d_global,
        "d_drop": model.cfg.d_drop,
        "stem_channels": bb.stem_channels,
        "stage_channels": list(bb.stage_channels),
        "strides": list(bb.strides),
        "input_size": list(bb.input_size),
    }


def save_checkpoint(path, result: FitResult) -> None:
    model, state, cfg = result.model, result.adam, result.config
    arrays = dict(model.state_arrays())
    for name, _ in model.named_parameters():
        if name in state.m:
            arrays[f"adam.m.{name}"] = state.m[name]
            arrays[f"adam.v.{name}"] = state.v[name]
    arrays["meta.epoch"] = np.array([result.next_epoch], dtype=np.int64)
    arrays["meta.adam_t"] = np.array([state.t], dtype=np.int64)
    arrays["meta.seed"] = np.array([cfg.seed], dtype=np.int64)
    arrays["meta.config_hash"] = np.frombuffer(config_hash(cfg).encode(), dtype=np.uint8)
    arrays["meta.model_json"] = np.frombuffer(
        json.dumps(_model_meta(model), sort_keys=True).encode(), dtype=np.uint8
    )
    tc.save_arrays(path, arrays)


def load_checkpoint(path):
    arrays = tc.load_arrays(path)
    meta = {
        "epoch": int(arrays["meta.epoch"][0]),
        "adam_t": int(arrays["meta.adam_t"][0]),
        "seed": int(arrays["meta.seed"][0]),
        "config_hash": arrays["meta.config_hash"].tobytes().decode(),
        "model": json.loads(arrays["meta.model_json"].tobytes().decode()),
    }
    return arrays, meta


def _load_adam(arrays, state: AdamState, model) -> None:
    for name, p in model.named_parameters():
        mkey = f"adam.m.{name}"
        if mkey in arrays:
            state.m[name] = arrays[mkey].astype(p.data.dtype)
            state.v[name] = arrays[f"adam.v.{name}"].astype(p.data.dtype)


def model_from_checkpoint(path) -> network.ReidModel:
    """Rebuild a model purely from a checkpoint's stored configuration."""
    arrays, meta = load_checkpoint(path)
    m = meta["model"]
    backbone = network.BackboneConfig(
        stem_channels=m["stem_channels"],
        stage_channels=tuple(m["stage_channels"]),
        strides=tuple(m["strides"]),
        input_size=tuple(m["input_size"]),
    )
    model_cfg = network.ModelConfig(
        variant=m["variant"], d_global=m["d_global"], d_drop=m["d_drop"], backbone=backbone
    )
    model = network.ReidModel(m["num_classes"], model_cfg, seed=meta["seed"])
    model.load_state_arrays(arrays)
    return model


def write_history(path, history) -> None:
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow(
                ["" if row.get(col) is None else repr(row[col]) if isinstance(row[col], float) else row[col] for col in HISTORY_COLUMNS]
            )
