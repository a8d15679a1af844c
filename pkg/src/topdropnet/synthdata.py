"""Deterministic synthetic re-identification benchmark.

Each identity is rendered as four stacked horizontal body bands (hair,
torso, legs, feet) with identity-specific colors, texture frequency and
body width, photographed by cameras that add their own background,
brightness tint and horizontal jitter. A gray block can occlude one band,
which gives stripe dropping a ground-truth semantic to act on.

All randomness is keyed per (seed, image), so generation is bitwise
reproducible and order independent. Training-time augmentation (flip,
zoom, erase) and PK batch sampling live here too.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import ppm
from . import rng as rng_mod

SPLITS = ("train", "query", "gallery")

# Band heights as fractions of the figure: hair, torso, legs, feet.
BAND_FRACTIONS = (0.15, 0.35, 0.35, 0.15)

# Occluders are painted in this exact triple after quantization; organically
# rendered pixels that collide are nudged to (129, 128, 128) first, so a
# pixel scan for the reserved gray finds occluders and nothing else.
OCCLUDER_GRAY = (128, 128, 128)

MIN_COLOR_GAP = 48


@dataclass(frozen=True)
class SampleRecord:
    person_id: int
    camera_id: int
    split: str
    image_path: str


@dataclass(frozen=True)
class IdentityAppearance:
    band_colors: tuple  # 4 x (r, g, b) ints
    texture_frequency: float
    body_width_frac: float


@dataclass(frozen=True)
class AugmentationConfig:
    flip_prob: float = 0.5
    zoom_range: tuple = (0.9, 1.1)
    erase_prob: float = 0.5
    erase_area: tuple = (0.02, 0.2)
    erase_aspect: tuple = (0.3, 1.0 / 0.3)
    seed: int = 0

    def __post_init__(self):
        for p in (self.flip_prob, self.erase_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability out of [0, 1]: {p}")
        if self.zoom_range[0] <= 0 or self.zoom_range[1] < self.zoom_range[0]:
            raise ValueError(f"bad zoom range {self.zoom_range}")


@dataclass(frozen=True)
class BatchSpec:
    p: int = 8
    k: int = 4

    def __post_init__(self):
        if self.p < 2 or self.k < 2:
            raise ValueError(f"triplet mining needs P >= 2 and K >= 2, got P={self.p}, K={self.k}")

    @property
    def batch_size(self):
        return self.p * self.k


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _band_rows(height: int):
    bounds = [0]
    acc = 0.0
    for frac in BAND_FRACTIONS:
        acc += frac
        bounds.append(int(round(acc * height)))
    bounds[-1] = height
    return [(bounds[i], bounds[i + 1]) for i in range(4)]


def _sample_identities(num_ids: int, gen) -> list:
    """Rejection-sample appearances so any two identities differ by at
    least MIN_COLOR_GAP in some band color channel."""
    identities = []
    palettes = []
    while len(identities) < num_ids:
        colors = gen.integers(16, 240, size=(4, 3))
        freq = float(gen.uniform(1.0, 5.0))
        width = float(gen.uniform(0.5, 0.8))
        if all(np.abs(colors - prev).max() >= MIN_COLOR_GAP for prev in palettes):
            palettes.append(colors)
            identities.append(
                IdentityAppearance(tuple(map(tuple, colors.tolist())), freq, width)
            )
    return identities


def _camera_params(num_cams: int, gen) -> list:
    cams = []
    for _ in range(num_cams):
        background = gen.uniform(170.0, 230.0, size=3)
        tint = gen.uniform(0.9, 1.1, size=3)
        cams.append((background, tint))
    return cams


def render_image(identity: IdentityAppearance, camera, size, occlusion_prob: float, gen) -> np.ndarray:
    """One (h, w, 3) uint8 image; all draws come from ``gen``."""
    h, w = size
    background, tint = camera
    img = np.ones((h, w, 3)) * background

    dx = int(round(gen.uniform(-0.125, 0.125) * w))
    half = identity.body_width_frac * w / 2.0
    left = max(0, int(round(w / 2.0 + dx - half)))
    right = min(w, int(round(w / 2.0 + dx + half)))

    rows = np.arange(h)
    texture = 1.0 + 0.15 * np.sin(2.0 * np.pi * identity.texture_frequency * rows / h)
    for (top, bottom), color in zip(_band_rows(h), identity.band_colors):
        band = np.asarray(color, dtype=np.float64) * texture[top:bottom, None]
        img[top:bottom, left:right, :] = band[:, None, :]

    img *= tint
    img += gen.uniform(-4.0, 4.0, size=img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    # Reserve the occluder gray (see module docstring).
    collisions = np.all(img == OCCLUDER_GRAY, axis=2)
    img[collisions, 0] = OCCLUDER_GRAY[0] + 1

    if gen.uniform() < occlusion_prob:
        band = int(gen.integers(0, 4))
        top, bottom = _band_rows(h)[band]
        img[top:bottom, :, :] = OCCLUDER_GRAY
    return img


def generate_dataset(
    out_dir,
    num_ids: int = 32,
    num_cams: int = 4,
    imgs_per_id_per_cam: int = 4,
    occlusion_prob: float = 0.1,
    size: tuple = (64, 32),
    seed: int = 1,
) -> list:
    """Render the benchmark into ``out_dir`` and return its manifest.

    Identities are split 50/50 into train ids and evaluation ids; for each
    evaluation (id, camera) the first image goes to the query split and
    the rest to the gallery.
    """
    if num_ids < 4:
        raise ValueError(f"need at least 4 identities, got {num_ids}")
    if num_cams < 2:
        raise ValueError(f"need at least 2 cameras for cross-camera evaluation, got {num_cams}")
    if imgs_per_id_per_cam < 1:
        raise ValueError("need at least one image per (id, camera)")

    num_train = num_ids // 2
    identities = _sample_identities(num_ids, rng_mod.generator(seed, "identity"))
    cameras = _camera_params(num_cams, rng_mod.generator(seed, "camera"))

    image_dir = os.path.join(out_dir, "images")
    os.makedirs(image_dir, exist_ok=True)

    records = []
    for pid in range(num_ids):
        for cam in range(num_cams):
            for k in range(imgs_per_id_per_cam):
                gen = rng_mod.generator(seed, "image", pid, cam, k)
                img = render_image(identities[pid], cameras[cam], size, occlusion_prob, gen)
                rel = os.path.join("images", f"{pid:03d}_{cam:02d}_{k:02d}.ppm")
                ppm.write_ppm(os.path.join(out_dir, rel), img)
                if pid < num_train:
                    split = "train"
                else:
                    split = "query" if k == 0 else "gallery"
                records.append(SampleRecord(pid, cam, split, rel))
    save_manifest(records, os.path.join(out_dir, "manifest.csv"))
    return records


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------

MANIFEST_HEADER = ["person_id", "camera_id", "split", "image_path"]


def save_manifest(records, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow([r.person_id, r.camera_id, r.split, r.image_path])


def load_manifest(path) -> list:
    records = []
    with open(path, "r", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ValueError(f"bad manifest header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ValueError(f"line {lineno}: expected 4 fields, got {len(row)}")
            try:
                pid, cam = int(row[0]), int(row[1])
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
            split = row[2]
            if split not in SPLITS:
                raise ValueError(f"line {lineno}: unknown split {split!r}")
            records.append(SampleRecord(pid, cam, split, row[3]))
    return records


@dataclass
class LoadedDataset:
    """Manifest plus decoded images, ready for training and evaluation."""

    records: list
    images: np.ndarray  # (n, h, w, 3) uint8
    root: str

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.records) if r.split == split], dtype=np.int64)

    def train_label_map(self) -> dict:
        pids = sorted({r.person_id for r in self.records if r.split == "train"})
        return {pid: i for i, pid in enumerate(pids)}

    @property
    def image_size(self):
        return self.images.shape[1:3]


def load_dataset(root) -> LoadedDataset:
    records = load_manifest(os.path.join(root, "manifest.csv"))
    if not records:
        raise ValueError("empty manifest")
    images = np.stack([ppm.read_ppm(os.path.join(root, r.image_path)) for r in records])
    return LoadedDataset(records, images, root)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    src_y = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    src_x = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(src_y), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(src_x), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(src_y - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(src_x - x0, 0.0, 1.0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def _center_fit(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Center-crop or zero-pad each axis to the requested size."""
    h, w = img.shape[:2]
    out = np.zeros((out_h, out_w) + img.shape[2:], dtype=img.dtype)
    src_top = max(0, (h - out_h) // 2)
    src_left = max(0, (w - out_w) // 2)
    dst_top = max(0, (out_h - h) // 2)
    dst_left = max(0, (out_w - w) // 2)
    ch = min(h, out_h)
    cw = min(w, out_w)
    out[dst_top : dst_top + ch, dst_left : dst_left + cw] = img[src_top : src_top + ch, src_left : src_left + cw]
    return out


def augment(image: np.ndarray, cfg: AugmentationConfig, draw: np.random.Generator) -> np.ndarray:
    """Random horizontal flip, random zoom, random erasing.

    ``draw`` is the caller-owned RNG. Draw order: flip coin, zoom factor,
    erase coin, then (only if erasing) area, aspect, top, left. Output
    size always equals input size.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]

    if draw.uniform() < cfg.flip_prob:
        img = img[:, ::-1].copy()

    z = draw.uniform(cfg.zoom_range[0], cfg.zoom_range[1])
    zh, zw = max(1, int(round(h * z))), max(1, int(round(w * z)))
    if (zh, zw) != (h, w):
        img = _center_fit(_resize_bilinear(img, zh, zw), h, w)
    else:
        img = _resize_bilinear(img, h, w)  # exact identity mapping

    if draw.uniform() < cfg.erase_prob:
        area = draw.uniform(cfg.erase_area[0], cfg.erase_area[1]) * h * w
        aspect = draw.uniform(cfg.erase_aspect[0], cfg.erase_aspect[1])
        eh = int(np.clip(round(np.sqrt(area * aspect)), 1, h))
        ew = int(np.clip(round(np.sqrt(area / aspect)), 1, w))
        top = int(draw.integers(0, h - eh + 1))
        left = int(draw.integers(0, w - ew + 1))
        img[top : top + eh, left : left + ew] = 0.0
    return img


# ---------------------------------------------------------------------------
# PK sampling
# ---------------------------------------------------------------------------


def _train_groups(manifest) -> dict:
    groups = {}
    for i, r in enumerate(manifest):
        if r.split == "train":
            groups.setdefault(r.person_id, []).append(i)
    return groups


def batches_per_epoch(manifest, spec: BatchSpec) -> int:
    groups = _train_groups(manifest)
    return -(-len(groups) // spec.p)


def epoch_batches(manifest, spec: BatchSpec, seed: int, epoch: int) -> list:
    """All PK batches of one epoch.

    Identities are shuffled and chunked into groups of P, so every train
    id appears at least once per epoch; a short final chunk is padded with
    ids sampled from the rest. Each id contributes K distinct images.
    """
    groups = _train_groups(manifest)
    pids = sorted(groups)
    if len(pids) < spec.p:
        raise ValueError(f"need >= {spec.p} train ids, got {len(pids)}")
    for pid, idxs in groups.items():
        if len(idxs) < spec.k:
            raise ValueError(f"id {pid} has {len(idxs)} images, needs >= {spec.k}")

    gen = rng_mod.generator(seed, "sample", epoch)
    perm = [pids[i] for i in gen.permutation(len(pids))]
    chunks = [perm[i : i + spec.p] for i in range(0, len(perm), spec.p)]
    short = spec.p - len(chunks[-1])
    if short:
        pool = [pid for pid in perm if pid not in chunks[-1]]
        extra = gen.choice(len(pool), size=short, replace=False)
        chunks[-1] = chunks[-1] + [pool[i] for i in sorted(extra)]

    batches = []
    for chunk in chunks:
        batch = []
        for pid in chunk:
            idxs = groups[pid]
            pick = gen.choice(len(idxs), size=spec.k, replace=False)
            batch.extend(idxs[i] for i in pick)
        batches.append(np.array(batch, dtype=np.int64))
    return batches


def pk_sample(manifest, spec: BatchSpec, seed: int, epoch_position: int) -> np.ndarray:
    """The batch at a flat position: epoch_position // batches_per_epoch
    selects the epoch, the remainder the batch within it."""
    bpe = batches_per_epoch(manifest, spec)
    epoch, slot = divmod(int(epoch_position), bpe)
    return epoch_batches(manifest, spec, seed, epoch)[slot]
