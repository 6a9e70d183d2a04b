"""Synthetic identity/attribute image sets, a PGM directory loader, occluders.

Each identity owns a latent vector that sets the parameters of a simple
parametric face (tones, feature sizes and positions, glasses, skin
texture). The first ``num_attrs`` latent coordinates are bimodal and their
signs are the identity's binary attributes. Each image jitters the
parameters and applies a random pose, lighting ramp, expression and pixel
noise. Everything is a pure function of the seed.
"""
import csv
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ArgumentError, ConfigError, IngestionError
from .numerics import DTYPE, make_rng

SPLITS = ("train", "val", "test")


@dataclass
class DatasetManifest:
    attribute_names: list
    identity_names: list
    splits: dict
    seed: int = 0
    params: dict = field(default_factory=dict)

    @property
    def num_ids(self):
        return len(self.identity_names)

    def check_disjoint(self):
        seen = {}
        for name, ids in self.splits.items():
            for i in ids:
                if i in seen:
                    raise ConfigError(f"identity {i} appears in both {seen[i]} and {name} splits")
                seen[i] = name

    def to_text(self):
        lines = [
            f"num_ids={self.num_ids}",
            f"seed={self.seed}",
            "attributes=" + ",".join(self.attribute_names),
        ]
        for name in SPLITS:
            ids = self.splits.get(name, [])
            lines.append(f"{name}_ids=" + ",".join(self.identity_names[i] for i in ids))
        for k in sorted(self.params):
            lines.append(f"gen.{k}={self.params[k]}")
        return "\n".join(lines) + "\n"


@dataclass
class Dataset:
    """Images ``[N,C,H,W]`` in [0,1] with identity labels and identity-level attributes."""

    images: np.ndarray
    identities: np.ndarray
    id_attributes: np.ndarray
    manifest: DatasetManifest

    def __len__(self):
        return len(self.images)

    @property
    def attributes(self):
        """Per-image attribute bits ``[N, A]``."""
        return self.id_attributes[self.identities]

    def subset(self, mask_or_index):
        idx = np.asarray(mask_or_index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return Dataset(self.images[idx], self.identities[idx], self.id_attributes, self.manifest)

    def split(self, name):
        ids = self.manifest.splits.get(name, [])
        return self.subset(np.isin(self.identities, ids))


def default_split_counts(num_ids):
    """40/10/14 out of 64, scaled."""
    n_val = max(1, int(round(num_ids * 10 / 64)))
    n_test = max(1, int(round(num_ids * 14 / 64)))
    return num_ids - n_val - n_test, n_val, n_test


# identity parameter table: name, base value, spread per unit latent
_PARAMS = (
    ("skin", 0.6, 0.12),
    ("hair_tone", 0.3, 0.13),
    ("glasses", 0.0, 1.0),
    ("face_w", 0.66, 0.08),
    ("hairline", -0.5, 0.12),
    ("eye_dx", 0.33, 0.045),
    ("eye_y", -0.18, 0.05),
    ("eye_size", 0.115, 0.018),
    ("brow_gap", 0.17, 0.035),
    ("nose_len", 0.24, 0.05),
    ("nose_w", 0.09, 0.02),
    ("mouth_y", 0.48, 0.05),
    ("mouth_w", 0.28, 0.05),
    ("face_h", 0.84, 0.05),
    ("brow_w", 0.05, 0.012),
    ("texture", 0.0, 1.0),
    ("lip_tone", 0.0, 0.08),
)
PARAM_NAMES = tuple(p[0] for p in _PARAMS)


def _soft(d, width):
    """Smooth step: 1 inside (d < 0), 0 outside."""
    return 0.5 * (1.0 - np.tanh(d / width))


def _ellipse(u, v, cx, cy, rx, ry):
    return np.sqrt(((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2) - 1.0


def render_face(p, hw, pose, texture_field, background=None):
    """Rasterize one face from an identity parameter dict and a pose.

    ``pose`` holds shift (dx, dy in pixels), scale, rotation (radians),
    light (horizontal gradient), smile and blink terms.
    """
    soft = 1.5 / hw
    g = (np.arange(hw) + 0.5) / hw * 2 - 1
    v0, u0 = np.meshgrid(g, g, indexing="ij")
    # inverse pose: image coords -> canonical face coords
    u0 = u0 - pose["dx"] * 2 / hw
    v0 = v0 - pose["dy"] * 2 / hw
    c, s = np.cos(pose["rot"]), np.sin(pose["rot"])
    u = (c * u0 + s * v0) / pose["scale"]
    v = (-s * u0 + c * v0) / pose["scale"]

    img = np.full((hw, hw), 0.12) if background is None else background
    outer = _soft(_ellipse(u, v, 0, -0.02, p["face_w"] + 0.1, p["face_h"] + 0.1), soft)
    face = _soft(_ellipse(u, v, 0, 0.02, p["face_w"], p["face_h"]), soft) * _soft(p["hairline"] - v, soft * 2)
    img = img * (1 - outer) + p["hair_tone"] * outer
    skin = p["skin"] + 0.05 * p["texture"] * texture_field(u, v)
    img = img * (1 - face) + skin * face
    for side in (-1, 1):
        ex = side * p["eye_dx"]
        blink = max(0.35, 1.0 - pose["blink"])
        eye = _soft(_ellipse(u, v, ex, p["eye_y"], p["eye_size"] * 1.4, p["eye_size"] * 0.7 * blink), soft)
        img = img * (1 - 0.8 * eye) + 0.08 * 0.8 * eye
        brow = _soft(_ellipse(u, v, ex, p["eye_y"] - p["brow_gap"], p["eye_size"] * 1.7, p["brow_w"]), soft)
        img = img * (1 - 0.7 * brow) + p["hair_tone"] * 0.7 * brow
        if p["glasses"] > 0:
            ring = np.abs(_ellipse(u, v, ex, p["eye_y"], p["eye_size"] * 2.0, p["eye_size"] * 1.5))
            frame = min(1.0, 2.0 * p["glasses"]) * _soft(ring - 0.22, soft * 2)
            img = img * (1 - frame) + 0.05 * frame
    if p["glasses"] > 0:
        bridge = _soft(np.maximum(np.abs(u) - p["eye_dx"] + p["eye_size"] * 2.0, np.abs(v - p["eye_y"]) - 0.03), soft)
        img = img * (1 - min(1.0, 2.0 * p["glasses"]) * bridge) + 0.05 * min(1.0, 2.0 * p["glasses"]) * bridge
    nose = _soft(_ellipse(u, v, 0, p["eye_y"] + 0.08 + p["nose_len"] / 2, p["nose_w"], p["nose_len"] / 2), soft)
    img = img - 0.12 * nose * (u > 0) + 0.04 * nose * (u <= 0)
    curve = pose["smile"] * (u / max(p["mouth_w"], 1e-3)) ** 2
    mouth = _soft(_ellipse(u, v + curve, 0, p["mouth_y"], p["mouth_w"], 0.045), soft)
    img = img * (1 - 0.75 * mouth) + (0.25 + p["lip_tone"]) * 0.75 * mouth
    return img * (1 + pose["light"] * u0)


def _texture_sampler(rng, size=16, sigma=2.0):
    f = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    f = (f - f.mean()) / f.std()
    f = 0.5 * (f + f[:, ::-1])
    from scipy.interpolate import RegularGridInterpolator
    grid = np.linspace(-1.2, 1.2, size)
    interp = RegularGridInterpolator((grid, grid), f, bounds_error=False, fill_value=0.0)
    return lambda u, v: interp(np.stack([v, u], axis=-1))


# ---------------------------------------------------------------------------
# directory I/O
# ---------------------------------------------------------------------------

ATTRIBUTE_NAMES = {
    "skin": "light_skin",
    "hair_tone": "light_hair",
    "glasses": "eyeglasses",
    "face_w": "wide_face",
    "hairline": "low_hairline",
    "eye_dx": "wide_eyes",
    "eye_y": "low_eyes",
    "eye_size": "big_eyes",
    "brow_gap": "high_brows",
}


def _balanced_signs(n, num_attrs, rng):
    """Columns of +/-1 with equal counts (up to one) in random order."""
    base = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    return np.stack([rng.permutation(base) for _ in range(num_attrs)], axis=1) if num_attrs else np.zeros((n, 0))


def gen_dataset(num_ids=64, imgs_per_id=25, num_attrs=4, hw=32, seed=0, *, split=None,
                margin=2.0, rotation=0.06, scale_jitter=0.06, lighting=0.2, expression=0.08,
                pose_noise=0.15, pixel_noise=0.03, clutter=0.0, attr_strength=1.2):
    """Render a synthetic face set.

    Identity ``i`` owns a latent vector ``z_i`` over :data:`PARAM_NAMES`.
    The first ``num_attrs`` coordinates are bimodal (balanced within each
    split), centred on +-``attr_strength``; their signs are the planted
    attributes. Per image: jitter of
    the identity parameters by ``pose_noise``, a random shift of up to
    ``margin`` pixels, scale, rotation, a lighting ramp, mouth/eye
    expression, contrast/offset and pixel noise.
    """
    if num_ids < 4 or imgs_per_id < 2:
        raise ConfigError("need num_ids >= 4 and imgs_per_id >= 2")
    if hw < 8 or margin < 0 or 4 * margin > hw:
        raise ConfigError(f"hw={hw} too small for a shift margin of {margin} px (need hw >= 8 and margin <= hw/4)")
    if attr_strength <= 0:
        raise ConfigError("attr_strength must be > 0")
    if not 0 <= num_attrs <= len(ATTRIBUTE_NAMES):
        raise ConfigError(f"num_attrs must be in [0, {len(ATTRIBUTE_NAMES)}]")
    counts = default_split_counts(num_ids) if split is None else tuple(split)
    if len(counts) != 3 or sum(counts) != num_ids or min(counts) < 0:
        raise ConfigError(f"split {counts} does not partition {num_ids} identities")
    rng = make_rng(seed)
    dim = len(_PARAMS)
    latent = np.clip(rng.standard_normal((num_ids, dim)), -2.5, 2.5)
    bounds = np.cumsum((0,) + counts)
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        if hi > lo and num_attrs:
            mag = np.abs(attr_strength + 0.3 * rng.standard_normal((hi - lo, num_attrs)))
            latent[lo:hi, :num_attrs] = _balanced_signs(hi - lo, num_attrs, rng) * mag
    textures = [_texture_sampler(rng) for _ in range(num_ids)]
    base = np.array([p[1] for p in _PARAMS])
    spread = np.array([p[2] for p in _PARAMS])

    images = np.empty((num_ids * imgs_per_id, 1, hw, hw), dtype=DTYPE)
    identities = np.repeat(np.arange(num_ids), imgs_per_id)
    for n, i in enumerate(identities):
        z = latent[i] + pose_noise * rng.standard_normal(dim)
        p = dict(zip(PARAM_NAMES, base + spread * z))
        for key in ("texture", "glasses"):
            p[key] = latent[i, PARAM_NAMES.index(key)]
        pose = dict(
            dx=rng.uniform(-margin, margin),
            dy=rng.uniform(-margin, margin),
            scale=1.0 + rng.uniform(-scale_jitter, scale_jitter),
            rot=rotation * rng.standard_normal(),
            light=rng.uniform(-lighting, lighting),
            smile=expression * rng.standard_normal(),
            blink=rng.uniform(0.0, 0.6) if rng.random() < 0.2 else 0.0,
        )
        background = None
        if clutter > 0:
            field = gaussian_filter(rng.standard_normal((hw, hw)), rng.uniform(1.0, 3.0), mode="wrap")
            background = rng.uniform(0.05, 0.35) + clutter * field / field.std()
        img = render_face(p, hw, pose, textures[i], background)
        img = img * rng.uniform(0.9, 1.1) + rng.uniform(-0.05, 0.05)
        img = img + pixel_noise * rng.standard_normal(img.shape)
        images[n, 0] = np.clip(img, 0.0, 1.0)

    attrs = latent[:, :num_attrs] > 0
    names = [f"id{i:03d}" for i in range(num_ids)]
    splits = {name: list(range(lo, hi)) for name, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:])}
    params = dict(num_ids=num_ids, imgs_per_id=imgs_per_id, num_attrs=num_attrs, hw=hw,
                  margin=margin, rotation=rotation, scale_jitter=scale_jitter, lighting=lighting,
                  expression=expression, pose_noise=pose_noise, pixel_noise=pixel_noise, clutter=clutter)
    manifest = DatasetManifest([ATTRIBUTE_NAMES[k] for k in PARAM_NAMES[:num_attrs]], names, splits, seed, params)
    return Dataset(images, identities, attrs, manifest)


def write_dataset(ds, root):
    """Write ``<root>/<identity>/<k>.pgm`` + ``attributes.csv`` + ``manifest.txt``."""
    os.makedirs(root, exist_ok=True)
    counters = {}
    for img, ident in zip(ds.images, ds.identities):
        name = ds.manifest.identity_names[ident]
        k = counters.get(name, 0)
        counters[name] = k + 1
        d = os.path.join(root, name)
        os.makedirs(d, exist_ok=True)
        pix = np.round(np.clip(img[0], 0, 1) * 255).astype(np.uint8)
        Image.fromarray(pix, mode="L").save(os.path.join(d, f"{k:05d}.pgm"))
    with open(os.path.join(root, "attributes.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["identity", *ds.manifest.attribute_names])
        for i, name in enumerate(ds.manifest.identity_names):
            w.writerow([name, *(int(b) for b in ds.id_attributes[i])])
    with open(os.path.join(root, "manifest.txt"), "w") as fh:
        fh.write(ds.manifest.to_text())


def _read_kv(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def load_dataset(root):
    """Load a PGM directory tree; identities are sorted folder names."""
    if not os.path.isdir(root):
        raise IngestionError(f"dataset directory not found: {root}")
    names = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    images, identities = [], []
    shape = None
    for i, name in enumerate(names):
        folder = os.path.join(root, name)
        for fn in sorted(os.listdir(folder)):
            if not fn.lower().endswith(".pgm"):
                continue
            path = os.path.join(folder, fn)
            try:
                with Image.open(path) as im:
                    arr = np.asarray(im.convert("L") if im.mode not in ("L", "I;16", "I") else im)
            except Exception as exc:
                raise IngestionError(f"cannot read {path}: {exc}") from exc
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise IngestionError(f"{path}: size {arr.shape} differs from {shape}")
            peak = 255.0 if arr.dtype == np.uint8 else 65535.0
            images.append((arr.astype(np.float64) / peak).astype(DTYPE))
            identities.append(i)
    if not images:
        raise IngestionError(f"no .pgm images under {root}")
    images = np.stack(images)[:, None]
    identities = np.asarray(identities)

    attr_names, id_attr = [], np.zeros((len(names), 0), dtype=bool)
    attr_path = os.path.join(root, "attributes.csv")
    if os.path.exists(attr_path):
        with open(attr_path, newline="") as fh:
            rows = list(csv.reader(fh))
        attr_names = rows[0][1:]
        id_attr = np.zeros((len(names), len(attr_names)), dtype=bool)
        index = {n: i for i, n in enumerate(names)}
        for row in rows[1:]:
            if not row:
                continue
            if row[0] not in index:
                raise IngestionError(f"{attr_path}: unknown identity {row[0]!r}")
            id_attr[index[row[0]]] = [v.strip() == "1" for v in row[1:]]

    seed, params = 0, {}
    index = {n: i for i, n in enumerate(names)}
    manifest_path = os.path.join(root, "manifest.txt")
    splits = None
    if os.path.exists(manifest_path):
        kv = _read_kv(manifest_path)
        seed = int(kv.get("seed", 0))
        params = {k[4:]: v for k, v in kv.items() if k.startswith("gen.")}
        if all(f"{s}_ids" in kv for s in SPLITS):
            splits = {}
            for s in SPLITS:
                listed = [x for x in kv[f"{s}_ids"].split(",") if x]
                missing = [x for x in listed if x not in index]
                if missing:
                    raise IngestionError(f"{manifest_path}: {s}_ids lists unknown identities {missing[:3]}")
                splits[s] = [index[x] for x in listed]
    if splits is None:
        a, b, _ = default_split_counts(len(names)) if len(names) >= 4 else (len(names), 0, 0)
        ids = list(range(len(names)))
        splits = {"train": ids[:a], "val": ids[a:a + b], "test": ids[a + b:]}
    manifest = DatasetManifest(attr_names, names, splits, seed, params)
    manifest.check_disjoint()
    return Dataset(images, identities, id_attr, manifest)


# ---------------------------------------------------------------------------
# occluders and flips; all operate on [..., H, W] arrays
# ---------------------------------------------------------------------------

def occlude_partial(img, fraction, fill=0.0, from_bottom=True):
    """Fill the bottom ``ceil(fraction*H)`` rows (top rows if ``from_bottom`` is False)."""
    if not 0.0 <= fraction <= 1.0:
        raise ArgumentError(f"fraction must be in [0,1], got {fraction}")
    out = np.array(img, copy=True)
    h = out.shape[-2]
    rows = int(np.ceil(round(fraction * h, 9)))
    if rows:
        if from_bottom:
            out[..., h - rows:, :] = fill
        else:
            out[..., :rows, :] = fill
    return out


def occlude_block(img, n, fill=0.0, rng=None):
    """Fill one ``n x n`` block at a uniformly random position.

    The position comes from two uniform draws scaled to the valid range, so
    the same rng state places blocks of different sizes at matching
    relative offsets.
    """
    out = np.array(img, copy=True)
    h, w = out.shape[-2:]
    if n < 0 or n > min(h, w):
        raise ArgumentError(f"block size {n} outside [0, {min(h, w)}]")
    if n == 0:
        return out
    rng = make_rng(0) if rng is None else rng
    uy, ux = rng.random(2)
    y = min(int(uy * (h - n + 1)), h - n)
    x = min(int(ux * (w - n + 1)), w - n)
    out[..., y:y + n, x:x + n] = fill
    return out


def hflip(img):
    return np.ascontiguousarray(np.asarray(img)[..., ::-1])
