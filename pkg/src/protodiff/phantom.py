"""Seeded synthetic phantoms with paired binary masks, plus PGM and manifest I/O.

A phantom is 1-3 nested ellipses on a flat background: the outer one carries
a smooth intensity gradient and band-limited texture, inner ones shift the
local intensity. The mask is the union of the ellipse interiors (the inner
ellipses are generated strictly inside the outer one, so in practice the mask
equals the outer interior). Generation is a pure function of (seed, size,
params); the canonical on-disk image format is 8-bit binary PGM.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

Array = np.ndarray

_SPLITS = ("train", "val")


@dataclass
class PhantomParams:
    background: float = 0.1
    texture_amplitude: float = 0.15
    texture_waves: int = 6
    texture_cutoff: float = 4.0  # max spatial frequency, cycles per image
    noise_floor: float = 0.02
    max_inner: int = 2


@dataclass
class Phantom:
    image: Array
    mask: Array
    seed: int
    params: PhantomParams


def ellipse_mask(size: int, cx: float, cy: float, a: float, b: float,
                 theta: float = 0.0) -> Array:
    """Binary interior of a rotated ellipse on a size x size pixel grid."""
    if a <= 0 or b <= 0:
        raise ValueError(f"degenerate ellipse axes ({a}, {b})")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.float64)


def generate_phantom(seed: int, size: int, params: PhantomParams | None = None) -> Phantom:
    if size < 16:
        raise ValueError("phantom size must be >= 16")
    params = params or PhantomParams()
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    cx = size / 2 + rng.uniform(-0.05, 0.05) * size
    cy = size / 2 + rng.uniform(-0.05, 0.05) * size
    a = rng.uniform(0.26, 0.40) * size
    b = rng.uniform(0.20, 0.34) * size
    theta = rng.uniform(0.0, np.pi)
    outer = ellipse_mask(size, cx, cy, a, b, theta)

    image = np.full((size, size), params.background)
    mask = outer.copy()

    # Smooth gradient across the outer region.
    base = rng.uniform(0.45, 0.65)
    phi = rng.uniform(0.0, 2 * np.pi)
    slope = rng.uniform(0.1, 0.3)
    ramp = ((xx - cx) * np.cos(phi) + (yy - cy) * np.sin(phi)) / size
    image = np.where(outer > 0, base + slope * ramp, image)

    # Inner ellipses, placed in the outer ellipse's normalized coordinates:
    # with |center| + max axis fraction < 1 the inner interior is contained
    # in the outer one, so the mask union equals the outer interior.
    n_inner = int(rng.integers(0, params.max_inner + 1))
    for _ in range(n_inner):
        fa = rng.uniform(0.2, 0.45)
        fb = rng.uniform(0.2, 0.45)
        r = rng.uniform(0.0, 0.9) * (1.0 - max(fa, fb))
        psi = rng.uniform(0.0, 2 * np.pi)
        off_u = r * np.cos(psi) * a
        off_v = r * np.sin(psi) * b
        icx = cx + off_u * np.cos(theta) - off_v * np.sin(theta)
        icy = cy + off_u * np.sin(theta) + off_v * np.cos(theta)
        inner = ellipse_mask(size, icx, icy, fa * a, fb * b, theta)
        delta = rng.uniform(0.1, 0.25) * rng.choice([-1.0, 1.0])
        image = np.where(inner > 0, image + delta, image)
        mask = np.maximum(mask, inner)

    # Band-limited texture inside the region.
    if params.texture_amplitude > 0 and params.texture_waves > 0:
        texture = np.zeros_like(image)
        for _ in range(params.texture_waves):
            fx = rng.uniform(-params.texture_cutoff, params.texture_cutoff)
            fy = rng.uniform(-params.texture_cutoff, params.texture_cutoff)
            phase = rng.uniform(0.0, 2 * np.pi)
            amp = rng.uniform(0.5, 1.0)
            texture += amp * np.sin(2 * np.pi * (fx * xx + fy * yy) / size + phase)
        texture *= params.texture_amplitude / params.texture_waves
        image = np.where(mask > 0, image + texture, image)

    if params.noise_floor > 0:
        image = image + rng.normal(0.0, params.noise_floor, image.shape)

    return Phantom(image=np.clip(image, 0.0, 1.0), mask=mask, seed=seed, params=params)


# -- PGM I/O ---------------------------------------------------------------------


def save_image(path, img: Array) -> None:
    """Write a [0,1] grayscale image as binary 8-bit PGM (round(v*255))."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("save_image expects a 2-D image")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def load_image(path) -> Array:
    """Read a binary 8-bit PGM back to floats in [0,1] (byte/maxval)."""
    with open(path, "rb") as f:
        blob = f.read()

    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(blob):
            ch = blob[pos:pos + 1]
            if ch == b"#":
                nl = blob.find(b"\n", pos)
                pos = len(blob) if nl < 0 else nl + 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: malformed PGM header")
        return blob[start:pos]

    if token() != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError:
        raise ValueError(f"{path}: malformed PGM header") from None
    if not (0 < maxval < 256):
        raise ValueError(f"{path}: unsupported PGM maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    payload = blob[pos:pos + w * h]
    if len(payload) != w * h:
        raise ValueError(f"{path}: truncated PGM payload")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / float(maxval)


# -- dataset manifest -------------------------------------------------------------


@dataclass
class ManifestItem:
    id: str
    image: str  # path relative to the manifest
    mask: str
    seed: int
    split: str


@dataclass
class DatasetManifest:
    items: list[ManifestItem]
    config_hash: str

    def to_dict(self) -> dict:
        return {"items": [asdict(it) for it in self.items],
                "config_hash": self.config_hash}

    @staticmethod
    def from_dict(d: dict) -> "DatasetManifest":
        return DatasetManifest(
            items=[ManifestItem(**it) for it in d["items"]],
            config_hash=d["config_hash"])


@dataclass
class Dataset:
    """Manifest plus decoded image/mask arrays, keyed in manifest order."""

    manifest: DatasetManifest
    images: list[Array]
    masks: list[Array]

    def indices(self, split: str | None = None) -> list[int]:
        if split is None:
            return list(range(len(self.images)))
        return [i for i, it in enumerate(self.manifest.items) if it.split == split]

    def item_id(self, index: int) -> str:
        return self.manifest.items[index].id

    def index_of(self, item_id: str) -> int:
        for i, it in enumerate(self.manifest.items):
            if it.id == item_id:
                return i
        raise KeyError(f"no dataset item {item_id!r}")


def _config_hash(n: int, size: int, seed: int, params: PhantomParams) -> str:
    payload = json.dumps({"n": n, "size": size, "seed": seed,
                          "params": asdict(params)}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def quantize(img: Array) -> Array:
    """Snap to the 8-bit grid so in-memory and reloaded data are bit-identical."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate_dataset(n: int, seed: int, size: int, out_dir,
                     params: PhantomParams | None = None) -> DatasetManifest:
    """Write n phantoms + masks + manifest.json; 90/10 train/val split by index."""
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    params = params or PhantomParams()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_val = n // 10
    items: list[ManifestItem] = []
    for i in range(n):
        ph = generate_phantom(seed + i, size, params)
        img_name, mask_name = f"phantom_{i:04d}.pgm", f"mask_{i:04d}.pgm"
        save_image(out / img_name, quantize(ph.image))
        save_image(out / mask_name, ph.mask)
        split = "val" if i >= n - n_val else "train"
        items.append(ManifestItem(id=f"phantom_{i:04d}", image=img_name,
                                  mask=mask_name, seed=seed + i, split=split))
    manifest = DatasetManifest(items=items,
                               config_hash=_config_hash(n, size, seed, params))
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
    return manifest


def load_dataset(manifest_path) -> Dataset:
    """Load and validate a dataset: paths exist, unique ids, known splits."""
    manifest_path = Path(manifest_path)
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = DatasetManifest.from_dict(json.load(f))
    root = manifest_path.parent
    seen: set[str] = set()
    images, masks = [], []
    for it in manifest.items:
        if it.id in seen:
            raise ValueError(f"duplicate dataset id {it.id!r}")
        seen.add(it.id)
        if it.split not in _SPLITS:
            raise ValueError(f"unknown split {it.split!r} for {it.id}")
        img_path, mask_path = root / it.image, root / it.mask
        if not img_path.exists() or not mask_path.exists():
            raise FileNotFoundError(f"dataset file missing for {it.id}")
        images.append(load_image(img_path))
        mask = load_image(mask_path)
        if not np.all((mask == 0.0) | (mask == 1.0)):
            raise ValueError(f"mask for {it.id} is not binary")
        masks.append(mask)
    return Dataset(manifest=manifest, images=images, masks=masks)
