"""Synthetic low-light RAW data by unprocessing procedurally drawn RGB images.

Unprocessing runs the camera pipeline backwards: undo gamma, map sRGB to
camera RGB, sample an RGGB mosaic, darken by an exposure gain and add
heteroscedastic sensor noise (shot + read).  The packed 4-plane mosaic is the
network input; the clean RGB image is the long-exposure reference.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..tensorio import read_tensor, write_tensor

GAMMA = 2.2
# sRGB -> camera RGB, rows normalised to sum to one so white stays white
CAM_FROM_RGB = np.array([
    [0.78, 0.17, 0.05],
    [0.12, 0.80, 0.08],
    [0.04, 0.22, 0.74],
])
IDENTITY_CCM = np.eye(3)


@dataclass(frozen=True)
class RawImage:
    planes: np.ndarray  # (4, H/2, W/2), channel order R, G1, G2, B
    gain: float
    noise: tuple[float, float]  # (shot_scale, read_sigma)

    def __post_init__(self):
        if self.planes.ndim != 3 or self.planes.shape[0] != 4:
            raise ValueError(f"packed RAW must be (4, h, w), got {self.planes.shape}")
        if np.any(self.planes < 0):
            raise ValueError("RAW values must be nonnegative")


def _check_even(h: int, w: int) -> None:
    if h % 2 or w % 2:
        raise ValueError(f"Bayer data needs even dimensions, got {h}x{w}")


def mosaic_rggb(rgb: np.ndarray) -> np.ndarray:
    """Sample a (3, H, W) image on an RGGB grid -> (1, H, W)."""
    _, h, w = rgb.shape
    _check_even(h, w)
    out = np.empty((1, h, w))
    out[0, 0::2, 0::2] = rgb[0, 0::2, 0::2]
    out[0, 0::2, 1::2] = rgb[1, 0::2, 1::2]
    out[0, 1::2, 0::2] = rgb[1, 1::2, 0::2]
    out[0, 1::2, 1::2] = rgb[2, 1::2, 1::2]
    return out


def pack_bayer(mosaic) -> np.ndarray:
    """(1, H, W) RGGB mosaic -> (4, H/2, W/2) planes (R, G1, G2, B)."""
    m = np.asarray(getattr(mosaic, "data", mosaic))
    if m.ndim != 3 or m.shape[0] != 1:
        raise ValueError(f"mosaic must be (1, H, W), got {m.shape}")
    _check_even(*m.shape[1:])
    return np.stack([m[0, 0::2, 0::2], m[0, 0::2, 1::2], m[0, 1::2, 0::2], m[0, 1::2, 1::2]])


def unpack_bayer(planes) -> np.ndarray:
    p = np.asarray(getattr(planes, "data", planes))
    if p.ndim != 3 or p.shape[0] != 4:
        raise ValueError(f"packed planes must be (4, h, w), got {p.shape}")
    _, h, w = p.shape
    out = np.empty((1, 2 * h, 2 * w))
    out[0, 0::2, 0::2] = p[0]
    out[0, 0::2, 1::2] = p[1]
    out[0, 1::2, 0::2] = p[2]
    out[0, 1::2, 1::2] = p[3]
    return out


def unprocess_synthesize(clean: np.ndarray, gain: float, noise: tuple[float, float], seed: int,
                         gamma: float = GAMMA, ccm: np.ndarray = CAM_FROM_RGB) -> tuple[RawImage, np.ndarray]:
    """Return ``(raw, reference)`` for a clean (3, H, W) image in [0, 1]."""
    clean = np.asarray(clean, dtype=np.float64)
    if clean.ndim != 3 or clean.shape[0] != 3:
        raise ValueError(f"clean image must be (3, H, W), got {clean.shape}")
    _check_even(*clean.shape[1:])
    if not 0 < gain <= 1:
        raise ValueError(f"gain must lie in (0, 1], got {gain}")
    if clean.min() < 0 or clean.max() > 1:
        raise ValueError("clean image must lie in [0, 1]")
    shot, read = noise
    if shot < 0 or read < 0:
        raise ValueError("noise levels must be nonnegative")

    linear = clean ** gamma
    cam = np.einsum("ij,jhw->ihw", ccm, linear)
    signal = pack_bayer(mosaic_rggb(cam)) * gain
    rng = np.random.default_rng(seed)
    std = np.sqrt(shot * np.maximum(signal, 0.0) + read * read)
    noisy = signal + std * rng.standard_normal(signal.shape)
    return RawImage(np.maximum(noisy, 0.0), float(gain), (float(shot), float(read))), clean


def naive_demosaic(planes: np.ndarray) -> np.ndarray:
    """Nearest-neighbour demosaic of packed planes (..., 4, h, w) -> (..., 3, 2h, 2w)."""
    r = planes[..., 0, :, :]
    g = 0.5 * (planes[..., 1, :, :] + planes[..., 2, :, :])
    b = planes[..., 3, :, :]
    rgb = np.stack([r, g, b], axis=-3)
    return rgb.repeat(2, axis=-2).repeat(2, axis=-1)


# ---------------------------------------------------------------------------
# procedural clean images


def _smooth_background(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.empty((3, h, w))
    for c in range(3):
        a, b, c0 = rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), rng.uniform(0.2, 0.8)
        fx, fy, ph = rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0, 2 * np.pi)
        img[c] = c0 + a * (xx - 0.5) + b * (yy - 0.5) + 0.1 * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
    return img


def _draw_shapes(rng, img):
    _, h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(2, 5)):
        color = rng.uniform(0, 1, size=3)[:, None]
        if rng.random() < 0.5:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(0.1, 0.3) * min(h, w)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            y0, x0 = rng.integers(0, h - 2), rng.integers(0, w - 2)
            y1, x1 = rng.integers(y0 + 2, h + 1), rng.integers(x0 + 2, w + 1)
            mask = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
        img[:, mask] = color


def _draw_glyphs(rng, img):
    """Short rows of 3x5 stroke glyphs, a stand-in for printed text."""
    _, h, w = img.shape
    ink = rng.uniform(0, 1, size=3)
    rows = rng.integers(1, 3)
    for _ in range(rows):
        y = int(rng.integers(1, max(h - 6, 2)))
        x = int(rng.integers(1, max(w // 3, 2)))
        for _ in range(rng.integers(2, 6)):
            if x + 3 >= w:
                break
            glyph = rng.random((5, 3)) < 0.5
            glyph[:, 0] |= rng.random() < 0.5
            ys, xs = np.nonzero(glyph)
            ys, xs = ys + y, xs + x
            keep = (ys < h) & (xs < w)
            img[:, ys[keep], xs[keep]] = ink[:, None]
            x += 4


def procedural_image(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """Smooth gradients, flat geometric shapes and glyph-like strokes, in [0, 1]."""
    img = _smooth_background(rng, size, size)
    _draw_shapes(rng, img)
    _draw_glyphs(rng, img)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class SynthConfig:
    image_size: int = 32
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    gain_range: tuple[float, float] = (0.1, 0.3)
    shot_scale: float = 1e-3
    read_sigma: float = 5e-3
    gamma: float = GAMMA
    seed: int = 0

    def __post_init__(self):
        if self.image_size % 2 or self.image_size < 2:
            raise ValueError("image_size must be a positive even number")
        lo, hi = self.gain_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"gain range must satisfy 0 < lo <= hi <= 1, got {self.gain_range}")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("split sizes must be nonnegative")


SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    clean: np.ndarray  # (N, 3, H, W)
    raw: np.ndarray  # (N, 4, H/2, W/2)
    records: list[dict]
    config: dict = field(default_factory=dict)

    def indices(self, split: str) -> np.ndarray:
        return np.array([r["index"] for r in self.records if r["split"] == split], dtype=int)

    @property
    def gains(self) -> np.ndarray:
        return np.array([r["gain"] for r in self.records])

    def __len__(self) -> int:
        return len(self.records)


def _f32(a: np.ndarray) -> np.ndarray:
    # stored tensors are float32; round now so in-memory and on-disk data agree
    return a.astype(np.float32).astype(np.float64)


def _synth_one(args):
    index, split, seed, cfg = args
    rng = np.random.default_rng(seed)
    clean = _f32(procedural_image(rng, cfg.image_size))
    gain = float(np.float32(rng.uniform(*cfg.gain_range)))
    raw, _ = unprocess_synthesize(clean, gain, (cfg.shot_scale, cfg.read_sigma), int(rng.integers(2**63)),
                                  gamma=cfg.gamma)
    record = {"index": index, "split": split, "gain": gain, "noise": [cfg.shot_scale, cfg.read_sigma], "seed": seed}
    return clean, _f32(raw.planes), record


def synth_threads() -> int:
    try:
        return max(1, int(os.environ.get("BGL_THREADS", "1")))
    except ValueError:
        return 1


def synthesize_dataset(cfg: SynthConfig, threads: int | None = None) -> Dataset:
    """Deterministic in ``cfg.seed`` regardless of the thread count."""
    splits = ["train"] * cfg.n_train + ["val"] * cfg.n_val + ["test"] * cfg.n_test
    seeds = np.random.SeedSequence(cfg.seed).generate_state(len(splits), dtype=np.uint64)
    jobs = [(i, s, int(seed), cfg) for i, (s, seed) in enumerate(zip(splits, seeds))]
    threads = synth_threads() if threads is None else threads
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(_synth_one, jobs))
    else:
        results = [_synth_one(j) for j in jobs]
    if not results:
        raise ValueError("dataset has no images")
    clean = np.stack([r[0] for r in results])
    raw = np.stack([r[1] for r in results])
    cfg_dict = {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.__dict__.items()}
    return Dataset(clean, raw, [r[2] for r in results], cfg_dict)


def save_dataset(ds: Dataset, directory, png: bool = False) -> Path:
    directory = Path(directory)
    (directory / "clean").mkdir(parents=True, exist_ok=True)
    (directory / "raw").mkdir(parents=True, exist_ok=True)
    for rec in ds.records:
        i = rec["index"]
        write_tensor(directory / "clean" / f"{i:05d}.bglt", ds.clean[i])
        write_tensor(directory / "raw" / f"{i:05d}.bglt", ds.raw[i])
    manifest = {"config": ds.config, "count": len(ds), "images": ds.records}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if png:
        export_png(ds, directory / "png")
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest missing: {path}")
    manifest = json.loads(path.read_text())
    records = manifest["images"]
    clean = np.stack([read_tensor(directory / "clean" / f"{r['index']:05d}.bglt") for r in records])
    raw = np.stack([read_tensor(directory / "raw" / f"{r['index']:05d}.bglt") for r in records])
    return Dataset(clean, raw, records, manifest.get("config", {}))


def to_uint8(img: np.ndarray) -> np.ndarray:
    return (np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def export_png(ds: Dataset, directory) -> None:
    """8-bit previews of references and gain-corrected naive demosaics."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for rec in ds.records:
        i = rec["index"]
        Image.fromarray(to_uint8(ds.clean[i])).save(directory / f"{i:05d}_clean.png")
        preview = naive_demosaic(ds.raw[i]) / rec["gain"]
        Image.fromarray(to_uint8(preview)).save(directory / f"{i:05d}_raw.png")
