"""Synthetic "real vs. manipulated" image domains and dataset ingestion.

Real images are smoothed-noise textures pushed through a per-image colour
palette, with a faint sensor-like grain. Each fake starts from its own real
image and receives one of four manipulations that loosely mimic the usual
forgery families:

* ``patch_swap``: the centre is replaced by a lower-resolution patch of a
  donor real image, blended in with a raised-cosine border (face swap).
* ``local_warp``: a sinusoidal displacement field resamples the centre
  (reenactment).
* ``region_noise``: band-limited noise is added inside a central region
  (neural-texture style rendering).
* ``full_synth``: the whole image is re-synthesised with shifted texture
  statistics and no grain (GAN synthesis).

Every sample is produced from its own ``numpy`` generator keyed on
``(seed, kind, role, index)``, so generation order never affects the output.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

MANIP_KINDS = ("patch_swap", "local_warp", "region_noise", "full_synth")
ALLOWED_SIDES = (32, 64, 224)
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
BLEND_BORDER = 2
GRAIN = 0.05
DONOR_BLUR = 0.6
WARP_ORDER = 3


class ConfigurationError(ValueError):
    pass


class SizeError(ValueError):
    pass


class IngestionError(OSError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledSample:
    image: np.ndarray
    label: int
    domain_id: str


@dataclass(frozen=True, eq=False)
class UnlabeledSample:
    image: np.ndarray
    domain_id: str


Sample = LabeledSample | UnlabeledSample


def content_hash(sample: Sample) -> str:
    return hashlib.sha1(np.ascontiguousarray(sample.image).tobytes()).hexdigest()


@dataclass(frozen=True, eq=False)
class DomainDataset:
    domain_id: str
    train: tuple = ()
    test: tuple = ()
    labeled: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "test", tuple(self.test))
        want = LabeledSample if self.labeled else UnlabeledSample
        for s in self.train + self.test:
            if not isinstance(s, want):
                raise ConfigurationError(
                    f"domain {self.domain_id!r}: labeled={self.labeled} but got {type(s).__name__}")

    @property
    def n(self) -> int:
        return len(self.train) + len(self.test)

    @property
    def samples(self) -> tuple:
        return self.train + self.test

    def unlabeled(self) -> "DomainDataset":
        """Same images with labels dropped."""
        strip = lambda ss: tuple(UnlabeledSample(s.image, s.domain_id) for s in ss)
        return DomainDataset(self.domain_id, strip(self.train), strip(self.test), labeled=False)

    def arrays(self, split: str = "train") -> tuple[np.ndarray, np.ndarray | None]:
        """Stack a split into an ``N x H x W x 3`` array plus labels (``None`` if unlabeled)."""
        samples = getattr(self, split)
        images = np.stack([s.image for s in samples]) if samples else np.zeros((0, 0, 0, 3), np.float32)
        if not self.labeled:
            return images, None
        return images, np.array([s.label for s in samples], dtype=np.int64)


# --------------------------------------------------------------------------- generators

def _rng(seed: int, kind: str, role: str, index: int) -> np.random.Generator:
    kind_id = MANIP_KINDS.index(kind) if kind in MANIP_KINDS else len(MANIP_KINDS)
    role_id = {"real": 0, "fake": 1}[role]
    return np.random.default_rng([seed, kind_id, role_id, index])


def _texture_field(rng: np.random.Generator, side: int, scale: float = 1.0) -> np.ndarray:
    coarse = ndimage.gaussian_filter(rng.standard_normal((side, side)), 3.0 * scale * side / 32, mode="wrap")
    fine = ndimage.gaussian_filter(rng.standard_normal((side, side)), 1.2 * scale * side / 32, mode="wrap")
    f = coarse / (coarse.std() + 1e-12) + 0.5 * fine / (fine.std() + 1e-12)
    lo, hi = np.percentile(f, [1, 99])
    return np.clip((f - lo) / (hi - lo + 1e-12), 0.0, 1.0)


def _palette(rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.1, 0.9, size=(3, 3))


def _colorize(t: np.ndarray, pal: np.ndarray) -> np.ndarray:
    t = t[..., None]
    return (1 - t) ** 2 * pal[0] + 2 * t * (1 - t) * pal[1] + t ** 2 * pal[2]


def make_real(rng: np.random.Generator, side: int) -> np.ndarray:
    img = _colorize(_texture_field(rng, side), _palette(rng))
    img = img + rng.normal(0.0, GRAIN, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _center_box(rng: np.random.Generator, side: int) -> tuple[int, int, int]:
    size = side // 2
    jitter = max(1, side // 16)
    y0 = side // 4 + int(rng.integers(-jitter, jitter + 1))
    x0 = side // 4 + int(rng.integers(-jitter, jitter + 1))
    return y0, x0, size


def _box_mask(side: int, y0: int, x0: int, size: int, border: int = 0) -> np.ndarray:
    """1 inside the box, raised-cosine ramp over ``border`` pixels at its edge, 0 outside."""
    def ramp(lo: int, n: int) -> np.ndarray:
        idx = np.arange(side)
        d = np.minimum(idx - lo, lo + n - 1 - idx).astype(np.float64)  # distance inside the edge
        if border == 0:
            return (d >= 0).astype(np.float64)
        w = np.clip((d + 1) / (border + 1), 0.0, 1.0)
        return np.where(d < 0, 0.0, 0.5 - 0.5 * np.cos(np.pi * w))
    return np.outer(ramp(y0, size), ramp(x0, size))


def _patch_swap(real, rng, side):
    donor = make_real(rng, side)
    # resampled donor: grain partly smoothed away
    donor = ndimage.gaussian_filter(donor, (DONOR_BLUR * side / 32, DONOR_BLUR * side / 32, 0))
    y0, x0, size = _center_box(rng, side)
    mask = _box_mask(side, y0, x0, size, border=BLEND_BORDER)
    fake = mask[..., None] * donor + (1 - mask[..., None]) * real
    return np.clip(fake, 0, 1), mask > 0


def _local_warp(real, rng, side):
    y0, x0, size = _center_box(rng, side)
    window = _box_mask(side, y0, x0, size, border=max(2, side // 8))
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    amp = rng.uniform(1.0, 2.0) * side / 32
    freq = rng.uniform(1.5, 3.0) / size
    phase = rng.uniform(0, 2 * np.pi, size=2)
    dy = amp * np.sin(2 * np.pi * freq * xx + phase[0]) * window
    dx = amp * np.sin(2 * np.pi * freq * yy + phase[1]) * window
    fake = np.stack([
        ndimage.map_coordinates(real[..., c], [yy + dy, xx + dx], order=WARP_ORDER, mode="reflect")
        for c in range(3)], axis=-1)
    # spline sampling at integer nodes is exact only up to rounding; copy outside the window
    fake = np.where((window > 0)[..., None], fake, real)
    return np.clip(fake, 0, 1), window > 0


def _region_noise(real, rng, side):
    y0, x0, size = _center_box(rng, side)
    region = _box_mask(side, y0, x0, size)
    noise = rng.standard_normal((side, side, 3))
    band = ndimage.gaussian_filter(noise, (0.7, 0.7, 0)) - ndimage.gaussian_filter(noise, (2.0, 2.0, 0))
    band = band / (band.std() + 1e-12) * 0.06
    fake = real + band * region[..., None]
    return np.clip(fake, 0, 1), region > 0


def _full_synth(real, rng, side):
    t = _texture_field(rng, side, scale=0.7)
    pal = _palette(rng)
    pal = 0.5 + 0.75 * (pal - 0.5)  # compressed contrast
    return np.clip(_colorize(t, pal), 0, 1), np.ones((side, side), dtype=bool)


_MANIPULATIONS = {
    "patch_swap": _patch_swap,
    "local_warp": _local_warp,
    "region_noise": _region_noise,
    "full_synth": _full_synth,
}


def synth_pair(kind: str, seed: int, index: int, side: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(source_real, fake, region)`` for fake number ``index`` of a domain."""
    if kind not in _MANIPULATIONS:
        raise ConfigurationError(f"unknown manipulation kind {kind!r}; expected one of {MANIP_KINDS}")
    rng = _rng(seed, kind, "fake", index)
    real = make_real(rng, side)
    fake, region = _MANIPULATIONS[kind](real, rng, side)
    return real.astype(np.float32), fake.astype(np.float32), region


def generate_domain(manip_kind: str, seed: int, n_real: int, n_fake: int, side: int = 32,
                    domain_id: str | None = None) -> DomainDataset:
    """Generate a labeled domain; every sample lands in ``train`` until :func:`split_domain`."""
    if manip_kind not in _MANIPULATIONS:
        raise ConfigurationError(f"unknown manipulation kind {manip_kind!r}; expected one of {MANIP_KINDS}")
    if n_real < 4 or n_fake < 4:
        raise SizeError(f"need at least 4 real and 4 fake samples, got {n_real}/{n_fake}")
    if side not in ALLOWED_SIDES:
        raise SizeError(f"side must be one of {ALLOWED_SIDES}, got {side}")
    domain_id = domain_id or manip_kind
    samples = []
    for i in range(n_real):
        img = make_real(_rng(seed, manip_kind, "real", i), side).astype(np.float32)
        samples.append(LabeledSample(img, 0, domain_id))
    for i in range(n_fake):
        samples.append(LabeledSample(synth_pair(manip_kind, seed, i, side)[1], 1, domain_id))
    return DomainDataset(domain_id, train=samples, test=(), labeled=True)


def split_domain(d: DomainDataset, train_fraction: float, seed: int) -> DomainDataset:
    """Stratified (per class when labeled) deterministic train/test split."""
    if not 0.0 < train_fraction < 1.0:
        raise SizeError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    samples = d.samples
    rng = np.random.default_rng(seed)
    if d.labeled:
        groups = [[i for i, s in enumerate(samples) if s.label == c] for c in (0, 1)]
    else:
        groups = [list(range(len(samples)))]
    train_idx, test_idx = [], []
    for g in groups:
        if not g:
            continue
        order = rng.permutation(len(g))
        k = int(round(train_fraction * len(g)))
        train_idx += [g[j] for j in order[:k]]
        test_idx += [g[j] for j in order[k:]]
    if not train_idx or not test_idx:
        raise SizeError(f"train_fraction {train_fraction} leaves an empty split for {d.domain_id!r}")
    train_idx.sort()
    test_idx.sort()
    return DomainDataset(d.domain_id, [samples[i] for i in train_idx], [samples[i] for i in test_idx],
                         labeled=d.labeled)


def rebalance(d: DomainDataset, ratio: float, seed: int) -> DomainDataset:
    """Subsample the majority class of a labeled domain so real:fake is at most ``ratio``:1."""
    if not d.labeled:
        return d
    rng = np.random.default_rng(seed)
    real = [s for s in d.samples if s.label == 0]
    fake = [s for s in d.samples if s.label == 1]
    if len(real) > ratio * len(fake):
        keep = sorted(rng.choice(len(real), int(ratio * len(fake)), replace=False))
        real = [real[i] for i in keep]
    elif len(fake) > ratio * len(real):
        keep = sorted(rng.choice(len(fake), int(ratio * len(real)), replace=False))
        fake = [fake[i] for i in keep]
    return DomainDataset(d.domain_id, real + fake, (), labeled=True)


# --------------------------------------------------------------------------- disk I/O

def _read_image(path: Path, side: int) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (side, side):
                im = im.resize((side, side), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise IngestionError(f"cannot decode image {path}: {exc}") from exc


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset_dir(path: str | Path, labeled: bool, side: int = 32,
                     domain_id: str | None = None) -> DomainDataset:
    root = Path(path)
    if not root.is_dir():
        raise IngestionError(f"dataset directory not found: {root}")
    domain_id = domain_id or root.name
    samples: list[Sample] = []
    if labeled:
        for sub in sorted(p for p in root.iterdir() if p.is_dir()):
            if sub.name not in ("real", "fake"):
                raise IngestionError(f"unknown class subdirectory {sub} (expected real/ or fake/)")
        for name, label in (("real", 0), ("fake", 1)):
            sub = root / name
            if not sub.is_dir():
                continue
            samples += [LabeledSample(_read_image(p, side), label, domain_id) for p in _image_files(sub)]
    else:
        samples = [UnlabeledSample(_read_image(p, side), domain_id) for p in _image_files(root)]
    if not samples:
        raise IngestionError(f"no images found under {root}")
    return DomainDataset(domain_id, samples, (), labeled=labeled)


def export_domain(d: DomainDataset, root: str | Path, split: str | None = None) -> Path:
    """Write a domain as PNGs using the ``real/`` + ``fake/`` (or flat) layout."""
    from PIL import Image

    root = Path(root)
    samples = d.samples if split is None else getattr(d, split)
    for i, s in enumerate(samples):
        sub = root / ("real", "fake")[s.label] if d.labeled else root
        sub.mkdir(parents=True, exist_ok=True)
        arr = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(arr).save(sub / f"{i:05d}.png")
    return root


# --------------------------------------------------------------------------- scenarios

@dataclass(frozen=True, eq=False)
class Scenario:
    source: DomainDataset
    targets: tuple
    kind: str
    target_pool: tuple = field(default=())

    @property
    def target_train_size(self) -> int:
        return len(self.target_pool)


def make_scenario(source: DomainDataset, targets: Sequence[DomainDataset]) -> Scenario:
    if not source.labeled:
        raise ConfigurationError(f"source domain {source.domain_id!r} must be labeled")
    if not targets:
        raise ConfigurationError("at least one target domain is required")
    for t in targets:
        if not t.train:
            raise ConfigurationError(f"target domain {t.domain_id!r} has no training split")
    pool = tuple(UnlabeledSample(s.image, s.domain_id) for t in targets for s in t.train)
    kind = "O2O" if len(targets) == 1 else "O2M"
    return Scenario(source, tuple(targets), kind, pool)


def build_domain(kind: str, seed: int, n_per_class: int, side: int, train_fraction: float,
                 split_seed: int | None = None) -> DomainDataset:
    """Generate and split in one go; the usual entry point for desk experiments."""
    d = generate_domain(kind, seed, n_per_class, n_per_class, side)
    return split_domain(d, train_fraction, seed if split_seed is None else split_seed)
