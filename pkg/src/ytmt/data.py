"""Synthetic additive mixtures and paired image directories.

Images are float32 arrays of shape (3, H, W) with values in [0, 1].
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DimensionError, IngestionError, ParameterError

# Exact-mode layers live on a 2**-16 grid: sums and differences of two grid
# values in [0, 1] are then exact in float32.
GRID = 2.0 ** -16


@dataclass
class MixtureSample:
    I: np.ndarray
    T: np.ndarray
    R: np.ndarray
    seed: int = 0
    sigma: float = 0.0
    alpha: float = 0.0
    mode: str = "exact"
    clip_mask: Optional[np.ndarray] = None


@dataclass
class DatasetSpec:
    source: str = "procedural"  # or "directory"
    path: Optional[str] = None
    crop: int = 32
    count: int = 2000
    seed: int = 0
    mode: str = "exact"  # or "realistic"
    alpha_range: tuple = (0.2, 0.45)
    sigma_range: tuple = (1.0, 3.0)

    def __post_init__(self):
        self.alpha_range = tuple(float(v) for v in self.alpha_range)
        self.sigma_range = tuple(float(v) for v in self.sigma_range)
        if self.source not in ("procedural", "directory"):
            raise ParameterError(f"unknown data source {self.source!r}")
        if self.mode not in ("exact", "realistic"):
            raise ParameterError(f"unknown mixture mode {self.mode!r}")
        if self.crop < 8:
            raise ParameterError(f"crop must be >= 8, got {self.crop}")


def _quantize(x: np.ndarray) -> np.ndarray:
    return (np.floor(np.asarray(x, dtype=np.float64) / GRID) * GRID).astype(np.float32)


def gen_procedural_layer(seed: int, H: int, W: int, channels: int = 3) -> np.ndarray:
    """Random smooth background plus rectangles, ellipses, lines and stripes."""
    if H < 8 or W < 8:
        raise DimensionError(f"procedural layers need H, W >= 8, got {H}x{W}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:H, 0:W]
    yy = yy / (H - 1)
    xx = xx / (W - 1)
    base = rng.uniform(0.1, 0.9, size=(channels, 1, 1))
    slope = rng.uniform(-0.4, 0.4, size=(channels, 2, 1, 1))
    img = base + slope[:, 0] * (xx - 0.5) + slope[:, 1] * (yy - 0.5)
    for _ in range(int(rng.integers(3, 8))):
        kind = rng.integers(0, 4)
        color = rng.uniform(0.0, 1.0, size=(channels, 1, 1))
        opacity = rng.uniform(0.5, 1.0)
        cy, cx = rng.uniform(0, 1, size=2)
        if kind == 0:
            hh, ww = rng.uniform(0.1, 0.5, size=2)
            mask = (np.abs(yy - cy) < hh / 2) & (np.abs(xx - cx) < ww / 2)
        elif kind == 1:
            ry, rx = rng.uniform(0.08, 0.35, size=2)
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
        elif kind == 2:
            theta = rng.uniform(0, np.pi)
            dist = np.abs((xx - cx) * np.sin(theta) - (yy - cy) * np.cos(theta))
            mask = dist < rng.uniform(0.02, 0.06)
        else:
            theta = rng.uniform(0, np.pi)
            period = rng.uniform(0.1, 0.3)
            phase = (xx * np.cos(theta) + yy * np.sin(theta)) / period
            hh, ww = rng.uniform(0.3, 0.7, size=2)
            mask = (np.sin(2 * np.pi * phase) > 0) & (np.abs(yy - cy) < hh / 2) & (np.abs(xx - cx) < ww / 2)
        img = np.where(mask[None], (1 - opacity) * img + opacity * color, img)
    return _quantize(np.clip(img, 0.0, 1.0))


def gaussian_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    """Per-channel Gaussian blur with periodic boundaries (preserves the mean)."""
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.asarray(x, dtype=np.float64).copy()
    return gaussian_filter(np.asarray(x, dtype=np.float64), sigma=(0, sigma, sigma), mode="wrap")


def synthesize_mixture(T: np.ndarray, R: np.ndarray, mode: str = "exact", alpha: float = 0.3,
                       sigma: float = 2.0, seed: int = 0) -> MixtureSample:
    """Blend a transmission and a blurred, attenuated reflection.

    R' = alpha * blur(R, sigma).  Exact mode also scales T' = (1 - alpha) * T
    so I = T' + R' stays in [0, 1] without clipping; realistic mode keeps T and
    clips I = clip(T + R', 0, 1), recording where clipping happened.
    """
    if T.shape != R.shape:
        raise DimensionError(f"T and R shapes differ: {T.shape} vs {R.shape}")
    if not 0.0 <= alpha < 1.0:
        raise ParameterError(f"alpha must lie in [0, 1), got {alpha}")
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    if mode == "exact" and alpha == 0.0:
        t = np.asarray(T, dtype=np.float32)
        zero = np.zeros_like(t)
        return MixtureSample(I=t + zero, T=t, R=zero, seed=seed, sigma=sigma, alpha=alpha, mode=mode)
    r_prime = alpha * gaussian_blur(R, sigma)
    if mode == "exact":
        t_prime = _quantize((1.0 - alpha) * np.asarray(T, dtype=np.float64))
        r_prime = _quantize(r_prime)
        return MixtureSample(I=t_prime + r_prime, T=t_prime, R=r_prime, seed=seed,
                             sigma=sigma, alpha=alpha, mode=mode)
    if mode == "realistic":
        t = np.asarray(T, dtype=np.float32)
        r_prime = r_prime.astype(np.float32)
        raw = t + r_prime
        return MixtureSample(I=np.clip(raw, 0.0, 1.0), T=t, R=r_prime, seed=seed, sigma=sigma,
                             alpha=alpha, mode=mode, clip_mask=raw > 1.0)
    raise ParameterError(f"unknown mixture mode {mode!r}")


def procedural_sample(spec: DatasetSpec, index: int) -> MixtureSample:
    seed = int(np.random.SeedSequence([spec.seed, index]).generate_state(1)[0])
    rng = np.random.default_rng(seed)
    t_seed, r_seed = (int(s) for s in rng.integers(0, 2**31 - 1, size=2))
    alpha = float(rng.uniform(*spec.alpha_range))
    sigma = float(rng.uniform(*spec.sigma_range))
    T = gen_procedural_layer(t_seed, spec.crop, spec.crop)
    R = gen_procedural_layer(r_seed, spec.crop, spec.crop)
    return synthesize_mixture(T, R, spec.mode, alpha, sigma, seed=seed)


def generate_dataset(spec: DatasetSpec) -> list:
    return [procedural_sample(spec, i) for i in range(spec.count)]


def stack_samples(samples) -> tuple:
    """Stack samples into (I, T, R) arrays of shape (N, 3, H, W)."""
    samples = list(samples)
    if not samples:
        return tuple(np.zeros((0, 3, 1, 1), dtype=np.float32) for _ in range(3))
    return tuple(np.stack([getattr(s, k) for s in samples]).astype(np.float32) for k in ("I", "T", "R"))


# -- portable pixmap IO -------------------------------------------------------
def write_ppm(path, image: np.ndarray, maxval: int = 255) -> None:
    """Write a (3, H, W) image in [0, 1] as binary P6 (8- or 16-bit)."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"write_ppm expects (3, H, W), got {image.shape}")
    q = np.rint(np.clip(image, 0.0, 1.0) * maxval).transpose(1, 2, 0)
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P6\n{image.shape[2]} {image.shape[1]}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + q.astype(dtype).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file into a float32 (3, H, W) array in [0, 1]."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IngestionError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise IngestionError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise IngestionError(f"{path}: malformed header") from exc
    dtype = ">u2" if maxval > 255 else "u1"
    count = width * height * 3
    if len(raw) - pos < count * np.dtype(dtype).itemsize:
        raise IngestionError(f"{path}: pixel data truncated")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    return (data.reshape(height, width, 3).transpose(2, 0, 1) / maxval).astype(np.float32)


def write_sample_directory(root, samples, start: int = 0) -> int:
    """Write samples as ``root/{T,R,I}/NNNN.ppm``; returns the number written."""
    root = Path(root)
    for sub in ("T", "R", "I"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    n = 0
    for n, sample in enumerate(samples, start=1):
        name = f"{start + n - 1:04d}.ppm"
        for sub in ("T", "R", "I"):
            write_ppm(root / sub / name, getattr(sample, sub))
    return n


def _crop(arrays, crop: int, rng: Optional[np.random.Generator]):
    H, W = arrays[0].shape[1:]
    if H < crop or W < crop:
        raise DimensionError(f"image {H}x{W} smaller than crop {crop}")
    if rng is None:
        y, x = (H - crop) // 2, (W - crop) // 2
    else:
        y, x = int(rng.integers(0, H - crop + 1)), int(rng.integers(0, W - crop + 1))
    return [a[:, y : y + crop, x : x + crop] for a in arrays]


def load_pair_directory(spec: DatasetSpec, random_crop: bool = False) -> Iterator[MixtureSample]:
    """Yield samples from ``path/T`` and ``path/R`` (and ``path/I`` if present).

    Files are matched by name and visited in sorted order.  Without an I/
    folder the mixture is T + R (clipped in realistic mode).
    """
    root = Path(spec.path or ".")
    t_dir, r_dir, i_dir = root / "T", root / "R", root / "I"
    if not t_dir.is_dir():
        return
    names = sorted(p.name for p in t_dir.iterdir() if p.suffix.lower() == ".ppm")
    for index, name in enumerate(names):
        t = read_ppm(t_dir / name)
        if not (r_dir / name).exists():
            raise IngestionError(f"{r_dir / name}: missing reflection for {name}")
        r = read_ppm(r_dir / name)
        if t.shape != r.shape:
            raise IngestionError(f"{name}: T shape {t.shape} != R shape {r.shape}")
        if (i_dir / name).exists():
            i = read_ppm(i_dir / name)
            if i.shape != t.shape:
                raise IngestionError(f"{i_dir / name}: shape {i.shape} != {t.shape}")
        else:
            i = t + r
            if spec.mode == "realistic":
                i = np.clip(i, 0.0, 1.0)
        rng = np.random.default_rng([spec.seed, index]) if random_crop else None
        try:
            i, t, r = _crop([i, t, r], spec.crop, rng)
        except DimensionError as exc:
            raise IngestionError(f"{t_dir / name}: {exc}") from exc
        yield MixtureSample(I=i, T=t, R=r, seed=spec.seed, mode=spec.mode)


def load_dataset(spec: DatasetSpec) -> list:
    if spec.source == "directory":
        return list(load_pair_directory(spec))
    return generate_dataset(spec)


def sample_checksum(sample: MixtureSample) -> str:
    crc = 0
    for arr in (sample.I, sample.T, sample.R):
        crc = zlib.crc32(np.ascontiguousarray(arr, dtype="<f4").tobytes(), crc)
    return f"{crc:08x}"


def directory_checksum(root) -> str:
    crc = 0
    root = Path(root)
    for path in sorted(root.rglob("*")):
        if path.is_file():
            crc = zlib.crc32(str(path.relative_to(root)).encode(), crc)
            crc = zlib.crc32(path.read_bytes(), crc)
    return f"{crc:08x}"
