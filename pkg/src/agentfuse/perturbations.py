"""Test-time corruptions of 8-bit RGB frames: rain, fog, shot noise, Gaussian noise.

Frames are ``(H, W, 3)`` uint8 arrays.  Each function draws its randomness from
``np.random.default_rng([seed, frame_index])`` so every frame of a video is
reproducible on its own.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class RainConfig:
    n_drops: int = 83
    long_radius: float = 20.0
    short_radius: float = 1.0
    angle_range: tuple[float, float] = (-10.0, 10.0)
    alphas: tuple[float, ...] = (0.9, 0.8, 0.7, 0.6, 0.5)
    beta_range: tuple[float, float] = (0.0, 0.5)
    radius_jitter: float = 0.0  # relative spread of drop radii; 0 keeps the fixed sizes
    seed: int = 0


@dataclass(frozen=True)
class FogConfig:
    c1: float = 1.5
    c2: float = 2.5
    wibble: float = 100.0
    decay: float = 3.0  # generic heightmap default; fog() itself decays by c2
    seed: int = 0

    def __post_init__(self):
        if self.c1 < 0:
            raise ValueError("C1 must be non-negative")
        if self.decay <= 1 or self.c2 <= 1:
            raise ValueError("wibble decay must exceed 1")


@dataclass(frozen=True)
class NoiseConfig:
    severity: float = 5.0
    mean: float = 0.0
    sigma: float = 0.2
    raw_shot: bool = False  # literal Poisson(s*I) without dividing by s
    seed: int = 0

    def __post_init__(self):
        if self.severity <= 0:
            raise ValueError("shot-noise severity must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


def _rng(seed: int, frame_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, frame_index])


def _to_unit(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3 or frame.dtype != np.uint8:
        raise ValueError(f"expected an (H, W, 3) uint8 frame, got {frame.shape} {frame.dtype}")
    return frame.astype(np.float64) / 255.0


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


# -- rain --------------------------------------------------------------------------------
@dataclass(frozen=True)
class Raindrop:
    x: float
    y: float
    long_radius: float
    short_radius: float
    angle: float  # degrees from vertical
    alpha: float
    beta: float


def sample_raindrops(rng: np.random.Generator, height: int, width: int, cfg: RainConfig) -> list[Raindrop]:
    drops = []
    for _ in range(cfg.n_drops):
        scale = 1.0 + cfg.radius_jitter * rng.uniform(-1.0, 1.0) if cfg.radius_jitter else 1.0
        drops.append(Raindrop(
            x=float(rng.uniform(0, width)), y=float(rng.uniform(0, height)),
            long_radius=cfg.long_radius * scale, short_radius=cfg.short_radius * scale,
            angle=float(rng.uniform(*cfg.angle_range)),
            alpha=float(rng.choice(cfg.alphas)),
            beta=float(rng.uniform(*cfg.beta_range)),
        ))
    return drops


def _line_kernel(length: int, angle_deg: float) -> np.ndarray:
    size = length if length % 2 else length + 1
    k = np.zeros((size, size))
    c = size // 2
    t = math.radians(angle_deg)
    for s in np.linspace(-(length - 1) / 2.0, (length - 1) / 2.0, length):
        k[int(round(c + s * math.cos(t))), int(round(c + s * math.sin(t)))] = 1.0
    return k / k.sum()


def drop_coverage(drop: Raindrop, height: int, width: int) -> tuple[tuple[slice, slice], np.ndarray]:
    """Motion-blurred ellipse coverage in [0, 1] over the drop's bounding window."""
    blur = max(int(round(drop.long_radius)), 1)
    half = int(math.ceil(drop.long_radius + blur)) + 2
    r0, r1 = max(int(drop.y) - half, 0), min(int(drop.y) + half + 1, height)
    c0, c1 = max(int(drop.x) - half, 0), min(int(drop.x) + half + 1, width)
    if r0 >= r1 or c0 >= c1:
        return (slice(0, 0), slice(0, 0)), np.zeros((0, 0))
    yy, xx = np.mgrid[r0:r1, c0:c1].astype(np.float64)
    dy, dx = yy + 0.5 - drop.y, xx + 0.5 - drop.x
    t = math.radians(drop.angle)
    along = dy * math.cos(t) + dx * math.sin(t)
    across = -dy * math.sin(t) + dx * math.cos(t)
    inside = (along / drop.long_radius) ** 2 + (across / drop.short_radius) ** 2 <= 1.0
    cover = ndimage.convolve(inside.astype(np.float64), _line_kernel(blur, drop.angle), mode="constant")
    return (slice(r0, r1), slice(c0, c1)), np.clip(cover, 0.0, 1.0)


def rain(frame: np.ndarray, cfg: RainConfig = RainConfig(), frame_index: int = 0,
         drops: Sequence[Raindrop] | None = None) -> np.ndarray:
    """Composite ``cfg.n_drops`` blurred elliptical streaks with per-drop beta blending."""
    x = _to_unit(frame)
    h, w, _ = x.shape
    if drops is None:
        drops = sample_raindrops(_rng(cfg.seed, frame_index), h, w, cfg)
    for drop in drops:
        if drop.beta == 0.0:
            continue
        window, cover = drop_coverage(drop, h, w)
        weight = (drop.beta * cover)[..., None]
        x[window] = (1.0 - weight) * x[window] + weight * drop.alpha
    return _to_uint8(x)


# -- fog -----------------------------------------------------------------------------------
def heightmap_grid_size(size: int) -> int:
    if size < 2:
        raise ValueError("heightmap size must be at least 2")
    k = max(1, math.ceil(math.log2(size - 1)))
    return 2 ** k + 1


def fog_heightmap(size: int, decay: float = 3.0, wibble: float = 100.0, seed: int = 0,
                  rng: np.random.Generator | None = None, normalize: bool = True,
                  trace: list | None = None) -> np.ndarray:
    """Diamond-square plasma fractal on a ``(2**k + 1)``-square grid, min-max scaled to [0, 1].

    Corners start at zero.  Each level runs a square step (cell centers) and
    a diamond step (edge midpoints, averaging the in-grid neighbours), adding
    ``uniform(-w, w)``; then the step halves and ``w`` is divided by ``decay``.
    If ``trace`` is a list, the amplitude used at each level is appended.
    """
    n = heightmap_grid_size(size)
    rng = rng if rng is not None else np.random.default_rng(seed)
    hmap = np.zeros((n, n))
    step, w = n - 1, float(wibble)
    while step >= 2:
        half = step // 2
        if trace is not None:
            trace.append(w)
        corners = (hmap[0:-1:step, 0:-1:step] + hmap[step::step, 0:-1:step]
                   + hmap[0:-1:step, step::step] + hmap[step::step, step::step])
        hmap[half::step, half::step] = corners / 4.0 + rng.uniform(-w, w, corners.shape)

        known = np.zeros((n, n), dtype=bool)
        known[::half, ::half] = True
        targets = np.zeros((n, n), dtype=bool)
        targets[::half, ::half] = True
        targets[::step, ::step] = False
        targets[half::step, half::step] = False
        padded = np.pad(hmap, half)
        pk = np.pad(known, half)
        total = np.zeros((n, n))
        count = np.zeros((n, n))
        for di, dj in ((-half, 0), (half, 0), (0, -half), (0, half)):
            sl = (slice(half + di, half + di + n), slice(half + dj, half + dj + n))
            total += padded[sl] * pk[sl]
            count += pk[sl]
        ti = np.nonzero(targets)
        hmap[ti] = total[ti] / count[ti] + rng.uniform(-w, w, len(ti[0]))
        step = half
        w /= decay
    if not normalize:
        return hmap
    lo, hi = hmap.min(), hmap.max()
    return (hmap - lo) / (hi - lo) if hi > lo else np.zeros_like(hmap)


def center_crop(a: np.ndarray, height: int, width: int) -> np.ndarray:
    r0 = (a.shape[0] - height) // 2
    c0 = (a.shape[1] - width) // 2
    return a[r0:r0 + height, c0:c0 + width]


def fog(frame: np.ndarray, cfg: FogConfig = FogConfig(), frame_index: int = 0,
        heightmap: np.ndarray | None = None) -> np.ndarray:
    """Add ``c1 * plasma`` (decay ``c2``) and rescale by ``max / (max + c1)``.

    ``heightmap`` overrides the generated fractal; it is center-cropped to the frame.
    """
    x = _to_unit(frame)
    h, w, _ = x.shape
    peak = x.max()
    if heightmap is None:
        heightmap = fog_heightmap(max(h, w, 2), cfg.c2, cfg.wibble, rng=_rng(cfg.seed, frame_index))
    layer = center_crop(np.asarray(heightmap, dtype=np.float64), h, w)
    x = x + cfg.c1 * layer[..., None]
    denom = peak + cfg.c1
    scale = peak / denom if denom > 0 else 1.0
    return _to_uint8(np.clip(x * scale, 0.0, 1.0))


# -- noise ---------------------------------------------------------------------------------
def shot_noise_unit(x: np.ndarray, severity: float, rng: np.random.Generator, raw: bool = False) -> np.ndarray:
    """Poisson photon counts at rate ``severity * x``; divided by ``severity`` unless ``raw``."""
    counts = rng.poisson(severity * np.asarray(x, dtype=np.float64)).astype(np.float64)
    return counts if raw else counts / severity


def shot_noise(frame: np.ndarray, cfg: NoiseConfig = NoiseConfig(), frame_index: int = 0) -> np.ndarray:
    x = shot_noise_unit(_to_unit(frame), cfg.severity, _rng(cfg.seed, frame_index), cfg.raw_shot)
    return _to_uint8(np.clip(x, 0.0, 1.0))


def gaussian_noise(frame: np.ndarray, cfg: NoiseConfig = NoiseConfig(), frame_index: int = 0) -> np.ndarray:
    x = _to_unit(frame)
    x = x + _rng(cfg.seed, frame_index).normal(cfg.mean, cfg.sigma, x.shape)
    return _to_uint8(np.clip(x, 0.0, 1.0))


# -- dispatch ------------------------------------------------------------------------------
PERTURBATIONS = {
    "rain": (rain, RainConfig),
    "fog": (fog, FogConfig),
    "shot": (shot_noise, NoiseConfig),
    "gaussian": (gaussian_noise, NoiseConfig),
}


def make_config(kind: str, seed: int = 0, **overrides):
    if kind not in PERTURBATIONS:
        raise ValueError(f"unknown perturbation {kind!r}; expected one of {sorted(PERTURBATIONS)}")
    cls = PERTURBATIONS[kind][1]
    known = {f.name for f in fields(cls)}
    bad = set(overrides) - known
    if bad:
        raise ValueError(f"{kind} has no parameter(s) {sorted(bad)}")
    return replace(cls(), seed=seed, **overrides)


def perturb_frames(frames: np.ndarray, kind: str, cfg) -> np.ndarray:
    """Apply one corruption to every frame of a ``(T, H, W, 3)`` video."""
    fn = PERTURBATIONS[kind][0]
    return np.stack([fn(f, cfg, frame_index=i) for i, f in enumerate(frames)])


# -- frame I/O ------------------------------------------------------------------------------
def write_raw_video(path: str | Path, frames: np.ndarray) -> None:
    """Header ``"<w> <h> <frames>\\n"`` then, per frame, the R, G and B planes as bytes."""
    frames = np.asarray(frames, dtype=np.uint8)
    t, h, w, _ = frames.shape
    with open(path, "wb") as fh:
        fh.write(f"{w} {h} {t}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(frames.transpose(0, 3, 1, 2)).tobytes())


def read_raw_video(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    nl = blob.index(b"\n")
    w, h, t = (int(v) for v in blob[:nl].split())
    data = np.frombuffer(blob, dtype=np.uint8, offset=nl + 1)
    if data.size != t * 3 * h * w:
        raise ValueError(f"{path}: expected {t * 3 * h * w} bytes of planes, found {data.size}")
    return data.reshape(t, 3, h, w).transpose(0, 2, 3, 1).copy()


def read_png_frames(directory: str | Path) -> np.ndarray:
    from PIL import Image

    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG frames in {directory}")
    return np.stack([np.asarray(Image.open(p).convert("RGB")) for p in paths])


def write_png_frames(directory: str | Path, frames: np.ndarray) -> None:
    from PIL import Image

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        Image.fromarray(np.asarray(f, dtype=np.uint8)).save(d / f"frame_{i:05d}.png")


def read_frames(path: str | Path) -> tuple[np.ndarray, str]:
    p = Path(path)
    return (read_png_frames(p), "png") if p.is_dir() else (read_raw_video(p), "raw")


def write_frames(path: str | Path, frames: np.ndarray, layout: str) -> None:
    if layout == "png":
        write_png_frames(path, frames)
    else:
        write_raw_video(path, frames)
