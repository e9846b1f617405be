"""Synthetic uteroplacental phantoms.

Each slice shows an elliptical myometrial ring with a thin bright serous band
outside it, a placenta lining part of the inner wall, and a dark boundary
band separating the placenta from the myometrium. The class is written into
that interface over a lesion arc:

* non-PAS: boundary band intact
* PA: boundary band thinned
* PI: band gone, placenta invades half the ring thickness
* PP: band, ring and serous layer breached, with an exophytic bulge outside

The mask is placenta plus serous band. All random geometry is drawn before
any class-specific step, so one seed renders the same anatomy for every
class and the renders differ only inside the lesion.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

NON_PAS, PA, PI, PP = range(4)
CLASS_NAMES = ("non-PAS", "PA", "PI", "PP")

# tissue codes of the noiseless label map
BACKGROUND, CAVITY, MYOMETRIUM, SEROSA, BOUNDARY, PLACENTA = range(6)

INTENSITY = {
    BACKGROUND: 0.10,
    CAVITY: 0.30,
    MYOMETRIUM: 0.45,
    SEROSA: 0.90,
    BOUNDARY: 0.05,
    PLACENTA: 0.70,
}
NOISE_SIGMA = 0.03
TEXTURE_AMPLITUDE = 0.08
BLUR_SIGMA = 0.6

# lengths as fractions of min(H, W), with pixel floors
RADIUS_Y = 0.34
RADIUS_X = 0.40
RING_THICKNESS = (0.09, 3.0)
SEROSA_THICKNESS = (0.035, 1.5)
BOUNDARY_THICKNESS = (0.047, 2.0)
PLACENTA_THICKNESS = (0.12, 3.0)
EXOPHYTIC_HEIGHT = (0.07, 2.0)
CENTER_JITTER = 0.03
SLICE_JITTER = 0.01
RADIUS_JITTER = 0.05

PLACENTA_HALF_ARC = np.deg2rad(75.0)
LESION_HALF_ARC = {PA: np.deg2rad(40.0), PI: np.deg2rad(40.0), PP: np.deg2rad(45.0)}
LESION_JITTER = np.deg2rad(15.0)
PA_REMAINING_BAND = 1.0 / 3.0

MIN_SIZE = 32


@dataclass
class VolumeSample:
    image: np.ndarray  # [n_in, H, W] float32 in [0, 1]
    mask: np.ndarray  # [n_in, H, W] uint8 in {0, 1}
    label: int
    sample_id: str = ""

    def __post_init__(self):
        if self.image.shape != self.mask.shape or self.image.ndim != 3:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} must be equal 3-D shapes")

    @property
    def mask_fraction(self) -> float:
        return float(self.mask.mean())


def _length(spec, size: int) -> float:
    frac, floor = spec
    return max(floor, frac * size)


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


@dataclass
class _Geometry:
    cy: float
    cx: float
    ry: float
    rx: float
    placenta_angle: float
    lesion_angle: float
    slice_offsets: np.ndarray  # [n_in, 4]: dy, dx, scale_y, scale_x


def _draw_geometry(rng: np.random.Generator, n_in: int, h: int, w: int) -> _Geometry:
    s = min(h, w)
    cy = h / 2 + rng.uniform(-1, 1) * CENTER_JITTER * s
    cx = w / 2 + rng.uniform(-1, 1) * CENTER_JITTER * s
    ry = RADIUS_Y * s * (1 + rng.uniform(-1, 1) * RADIUS_JITTER)
    rx = RADIUS_X * s * (1 + rng.uniform(-1, 1) * RADIUS_JITTER)
    # placenta on the upper (anterior) wall, give or take
    placenta_angle = -np.pi / 2 + rng.uniform(-1, 1) * np.deg2rad(20.0)
    lesion_angle = placenta_angle + rng.uniform(-1, 1) * LESION_JITTER
    offsets = np.column_stack([
        rng.uniform(-1, 1, n_in) * SLICE_JITTER * s,
        rng.uniform(-1, 1, n_in) * SLICE_JITTER * s,
        1 + rng.uniform(-1, 1, n_in) * 0.02,
        1 + rng.uniform(-1, 1, n_in) * 0.02,
    ])
    return _Geometry(cy, cx, ry, rx, placenta_angle, lesion_angle, offsets)


def _tissue_slice(geo: _Geometry, k: int, label: int, h: int, w: int) -> np.ndarray:
    s = min(h, w)
    t_ring = _length(RING_THICKNESS, s)
    t_ser = _length(SEROSA_THICKNESS, s)
    t_band = _length(BOUNDARY_THICKNESS, s)
    t_plac = _length(PLACENTA_THICKNESS, s)
    t_exo = _length(EXOPHYTIC_HEIGHT, s)

    dy, dx, sy, sx = geo.slice_offsets[k]
    ry, rx = geo.ry * sy, geo.rx * sx
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    u = (yy - geo.cy - dy) / ry
    v = (xx - geo.cx - dx) / rx
    # signed radial distance to the outer myometrium contour, in pixels
    d = (np.sqrt(u * u + v * v) - 1.0) * 0.5 * (ry + rx)
    theta = np.arctan2(u, v)

    t = np.full((h, w), BACKGROUND, dtype=np.uint8)
    t[d < 0] = CAVITY
    t[(d >= -t_ring) & (d < 0)] = MYOMETRIUM
    t[(d >= 0) & (d < t_ser)] = SEROSA

    in_plac = np.abs(_wrap(theta - geo.placenta_angle)) <= PLACENTA_HALF_ARC
    band_lo = -t_ring - t_band
    t[in_plac & (d >= band_lo) & (d < -t_ring)] = BOUNDARY
    t[in_plac & (d >= band_lo - t_plac) & (d < band_lo)] = PLACENTA

    if label == NON_PAS:
        return t
    dl = np.abs(_wrap(theta - geo.lesion_angle))
    half = LESION_HALF_ARC[label]
    in_lesion = dl <= half
    if label == PA:
        keep_from = -t_ring - t_band * PA_REMAINING_BAND
        t[in_lesion & (d >= band_lo) & (d < keep_from)] = PLACENTA
    elif label == PI:
        t[in_lesion & (d >= band_lo) & (d < -t_ring / 2)] = PLACENTA
    else:
        bulge = t_ser + t_exo * (1 - (dl / half) ** 2)
        t[in_lesion & (d >= band_lo) & (d < bulge)] = PLACENTA
    return t


def render_tissue(label: int, geometry: tuple, seed: int) -> np.ndarray:
    """Noiseless tissue-code volume [n_in, H, W] for a class, geometry and seed."""
    n_in, h, w = _check(label, geometry)
    geo = _draw_geometry(np.random.default_rng(seed), n_in, h, w)
    return np.stack([_tissue_slice(geo, k, label, h, w) for k in range(n_in)])


def _check(label: int, geometry: tuple):
    if label not in (NON_PAS, PA, PI, PP):
        raise ValueError(f"label must be one of 0..3, got {label!r}")
    n_in, h, w = (int(g) for g in geometry)
    if n_in < 1:
        raise ValueError(f"need at least one slice, got {n_in}")
    if h < MIN_SIZE or w < MIN_SIZE:
        raise ValueError(f"geometry {h}x{w} too small to render all structures (min {MIN_SIZE})")
    return n_in, h, w


def generate_sample(label: int, geometry: tuple, seed: int, sample_id: str = "") -> VolumeSample:
    """Render one phantom volume; deterministic in (label, geometry, seed)."""
    n_in, h, w = _check(label, geometry)
    rng = np.random.default_rng(seed)
    geo = _draw_geometry(rng, n_in, h, w)
    # class-independent draws happen before anything class-specific
    texture = rng.standard_normal((n_in, h, w))
    noise = rng.standard_normal((n_in, h, w))

    lut = np.array([INTENSITY[c] for c in range(len(INTENSITY))])
    image = np.empty((n_in, h, w))
    mask = np.empty((n_in, h, w), dtype=np.uint8)
    for k in range(n_in):
        t = _tissue_slice(geo, k, label, h, w)
        img = lut[t]
        tex = gaussian_filter(texture[k], 1.5)
        tex /= tex.std() + 1e-12
        img = img + (t == PLACENTA) * TEXTURE_AMPLITUDE * tex
        img = gaussian_filter(img, BLUR_SIGMA) + NOISE_SIGMA * noise[k]
        image[k] = img
        mask[k] = (t == PLACENTA) | (t == SEROSA)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return VolumeSample(image, mask, int(label), sample_id)


def band_integrity(label: int, geometry: tuple, seed: int) -> float:
    """Boundary-band pixels left in a render relative to the intact (non-PAS) render."""
    intact = (render_tissue(NON_PAS, geometry, seed) == BOUNDARY).sum()
    return float((render_tissue(label, geometry, seed) == BOUNDARY).sum() / intact)


def sample_seed(base_seed: int, index: int) -> int:
    """Per-sample seed derived by stable hashing of (base_seed, index)."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])
