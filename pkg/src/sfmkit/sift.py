"""SIFT detector and descriptor.

Gaussian/DoG scale-space pyramid, 26-neighbor extrema detection, subpixel
refinement with contrast and edge filtering, orientation assignment from
Sobel-gradient histograms, and 128-d descriptors (4x4 cells x 8 orientation
bins, trilinearly binned, normalized / clamped at 0.2 / renormalized).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import correlate1d

from .errors import TooSmallImageError
from .image import gaussian_blur, half_sample

log = logging.getLogger(__name__)

ORI_BINS = 36
ORI_PEAK_RATIO = 0.8
ORI_SIGMA_FACTOR = 1.5
ORI_RADIUS_FACTOR = 3.0       # window radius = 3 * (1.5 * sigma)
DESC_CELLS = 4
DESC_ORI_BINS = 8
DESC_CELL_SIGMAS = 3.0        # cell edge length in units of keypoint sigma
DESC_CLAMP = 0.2
MAX_REFINE_STEPS = 5
MIN_OCTAVE_DIM = 8


@dataclass
class SiftParams:
    """Detector parameters (defaults match common practice for desk scenes)."""

    layers_per_octave: int = 3
    contrast_threshold: float = 0.04
    edge_threshold: float = 10.0
    base_sigma: float = 1.6
    max_octaves: int | None = None

    def __post_init__(self):
        if self.layers_per_octave < 1:
            raise ValueError("layers_per_octave must be >= 1")
        if min(self.contrast_threshold, self.edge_threshold, self.base_sigma) <= 0:
            raise ValueError("thresholds and base_sigma must be > 0")


@dataclass
class Keypoint:
    """Scale-space feature in original-image coordinates.

    ``x`` is the column and ``y`` the row, both subpixel; ``sigma`` is the
    absolute scale; ``octave``/``layer`` locate the detection in the pyramid;
    ``orientation`` is radians in [0, 2*pi); ``response`` is the interpolated
    DoG magnitude.
    """

    x: float
    y: float
    sigma: float
    octave: int
    layer: int
    orientation: float = 0.0
    response: float = 0.0


@dataclass
class OctaveLevel:
    gaussians: list[np.ndarray] = field(default_factory=list)
    dogs: list[np.ndarray] = field(default_factory=list)


@dataclass
class ScaleSpace:
    octaves: list[OctaveLevel]
    base_sigma: float
    layers_per_octave: int
    k: float


def num_octaves(width: int, height: int) -> int:
    """floor(log2(min(w, h))) - 2: smallest pyramid level stays >= 8 px."""
    return int(np.floor(np.log2(min(width, height)))) - 2


def build_scale_space(img: np.ndarray, params: SiftParams) -> ScaleSpace:
    """Build the Gaussian and DoG pyramids.

    Each octave holds layers_per_octave + 3 Gaussian images at scales
    base_sigma * k^i (octave-local pixels), k = 2^(1/layers_per_octave), and
    the layers_per_octave + 2 adjacent differences. The next octave starts
    from the Gaussian at 2 * base_sigma decimated by 2 (nearest sampling).
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    n_oct = num_octaves(w, h)
    if params.max_octaves is not None:
        n_oct = min(n_oct, params.max_octaves)
    if n_oct < 1:
        raise TooSmallImageError(f"{w}x{h} image supports no full octave")

    s = params.layers_per_octave
    k = 2.0 ** (1.0 / s)
    sigmas = params.base_sigma * k ** np.arange(s + 3)
    # Incremental blurs: going from sigma_{i-1} to sigma_i costs
    # sqrt(sigma_i^2 - sigma_{i-1}^2) by the Gaussian semigroup property.
    increments = np.sqrt(sigmas[1:] ** 2 - sigmas[:-1] ** 2)

    octaves = []
    base = img
    for o in range(n_oct):
        level = OctaveLevel()
        g = gaussian_blur(base, params.base_sigma) if o == 0 else base
        level.gaussians.append(g)
        for i in range(s + 2):
            g = gaussian_blur(g, increments[i])
            level.gaussians.append(g)
        for i in range(s + 2):
            level.dogs.append(level.gaussians[i + 1] - level.gaussians[i])
        octaves.append(level)
        if o + 1 < n_oct:
            base = half_sample(level.gaussians[s])  # sigma = 2*base_sigma there
            if min(base.shape) < MIN_OCTAVE_DIM:
                break
    return ScaleSpace(octaves=octaves, base_sigma=params.base_sigma,
                      layers_per_octave=s, k=k)


def detect_extrema(ss: ScaleSpace) -> list[tuple[int, int, int, int]]:
    """Discrete DoG extrema: strictly greater or strictly less than all 26
    neighbors in the 3x3x3 scale-space neighborhood. Returns (octave, layer,
    x, y) tuples ordered by (octave, layer, y, x)."""
    out = []
    for o, level in enumerate(ss.octaves):
        D = np.stack(level.dogs)
        if D.shape[0] < 3:
            continue
        center = D[1:-1, 1:-1, 1:-1]
        is_max = np.ones(center.shape, dtype=bool)
        is_min = np.ones(center.shape, dtype=bool)
        L, H, W = D.shape
        for dl in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if dl == 0 and dy == 0 and dx == 0:
                        continue
                    nb = D[1 + dl:L - 1 + dl, 1 + dy:H - 1 + dy, 1 + dx:W - 1 + dx]
                    is_max &= center > nb
                    is_min &= center < nb
                    if not (is_max.any() or is_min.any()):
                        break
        for l, y, x in np.argwhere(is_max | is_min):
            out.append((o, int(l) + 1, int(x) + 1, int(y) + 1))
    return out


def _quadratic_fit(D: np.ndarray, l, y, x):
    """Gradient and Hessian of the DoG stack at integer (l, y, x) arrays."""
    gx = 0.5 * (D[l, y, x + 1] - D[l, y, x - 1])
    gy = 0.5 * (D[l, y + 1, x] - D[l, y - 1, x])
    gl = 0.5 * (D[l + 1, y, x] - D[l - 1, y, x])
    c2 = 2.0 * D[l, y, x]
    dxx = D[l, y, x + 1] + D[l, y, x - 1] - c2
    dyy = D[l, y + 1, x] + D[l, y - 1, x] - c2
    dll = D[l + 1, y, x] + D[l - 1, y, x] - c2
    dxy = 0.25 * (D[l, y + 1, x + 1] - D[l, y + 1, x - 1]
                  - D[l, y - 1, x + 1] + D[l, y - 1, x - 1])
    dxl = 0.25 * (D[l + 1, y, x + 1] - D[l + 1, y, x - 1]
                  - D[l - 1, y, x + 1] + D[l - 1, y, x - 1])
    dyl = 0.25 * (D[l + 1, y + 1, x] - D[l + 1, y - 1, x]
                  - D[l - 1, y + 1, x] + D[l - 1, y - 1, x])
    g = np.stack([gx, gy, gl], axis=-1)
    Hm = np.empty(g.shape[:-1] + (3, 3))
    Hm[..., 0, 0] = dxx
    Hm[..., 1, 1] = dyy
    Hm[..., 2, 2] = dll
    Hm[..., 0, 1] = Hm[..., 1, 0] = dxy
    Hm[..., 0, 2] = Hm[..., 2, 0] = dxl
    Hm[..., 1, 2] = Hm[..., 2, 1] = dyl
    return g, Hm, dxx, dyy, dxy


def refine_and_filter(candidates, ss: ScaleSpace, params: SiftParams) -> list[Keypoint]:
    """Subpixel refinement by a 3-D quadratic fit plus contrast/edge filtering.

    Offsets larger than 0.5 re-anchor the candidate on the neighboring sample
    (up to 5 times, then the candidate is dropped). Survivors must have
    interpolated contrast |D| >= contrast_threshold / layers_per_octave and
    pass the principal-curvature edge test tr^2/det < (r+1)^2/r.
    """
    s = params.layers_per_octave
    contrast_min = params.contrast_threshold / s
    r = params.edge_threshold
    edge_limit = (r + 1.0) ** 2 / r
    kps: list[Keypoint] = []
    n_cand = len(candidates)
    n_conv = n_contrast = n_edge = 0

    by_octave: dict[int, list[tuple[int, int, int]]] = {}
    for o, l, x, y in candidates:
        by_octave.setdefault(o, []).append((l, y, x))

    for o in sorted(by_octave):
        D = np.stack(ss.octaves[o].dogs)
        L, H, W = D.shape
        l = np.array([c[0] for c in by_octave[o]], dtype=int)
        y = np.array([c[1] for c in by_octave[o]], dtype=int)
        x = np.array([c[2] for c in by_octave[o]], dtype=int)
        active = np.ones(l.shape, dtype=bool)
        done = np.zeros(l.shape, dtype=bool)
        offset = np.zeros((l.size, 3))

        for _ in range(MAX_REFINE_STEPS):
            if not active.any():
                break
            g, Hm, *_ = _quadratic_fit(D, l[active], y[active], x[active])
            det = np.linalg.det(Hm)
            solvable = np.abs(det) > 1e-300
            u = np.zeros_like(g)
            if solvable.any():
                u[solvable] = np.linalg.solve(
                    Hm[solvable], -g[solvable][..., None])[..., 0]
            idx = np.flatnonzero(active)
            converged = solvable & (np.abs(u) <= 0.5).all(axis=1)
            offset[idx[converged]] = u[converged]
            done[idx[converged]] = True
            active[idx[converged]] = False
            # Re-anchor the rest one sample toward the offset and retry.
            moving = idx[solvable & ~converged]
            u_mov = u[solvable & ~converged]
            step = np.zeros_like(u_mov, dtype=int)
            step[u_mov > 0.5] = 1
            step[u_mov < -0.5] = -1
            x[moving] += step[:, 0]
            y[moving] += step[:, 1]
            l[moving] += step[:, 2]
            inside = ((l[moving] >= 1) & (l[moving] <= L - 2)
                      & (y[moving] >= 1) & (y[moving] <= H - 2)
                      & (x[moving] >= 1) & (x[moving] <= W - 2))
            active[moving[~inside]] = False
            active[idx[~solvable]] = False

        if not done.any():
            continue
        sel = np.flatnonzero(done)
        n_conv += sel.size
        g, _, dxx, dyy, dxy = _quadratic_fit(D, l[sel], y[sel], x[sel])
        u = offset[sel]
        value = D[l[sel], y[sel], x[sel]] + 0.5 * np.einsum("ni,ni->n", g, u)
        keep = np.abs(value) >= contrast_min
        n_contrast += int((~keep).sum())
        tr = dxx + dyy
        det2 = dxx * dyy - dxy * dxy
        edge_ok = (det2 > 0) & (tr * tr / np.where(det2 > 0, det2, 1.0) < edge_limit)
        n_edge += int((keep & ~edge_ok).sum())
        keep &= edge_ok

        scale = 2.0 ** o
        for i in np.flatnonzero(keep):
            xi = (x[sel[i]] + u[i, 0]) * scale
            yi = (y[sel[i]] + u[i, 1]) * scale
            sigma = ss.base_sigma * ss.k ** (l[sel[i]] + u[i, 2]) * scale
            kps.append(Keypoint(x=float(xi), y=float(yi), sigma=float(sigma),
                                octave=o, layer=int(l[sel[i]]),
                                response=float(value[i])))
    log.debug("refine: %d candidates -> %d converged, %d cut by contrast, "
              "%d cut by edge test, %d kept",
              n_cand, n_conv, n_contrast, n_edge, len(kps))
    return kps


class _GradientCache:
    """Sobel gradients per (octave, layer) Gaussian image, computed lazily."""

    def __init__(self, ss: ScaleSpace):
        self.ss = ss
        self._cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def get(self, octave: int, layer: int):
        key = (octave, layer)
        if key not in self._cache:
            g = self.ss.octaves[octave].gaussians[layer]
            d = np.array([-1.0, 0.0, 1.0])
            sm = np.array([1.0, 2.0, 1.0])
            gx = correlate1d(correlate1d(g, d, axis=1, mode="nearest"),
                             sm, axis=0, mode="nearest")
            gy = correlate1d(correlate1d(g, d, axis=0, mode="nearest"),
                             sm, axis=1, mode="nearest")
            self._cache[key] = (gx, gy)
        return self._cache[key]


def _orientation_histogram(kp: Keypoint, gx, gy):
    h, w = gx.shape
    scale = 2.0 ** kp.octave
    xo, yo = kp.x / scale, kp.y / scale
    sigma_oct = kp.sigma / scale
    sig_w = ORI_SIGMA_FACTOR * sigma_oct
    radius = max(int(round(ORI_RADIUS_FACTOR * sig_w)), 1)
    x0, x1 = max(int(xo) - radius, 0), min(int(xo) + radius + 1, w)
    y0, y1 = max(int(yo) - radius, 0), min(int(yo) + radius + 1, h)
    if x0 >= x1 or y0 >= y1:
        return None
    gxs = gx[y0:y1, x0:x1]
    gys = gy[y0:y1, x0:x1]
    xs = np.arange(x0, x1) - xo
    ys = np.arange(y0, y1) - yo
    d2 = xs[np.newaxis, :] ** 2 + ys[:, np.newaxis] ** 2
    circle = d2 <= radius * radius
    weight = np.exp(-d2 / (2.0 * sig_w * sig_w)) * circle
    mag = np.hypot(gxs, gys)
    ang = np.mod(np.arctan2(gys, gxs), 2.0 * np.pi)
    bins = np.minimum((ang * (ORI_BINS / (2.0 * np.pi))).astype(int), ORI_BINS - 1)
    hist = np.bincount(bins.ravel(), weights=(mag * weight).ravel(),
                       minlength=ORI_BINS)
    for _ in range(2):  # circular smoothing stabilizes peak interpolation
        hist = (np.roll(hist, 1) + hist + np.roll(hist, -1)) / 3.0
    return hist


def assign_orientations(kps: list[Keypoint], ss: ScaleSpace,
                        grads: _GradientCache | None = None) -> list[Keypoint]:
    """Dominant Sobel-gradient orientation per keypoint from a 36-bin
    Gaussian-weighted (1.5 sigma) histogram; every secondary local peak at
    >= 80% of the maximum emits an extra keypoint. Peaks are refined by
    parabolic interpolation."""
    grads = grads or _GradientCache(ss)
    bin_width = 2.0 * np.pi / ORI_BINS
    out: list[Keypoint] = []
    for kp in kps:
        gx, gy = grads.get(kp.octave, kp.layer)
        hist = _orientation_histogram(kp, gx, gy)
        if hist is None or hist.max() <= 0.0:
            continue
        floor = ORI_PEAK_RATIO * hist.max()
        left = np.roll(hist, 1)
        right = np.roll(hist, -1)
        peaks = np.flatnonzero((hist >= floor) & (hist > left) & (hist > right))
        for b in peaks:
            denom = left[b] - 2.0 * hist[b] + right[b]
            shift = 0.0 if denom == 0 else 0.5 * (left[b] - right[b]) / denom
            theta = float(np.mod((b + 0.5 + shift) * bin_width, 2.0 * np.pi))
            out.append(replace(kp, orientation=theta))
    return out


def compute_descriptor(kp: Keypoint, ss: ScaleSpace,
                       grads: _GradientCache | None = None):
    """128-d descriptor for an oriented keypoint.

    A 16x16 sample grid (4 samples per cell, cell edge 3 sigma), rotated by
    the keypoint orientation, is trilinearly binned into 4x4 spatial cells
    with 8 orientation bins each. Returns ``(descriptor, truncated)`` where
    ``descriptor`` is None when the window has no gradient energy and
    ``truncated`` flags samples lost off the image border.
    """
    grads = grads or _GradientCache(ss)
    gx, gy = grads.get(kp.octave, kp.layer)
    h, w = gx.shape
    scale = 2.0 ** kp.octave
    xo, yo = kp.x / scale, kp.y / scale
    sigma_oct = kp.sigma / scale
    cell_px = DESC_CELL_SIGMAS * sigma_oct

    n = 4 * DESC_CELLS
    # Sample positions in cell units, centers of a 16x16 grid over [-2, 2).
    cu = (np.arange(n) + 0.5) / 4.0 - 2.0
    gu, gv = np.meshgrid(cu, cu)             # gu: x-ish axis, gv: y-ish axis
    cos_t, sin_t = np.cos(kp.orientation), np.sin(kp.orientation)
    sx = xo + (cos_t * gu - sin_t * gv) * cell_px
    sy = yo + (sin_t * gu + cos_t * gv) * cell_px

    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    truncated = not bool(inside.all())
    if not inside.any():
        return None, True
    sxf, syf = sx[inside], sy[inside]
    x0 = np.floor(sxf).astype(int)
    y0 = np.floor(syf).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = sxf - x0, syf - y0

    def bilerp(img):
        return ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
                + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))

    gxs, gys = bilerp(gx), bilerp(gy)
    mag = np.hypot(gxs, gys)
    ang = np.mod(np.arctan2(gys, gxs) - kp.orientation, 2.0 * np.pi)
    weight = np.exp(-(gu[inside] ** 2 + gv[inside] ** 2) / (2.0 * 2.0 ** 2))
    contrib = mag * weight

    row = gv[inside] + 1.5   # cell-grid coordinates in [-0.5, 3.5]
    col = gu[inside] + 1.5
    obin = ang * (DESC_ORI_BINS / (2.0 * np.pi))
    hist = np.zeros((DESC_CELLS, DESC_CELLS, DESC_ORI_BINS))
    r0 = np.floor(row).astype(int)
    c0 = np.floor(col).astype(int)
    o0 = np.floor(obin).astype(int)
    fr, fc, fo = row - r0, col - c0, obin - o0
    for dr in (0, 1):
        wr = np.where(dr == 0, 1 - fr, fr)
        rr = r0 + dr
        ok_r = (rr >= 0) & (rr < DESC_CELLS)
        for dc in (0, 1):
            wc = np.where(dc == 0, 1 - fc, fc)
            cc = c0 + dc
            ok = ok_r & (cc >= 0) & (cc < DESC_CELLS)
            if not ok.any():
                continue
            for do in (0, 1):
                wo = np.where(do == 0, 1 - fo, fo)
                oo = (o0 + do) % DESC_ORI_BINS
                np.add.at(hist, (rr[ok], cc[ok], oo[ok]),
                          (contrib * wr * wc * wo)[ok])

    vec = hist.ravel()
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        return None, truncated
    vec = np.minimum(vec / norm, DESC_CLAMP)
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        return None, truncated
    return (vec / norm).astype(np.float32), truncated


def detect_features(img: np.ndarray, params: SiftParams | None = None):
    """Full SIFT detection: returns (keypoints, descriptors) with parallel
    indexing, ordered by (octave, layer, y, x, orientation). Keypoints whose
    descriptor window has no gradient energy are dropped."""
    params = params or SiftParams()
    ss = build_scale_space(img, params)
    candidates = detect_extrema(ss)
    kps = refine_and_filter(candidates, ss, params)
    grads = _GradientCache(ss)
    kps = assign_orientations(kps, ss, grads)
    kps.sort(key=lambda kp: (kp.octave, kp.layer, kp.y, kp.x, kp.orientation))

    kept: list[Keypoint] = []
    descs: list[np.ndarray] = []
    for kp in kps:
        d, _ = compute_descriptor(kp, ss, grads)
        if d is not None:
            kept.append(kp)
            descs.append(d)
    desc_arr = (np.vstack(descs) if descs
                else np.zeros((0, DESC_CELLS * DESC_CELLS * DESC_ORI_BINS),
                              dtype=np.float32))
    log.debug("detect_features: %d keypoints", len(kept))
    return kept, desc_arr


def keypoints_xy(kps: list[Keypoint]) -> np.ndarray:
    """(n, 2) array of keypoint pixel coordinates."""
    if not kps:
        return np.zeros((0, 2))
    return np.array([[kp.x, kp.y] for kp in kps], dtype=np.float64)


def keypoints_to_csv(kps: list[Keypoint], path: str) -> None:
    """Debug dump: one `x,y,sigma,orientation,response` row per keypoint."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("x,y,sigma,orientation,response\n")
        for kp in kps:
            fh.write(f"{kp.x:.6f},{kp.y:.6f},{kp.sigma:.6f},"
                     f"{kp.orientation:.6f},{kp.response:.6e}\n")
