"""Deterministic synthetic face data plus the training augmentation pipeline.

Identities are procedural face layouts drawn from a small pool of geometry
prototypes with per-identity jitter. Photos carry color cues for the
attribute combination (hair tone, skin tone, glasses); sketches are line
renderings of the same geometry that deliberately omit every color cue, so
color-borne attributes are invisible on the sketch side by construction.

Augmentations: thin-plate-spline warps, axis-independent rescale + center
crop, horizontal flips, and an extended difference-of-Gaussians filter that
restyles images into line drawings.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from attrcenter.lattice import AttributeCombination, AttributeSchema


class GeometryError(ValueError):
    """Degenerate face geometry (zero or negative sizes)."""


class DatasetError(ValueError):
    """Manifest or generation problem (missing files, bad indices)."""


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


# ---------------------------------------------------------------------------
# face geometry
# ---------------------------------------------------------------------------

# (low, high) sampling range per geometry field, in normalized image units
_GEOMETRY_RANGES = {
    "face_cx": (0.48, 0.52),
    "face_cy": (0.50, 0.56),
    "face_rx": (0.26, 0.36),
    "face_ry": (0.34, 0.44),
    "eye_dx": (0.10, 0.16),
    "eye_y": (0.40, 0.48),
    "eye_r": (0.030, 0.050),
    "nose_len": (0.08, 0.14),
    "nose_w": (0.015, 0.035),
    "mouth_y": (0.68, 0.76),
    "mouth_w": (0.09, 0.16),
    "mouth_h": (0.015, 0.035),
    "hairline": (0.30, 0.60),
    "hair_pad": (1.04, 1.12),
}


@dataclass(frozen=True)
class FaceGeometry:
    face_cx: float
    face_cy: float
    face_rx: float
    face_ry: float
    eye_dx: float
    eye_y: float
    eye_r: float
    nose_len: float
    nose_w: float
    mouth_y: float
    mouth_w: float
    mouth_h: float
    hairline: float  # fraction of face_ry above center where hair starts
    hair_pad: float  # hair ellipse radius relative to the face ellipse

    def validate(self) -> None:
        for name in ("face_rx", "face_ry", "eye_r", "mouth_w", "mouth_h", "nose_w"):
            if getattr(self, name) <= 0:
                raise GeometryError(f"degenerate geometry: {name}={getattr(self, name)}")


@dataclass(frozen=True)
class SyntheticIdentity:
    """Everything needed to re-render one identity's photo and sketch."""

    identity_id: int
    combo: AttributeCombination
    geometry: FaceGeometry
    render_seed: int = 0


def prototype_geometry(seed: int, prototype: int) -> FaceGeometry:
    """Base face layout for one geometry family."""
    rng = _rng(seed, 1000, prototype)
    vals = {k: rng.uniform(lo, hi) for k, (lo, hi) in _GEOMETRY_RANGES.items()}
    return FaceGeometry(**vals)


def sample_identity_geometry(seed: int, identity_id: int, n_prototypes: int,
                             jitter: float, prototype_offset: int = 0) -> FaceGeometry:
    rng = _rng(seed, 2000, identity_id)
    proto = prototype_offset + int(rng.integers(0, n_prototypes))
    return jitter_geometry(prototype_geometry(seed, proto), rng, jitter)


def jitter_geometry(base: FaceGeometry, rng: np.random.Generator,
                    jitter: float = 0.10) -> FaceGeometry:
    """Perturb each field by +/- jitter of its sampling range width."""
    vals = {}
    for k, (lo, hi) in _GEOMETRY_RANGES.items():
        width = hi - lo
        vals[k] = getattr(base, k) + rng.uniform(-jitter, jitter) * width
    return FaceGeometry(**vals)


def sample_identity(schema: AttributeSchema, identity_id: int, combo: AttributeCombination,
                    seed: int, n_prototypes: int = 40, jitter: float = 0.10,
                    prototype_offset: int = 0) -> SyntheticIdentity:
    geom = sample_identity_geometry(seed, identity_id, n_prototypes, jitter, prototype_offset)
    return SyntheticIdentity(identity_id=identity_id, combo=combo, geometry=geom,
                             render_seed=seed)


# ---------------------------------------------------------------------------
# rasterization helpers (soft-edged masks on a normalized grid)
# ---------------------------------------------------------------------------


def _grid(h: int, w: int):
    ys = (np.arange(h, dtype=np.float64) + 0.5) / h
    xs = (np.arange(w, dtype=np.float64) + 0.5) / w
    return np.meshgrid(ys, xs, indexing="ij")


def _ellipse_dist(Y, X, cx, cy, rx, ry):
    # approximate signed distance to the ellipse boundary, in normalized units
    q = np.sqrt(((X - cx) / rx) ** 2 + ((Y - cy) / ry) ** 2)
    return (q - 1.0) * min(rx, ry)


def _segment_dist(Y, X, x0, y0, x1, y1):
    px, py = x1 - x0, y1 - y0
    denom = max(px * px + py * py, 1e-12)
    t = np.clip(((X - x0) * px + (Y - y0) * py) / denom, 0.0, 1.0)
    return np.hypot(X - (x0 + t * px), Y - (y0 + t * py))


def _fill(dist, aa):
    return np.clip(0.5 - dist / aa, 0.0, 1.0)


def _band(dist, width, aa):
    return np.clip(0.5 + (width * 0.5 - np.abs(dist)) / aa, 0.0, 1.0)


def _paint(img, mask, color):
    img *= (1.0 - mask)[..., None]
    img += mask[..., None] * np.asarray(color, dtype=np.float64)


def _darken(canvas, mask, level):
    np.minimum(canvas, 1.0 - mask * (1.0 - level), out=canvas)


_HAIR_COLORS = {
    "dark": (0.13, 0.10, 0.08), "light": (0.83, 0.72, 0.45), "red": (0.55, 0.22, 0.10),
    "black": (0.06, 0.06, 0.07), "brown": (0.38, 0.22, 0.10), "blond": (0.85, 0.75, 0.50),
    "gray": (0.62, 0.62, 0.62), "unknown": (0.40, 0.33, 0.26),
}
_SKIN_COLORS = {
    "pale": (0.95, 0.82, 0.70), "tan": (0.72, 0.52, 0.38),
    "asian": (0.92, 0.78, 0.60), "indian": (0.64, 0.44, 0.30),
    "white": (0.95, 0.82, 0.72), "black": (0.45, 0.30, 0.22),
    "unknown": (0.82, 0.66, 0.54),
}
_BG_COLOR = (0.93, 0.93, 0.95)
_STROKE = 0.06


def _combo_appearance(combo: AttributeCombination) -> dict:
    """Map a combination onto render features by category name."""
    out = {"hair_color": _HAIR_COLORS["dark"], "skin_color": _SKIN_COLORS["pale"],
           "has_hair": True, "glasses": None}
    for cat, s in zip(combo.schema.categories, combo.state_indices):
        state = cat.states[s]
        if cat.name == "hair":
            if state == "bald":
                out["has_hair"] = False
            else:
                out["hair_color"] = _HAIR_COLORS.get(state, _HAIR_COLORS["unknown"])
        elif cat.name in ("skin", "race"):
            out["skin_color"] = _SKIN_COLORS.get(state, _SKIN_COLORS["unknown"])
        elif cat.name == "glasses":
            if state in ("present", "eyeglasses"):
                out["glasses"] = "clear"
            elif state == "sunglasses":
                out["glasses"] = "dark"
    return out


def render_identity(identity: SyntheticIdentity, size: tuple = (32, 32)):
    """Render (photo, clean_sketch) for one identity.

    The photo is (3, H, W) in [0, 1] with color-coded attributes; the sketch
    is (H, W) line art of the same geometry with no color information.
    """
    g = identity.geometry
    g.validate()
    h, w = size
    Y, X = _grid(h, w)
    aa = 1.0 / max(h, w)
    look = _combo_appearance(identity.combo)

    face_d = _ellipse_dist(Y, X, g.face_cx, g.face_cy, g.face_rx, g.face_ry)
    face_mask = _fill(face_d, aa)
    hair_d = _ellipse_dist(Y, X, g.face_cx, g.face_cy, g.face_rx * g.hair_pad, g.face_ry * g.hair_pad)
    hairline_y = g.face_cy - g.face_ry * g.hairline
    hair_mask = _fill(hair_d, aa) * _fill(Y - hairline_y, aa)

    eyes = []
    for sx in (-1.0, 1.0):
        ex = g.face_cx + sx * g.eye_dx
        eyes.append((ex, g.eye_y))

    nose_top = (g.face_cx, g.eye_y + 0.04)
    nose_tip = (g.face_cx + g.nose_w, g.eye_y + 0.04 + g.nose_len)
    mouth_d = _ellipse_dist(Y, X, g.face_cx, g.mouth_y, g.mouth_w, g.mouth_h)

    # ---- photo -------------------------------------------------------------
    photo = np.empty((h, w, 3), dtype=np.float64)
    photo[...] = _BG_COLOR
    _paint(photo, face_mask, look["skin_color"])
    if look["has_hair"]:
        _paint(photo, hair_mask, look["hair_color"])
    for ex, ey in eyes:
        _paint(photo, _fill(_ellipse_dist(Y, X, ex, ey, g.eye_r, g.eye_r * 0.8), aa), (0.97, 0.97, 0.97))
        _paint(photo, _fill(np.hypot(X - ex, Y - ey) - g.eye_r * 0.45, aa), (0.10, 0.08, 0.08))
    _paint(photo, _band(_segment_dist(Y, X, *nose_top, *nose_tip), g.nose_w, aa),
           tuple(c * 0.6 for c in look["skin_color"]))
    _paint(photo, _fill(mouth_d, aa), (0.60, 0.20, 0.20))
    # contour shading along the same edges the sketch strokes trace: photos of
    # faces have edges too, and shared edges are what links the modalities
    contour = np.maximum(_band(face_d, 0.018, aa),
                         _band(mouth_d, 0.012, aa))
    if look["has_hair"]:
        contour = np.maximum(contour, _band(hair_d, 0.018, aa) * (Y < hairline_y))
        contour = np.maximum(contour, _band(Y - hairline_y, 0.012, aa) * face_mask)
    for ex, ey in eyes:
        contour = np.maximum(contour, _band(_ellipse_dist(Y, X, ex, ey, g.eye_r, g.eye_r * 0.8),
                                            0.010, aa))
    photo *= (1.0 - 0.45 * contour)[..., None]
    if look["glasses"] is not None:
        lens_r = g.eye_r * 1.9
        for ex, ey in eyes:
            ring = _band(_ellipse_dist(Y, X, ex, ey, lens_r, lens_r * 0.85), 0.012, aa)
            _paint(photo, ring, (0.12, 0.12, 0.14))
            if look["glasses"] == "dark":
                _paint(photo, _fill(_ellipse_dist(Y, X, ex, ey, lens_r, lens_r * 0.85), aa) * 0.85,
                       (0.10, 0.10, 0.12))
        bridge = _band(_segment_dist(Y, X, eyes[0][0] + lens_r, g.eye_y, eyes[1][0] - lens_r, g.eye_y),
                       0.012, aa)
        _paint(photo, bridge, (0.12, 0.12, 0.14))

    # ---- sketch (geometry only; hair outline but never hair color) ----------
    sk = np.ones((h, w), dtype=np.float64)
    _darken(sk, _band(face_d, 0.022, aa), _STROKE)
    if look["has_hair"]:
        _darken(sk, _band(hair_d, 0.022, aa) * (Y < hairline_y), _STROKE)
        inside_face = _fill(face_d, aa)
        _darken(sk, _band(Y - hairline_y, 0.020, aa) * inside_face, _STROKE)
    for ex, ey in eyes:
        _darken(sk, _band(_ellipse_dist(Y, X, ex, ey, g.eye_r, g.eye_r * 0.8), 0.018, aa), _STROKE)
        _darken(sk, _fill(np.hypot(X - ex, Y - ey) - g.eye_r * 0.45, aa), 0.25)
    _darken(sk, _band(_segment_dist(Y, X, *nose_top, *nose_tip), g.nose_w * 0.8, aa), _STROKE)
    _darken(sk, _band(mouth_d, 0.020, aa), _STROKE)
    if look["glasses"] is not None:
        lens_r = g.eye_r * 1.9
        for ex, ey in eyes:
            _darken(sk, _band(_ellipse_dist(Y, X, ex, ey, lens_r, lens_r * 0.85), 0.012, aa), _STROKE)
        _darken(sk, _band(_segment_dist(Y, X, eyes[0][0] + lens_r, g.eye_y,
                                        eyes[1][0] - lens_r, g.eye_y), 0.012, aa), _STROKE)

    return photo.transpose(2, 0, 1), sk


def render_tonal(identity: SyntheticIdentity, size: tuple = (32, 32)) -> np.ndarray:
    """Grayscale render with fixed tones (no attribute colors); xDoG input.

    Used as the alternate sketch style: geometry and glasses show up, while
    hair and skin states map to identity-independent gray levels.
    """
    g = identity.geometry
    g.validate()
    h, w = size
    Y, X = _grid(h, w)
    aa = 1.0 / max(h, w)
    look = _combo_appearance(identity.combo)

    img = np.full((h, w), 0.95, dtype=np.float64)
    face_d = _ellipse_dist(Y, X, g.face_cx, g.face_cy, g.face_rx, g.face_ry)
    img = img * (1 - _fill(face_d, aa)) + 0.70 * _fill(face_d, aa)
    if look["has_hair"]:
        hair_d = _ellipse_dist(Y, X, g.face_cx, g.face_cy, g.face_rx * g.hair_pad, g.face_ry * g.hair_pad)
        hairline_y = g.face_cy - g.face_ry * g.hairline
        hm = _fill(hair_d, aa) * _fill(Y - hairline_y, aa)
        img = img * (1 - hm) + 0.45 * hm
    for sx in (-1.0, 1.0):
        ex = g.face_cx + sx * g.eye_dx
        em = _fill(_ellipse_dist(Y, X, ex, g.eye_y, g.eye_r, g.eye_r * 0.8), aa)
        img = img * (1 - em) + 0.90 * em
        pm = _fill(np.hypot(X - ex, Y - g.eye_y) - g.eye_r * 0.45, aa)
        img = img * (1 - pm) + 0.10 * pm
        if look["glasses"] is not None:
            lens_r = g.eye_r * 1.9
            rm = _band(_ellipse_dist(Y, X, ex, g.eye_y, lens_r, lens_r * 0.85), 0.012, aa)
            img = img * (1 - rm) + 0.15 * rm
    nose_top = (g.face_cx, g.eye_y + 0.04)
    nose_tip = (g.face_cx + g.nose_w, g.eye_y + 0.04 + g.nose_len)
    nm = _band(_segment_dist(Y, X, *nose_top, *nose_tip), g.nose_w, aa)
    img = img * (1 - nm) + 0.50 * nm
    mm = _fill(_ellipse_dist(Y, X, g.face_cx, g.mouth_y, g.mouth_w, g.mouth_h), aa)
    img = img * (1 - mm) + 0.30 * mm
    return img


# ---------------------------------------------------------------------------
# xDoG sketch filter
# ---------------------------------------------------------------------------


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    k = gaussian_kernel1d(sigma)
    r = len(k) // 2
    out = np.asarray(image, dtype=np.float64)
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="reflect")
        windows = np.lib.stride_tricks.sliding_window_view(padded, len(k), axis=axis)
        out = windows @ k
    return out


def xdog_filter(image: np.ndarray, sigma: float = 1.0, k: float = 1.6,
                tau: float = 0.98, phi: float = 10.0, eps: float = 0.1) -> np.ndarray:
    """Extended difference-of-Gaussians stylization, output in [0, 1].

    D = G_sigma(I) - tau * G_{k sigma}(I); pixels with D >= eps go white,
    the rest fall off as 1 + tanh(phi * (D - eps)).
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if k <= 1:
        raise ValueError(f"k must be > 1, got {k}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"xdog expects a grayscale image, got shape {img.shape}")
    d = gaussian_blur(img, sigma) - tau * gaussian_blur(img, k * sigma)
    out = np.where(d >= eps, 1.0, 1.0 + np.tanh(phi * (d - eps)))
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# thin-plate-spline deformation
# ---------------------------------------------------------------------------


def _tps_u(r2: np.ndarray) -> np.ndarray:
    # r^2 * log(r) written on squared distances; 0 at coincident points
    out = np.zeros_like(r2)
    pos = r2 > 0
    out[pos] = 0.5 * r2[pos] * np.log(r2[pos])
    return out


class TpsModel:
    """Thin-plate-spline interpolant f: R^2 -> R^2 through given point pairs."""

    def __init__(self, points: np.ndarray, values: np.ndarray):
        pts = np.asarray(points, dtype=np.float64)
        vals = np.asarray(values, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape != vals.shape:
            raise ValueError(f"need matching (n,2) points and values, got {pts.shape} and {vals.shape}")
        n = pts.shape[0]
        d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
        kmat = _tps_u(d2)
        pmat = np.concatenate([np.ones((n, 1)), pts], axis=1)
        a = np.zeros((n + 3, n + 3))
        a[:n, :n] = kmat
        a[:n, n:] = pmat
        a[n:, :n] = pmat.T
        b = np.zeros((n + 3, 2))
        b[:n] = vals
        try:
            sol = np.linalg.solve(a, b)
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"singular TPS system (degenerate control points): {exc}") from None
        if not np.isfinite(sol).all():
            raise ValueError("singular TPS system (non-finite solution)")
        resid = float(np.abs(a @ sol - b).max())
        if resid > 1e-6 * max(1.0, float(np.abs(vals).max())):
            raise ValueError(f"singular TPS system (solve residual {resid:.2e})")
        self.points = pts
        self.weights = sol[:n]
        self.affine = sol[n:]

    def evaluate(self, query: np.ndarray) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        d2 = np.sum((q[:, None, :] - self.points[None, :, :]) ** 2, axis=2)
        u = _tps_u(d2)
        return u @ self.weights + np.concatenate([np.ones((q.shape[0], 1)), q], axis=1) @ self.affine


def grid_control_points(h: int, w: int, n: int = 5, margin: float = 0.1) -> np.ndarray:
    """n x n uniform lattice of (x, y) pixel coordinates."""
    xs = np.linspace(margin * (w - 1), (1 - margin) * (w - 1), n)
    ys = np.linspace(margin * (h - 1), (1 - margin) * (h - 1), n)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def sample_bilinear(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear lookup with edge clamping; image is (H, W) or (C, H, W)."""
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    c, h, w = img.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    out = (img[:, y0, x0] * (1 - fy) * (1 - fx) + img[:, y1, x0] * fy * (1 - fx)
           + img[:, y0, x1] * (1 - fy) * fx + img[:, y1, x1] * fy * fx)
    return out[0] if squeeze else out


def tps_deform(image: np.ndarray, control_points: np.ndarray,
               displacements: np.ndarray) -> np.ndarray:
    """Warp so each control point lands on point + displacement (backward map).

    Fits the spline from displaced positions back to sources and samples the
    input bilinearly; out-of-range lookups clamp to the border.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[-2:]
    pts = np.asarray(control_points, dtype=np.float64)
    disp = np.asarray(displacements, dtype=np.float64)
    if (pts[:, 0].min() < 0 or pts[:, 0].max() > w - 1
            or pts[:, 1].min() < 0 or pts[:, 1].max() > h - 1):
        raise ValueError("control points must lie inside the image")
    model = TpsModel(pts + disp, pts)
    Y, X = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    coords = np.stack([X.ravel(), Y.ravel()], axis=1)
    src = model.evaluate(coords)
    return sample_bilinear(img, src[:, 1].reshape(h, w), src[:, 0].reshape(h, w))


def random_tps(image: np.ndarray, rng: np.random.Generator, n_grid: int = 5,
               max_disp_frac: float = 0.05) -> np.ndarray:
    """Spec augmentation: translate lattice points by random magnitude/direction."""
    h, w = np.asarray(image).shape[-2:]
    pts = grid_control_points(h, w, n_grid)
    bound = max_disp_frac * math.hypot(h, w)
    mag = rng.uniform(0.0, bound, size=pts.shape[0])
    ang = rng.uniform(0.0, 2.0 * math.pi, size=pts.shape[0])
    disp = np.stack([mag * np.cos(ang), mag * np.sin(ang)], axis=1)
    return tps_deform(image, pts, disp)


# ---------------------------------------------------------------------------
# rescale / crop / flip
# ---------------------------------------------------------------------------


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[-2:]
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * w / out_w - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return sample_bilinear(img, gy, gx)


def scale_crop(image: np.ndarray, rng: np.random.Generator,
               scale_range: tuple = (1.0, 1.3), crop_hw: tuple = (250, 200)) -> np.ndarray:
    """Rescale each axis independently, then center-crop.

    The two scale factors are drawn separately, so the content's aspect ratio
    changes; the crop is taken from the center of the rescaled image.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[-2:]
    ch, cw = crop_hw
    sy = rng.uniform(*scale_range)
    sx = rng.uniform(*scale_range)
    nh, nw = int(round(h * sy)), int(round(w * sx))
    if nh < ch or nw < cw:
        raise ValueError(f"scaled image ({nh},{nw}) smaller than crop ({ch},{cw})")
    scaled = bilinear_resize(img, nh, nw)
    top = (nh - ch) // 2
    left = (nw - cw) // 2
    return scaled[..., top:top + ch, left:left + cw]


def hflip(image: np.ndarray, rng: Optional[np.random.Generator] = None, p: float = 0.5) -> np.ndarray:
    """Mirror about the vertical axis with probability p."""
    img = np.asarray(image)
    if p > 0 and (p >= 1.0 or (rng is not None and rng.random() < p)):
        return np.flip(img, axis=-1).copy()
    return img


def flip_horizontal(image: np.ndarray) -> np.ndarray:
    return np.flip(np.asarray(image), axis=-1).copy()


# ---------------------------------------------------------------------------
# dataset generation and manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRow:
    identity: int
    photo: str
    sketch: str
    combo: int


@dataclass
class DatasetManifest:
    """Line-oriented CSV manifest: `id,photo,sketch,combo` per sample."""

    rows: list
    root: Path
    split: str = "train"

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "photo", "sketch", "combo"])
            for r in self.rows:
                writer.writerow([r.identity, r.photo, r.sketch, r.combo])
        return path

    @classmethod
    def load(cls, path: Path, split: str = "train") -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise DatasetError(f"manifest not found: {path}")
        rows = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["id", "photo", "sketch", "combo"]:
                raise DatasetError(f"bad manifest header in {path}: {header}")
            for line in reader:
                rows.append(ManifestRow(int(line[0]), line[1], line[2], int(line[3])))
        return cls(rows=rows, root=path.parent, split=split)

    def validate(self, schema: Optional[AttributeSchema] = None) -> None:
        ids = [r.identity for r in self.rows]
        if len(set(ids)) != len(ids):
            raise DatasetError(f"duplicate identity ids in split {self.split!r}")
        for r in self.rows:
            for rel in (r.photo, r.sketch):
                if not (self.root / rel).exists():
                    raise DatasetError(f"missing image file: {self.root / rel}")
            if schema is not None and not 0 <= r.combo < schema.n_combinations:
                raise DatasetError(f"combination index {r.combo} out of range")

    def photo_path(self, row: ManifestRow) -> Path:
        return self.root / row.photo

    def sketch_path(self, row: ManifestRow) -> Path:
        return self.root / row.sketch


def save_image(arr: np.ndarray, path: Path) -> None:
    a = np.asarray(arr)
    q = np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    if q.ndim == 3:
        Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path)
    else:
        Image.fromarray(q, mode="L").save(path)


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 3:
        return arr.transpose(2, 0, 1)
    return arr


def assign_combinations(n_identities: int, schema: AttributeSchema,
                        rng: np.random.Generator) -> np.ndarray:
    """Shuffled round-robin over all combinations: coverage is as even as
    possible, so any combination appears at least twice once n >= 2 * n_c."""
    n_c = schema.n_combinations
    blocks = []
    while sum(len(b) for b in blocks) < n_identities:
        blocks.append(rng.permutation(n_c))
    return np.concatenate(blocks)[:n_identities]


def generate_dataset(n_identities: int, schema: AttributeSchema, seed: int,
                     out_dir: Path, size: tuple = (32, 32), style: str = "line",
                     n_prototypes: int = 40, jitter: float = 0.10,
                     split: str = "train", id_base: int = 0,
                     prototype_offset: int = 0,
                     manifest_name: Optional[str] = None) -> DatasetManifest:
    """Render photo + sketch per identity and write a manifest.

    ``style`` picks the sketch renderer: "line" for the clean line drawing,
    "xdog" for the filtered tonal render (a visually distinct sketch style
    over the same geometry).
    """
    if n_identities < 2:
        raise DatasetError(f"need at least 2 identities, got {n_identities}")
    if style not in ("line", "xdog"):
        raise DatasetError(f"unknown sketch style {style!r}")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory {img_dir}: {exc}") from exc

    combos = assign_combinations(n_identities, schema, _rng(seed, 3000))
    rows = []
    for i in range(n_identities):
        ident_id = id_base + i
        combo = schema.decode(int(combos[i]))
        identity = sample_identity(schema, ident_id, combo, seed,
                                   n_prototypes=n_prototypes, jitter=jitter,
                                   prototype_offset=prototype_offset)
        photo, sketch = render_identity(identity, size)
        if style == "xdog":
            sketch = xdog_filter(render_tonal(identity, size))
        photo_rel = f"images/{split}_{ident_id:06d}_photo.png"
        sketch_rel = f"images/{split}_{ident_id:06d}_sketch.png"
        try:
            save_image(photo, out_dir / photo_rel)
            save_image(sketch, out_dir / sketch_rel)
        except OSError as exc:
            raise DatasetError(f"failed writing {out_dir / photo_rel}: {exc}") from exc
        rows.append(ManifestRow(ident_id, photo_rel, sketch_rel, int(combos[i])))

    manifest = DatasetManifest(rows=rows, root=out_dir, split=split)
    manifest.save(out_dir / (manifest_name or f"{split}_manifest.csv"))
    return manifest
