"""ROI preprocessing, keypoint detection, and descriptor extraction.

The pipeline: crop a rectangular ROI, convert to grayscale, resize so the
longer side is 512 px (never upscaling beyond 2x), detect blob-like keypoints
as scale-space extrema of the determinant-of-Hessian response, fit an
elliptical affine shape to each from the local second-moment matrix, and
extract a 128-d SIFT or RootSIFT descriptor over the affinely normalized
patch. Orientation is fixed downward (theta = 0 everywhere): images are
assumed upright, which makes matching more discriminative than
rotation-invariant descriptors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter

from .geometry import AffineShape

STANDARD_LONG_SIDE = 512
MAX_UPSCALE = 2.0
MIN_IMAGE_SIDE = 16

NUM_OCTAVES = 3
SCALES_PER_OCTAVE = 4
INIT_SIGMA = 1.6
SCALE_STEP = 2.0 ** (1.0 / SCALES_PER_OCTAVE)
RESPONSE_THRESHOLD = 1e-3
# Second-moment matrix: gradients at half the detection scale, Gaussian
# integration window at twice the detection scale, one adaptation step.
GRAD_SCALE_FACTOR = 0.5
INTEGRATION_SCALE_FACTOR = 2.0
MAX_AXIS_RATIO_SQ = 36.0
MIN_SHAPE_DET = 1e-9

PATCH_SIZE = 41
MEASUREMENT_MAGNIFY = 3.0
DESCRIPTOR_CLAMP = 0.2

VARIANT_SIFT = "SIFT"
VARIANT_ROOTSIFT = "RootSIFT"
VARIANTS = (VARIANT_SIFT, VARIANT_ROOTSIFT)
_VARIANT_CODES = {VARIANT_SIFT: 0, VARIANT_ROOTSIFT: 1}
_VARIANT_NAMES = {v: k for k, v in _VARIANT_CODES.items()}

SIDECAR_MAGIC = b"HSFT"
SIDECAR_VERSION = 1
_SIDECAR_HEADER = struct.Struct("<4sIIHHB")
_RECORD_FLOATS = 5 + 128


class InvalidRoiError(ValueError):
    """ROI does not intersect the image or has zero area."""


class ImageTooSmallError(ValueError):
    """Image below the minimum size the detector supports."""


class RegionOutOfBoundsError(ValueError):
    """Descriptor measurement region lies fully outside the image."""


class InvalidDescriptorInput(ValueError):
    """Descriptor post-processing input violates its contract."""


class SidecarFormatError(ValueError):
    """Feature sidecar file has an unknown magic or version, or is truncated."""


@dataclass(frozen=True)
class EllipseKeypoint:
    """A feature location with elliptical affine shape and fixed orientation."""

    x: np.ndarray  # (2,) pixel location, (col, row)
    shape: AffineShape
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64).reshape(2))


@dataclass
class FeatureSet:
    """Keypoints and their descriptors for one preprocessed ROI."""

    keypoints: list[EllipseKeypoint]
    descriptors: np.ndarray  # (n, 128) float32
    roi_width: int
    roi_height: int
    variant: str = VARIANT_ROOTSIFT

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float32).reshape(-1, 128)
        if len(self.keypoints) != self.descriptors.shape[0]:
            raise ValueError("keypoint and descriptor counts differ")

    def __len__(self) -> int:
        return len(self.keypoints)

    def locations(self) -> np.ndarray:
        if not self.keypoints:
            return np.empty((0, 2), dtype=np.float64)
        return np.stack([kp.x for kp in self.keypoints])

    def shape_params(self) -> np.ndarray:
        """(n, 3) array of (a, b, c) ellipse parameters."""
        if not self.keypoints:
            return np.empty((0, 3), dtype=np.float64)
        return np.array([(kp.shape.a, kp.shape.b, kp.shape.c) for kp in self.keypoints])


def _to_gray_float(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 3:
        img = cv2.cvtColor(img, cv2.COLOR_BGR2GRAY)
    elif img.ndim != 2:
        raise ValueError(f"expected 2-d or 3-d image, got shape {img.shape}")
    if img.dtype == np.uint8:
        return img.astype(np.float32) / 255.0
    if img.dtype == np.uint16:
        return img.astype(np.float32) / 65535.0
    return np.clip(img.astype(np.float32), 0.0, 1.0)


def preprocess_roi(image: np.ndarray, roi: tuple[int, int, int, int]) -> np.ndarray:
    """Crop ``roi`` = (x, y, w, h), convert to grayscale, and resize so the
    longer side is 512 px. Upscaling is capped at 2x; an ROI already at or
    near the standard size passes through untouched. Returns float32 in [0, 1].

    Raises:
        InvalidRoiError: the ROI has no positive-area intersection with the image.
    """
    img = np.asarray(image)
    if img.ndim not in (2, 3):
        raise ValueError(f"expected 2-d or 3-d image, got shape {img.shape}")
    ih, iw = img.shape[:2]
    x, y, w, h = (int(round(v)) for v in roi)
    if w <= 0 or h <= 0:
        raise InvalidRoiError(f"ROI has non-positive size: {roi}")
    x0, y0 = max(x, 0), max(y, 0)
    x1, y1 = min(x + w, iw), min(y + h, ih)
    if x0 >= x1 or y0 >= y1:
        raise InvalidRoiError(f"ROI {roi} does not intersect a {iw}x{ih} image")
    crop = _to_gray_float(img[y0:y1, x0:x1])
    ch, cw = crop.shape
    scale = min(STANDARD_LONG_SIDE / max(cw, ch), MAX_UPSCALE)
    if scale == 1.0:
        return crop
    out_w = max(1, int(round(cw * scale)))
    out_h = max(1, int(round(ch * scale)))
    interp = cv2.INTER_AREA if scale < 1.0 else cv2.INTER_LINEAR
    return cv2.resize(crop, (out_w, out_h), interpolation=interp)


def scale_ladder() -> np.ndarray:
    """Detection sigmas: NUM_OCTAVES * SCALES_PER_OCTAVE levels in geometric
    progression starting at INIT_SIGMA."""
    n = NUM_OCTAVES * SCALES_PER_OCTAVE
    return INIT_SIGMA * SCALE_STEP ** np.arange(n)


def hessian_response(image: np.ndarray, sigma: float) -> np.ndarray:
    """Scale-normalized determinant-of-Hessian response at one sigma."""
    img = _to_gray_float(image).astype(np.float64)
    lxx = gaussian_filter(img, sigma, order=(0, 2))
    lyy = gaussian_filter(img, sigma, order=(2, 0))
    lxy = gaussian_filter(img, sigma, order=(1, 1))
    return sigma**4 * (lxx * lyy - lxy * lxy)


def _fit_shape(gx: np.ndarray, gy: np.ndarray, col: int, row: int, sigma: float):
    """Elliptical shape at a detection from the local second-moment matrix.

    The matrix is accumulated under a Gaussian window, normalized to unit
    determinant, and inverted; its scaled Cholesky factor is the keypoint
    shape. Returns None for degenerate or overly elongated structure.
    """
    h, w = gx.shape
    w_sigma = INTEGRATION_SCALE_FACTOR * sigma
    r = int(np.ceil(2.0 * w_sigma))
    x0, x1 = max(col - r, 0), min(col + r, w - 1)
    y0, y1 = max(row - r, 0), min(row + r, h - 1)
    dx = np.arange(x0, x1 + 1) - col
    dy = np.arange(y0, y1 + 1) - row
    weight = np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / (2.0 * w_sigma**2))
    wsum = weight.sum()
    wgx = gx[y0 : y1 + 1, x0 : x1 + 1]
    wgy = gy[y0 : y1 + 1, x0 : x1 + 1]
    mu_xx = float((weight * wgx * wgx).sum() / wsum)
    mu_xy = float((weight * wgx * wgy).sum() / wsum)
    mu_yy = float((weight * wgy * wgy).sum() / wsum)

    det = mu_xx * mu_yy - mu_xy * mu_xy
    if not np.isfinite(det) or det <= 1e-24:
        return None
    tr = mu_xx + mu_yy
    disc = np.sqrt(max((mu_xx - mu_yy) ** 2 + 4.0 * mu_xy**2, 0.0))
    lam_min = (tr - disc) / 2.0
    lam_max = (tr + disc) / 2.0
    if lam_min <= 0.0 or lam_max / lam_min > MAX_AXIS_RATIO_SQ:
        return None
    # Sigma_ellipse = sigma^2 * (mu / sqrt(det mu))^{-1}
    scale = sigma**2 / np.sqrt(det)
    cov = scale * np.array([[mu_yy, -mu_xy], [-mu_xy, mu_xx]])
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return None
    shape = AffineShape(float(chol[0, 0]), float(chol[1, 0]), float(chol[1, 1]))
    if not shape.valid or shape.det < MIN_SHAPE_DET:
        return None
    return shape


def detect_keypoints(image: np.ndarray) -> list[EllipseKeypoint]:
    """Detect elliptical keypoints as strict 3x3x3 scale-space maxima of the
    determinant-of-Hessian response over the scale ladder.

    Deterministic for a fixed input; candidates on the spatial border or at
    the first/last scale level are excluded.

    Raises:
        ImageTooSmallError: either image side is below 16 px.
    """
    img = _to_gray_float(image).astype(np.float64)
    h, w = img.shape
    if min(h, w) < MIN_IMAGE_SIDE:
        raise ImageTooSmallError(f"image {w}x{h} below minimum side {MIN_IMAGE_SIDE}")

    sigmas = scale_ladder()
    n_levels = sigmas.size
    resp = np.empty((n_levels, h, w))
    grads: list[tuple[np.ndarray, np.ndarray]] = []
    for t, sigma in enumerate(sigmas):
        lxx = gaussian_filter(img, sigma, order=(0, 2))
        lyy = gaussian_filter(img, sigma, order=(2, 0))
        lxy = gaussian_filter(img, sigma, order=(1, 1))
        resp[t] = sigma**4 * (lxx * lyy - lxy * lxy)
        gs = GRAD_SCALE_FACTOR * sigma
        grads.append(
            (gaussian_filter(img, gs, order=(0, 1)), gaussian_filter(img, gs, order=(1, 0)))
        )

    footprint = np.ones((3, 3, 3), dtype=bool)
    footprint[1, 1, 1] = False
    neighbor_max = maximum_filter(resp, footprint=footprint, mode="constant", cval=np.inf)
    candidates = np.argwhere((resp > RESPONSE_THRESHOLD) & (resp > neighbor_max))

    keypoints = []
    for t, row, col in candidates:
        shape = _fit_shape(grads[t][0], grads[t][1], col, row, sigmas[t])
        if shape is None:
            continue
        keypoints.append(
            EllipseKeypoint(x=np.array([col, row], dtype=np.float64), shape=shape)
        )
    return keypoints


_PATCH_U = np.linspace(-1.0, 1.0, PATCH_SIZE)
_PATCH_UX, _PATCH_UY = np.meshgrid(_PATCH_U, _PATCH_U)
_PATCH_UX = _PATCH_UX.ravel()
_PATCH_UY = _PATCH_UY.ravel()
_PATCH_GAUSS = np.exp(-(_PATCH_UX**2 + _PATCH_UY**2) / 2.0)
_SBIN_X = (_PATCH_UX + 1.0) / 2.0 * 4.0 - 0.5
_SBIN_Y = (_PATCH_UY + 1.0) / 2.0 * 4.0 - 0.5
_SX0 = np.floor(_SBIN_X).astype(np.intp)
_SY0 = np.floor(_SBIN_Y).astype(np.intp)
_FRAC_X = _SBIN_X - _SX0
_FRAC_Y = _SBIN_Y - _SY0


def _sample_bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear sampling with border replication."""
    h, w = img.shape
    x = np.clip(xs, 0.0, w - 1.0)
    y = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    return (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x1] * fx * (1 - fy)
        + img[y1, x0] * (1 - fx) * fy
        + img[y1, x1] * fx * fy
    )


def _raw_descriptors(img: np.ndarray, kps: list[EllipseKeypoint]) -> np.ndarray:
    """Unnormalized 4x4x8 gradient histograms for a batch of keypoints."""
    n = len(kps)
    out = np.zeros((n, 128))
    if n == 0:
        return out
    centers = np.stack([kp.x for kp in kps])
    abc = np.array([(kp.shape.a, kp.shape.b, kp.shape.c) for kp in kps])
    m = MEASUREMENT_MAGNIFY
    # patch point = center + m * A @ (ux, uy)
    px = centers[:, 0:1] + m * abc[:, 0:1] * _PATCH_UX[None, :]
    py = centers[:, 1:2] + m * (abc[:, 1:2] * _PATCH_UX[None, :] + abc[:, 2:3] * _PATCH_UY[None, :])
    patches = _sample_bilinear(img, px, py).reshape(n, PATCH_SIZE, PATCH_SIZE)

    gy, gx = np.gradient(patches, axis=(1, 2))
    gx = gx.reshape(n, -1)
    gy = gy.reshape(n, -1)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2.0 * np.pi)
    obin = ang / (2.0 * np.pi) * 8.0
    o0 = np.floor(obin).astype(np.intp) % 8
    o1 = (o0 + 1) % 8
    fo = obin - np.floor(obin)

    base = mag * _PATCH_GAUSS[None, :]
    kp_offset = (np.arange(n, dtype=np.intp) * 128)[:, None]
    for sy, wy in ((_SY0, 1.0 - _FRAC_Y), (_SY0 + 1, _FRAC_Y)):
        valid_y = (sy >= 0) & (sy <= 3)
        for sx, wx in ((_SX0, 1.0 - _FRAC_X), (_SX0 + 1, _FRAC_X)):
            valid = valid_y & (sx >= 0) & (sx <= 3)
            if not valid.any():
                continue
            cell = (sy[valid] * 4 + sx[valid]) * 8
            w_spatial = (base * (wy * wx)[None, :])[:, valid]
            for o, wo in ((o0[:, valid], 1.0 - fo[:, valid]), (o1[:, valid], fo[:, valid])):
                idx = kp_offset + cell[None, :] + o
                out += np.bincount(
                    idx.ravel(), weights=(w_spatial * wo).ravel(), minlength=n * 128
                ).reshape(n, 128)
    return out


def _finalize_sift(raw: np.ndarray) -> np.ndarray:
    """L2-normalize, clamp components at 0.2, renormalize. Zero rows stay zero."""
    out = np.zeros_like(raw)
    norms = np.linalg.norm(raw, axis=1)
    nz = norms > 1e-12
    out[nz] = raw[nz] / norms[nz, None]
    np.minimum(out, DESCRIPTOR_CLAMP, out=out)
    norms = np.linalg.norm(out, axis=1)
    nz = norms > 1e-12
    out[nz] /= norms[nz, None]
    return out


def root_sift(sift: np.ndarray) -> np.ndarray:
    """Component-wise square root of the L1-normalized descriptor.

    Maps an all-zero input to an all-zero output; any nonzero input comes back
    with unit L2 norm.

    Raises:
        InvalidDescriptorInput: any component is negative.
    """
    v = np.asarray(sift, dtype=np.float64)
    if np.any(v < 0):
        raise InvalidDescriptorInput("descriptor components must be non-negative")
    l1 = v.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.sqrt(np.where(l1 > 0, v / np.where(l1 > 0, l1, 1.0), 0.0))
    return out.astype(np.float32)


def _descriptor_batch(img: np.ndarray, kps: list[EllipseKeypoint], variant: str) -> np.ndarray:
    if variant not in _VARIANT_CODES:
        raise ValueError(f"unknown descriptor variant {variant!r}")
    chunks = []
    for start in range(0, len(kps), 256):
        chunks.append(_raw_descriptors(img, kps[start : start + 256]))
    raw = np.vstack(chunks) if chunks else np.zeros((0, 128))
    sift = _finalize_sift(raw)
    if variant == VARIANT_SIFT:
        return sift.astype(np.float32)
    return root_sift(sift)


def extract_descriptor(image: np.ndarray, kp: EllipseKeypoint, variant: str = VARIANT_ROOTSIFT) -> np.ndarray:
    """128-d descriptor for one keypoint: gradient histograms over the
    affinely normalized patch (measurement region = ellipse scaled 3x),
    post-processed per ``variant``.

    Raises:
        RegionOutOfBoundsError: the measurement region misses the image entirely.
    """
    img = _to_gray_float(image)
    h, w = img.shape
    cx, cy = kp.x
    rx = MEASUREMENT_MAGNIFY * abs(kp.shape.a)
    ry = MEASUREMENT_MAGNIFY * float(np.hypot(kp.shape.b, kp.shape.c))
    if cx + rx < 0 or cx - rx > w - 1 or cy + ry < 0 or cy - ry > h - 1:
        raise RegionOutOfBoundsError(
            f"measurement region around ({cx:.1f}, {cy:.1f}) outside {w}x{h} image"
        )
    return _descriptor_batch(img, [kp], variant)[0]


def extract_features(
    image: np.ndarray, roi: tuple[int, int, int, int], variant: str = VARIANT_ROOTSIFT
) -> FeatureSet:
    """Preprocess the ROI, detect keypoints, and extract descriptors."""
    pre = preprocess_roi(image, roi)
    kps = detect_keypoints(pre)
    descs = _descriptor_batch(pre, kps, variant)
    h, w = pre.shape
    return FeatureSet(
        keypoints=kps, descriptors=descs, roi_width=w, roi_height=h, variant=variant
    )


def write_features(path: str | Path, fs: FeatureSet) -> None:
    """Write a FeatureSet to the binary sidecar format (little-endian)."""
    n = len(fs)
    header = _SIDECAR_HEADER.pack(
        SIDECAR_MAGIC,
        SIDECAR_VERSION,
        n,
        fs.roi_width,
        fs.roi_height,
        _VARIANT_CODES[fs.variant],
    )
    records = np.empty((n, _RECORD_FLOATS), dtype="<f4")
    if n:
        records[:, 0:2] = fs.locations()
        records[:, 2:5] = fs.shape_params()
        records[:, 5:] = fs.descriptors
    Path(path).write_bytes(header + records.tobytes())


def read_features(path: str | Path) -> FeatureSet:
    """Read a feature sidecar. Rejects unknown magic or version.

    Raises:
        SidecarFormatError: bad magic, unsupported version, or truncated data.
    """
    data = Path(path).read_bytes()
    if len(data) < _SIDECAR_HEADER.size:
        raise SidecarFormatError(f"{path}: truncated header")
    magic, version, n, roi_w, roi_h, variant_code = _SIDECAR_HEADER.unpack_from(data)
    if magic != SIDECAR_MAGIC:
        raise SidecarFormatError(f"{path}: unknown magic {magic!r}")
    if version != SIDECAR_VERSION:
        raise SidecarFormatError(f"{path}: unsupported version {version}")
    if variant_code not in _VARIANT_NAMES:
        raise SidecarFormatError(f"{path}: unknown descriptor variant {variant_code}")
    expected = _SIDECAR_HEADER.size + n * _RECORD_FLOATS * 4
    if len(data) != expected:
        raise SidecarFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    records = np.frombuffer(data, dtype="<f4", offset=_SIDECAR_HEADER.size).reshape(
        n, _RECORD_FLOATS
    )
    kps = [
        EllipseKeypoint(
            x=records[i, 0:2].astype(np.float64),
            shape=AffineShape(float(records[i, 2]), float(records[i, 3]), float(records[i, 4])),
        )
        for i in range(n)
    ]
    return FeatureSet(
        keypoints=kps,
        descriptors=records[:, 5:].copy(),
        roi_width=int(roi_w),
        roi_height=int(roi_h),
        variant=_VARIANT_NAMES[variant_code],
    )
