"""Dense coregistration: rank filtering + multiscale windowed Lucas-Kanade flow.

The flow (u, v) maps each reference pixel (x, y) to the moving image, i.e.
``ref(x, y) ~ mov(x + u, y + v)``; warping ``mov`` by the flow brings it onto
the reference grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from urbdiff.errors import ConfigError, ShapeError
from urbdiff.raster import Raster


@dataclass(frozen=True)
class CoregConfig:
    pyramid_levels: int = 4
    window_radius: int = 8
    iterations_per_level: int = 5
    rank_radius: int = 2
    # Gaussian sigma applied to each rank-filtered level; widens the basin of
    # convergence of the linearised solve on the piecewise-constant rank image
    rank_smoothing: float = 1.0
    # conditioning threshold per window pixel on the smallest eigenvalue of G
    eps_per_pixel: float = 1e-4
    # rolling guidance filtering / contrast inversion are not implemented
    guidance_filter: bool = False

    def __post_init__(self):
        for name in ("pyramid_levels", "window_radius", "iterations_per_level", "rank_radius"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.rank_smoothing < 0:
            raise ConfigError("rank_smoothing must be >= 0")
        if self.guidance_filter:
            raise ConfigError("rolling guidance filtering is not implemented")

    @property
    def window_pixels(self) -> int:
        return (2 * self.window_radius + 1) ** 2

    @property
    def eps(self) -> float:
        return self.eps_per_pixel * self.window_pixels


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "FlowField":
        return cls(np.zeros(shape, np.float32), np.zeros(shape, np.float32))

    @property
    def shape(self):
        return self.u.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)

    def endpoint_error(self, u_true, v_true) -> np.ndarray:
        return np.hypot(self.u - u_true, self.v - v_true)


def rank_filter(img: np.ndarray, radius: int) -> np.ndarray:
    """Share of window pixels strictly below the centre, in [0, 1].

    Borders use edge replication. The output only depends on the ordering of
    intensities, so any strictly increasing remap leaves it unchanged.
    """
    img = np.asarray(img)
    if radius < 1:
        raise ValueError("radius must be >= 1")
    h, w = img.shape
    padded = np.pad(img, radius, mode="edge")
    count = np.zeros((h, w), np.int32)
    span = 2 * radius + 1
    for dy in range(span):
        for dx in range(span):
            count += padded[dy : dy + h, dx : dx + w] < img
    return (count / (span * span - 1)).astype(np.float32)


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Sample a 2-D (or leading-axis stacked 3-D) image at fractional positions.

    Coordinates outside the image are clamped to the border (edge
    replication); the returned mask is False wherever that happened.
    """
    h, w = img.shape[-2:]
    valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    xc = np.clip(xs, 0, w - 1)
    yc = np.clip(ys, 0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    src = img.astype(np.float64)
    top = src[..., y0, x0] * (1 - fx) + src[..., y0, x1] * fx
    bottom = src[..., y1, x0] * (1 - fx) + src[..., y1, x1] * fx
    return top * (1 - fy) + bottom * fy, valid


def _warp_array(img: np.ndarray, flow: FlowField):
    h, w = img.shape[-2:]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return bilinear_sample(img, xs + flow.u, ys + flow.v)


def warp_bilinear(img: Raster, flow: FlowField) -> tuple[Raster, np.ndarray]:
    """Resample every band at (x + u, y + v). Returns the raster and validity mask."""
    if flow.shape != (img.height, img.width):
        raise ShapeError(f"flow {flow.shape} does not match raster {img.height}x{img.width}")
    out, valid = _warp_array(np.asarray(img.samples), flow)
    return Raster(out.astype(np.float32), img.geo, img.band_ids), valid


def _box_sum(a: np.ndarray, radius: int) -> np.ndarray:
    size = 2 * radius + 1
    return ndimage.uniform_filter(a, size=size, mode="nearest") * (size * size)


def flow_level(ref: np.ndarray, mov: np.ndarray, init: FlowField | None = None,
               cfg: CoregConfig = CoregConfig()) -> FlowField:
    """Refine a flow at one scale by iterated windowed least squares.

    Each iteration warps ``mov`` with the current flow and solves the 2x2
    normal equations per pixel, G = sum_w grad(ref) grad(ref)^T and
    b = sum_w grad(ref) (ref - warped + grad(ref) . flow). For a flow that is
    constant over the window this is the usual update G d = sum_w grad(ref)
    (ref - warped) added to the current flow. Pixels whose G has smallest
    eigenvalue below ``cfg.eps`` keep their previous flow.
    """
    ref = np.asarray(ref, np.float64)
    mov = np.asarray(mov, np.float64)
    if ref.shape != mov.shape:
        raise ShapeError(f"reference {ref.shape} and moving {mov.shape} differ in size")
    flow = init or FlowField.zeros(ref.shape)
    if flow.shape != ref.shape:
        raise ShapeError("initial flow does not match the image size")
    u = flow.u.astype(np.float64)
    v = flow.v.astype(np.float64)
    gy, gx = np.gradient(ref)
    gxx0, gxy0, gyy0 = gx * gx, gx * gy, gy * gy
    r = cfg.window_radius
    ys, xs = np.mgrid[0 : ref.shape[0], 0 : ref.shape[1]].astype(np.float64)
    for _ in range(cfg.iterations_per_level):
        warped, valid = bilinear_sample(mov, xs + u, ys + v)
        # out-of-bounds reads carry no evidence; drop them from the sums
        wgt = valid.astype(np.float64)
        gxx = _box_sum(wgt * gxx0, r)
        gxy = _box_sum(wgt * gxy0, r)
        gyy = _box_sum(wgt * gyy0, r)
        det = gxx * gyy - gxy * gxy
        half_tr = 0.5 * (gxx + gyy)
        lam_min = half_tr - np.sqrt(np.maximum(half_tr * half_tr - det, 0.0))
        ok = lam_min >= cfg.eps
        safe_det = np.where(ok, det, 1.0)
        # residual linearised around each window pixel's own flow, so the
        # solve yields the flow itself rather than an increment
        lin = wgt * (ref - warped + gx * u + gy * v)
        bx = _box_sum(gx * lin, r)
        by = _box_sum(gy * lin, r)
        u = np.where(ok, (gyy * bx - gxy * by) / safe_det, u)
        v = np.where(ok, (gxx * by - gxy * bx) / safe_det, v)
    return FlowField(u.astype(np.float32), v.astype(np.float32))


def _pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [img.astype(np.float64)]
    for _ in range(levels - 1):
        pyr.append(ndimage.gaussian_filter(pyr[-1], 1.0, mode="nearest")[::2, ::2])
    return pyr


def _upsample_flow(flow: FlowField, shape) -> FlowField:
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    # fine pixel 2i sits on coarse pixel i (decimation keeps even samples)
    u, _ = bilinear_sample(flow.u, xs / 2, ys / 2)
    v, _ = bilinear_sample(flow.v, xs / 2, ys / 2)
    return FlowField((2 * u).astype(np.float32), (2 * v).astype(np.float32))


def band_mean(r: Raster) -> np.ndarray:
    return np.asarray(r.samples, np.float64).mean(axis=0)


def _rank_level(img: np.ndarray, cfg: CoregConfig) -> np.ndarray:
    out = rank_filter(img, cfg.rank_radius).astype(np.float64)
    if cfg.rank_smoothing > 0:
        out = ndimage.gaussian_filter(out, cfg.rank_smoothing, mode="nearest")
    return out


def estimate_flow(ref: np.ndarray, mov: np.ndarray, cfg: CoregConfig = CoregConfig(),
                  rank: bool = True) -> FlowField:
    """Coarse-to-fine flow between two single-band images.

    With ``rank`` set, every pyramid level is rank filtered (then lightly
    smoothed) before matching; filtering only the full-resolution image would
    leave the coarse levels without structure.
    """
    ref_pyr = _pyramid(ref, cfg.pyramid_levels)
    mov_pyr = _pyramid(mov, cfg.pyramid_levels)
    if rank:
        ref_pyr = [_rank_level(p, cfg) for p in ref_pyr]
        mov_pyr = [_rank_level(p, cfg) for p in mov_pyr]
    flow = FlowField.zeros(ref_pyr[-1].shape)
    for level in range(cfg.pyramid_levels - 1, -1, -1):
        if flow.shape != ref_pyr[level].shape:
            flow = _upsample_flow(flow, ref_pyr[level].shape)
        flow = flow_level(ref_pyr[level], mov_pyr[level], flow, cfg)
    return flow


@dataclass
class CoregResult:
    flow: FlowField
    warped: Raster
    valid: np.ndarray


def coregister(ref: Raster, mov: Raster, cfg: CoregConfig = CoregConfig()) -> CoregResult:
    """Register ``mov`` onto ``ref`` and resample it onto the reference grid."""
    if (ref.height, ref.width) != (mov.height, mov.width) or ref.bands != mov.bands:
        raise ShapeError("reference and moving rasters must share size and band count")
    minimum = 2 ** (cfg.pyramid_levels - 1) * (2 * cfg.window_radius + 1)
    if min(ref.height, ref.width) < minimum:
        raise ConfigError(
            f"image {ref.height}x{ref.width} too small for {cfg.pyramid_levels} levels "
            f"with window radius {cfg.window_radius} (needs >= {minimum})"
        )
    flow = estimate_flow(band_mean(ref), band_mean(mov), cfg)
    warped, valid = warp_bilinear(mov, flow)
    return CoregResult(flow, warped, valid)


def flow_to_raster(flow: FlowField, geo) -> Raster:
    return Raster(np.stack([flow.u, flow.v]), geo, ("u", "v"))
