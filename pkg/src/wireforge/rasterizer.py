"""Differentiable 2D stroke rasterizer.

Projected wires arrive as 2D cubic segments in pixel coordinates. Each
segment is flattened to a polyline; a pixel's value is

    1 - coverage(min distance from pixel center to any polyline piece)

where coverage falls smoothly (smoothstep) from 1 to 0 as the distance runs
from stroke_width/2 - aa_width to stroke_width/2 + aa_width. Overlapping
strokes composite by max coverage, so uniform black ink never darkens twice.

The flattened polyline is the ground truth geometry for differentiation: the
backward pass chains the smoothstep derivative, the point-to-piece distance
gradient (closest-piece assignment held fixed, which is exact at the
minimizer), and the Bernstein weights of each polyline vertex back onto the
2D control points.

The default pixel loop visits only candidate pixels inside each piece's
inflated bounding box; the naive full-grid path is kept as a fallback and
must produce identical images and gradients (tested).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .geometry import bernstein3

try:  # fused kernel; the numpy path below stays as the fallback
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    _HAVE_NUMBA = False

# Pairs are processed in chunks to bound memory when strokes blow up.
_PAIR_CHUNK = 4_000_000


@dataclass(frozen=True)
class Canvas:
    """Raster target: size in pixels, stroke width and anti-alias band in px."""

    width: int
    height: int
    stroke_width: float
    aa_width: float = 1.0
    samples_per_segment: int = 0  # 0 = auto: 24 at a 256 px edge, linear in edge

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ValueError("canvas must be at least 16x16 pixels")
        if self.stroke_width <= 0.0:
            raise ValueError("stroke_width must be positive")
        if self.aa_width <= 0.0:
            raise ValueError("aa_width must be positive")

    @property
    def samples(self) -> int:
        if self.samples_per_segment >= 2:
            return self.samples_per_segment
        edge = max(self.width, self.height)
        return max(2, int(round(24 * edge / 256.0)))

    @property
    def band(self) -> tuple[float, float]:
        """Inner (full ink) and outer (no ink) distance of the coverage falloff."""
        half = 0.5 * self.stroke_width
        return half - self.aa_width, half + self.aa_width


@dataclass
class RasterImage:
    """H x W grayscale in [0, 1]; 1 is the white background, 0 is full ink."""

    pixels: np.ndarray
    view: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)


@dataclass
class Polyline:
    """Flattened segment: vertex pixel positions plus (segment, t) provenance."""

    vertices: np.ndarray  # (V, 2)
    seg_index: np.ndarray  # (V,) int
    t: np.ndarray  # (V,)


def pixel_transform(canvas: Canvas):
    """Map canvas-normalized [0,1]^2 coords (y up) to pixels (y down).

    Returns (scale, offset) with px = scale * p01 + offset. The y flip lives
    here, once; geometry bases stay y-up.
    """
    scale = np.array([canvas.width, -canvas.height], dtype=np.float64)
    offset = np.array([0.0, canvas.height], dtype=np.float64)
    return scale, offset


def to_pixel_space(ctrl01, canvas: Canvas):
    """(..., 2) canvas-normalized control points -> pixel coordinates."""
    scale, offset = pixel_transform(canvas)
    return np.asarray(ctrl01, dtype=np.float64) * scale + offset


def flatten(seg2d, samples_per_segment: int, seg_index: int = 0) -> Polyline:
    """Sample a 2D cubic at uniform t into a polyline with source records."""
    if samples_per_segment < 2:
        raise ValueError("samples_per_segment must be >= 2")
    seg2d = np.asarray(seg2d, dtype=np.float64)
    t = np.linspace(0.0, 1.0, samples_per_segment)
    verts = bernstein3(t) @ seg2d
    return Polyline(verts, np.full(samples_per_segment, seg_index, dtype=np.int64), t)


@dataclass
class _FlatScene:
    """All polyline pieces of a scene, concatenated.

    a, b: (M, 2) piece endpoints; seg: (M,) global cubic-segment id;
    ta, tb: (M,) curve parameters of the endpoints within their segment.
    wire_of_seg / local_of_seg map a global segment id back to its wire.
    """

    a: np.ndarray
    b: np.ndarray
    seg: np.ndarray
    ta: np.ndarray
    tb: np.ndarray
    wire_of_seg: np.ndarray
    local_of_seg: np.ndarray
    seg_counts: list = field(default_factory=list)


def _flatten_scene(wires2d, canvas: Canvas) -> _FlatScene:
    samples = canvas.samples
    t = np.linspace(0.0, 1.0, samples)
    w4 = bernstein3(t)  # (samples, 4)
    a_list, b_list, seg_list, ta_list, tb_list = [], [], [], [], []
    wire_of_seg, local_of_seg, seg_counts = [], [], []
    gseg = 0
    for wi, ctrl in enumerate(wires2d):
        ctrl = np.asarray(ctrl, dtype=np.float64)
        if ctrl.ndim != 3 or ctrl.shape[1:] != (4, 2):
            raise ValueError("each wire must be an (S, 4, 2) control array")
        n_seg = ctrl.shape[0]
        seg_counts.append(n_seg)
        verts = np.einsum("tj,sjd->tsd", w4, ctrl)  # (samples, n_seg, 2)
        a_list.append(verts[:-1].transpose(1, 0, 2).reshape(-1, 2))
        b_list.append(verts[1:].transpose(1, 0, 2).reshape(-1, 2))
        seg_ids = gseg + np.repeat(np.arange(n_seg), samples - 1)
        seg_list.append(seg_ids)
        ta_list.append(np.tile(t[:-1], n_seg))
        tb_list.append(np.tile(t[1:], n_seg))
        wire_of_seg.extend([wi] * n_seg)
        local_of_seg.extend(range(n_seg))
        gseg += n_seg
    if gseg == 0:
        z2 = np.zeros((0, 2))
        z = np.zeros(0)
        return _FlatScene(z2, z2, z.astype(np.int64), z, z,
                          np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), [])
    return _FlatScene(
        np.concatenate(a_list),
        np.concatenate(b_list),
        np.concatenate(seg_list),
        np.concatenate(ta_list),
        np.concatenate(tb_list),
        np.asarray(wire_of_seg, dtype=np.int64),
        np.asarray(local_of_seg, dtype=np.int64),
        seg_counts,
    )


def _point_piece_distance(p, a, b):
    """Distance from points p to pieces (a, b), plus the clamped parameter.

    All arrays (N, 2), paired elementwise.
    """
    ab = b - a
    ap = p - a
    denom = np.einsum("ij,ij->i", ab, ab)
    tproj = np.divide(
        np.einsum("ij,ij->i", ap, ab), denom,
        out=np.zeros_like(denom), where=denom > 0.0,
    )
    tclamp = np.clip(tproj, 0.0, 1.0)
    closest = a + tclamp[:, None] * ab
    d = np.linalg.norm(p - closest, axis=1)
    return d, tclamp


def _coverage(d, canvas: Canvas):
    """Smoothstep ink coverage as a function of centerline distance."""
    inner, outer = canvas.band
    x = np.clip((d - inner) / (outer - inner), 0.0, 1.0)
    return 1.0 - (3.0 * x * x - 2.0 * x * x * x)


def _coverage_slope(d, canvas: Canvas):
    """d(coverage)/d(distance); nonzero only strictly inside the falloff band."""
    inner, outer = canvas.band
    x = (d - inner) / (outer - inner)
    slope = np.where((x > 0.0) & (x < 1.0), -6.0 * x * (1.0 - x) / (outer - inner), 0.0)
    return slope


def _pair_chunks(scene: _FlatScene, canvas: Canvas):
    """Yield (piece_ids, flat_pixel_ids, centers) for every candidate pair.

    A candidate pair is a pixel whose center lies inside a piece's bounding
    box inflated by the outer band radius; every pixel within ink reach of a
    piece is covered. Chunks bound peak memory; the chunk boundaries are a
    pure function of the scene, so repeated iteration is bit-reproducible.
    """
    h, w = canvas.height, canvas.width
    m = scene.a.shape[0]
    if m == 0:
        return
    _, r = canvas.band
    lox = np.minimum(scene.a[:, 0], scene.b[:, 0]) - r - 0.5
    hix = np.maximum(scene.a[:, 0], scene.b[:, 0]) + r - 0.5
    loy = np.minimum(scene.a[:, 1], scene.b[:, 1]) - r - 0.5
    hiy = np.maximum(scene.a[:, 1], scene.b[:, 1]) + r - 0.5
    empty = (np.ceil(lox) > w - 1) | (np.floor(hix) < 0) | \
            (np.ceil(loy) > h - 1) | (np.floor(hiy) < 0)
    x0 = np.clip(np.ceil(lox).astype(np.int64), 0, w - 1)
    x1 = np.clip(np.floor(hix).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.ceil(loy).astype(np.int64), 0, h - 1)
    y1 = np.clip(np.floor(hiy).astype(np.int64), 0, h - 1)
    bw = np.where(empty, 0, x1 - x0 + 1)
    cnt = np.where(empty, 0, (x1 - x0 + 1) * (y1 - y0 + 1))
    ends = np.cumsum(cnt)
    starts = ends - cnt

    lo = 0
    while lo < m:
        hi = lo
        budget = starts[lo] + _PAIR_CHUNK
        while hi < m and ends[hi] <= budget:
            hi += 1
        if hi == lo:
            hi += 1  # single oversized piece: process it alone
        local_cnt = cnt[lo:hi]
        keep = local_cnt > 0
        if np.any(keep):
            piece_ids = np.arange(lo, hi)[keep]
            kept_cnt = local_cnt[keep]
            rep = np.repeat(piece_ids, kept_cnt)
            offs = np.arange(int(kept_cnt.sum())) - np.repeat(
                np.cumsum(kept_cnt) - kept_cnt, kept_cnt
            )
            px = x0[rep] + offs % bw[rep]
            py = y0[rep] + offs // bw[rep]
            centers = np.stack([px + 0.5, py + 0.5], axis=1).astype(np.float64)
            yield rep, py * w + px, centers
        lo = hi


if _HAVE_NUMBA:

    @numba.njit(cache=True, fastmath=False)
    def _distance_kernel(ax, ay, bx, by, radius, w, h, dmin, pmin):
        """First-wins min-distance scan over each piece's inflated bbox.

        `radius < 0` disables the bbox restriction (the naive full-grid
        path); both paths run the exact same per-pixel arithmetic.
        """
        for s in range(ax.size):
            if radius >= 0.0:
                lox = min(ax[s], bx[s]) - radius - 0.5
                hix = max(ax[s], bx[s]) + radius - 0.5
                loy = min(ay[s], by[s]) - radius - 0.5
                hiy = max(ay[s], by[s]) + radius - 0.5
                if np.ceil(lox) > w - 1 or np.floor(hix) < 0 or \
                        np.ceil(loy) > h - 1 or np.floor(hiy) < 0:
                    continue
                x0 = max(int(np.ceil(lox)), 0)
                x1 = min(int(np.floor(hix)), w - 1)
                y0 = max(int(np.ceil(loy)), 0)
                y1 = min(int(np.floor(hiy)), h - 1)
            else:
                x0, x1, y0, y1 = 0, w - 1, 0, h - 1
            abx = bx[s] - ax[s]
            aby = by[s] - ay[s]
            denom = abx * abx + aby * aby
            for iy in range(y0, y1 + 1):
                apy = iy + 0.5 - ay[s]
                for ix in range(x0, x1 + 1):
                    apx = ix + 0.5 - ax[s]
                    if denom > 0.0:
                        t = (apx * abx + apy * aby) / denom
                        if t < 0.0:
                            t = 0.0
                        elif t > 1.0:
                            t = 1.0
                    else:
                        t = 0.0
                    dx = apx - t * abx
                    dy = apy - t * aby
                    d = np.sqrt(dx * dx + dy * dy)
                    f = iy * w + ix
                    if d < dmin[f]:
                        dmin[f] = d
                        pmin[f] = s


def _distance_field_numpy(scene: _FlatScene, canvas: Canvas, naive: bool):
    """Vectorized fallback; same results and tie rule as the kernel."""
    h, w = canvas.height, canvas.width
    dmin = np.full(h * w, np.inf)
    pmin = np.full(h * w, -1, dtype=np.int64)
    if naive:
        cx = np.arange(w) + 0.5
        cy = np.arange(h) + 0.5
        gx, gy = np.meshgrid(cx, cy)
        centers = np.stack([gx.ravel(), gy.ravel()], axis=1)
        for pi in range(scene.a.shape[0]):
            d, _ = _point_piece_distance(
                centers,
                np.broadcast_to(scene.a[pi], centers.shape),
                np.broadcast_to(scene.b[pi], centers.shape),
            )
            better = d < dmin
            dmin[better] = d[better]
            pmin[better] = pi
        return dmin.reshape(h, w), pmin.reshape(h, w)
    # two passes: distances first, then the smallest piece id among exact
    # minima (the recomputation repeats the same arithmetic, so the equality
    # test against dmin is reliable)
    for rep, flat, centers in _pair_chunks(scene, canvas):
        d, _ = _point_piece_distance(centers, scene.a[rep], scene.b[rep])
        np.minimum.at(dmin, flat, d)
    sentinel = scene.a.shape[0]
    amin = np.full(h * w, sentinel, dtype=np.int64)
    for rep, flat, centers in _pair_chunks(scene, canvas):
        d, _ = _point_piece_distance(centers, scene.a[rep], scene.b[rep])
        hit = d == dmin[flat]
        np.minimum.at(amin, flat[hit], rep[hit])
    pmin[amin != sentinel] = amin[amin != sentinel]
    return dmin.reshape(h, w), pmin.reshape(h, w)


def _min_distance_field(scene: _FlatScene, canvas: Canvas, naive: bool = False):
    """Per-pixel min distance to any piece plus the attaining piece index.

    Pixels beyond the outer band edge of every piece keep distance inf and
    piece -1 on the fast path; their value and gradient equal the
    background's. Ties resolve to the smallest piece index.
    """
    h, w = canvas.height, canvas.width
    if scene.a.shape[0] == 0:
        return (np.full((h, w), np.inf), np.full((h, w), -1, dtype=np.int64))
    if _HAVE_NUMBA:
        dmin = np.full(h * w, np.inf)
        pmin = np.full(h * w, -1, dtype=np.int64)
        _, outer = canvas.band
        radius = -1.0 if naive else outer
        _distance_kernel(
            np.ascontiguousarray(scene.a[:, 0]), np.ascontiguousarray(scene.a[:, 1]),
            np.ascontiguousarray(scene.b[:, 0]), np.ascontiguousarray(scene.b[:, 1]),
            radius, w, h, dmin, pmin)
        return dmin.reshape(h, w), pmin.reshape(h, w)
    return _distance_field_numpy(scene, canvas, naive)


def render(wires2d, canvas: Canvas, view: str = "", naive: bool = False) -> RasterImage:
    """Rasterize wires (list of (S, 4, 2) pixel-space control arrays)."""
    scene = _flatten_scene(wires2d, canvas)
    dmin, _ = _min_distance_field(scene, canvas, naive=naive)
    finite = np.isfinite(dmin)
    cov = np.zeros_like(dmin)
    cov[finite] = _coverage(dmin[finite], canvas)
    return RasterImage(np.clip(1.0 - cov, 0.0, 1.0), view=view)


def render_backward(wires2d, canvas: Canvas, upstream, naive: bool = False):
    """Per-pixel loss gradients -> per-2D-control-point gradients.

    Returns one (S, 4, 2) array per input wire, aligned with its layout.
    Chain: d(pixel)/d(distance) at the closest piece only, the frozen-argmin
    point-to-piece distance gradient, then Bernstein weights at the piece's
    endpoint parameters.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (canvas.height, canvas.width):
        raise ValueError(
            f"upstream shape {upstream.shape} != canvas {(canvas.height, canvas.width)}"
        )
    scene = _flatten_scene(wires2d, canvas)
    grads = [np.zeros_like(np.asarray(wc, dtype=np.float64)) for wc in wires2d]
    if scene.a.shape[0] == 0:
        return grads
    dmin, pmin = _min_distance_field(scene, canvas, naive=naive)

    inner, outer = canvas.band
    active = (upstream != 0.0) & np.isfinite(dmin) & (dmin > max(inner, 0.0)) & (dmin < outer)
    ij = np.nonzero(active)
    if ij[0].size == 0:
        return grads
    piece = pmin[ij]
    centers = np.stack([ij[1] + 0.5, ij[0] + 0.5], axis=1).astype(np.float64)
    a = scene.a[piece]
    b = scene.b[piece]
    d, tclamp = _point_piece_distance(centers, a, b)
    ok = d > 1e-12  # distance direction undefined exactly on the centerline
    if not np.all(ok):
        centers, a, b = centers[ok], a[ok], b[ok]
        d, tclamp = d[ok], tclamp[ok]
        piece = piece[ok]
        ij = (ij[0][ok], ij[1][ok])

    closest = a + tclamp[:, None] * (b - a)
    e = (centers - closest) / d[:, None]
    # pixel = 1 - coverage(d): slope flips the coverage derivative's sign
    dpix_dd = -_coverage_slope(d, canvas)
    gd = upstream[ij] * dpix_dd
    ga = gd[:, None] * (-(1.0 - tclamp))[:, None] * e
    gb = gd[:, None] * (-tclamp)[:, None] * e

    seg = scene.seg[piece]
    wa = bernstein3(scene.ta[piece])  # (N, 4)
    wb = bernstein3(scene.tb[piece])
    contrib = wa[:, :, None] * ga[:, None, :] + wb[:, :, None] * gb[:, None, :]

    n_segs = scene.wire_of_seg.shape[0]
    gseg = np.zeros((n_segs, 4, 2))
    np.add.at(gseg, seg, contrib)
    for s in range(n_segs):
        grads[scene.wire_of_seg[s]][scene.local_of_seg[s]] += gseg[s]
    return grads


def quantize_u8(image: RasterImage) -> np.ndarray:
    """Fixed 8-bit quantization: round(pixel * 255), half away from zero."""
    p = np.clip(image.pixels, 0.0, 1.0)
    return np.floor(p * 255.0 + 0.5).astype(np.uint8)


def save_png(image: RasterImage, path) -> None:
    Image.fromarray(quantize_u8(image), mode="L").save(path, format="PNG")


def save_pgm(image: RasterImage, path) -> None:
    u8 = quantize_u8(image)
    h, w = u8.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(u8.tobytes())
