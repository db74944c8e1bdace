"""Per-view loss providers.

Two offline image-matching objectives stand in for the generative prior:
plain MSE (sharp but short-range: the anti-alias band is only a couple of
pixels wide) and a chamfer objective built on the target's distance
transform, which keeps pulling strokes that are nowhere near the target.
A provider maps a GradientRequest (view id + rendered image) to a loss and
a per-pixel gradient; the bridge provider forwards the request to an HTTP
gradient server speaking the same contract, and the echo stub is the
in-process test double for that protocol.
"""

from __future__ import annotations

import base64
import io
import json
from dataclasses import dataclass, field

import numpy as np
import requests
from PIL import Image
from scipy import ndimage

from .rasterizer import RasterImage

PROTOCOL_VERSION = 1


class ContractError(ValueError):
    """A caller violated an interface contract (shape/config mismatch)."""


class BridgeTransportError(RuntimeError):
    """Bridge unreachable or timed out; safe to retry."""


class BridgeProtocolError(RuntimeError):
    """Bridge answered with something outside the protocol; fatal."""


@dataclass
class TargetImage:
    pixels: np.ndarray  # (H, W) in [0, 1]
    view: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ContractError("target image must be a 2D grayscale array")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ContractError("target pixel values must lie in [0, 1]")


@dataclass
class ObjectiveResult:
    loss: float
    grad: np.ndarray  # (H, W) d(loss)/d(pixel)


@dataclass
class GradientRequest:
    view: str
    image: np.ndarray  # (H, W) rendered pixels in [0, 1]
    prompt: str | None = None
    condition: np.ndarray | None = None  # (H, W) visual condition
    iteration: int = 0
    total_iterations: int = 1


@dataclass(frozen=True)
class AugmentParams:
    perspective_scale: float = 0.5
    crop_scale: tuple[float, float] = (0.8, 1.0)
    crop_aspect: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError("crop_scale must satisfy 0 < lo <= hi <= 1")
        alo, ahi = self.crop_aspect
        if not (0.0 < alo <= ahi):
            raise ValueError("crop_aspect must be positive and ordered")
        if not (0.0 <= self.perspective_scale < 1.0):
            raise ValueError("perspective_scale must lie in [0, 1)")


def load_target(path, view: str = "") -> TargetImage:
    """Read a PNG or PGM file as grayscale in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return TargetImage(arr, view=view)


def mse_objective(rendered: RasterImage, target: TargetImage) -> ObjectiveResult:
    r = rendered.pixels
    t = target.pixels
    if r.shape != t.shape:
        raise ContractError(f"rendered {r.shape} vs target {t.shape}")
    diff = r - t
    loss = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    return ObjectiveResult(loss, grad)


@dataclass
class _ChamferPrecomp:
    """Target-only quantities: ink mask, distance transform, blurred ink."""

    ink: np.ndarray
    dt: np.ndarray
    blurred_ink: np.ndarray
    sigma: float


def _chamfer_precompute(target: TargetImage, blur_sigma: float,
                        threshold: float = 0.5) -> _ChamferPrecomp:
    if blur_sigma <= 0.0:
        raise ContractError("blur_sigma must be positive")
    ink = target.pixels < threshold
    if not ink.any():
        raise ContractError("empty target: no ink pixels below threshold")
    dt = ndimage.distance_transform_edt(~ink)
    blurred = ndimage.gaussian_filter(ink.astype(np.float64), blur_sigma,
                                      mode="constant", cval=0.0)
    return _ChamferPrecomp(ink, dt, blurred, blur_sigma)


def _chamfer_eval(rendered: RasterImage, pre: _ChamferPrecomp) -> ObjectiveResult:
    r = rendered.pixels
    if r.shape != pre.dt.shape:
        raise ContractError(f"rendered {r.shape} vs target {pre.dt.shape}")
    n = r.size
    ink = 1.0 - r
    stray = float(np.sum(ink * pre.dt)) / n
    blurred_r = ndimage.gaussian_filter(ink, pre.sigma, mode="constant", cval=0.0)
    deficit = float(np.sum(pre.ink * (pre.blurred_ink - blurred_r))) / n
    # both terms are linear in the rendered pixels; the kernels are fixed,
    # and the gaussian is self-adjoint under constant padding
    grad = (pre.blurred_ink - pre.dt) / n
    return ObjectiveResult(stray + deficit, grad)


def chamfer_objective(rendered: RasterImage, target: TargetImage,
                      blur_sigma: float, threshold: float = 0.5) -> ObjectiveResult:
    """Distance-transform matching: stray ink pays its distance to the
    target set; uncovered target ink pays a blurred coverage deficit."""
    return _chamfer_eval(rendered, _chamfer_precompute(target, blur_sigma, threshold))


# ---------------------------------------------------------------------------
# differentiable augmentation (perspective jitter + resized crop)
# ---------------------------------------------------------------------------

def _perspective_coeffs(src_quad, dst_quad):
    """Homography coefficients (a..h) with dst = map(src) for 4 point pairs."""
    mat = []
    rhs = []
    for (sx, sy), (dx, dy) in zip(src_quad, dst_quad):
        mat.append([sx, sy, 1, 0, 0, 0, -dx * sx, -dx * sy])
        mat.append([0, 0, 0, sx, sy, 1, -dy * sx, -dy * sy])
        rhs.extend([dx, dy])
    return np.linalg.solve(np.asarray(mat, dtype=np.float64),
                           np.asarray(rhs, dtype=np.float64))


def _sample_positions(h, w, params: AugmentParams, rng):
    """Source sampling position (index space) for every output pixel."""
    # perspective: corners pulled inward by up to scale * half-extent;
    # sampling maps distorted corners back onto the frame corners
    d = params.perspective_scale
    half_w, half_h = w / 2.0, h / 2.0
    for _ in range(100):
        jit = rng.uniform(0.0, 1.0, size=8)
        tl = (d * half_w * jit[0], d * half_h * jit[1])
        tr = (w - 1 - d * half_w * jit[2], d * half_h * jit[3])
        br = (w - 1 - d * half_w * jit[4], h - 1 - d * half_h * jit[5])
        bl = (d * half_w * jit[6], h - 1 - d * half_h * jit[7])
        corners = [(0.0, 0.0), (w - 1.0, 0.0), (w - 1.0, h - 1.0), (0.0, h - 1.0)]
        try:
            coeffs = _perspective_coeffs(corners, [tl, tr, br, bl])
            break
        except np.linalg.LinAlgError:
            continue
    else:
        raise RuntimeError("could not sample an invertible perspective warp")

    # resized crop: area fraction then log-uniform aspect, clamped to bounds;
    # a (1, 1) scale range pins the full frame so identity stays exact
    if params.crop_scale == (1.0, 1.0):
        cw, ch, left, top = w, h, 0, 0
    else:
        area = rng.uniform(*params.crop_scale) * h * w
        aspect = float(np.exp(rng.uniform(np.log(params.crop_aspect[0]),
                                          np.log(params.crop_aspect[1]))))
        cw = int(np.clip(round(np.sqrt(area * aspect)), 1, w))
        ch = int(np.clip(round(np.sqrt(area / aspect)), 1, h))
        left = int(rng.integers(0, w - cw + 1))
        top = int(rng.integers(0, h - ch + 1))

    jj, ii = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    if cw == w and left == 0:
        cx = jj
    else:
        cx = left + (jj + 0.5) * cw / w - 0.5
    if ch == h and top == 0:
        cy = ii
    else:
        cy = top + (ii + 0.5) * ch / h - 0.5

    if d == 0.0:
        return cx, cy
    a, b, c, dd, e, f, g, hh = coeffs
    den = g * cx + hh * cy + 1.0
    sx = (a * cx + b * cy + c) / den
    sy = (dd * cx + e * cy + f) / den
    return sx, sy


def augment(image: RasterImage, params: AugmentParams, rng):
    """Random perspective + resized crop via one bilinear resample.

    Returns (warped RasterImage, backward) where backward maps d(loss)/d(warped)
    to d(loss)/d(original) through the exact transpose of the sampling matrix.
    Samples landing outside the frame read the white background and carry no
    gradient. Identity parameters reproduce the input exactly.
    """
    img = image.pixels
    h, w = img.shape
    sx, sy = _sample_positions(h, w, params, rng)

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    weights = [
        (x0, y0, (1 - fx) * (1 - fy)),
        (x0 + 1, y0, fx * (1 - fy)),
        (x0, y0 + 1, (1 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ]
    out = np.zeros_like(img)
    taps = []
    covered = np.zeros_like(img)
    for xi, yi, wgt in weights:
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & (wgt > 0)
        xi_c = np.clip(xi, 0, w - 1)
        yi_c = np.clip(yi, 0, h - 1)
        contrib = np.where(inside, wgt, 0.0)
        out += contrib * img[yi_c, xi_c]
        covered += contrib
        taps.append((yi_c, xi_c, contrib))
    out += (1.0 - covered) * 1.0  # white fill for out-of-frame mass

    def backward(upstream):
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != (h, w):
            raise ContractError("augment backward: upstream shape mismatch")
        g = np.zeros_like(img)
        for yi_c, xi_c, contrib in taps:
            np.add.at(g, (yi_c.ravel(), xi_c.ravel()),
                      (contrib * upstream).ravel())
        return g

    return RasterImage(out, view=image.view), backward


# ---------------------------------------------------------------------------
# providers
# ---------------------------------------------------------------------------

class OfflineProvider:
    """Routes a view's request to the configured image-matching objective.

    Modes: "mse", "chamfer", or "scheduled" (chamfer-only attraction for the
    first `schedule_switch` fraction of the run, then mse + chamfer summed).
    The reported loss for scheduled mode is always mse + chamfer so the trace
    column stays one consistent quantity across the switch.
    """

    def __init__(self, targets: dict, modes=None, blur_sigma: float = 2.5,
                 schedule_switch: float = 0.6, threshold: float = 0.5):
        self.targets = dict(targets)
        self.modes = dict(modes or {})
        self.blur_sigma = blur_sigma
        self.schedule_switch = schedule_switch
        self.threshold = threshold
        self._chamfer = {}

    def _pre(self, view):
        if view not in self._chamfer:
            self._chamfer[view] = _chamfer_precompute(
                self.targets[view], self.blur_sigma, self.threshold)
        return self._chamfer[view]

    def evaluate(self, req: GradientRequest) -> ObjectiveResult:
        if req.view not in self.targets:
            raise ContractError(f"no target registered for view {req.view!r}")
        target = self.targets[req.view]
        rendered = RasterImage(req.image, view=req.view)
        mode = self.modes.get(req.view, "scheduled")
        if mode == "mse":
            return mse_objective(rendered, target)
        if mode == "chamfer":
            return _chamfer_eval(rendered, self._pre(req.view))
        if mode != "scheduled":
            raise ContractError(f"unknown objective mode {mode!r}")
        mse = mse_objective(rendered, target)
        cham = _chamfer_eval(rendered, self._pre(req.view))
        frac = req.iteration / max(1, req.total_iterations)
        grad = cham.grad if frac < self.schedule_switch else mse.grad + cham.grad
        return ObjectiveResult(mse.loss + cham.loss, grad)


def _encode_png_b64(image: np.ndarray) -> str:
    u8 = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_grad_b64(data: str, shape) -> np.ndarray:
    raw = base64.b64decode(data)
    expected = 4 * shape[0] * shape[1]
    if len(raw) != expected:
        raise BridgeProtocolError(
            f"gradient payload is {len(raw)} bytes, expected {expected}")
    grad = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    if not np.all(np.isfinite(grad)):
        raise BridgeProtocolError("bridge returned non-finite gradients")
    return grad


class BridgeProvider:
    """HTTP client for the gradient-server contract (POST /grad).

    Per-view prompts and visual conditions are fixed at construction; a
    request may still carry its own, which take precedence.
    """

    def __init__(self, endpoint: str, guidance_scale: float = 100.0,
                 seed: int = 0, timeout: float = 60.0, session=None,
                 prompts: dict | None = None, conditions: dict | None = None):
        self.endpoint = endpoint.rstrip("/")
        self.guidance_scale = guidance_scale
        self.seed = seed
        self.timeout = timeout
        self.session = session or requests.Session()
        self.prompts = dict(prompts or {})
        self.conditions = dict(conditions or {})

    def build_request(self, req: GradientRequest) -> dict:
        prompt = req.prompt if req.prompt is not None else self.prompts.get(req.view)
        condition = req.condition
        if condition is None:
            condition = self.conditions.get(req.view)
        if prompt is None and condition is None:
            raise ContractError(
                f"bridge request for view {req.view!r} needs a prompt or a condition")
        body = {
            "version": PROTOCOL_VERSION,
            "view": req.view,
            "image": _encode_png_b64(req.image),
            "prompt": prompt or "",
            "guidance_scale": self.guidance_scale,
            "iteration": req.iteration,
            "total_iterations": req.total_iterations,
            "seed": self.seed + req.iteration,
        }
        if condition is not None:
            body["condition"] = _encode_png_b64(condition)
        return body

    def evaluate(self, req: GradientRequest) -> ObjectiveResult:
        body = self.build_request(req)
        try:
            resp = self.session.post(f"{self.endpoint}/grad", json=body,
                                     timeout=self.timeout)
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise BridgeTransportError(f"bridge unreachable: {exc}") from exc
        if resp.status_code >= 500:
            raise BridgeTransportError(f"bridge error {resp.status_code}")
        if resp.status_code != 200:
            raise BridgeProtocolError(
                f"bridge rejected request: {resp.status_code} {resp.text[:200]}")
        try:
            payload = resp.json()
            grad = decode_grad_b64(payload["grad"], req.image.shape)
            loss = float(payload["loss_proxy"])
        except (KeyError, ValueError, json.JSONDecodeError) as exc:
            raise BridgeProtocolError(f"malformed bridge response: {exc}") from exc
        return ObjectiveResult(loss, grad)


class EchoStubProvider:
    """Test double for the bridge: gradient = rendered - condition image."""

    def __init__(self, conditions: dict):
        self.conditions = {k: np.asarray(v, dtype=np.float64)
                           for k, v in conditions.items()}

    def evaluate(self, req: GradientRequest) -> ObjectiveResult:
        cond = self.conditions.get(req.view)
        if cond is None and req.condition is not None:
            cond = np.asarray(req.condition, dtype=np.float64)
        if cond is None:
            raise ContractError(f"echo stub has no condition for view {req.view!r}")
        if cond.shape != req.image.shape:
            raise ContractError("echo stub: condition shape mismatch")
        diff = req.image - cond
        return ObjectiveResult(float(np.mean(diff * diff)), diff.copy())


def provider_dispatch(req: GradientRequest, mode: str, offline=None, bridge=None):
    """Route a request to the offline objectives or the bridge client."""
    if mode == "offline":
        if offline is None:
            raise ContractError("offline mode needs an OfflineProvider")
        return offline.evaluate(req)
    if mode == "bridge":
        if bridge is None:
            raise ContractError("bridge mode needs a BridgeProvider")
        return bridge.evaluate(req)
    raise ContractError(f"unknown provider mode {mode!r}")
