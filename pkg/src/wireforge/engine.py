"""The optimization loop.

Each step projects the wires onto every configured view, renders them,
asks that view's gradient provider for a per-pixel loss gradient, pulls it
back through the rasterizer and the projection onto the flat 3D control-point
vector, adds the weighted MST regularizer gradient on the wire endpoints,
and applies one Adam update. Offline single-threaded runs are bitwise
reproducible for a fixed (config, seed).

With mst_lambda == 0 the connectivity module is never invoked (the trace
logs a budget of 0.0 to mean "regularizer inactive"); `RunState.mst_evals`
counts actual invocations so tests can assert that.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import connectivity, geometry, rasterizer
from .geometry import ProjectionMap, ViewPlane, Window, WireArt, axis_view_planes
from .objectives import (
    AugmentParams,
    BridgeTransportError,
    GradientRequest,
    augment,
)
from .rasterizer import Canvas, RasterImage


class NumericalAbortError(RuntimeError):
    """A non-finite gradient was detected; names the offending view/module."""


class BridgeAbortError(RuntimeError):
    """The bridge stayed unreachable through all retries."""


@dataclass(frozen=True)
class OptimConfig:
    n_wires: int = 30
    segments_per_wire: int = 5
    canvas: Canvas = field(default_factory=lambda: Canvas(256, 256, stroke_width=3.0))
    iterations: int = 2000
    learning_rate: float = 0.01
    mst_lambda: float = 50.0
    guidance_scale: float = 100.0
    seed: int = 0
    views: tuple = ("X", "Y", "Z")
    view_weights: tuple = None
    objective_modes: dict = None  # view -> "mse" | "chamfer" | "scheduled"
    mode: str = "offline"  # "offline" | "bridge"
    augment_params: AugmentParams = None
    augment_draws: int = 2
    augment_enabled: bool = None  # None = auto: off offline, on bridge
    init_radius: float = 0.08
    init_root_extent: float = 0.65
    log_every: int = 50
    grad_clip_norm: float = None  # None = auto: off offline, 10 in bridge mode
    window: Window = field(default_factory=Window)
    bridge_retries: int = 5
    bridge_backoff_s: float = 0.5

    def __post_init__(self):
        if self.n_wires < 1:
            raise ValueError("n_wires must be >= 1")
        if self.segments_per_wire < 1:
            raise ValueError("segments_per_wire must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.mst_lambda < 0.0:
            raise ValueError("mst_lambda must be >= 0")
        if not self.views or any(v not in ("X", "Y", "Z") for v in self.views):
            raise ValueError("views must be a non-empty subset of X, Y, Z")
        if self.view_weights is None:
            object.__setattr__(self, "view_weights", tuple(1.0 for _ in self.views))
        if len(self.view_weights) != len(self.views):
            raise ValueError("view_weights must match views")
        if self.augment_params is None:
            object.__setattr__(self, "augment_params", AugmentParams())

    @property
    def augmentation_on(self) -> bool:
        if self.augment_enabled is None:
            return self.mode == "bridge"
        return bool(self.augment_enabled)

    @property
    def clip_norm(self) -> float:
        if self.grad_clip_norm is None:
            return 10.0 if self.mode == "bridge" else 0.0
        return float(self.grad_clip_norm)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_points(cls, points) -> "AdamState":
        return cls(np.zeros_like(points), np.zeros_like(points))


@dataclass
class TraceRecord:
    iteration: int
    view_losses: dict
    mst_budget: float
    total: float
    ms: float


@dataclass
class RunState:
    art: WireArt
    adam: AdamState
    rng: np.random.Generator
    iteration: int = 0
    mst_evals: int = 0


def initialize(config: OptimConfig) -> WireArt:
    """Random wires: a uniform root point, then a Gaussian walk per control
    point, clamped to the scene cube. Deterministic under config.seed."""
    rng = np.random.default_rng(config.seed)
    n_pts = 3 * config.segments_per_wire + 1
    all_pts = np.empty((config.n_wires * n_pts, 3))
    e = config.init_root_extent
    for i in range(config.n_wires):
        root = rng.uniform(-e, e, size=3)
        steps = rng.normal(0.0, config.init_radius, size=(n_pts - 1, 3))
        walk = np.concatenate([np.zeros((1, 3)), np.cumsum(steps, axis=0)])
        all_pts[i * n_pts : (i + 1) * n_pts] = root + walk
    np.clip(all_pts, -1.0, 1.0, out=all_pts)
    return WireArt.from_segment_counts(
        all_pts, [config.segments_per_wire] * config.n_wires)


def adam_update(adam: AdamState, points: np.ndarray, grad: np.ndarray,
                lr: float) -> None:
    """One in-place Adam step with bias correction."""
    if grad.shape != points.shape:
        raise ValueError("gradient/parameter shape mismatch")
    adam.step += 1
    adam.m = adam.beta1 * adam.m + (1.0 - adam.beta1) * grad
    adam.v = adam.beta2 * adam.v + (1.0 - adam.beta2) * grad * grad
    mhat = adam.m / (1.0 - adam.beta1 ** adam.step)
    vhat = adam.v / (1.0 - adam.beta2 ** adam.step)
    points -= lr * mhat / (np.sqrt(vhat) + adam.eps)


def _pixel_controls(art: WireArt, plane: ViewPlane, window: Window, canvas: Canvas):
    """Project every control point and regroup into per-wire (S, 4, 2) arrays."""
    pmap = ProjectionMap.from_plane(plane, window)
    pts01 = pmap.apply(art.points)
    scale, offset = rasterizer.pixel_transform(canvas)
    ptspx = pts01 * scale + offset
    wires2d = [ptspx[art.ctrl_index(i)] for i in range(art.n_wires)]
    return pmap, scale, wires2d


def _collect_point_grads(art: WireArt, g2d_list, pmap: ProjectionMap, scale):
    """Scatter per-segment 2D control gradients back onto the flat 3D points.

    Shared chain points receive both adjacent segments' contributions.
    """
    gpx = np.zeros((art.n_points, 2))
    for i, g in enumerate(g2d_list):
        np.add.at(gpx, art.ctrl_index(i), g)
    g01 = gpx * scale  # pixel -> canvas-normalized (undoes the y flip)
    return pmap.adjoint(g01)


def _evaluate_with_retry(provider, req: GradientRequest, config: OptimConfig):
    attempts = config.bridge_retries if config.mode == "bridge" else 0
    delay = config.bridge_backoff_s
    for attempt in range(attempts + 1):
        try:
            return provider.evaluate(req)
        except BridgeTransportError:
            if attempt == attempts:
                raise BridgeAbortError(
                    f"bridge still unreachable after {attempts} retries")
            time.sleep(delay)
            delay *= 2.0
    raise AssertionError("unreachable")


@dataclass
class StepGradient:
    """The assembled gradient and its parts, for additivity checks."""

    total: np.ndarray
    view_losses: dict
    view_grads: dict
    mst_budget: float
    mst_grad: np.ndarray


def view_gradient(state: RunState, config: OptimConfig, provider, view: str,
                  plane: ViewPlane):
    """Gradient of one view's objective w.r.t. the flat control points.

    Returns (grad (P, 3), loss, rendered RasterImage). Prompts and visual
    conditions live on the provider; the request carries view and schedule.
    """
    art = state.art
    canvas = config.canvas
    pmap, scale, wires2d = _pixel_controls(art, plane, config.window, canvas)
    image = rasterizer.render(wires2d, canvas, view=view)

    if config.augmentation_on and config.augment_draws > 0:
        upstream = np.zeros_like(image.pixels)
        loss = 0.0
        for _ in range(config.augment_draws):
            warped, back = augment(image, config.augment_params, state.rng)
            req = GradientRequest(view, warped.pixels,
                                  iteration=state.iteration,
                                  total_iterations=config.iterations)
            res = _evaluate_with_retry(provider, req, config)
            upstream += back(res.grad)
            loss += res.loss
        upstream /= config.augment_draws
        loss /= config.augment_draws
    else:
        req = GradientRequest(view, image.pixels,
                              iteration=state.iteration,
                              total_iterations=config.iterations)
        res = _evaluate_with_retry(provider, req, config)
        upstream = res.grad
        loss = res.loss

    if not np.all(np.isfinite(upstream)):
        raise NumericalAbortError(
            f"non-finite objective gradient from view {view} (objectives)")
    g2d_list = rasterizer.render_backward(wires2d, canvas, upstream)
    g3 = _collect_point_grads(art, g2d_list, pmap, scale)
    if not np.all(np.isfinite(g3)):
        raise NumericalAbortError(
            f"non-finite gradient from view {view} (rasterizer/geometry chain)")
    return g3, float(loss), image


def compute_gradient(state: RunState, config: OptimConfig, provider,
                     planes=None) -> StepGradient:
    """Assemble the step gradient: weighted view sum + lambda * MST grad."""
    planes = planes or axis_view_planes()
    total = np.zeros_like(state.art.points)
    view_losses = {}
    view_grads = {}
    for view, weight in zip(config.views, config.view_weights):
        g3, loss, _ = view_gradient(state, config, provider, view, planes[view])
        view_grads[view] = weight * g3
        view_losses[view] = loss
        total += weight * g3
    budget = 0.0
    mst_grad = np.zeros_like(total)
    if config.mst_lambda > 0.0 and state.art.n_wires > 1:
        budget, mst_grad, _ = connectivity.mst_loss_and_grad(state.art)
        state.mst_evals += 1
        if not np.all(np.isfinite(mst_grad)):
            raise NumericalAbortError("non-finite gradient from connectivity")
        total = total + config.mst_lambda * mst_grad
    return StepGradient(total, view_losses, view_grads, budget, mst_grad)


def _record(state, config, view_losses, budget, t0) -> TraceRecord:
    total = sum(w * view_losses[v]
                for v, w in zip(config.views, config.view_weights))
    total += config.mst_lambda * budget
    ms = (time.perf_counter() - t0) * 1000.0
    return TraceRecord(state.iteration, view_losses, budget, total, ms)


def step(state: RunState, config: OptimConfig, provider, planes=None) -> TraceRecord:
    """One optimization step; mutates state in place.

    The returned record carries the pre-update iteration index and the losses
    evaluated at the pre-update points, so record 0 describes the initial art.
    """
    t0 = time.perf_counter()
    sg = compute_gradient(state, config, provider, planes)
    grad = sg.total
    clip = config.clip_norm
    if clip > 0.0:
        norm = float(np.linalg.norm(grad))
        if norm > clip:
            grad = grad * (clip / norm)
    rec = _record(state, config, sg.view_losses, sg.mst_budget, t0)
    adam_update(state.adam, state.art.points, grad, config.learning_rate)
    state.iteration += 1
    return rec


def evaluate_trace(state: RunState, config: OptimConfig, provider,
                   planes=None) -> TraceRecord:
    """Losses and budget at the current points, without stepping."""
    t0 = time.perf_counter()
    planes = planes or axis_view_planes()
    view_losses = {}
    for view in config.views:
        _, loss, _ = view_gradient(state, config, provider, view, planes[view])
        view_losses[view] = loss
    budget = 0.0
    if config.mst_lambda > 0.0 and state.art.n_wires > 1:
        budget, _, _ = connectivity.mst_loss_and_grad(state.art)
        state.mst_evals += 1
    return _record(state, config, view_losses, budget, t0)


def run(config: OptimConfig, provider, *, planes=None, cancel=None,
        snapshot_dir=None, snapshot_every: int = 0):
    """Run the full loop. Returns (final WireArt, list of TraceRecord).

    The trace holds one record per log_every steps (starting at iteration 0)
    plus a final evaluation-only record at `iterations`. `cancel` is an
    optional zero-argument callable checked between steps; returning True
    stops the run after the current step.
    """
    art = initialize(config)
    state = RunState(art, AdamState.for_points(art.points),
                     np.random.default_rng(config.seed + 1))
    trace = []
    planes = planes or axis_view_planes()
    if snapshot_dir is not None and snapshot_every > 0:
        _snapshot(state, config, planes, snapshot_dir)
    for it in range(config.iterations):
        rec = step(state, config, provider, planes)
        if config.log_every > 0 and it % config.log_every == 0:
            trace.append(rec)
        if snapshot_dir is not None and snapshot_every > 0 and \
                state.iteration % snapshot_every == 0:
            _snapshot(state, config, planes, snapshot_dir)
        if cancel is not None and cancel():
            break
    trace.append(evaluate_trace(state, config, provider, planes))
    return state.art, trace


def _snapshot(state: RunState, config: OptimConfig, planes, snapshot_dir):
    import os

    os.makedirs(snapshot_dir, exist_ok=True)
    for view in config.views:
        _, _, wires2d = _pixel_controls(state.art, planes[view], config.window,
                                        config.canvas)
        img = rasterizer.render(wires2d, config.canvas, view=view)
        rasterizer.save_png(
            img, os.path.join(snapshot_dir, f"iter_{state.iteration:06d}_{view}.png"))


def render_views(art: WireArt, config: OptimConfig, planes=None) -> dict:
    """Render every configured view of an art; used by exports and tests."""
    planes = planes or axis_view_planes()
    out = {}
    for view in config.views:
        _, _, wires2d = _pixel_controls(art, planes[view], config.window,
                                        config.canvas)
        out[view] = rasterizer.render(wires2d, config.canvas, view=view)
    return out


TRACE_HEADER = "iter,loss_x,loss_y,loss_z,mst_budget,total,ms"


def write_trace_csv(trace, path) -> None:
    """Trace rows as CSV; absent views log 0.0 in their loss column."""
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write(TRACE_HEADER + "\n")
        for rec in trace:
            lx = rec.view_losses.get("X", 0.0)
            ly = rec.view_losses.get("Y", 0.0)
            lz = rec.view_losses.get("Z", 0.0)
            f.write(f"{rec.iteration},{lx!r},{ly!r},{lz!r},"
                    f"{rec.mst_budget!r},{rec.total!r},{rec.ms:.3f}\n")


def write_checkpoint(art: WireArt, path) -> None:
    import json

    with open(path, "w", encoding="ascii") as f:
        json.dump(art.to_json_dict(), f)
