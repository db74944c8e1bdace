"""Command-line entry point.

A run is described by one INI-style spec file (sections of key = value); the
command line only carries overrides. Parsing materializes every default into
a RunSpec and echoes it as resolved_config.ini in the output directory, so a
finished run can be reproduced from its artifacts alone.

Exit codes: 0 success, 2 validation failure, 3 bridge failure, 4 numerical
abort.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import signal
import sys
from dataclasses import dataclass, field

import numpy as np

from . import engine, geometry, rasterizer
from .engine import BridgeAbortError, NumericalAbortError, OptimConfig
from .geometry import Window, WireArt, axis_view_planes
from .objectives import (
    AugmentParams,
    BridgeProtocolError,
    BridgeProvider,
    ContractError,
    OfflineProvider,
    load_target,
)
from .rasterizer import Canvas

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_BRIDGE = 3
EXIT_NUMERIC = 4

VIEWS = ("X", "Y", "Z")


class SpecValidationError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


# every recognized key with its (type, default); None default = required or
# computed. Types: i=int, f=float, b=bool, s=string
_SCHEMA = {
    "run": {
        "mode": ("s", "offline"),
        "out": ("s", "out"),
        "seed": ("i", 0),
        "iterations": ("i", 2000),
        "learning_rate": ("f", 0.01),
        "lambda": ("f", 50.0),
        "log_every": ("i", 50),
        "grad_clip_norm": ("f", -1.0),  # -1 = auto (off offline, 10 bridge)
    },
    "wires": {
        "count": ("i", 30),
        "segments": ("i", 5),
        "init_radius": ("f", 0.08),
        "init_root_extent": ("f", 0.65),
    },
    "canvas": {
        "width": ("i", 256),
        "height": ("i", 256),
        "stroke_width": ("f", 4.0),
        "aa_width": ("f", 1.0),
        "samples_per_segment": ("i", 0),
    },
    "objective": {
        "schedule_switch": ("f", 0.6),
        "chamfer_blur_sigma": ("f", 2.5),
        "binarize_threshold": ("f", 0.5),
    },
    "augment": {
        "enabled": ("s", "auto"),
        "perspective_scale": ("f", 0.5),
        "crop_lo": ("f", 0.8),
        "crop_hi": ("f", 1.0),
        "aspect_lo": ("f", 0.9),
        "aspect_hi": ("f", 1.1),
        "draws": ("i", 2),
    },
    "bridge": {
        "endpoint": ("s", ""),
        "guidance_scale": ("f", 100.0),
        "timeout_s": ("f", 60.0),
        "retries": ("i", 5),
        "backoff_s": ("f", 0.5),
    },
    "export": {
        "svg": ("b", True),
        "obj": ("b", True),
        "snapshots": ("b", True),
        "snapshot_every": ("i", 500),
        "obj_samples": ("i", 24),
    },
}
_VIEW_KEYS = {"target": ("s", ""), "prompt": ("s", ""), "condition": ("s", ""),
              "objective": ("s", "scheduled"), "weight": ("f", 1.0)}


@dataclass
class RunSpec:
    values: dict  # section -> key -> typed value
    views: dict  # view -> key -> typed value
    base_dir: str

    def __eq__(self, other):
        return (self.values, self.views) == (other.values, other.views)

    @property
    def mode(self) -> str:
        return self.values["run"]["mode"]

    @property
    def out_dir(self) -> str:
        return self.values["run"]["out"]

    def to_optim_config(self) -> OptimConfig:
        v = self.values
        aug_enabled = {"auto": None, "true": True, "false": False}[
            v["augment"]["enabled"]]
        clip = v["run"]["grad_clip_norm"]
        return OptimConfig(
            n_wires=v["wires"]["count"],
            segments_per_wire=v["wires"]["segments"],
            canvas=Canvas(v["canvas"]["width"], v["canvas"]["height"],
                          v["canvas"]["stroke_width"], v["canvas"]["aa_width"],
                          v["canvas"]["samples_per_segment"]),
            iterations=v["run"]["iterations"],
            learning_rate=v["run"]["learning_rate"],
            mst_lambda=v["run"]["lambda"],
            guidance_scale=v["bridge"]["guidance_scale"],
            seed=v["run"]["seed"],
            views=VIEWS,
            view_weights=tuple(self.views[name]["weight"] for name in VIEWS),
            objective_modes={name: self.views[name]["objective"]
                             for name in VIEWS},
            mode=v["run"]["mode"],
            augment_params=AugmentParams(
                perspective_scale=v["augment"]["perspective_scale"],
                crop_scale=(v["augment"]["crop_lo"], v["augment"]["crop_hi"]),
                crop_aspect=(v["augment"]["aspect_lo"], v["augment"]["aspect_hi"]),
                seed=v["run"]["seed"]),
            augment_draws=v["augment"]["draws"],
            augment_enabled=aug_enabled,
            init_radius=v["wires"]["init_radius"],
            init_root_extent=v["wires"]["init_root_extent"],
            log_every=v["run"]["log_every"],
            grad_clip_norm=None if clip < 0 else clip,
            bridge_retries=v["bridge"]["retries"],
            bridge_backoff_s=v["bridge"]["backoff_s"],
        )


def _convert(raw: str, kind: str, where: str, problems: list):
    try:
        if kind == "i":
            return int(raw)
        if kind == "f":
            return float(raw)
        if kind == "b":
            low = raw.strip().lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return raw.strip()
    except ValueError as exc:
        problems.append(f"{where}: {exc}")
        return None


def parse_spec(path) -> RunSpec:
    """Parse and validate a run spec, reporting every problem at once."""
    if not os.path.isfile(path):
        raise SpecValidationError([f"spec file not found: {path}"])
    cp = configparser.ConfigParser()
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise SpecValidationError([f"{path}: {exc}"])

    problems = []
    base_dir = os.path.dirname(os.path.abspath(path))
    values = {sec: {k: d for k, (_, d) in keys.items()}
              for sec, keys in _SCHEMA.items()}
    views = {name: {k: d for k, (_, d) in _VIEW_KEYS.items()} for name in VIEWS}

    for sec in cp.sections():
        if sec in _SCHEMA:
            for key, raw in cp.items(sec):
                if key not in _SCHEMA[sec]:
                    problems.append(f"[{sec}] {key}: unknown key")
                    continue
                got = _convert(raw, _SCHEMA[sec][key][0], f"[{sec}] {key}", problems)
                if got is not None:
                    values[sec][key] = got
        elif sec.startswith("view.") and sec[5:] in VIEWS:
            name = sec[5:]
            for key, raw in cp.items(sec):
                if key not in _VIEW_KEYS:
                    problems.append(f"[{sec}] {key}: unknown key")
                    continue
                got = _convert(raw, _VIEW_KEYS[key][0], f"[{sec}] {key}", problems)
                if got is not None:
                    views[name][key] = got
        else:
            problems.append(f"[{sec}]: unknown section")

    mode = values["run"]["mode"]
    if mode not in ("offline", "bridge"):
        problems.append(f"[run] mode: must be offline or bridge, got {mode!r}")

    present = [name for name in VIEWS if cp.has_section(f"view.{name}")]
    if len(present) != 3:
        problems.append(
            f"exactly 3 views required ([view.X] [view.Y] [view.Z]); "
            f"found {len(present)}: {present}")

    for name in VIEWS:
        vv = views[name]
        if vv["target"]:
            vv["target"] = os.path.normpath(os.path.join(base_dir, vv["target"]))
        if vv["condition"]:
            vv["condition"] = os.path.normpath(
                os.path.join(base_dir, vv["condition"]))
        if name not in present:
            continue
        if mode == "offline":
            if not vv["target"]:
                problems.append(f"[view.{name}] target: required in offline mode")
            elif not os.path.isfile(vv["target"]):
                problems.append(f"[view.{name}] target: unreadable file "
                                f"{vv['target']}")
        else:
            if not vv["prompt"] and not vv["condition"]:
                problems.append(
                    f"[view.{name}]: bridge mode needs a prompt or a condition")
        if vv["objective"] not in ("mse", "chamfer", "scheduled"):
            problems.append(f"[view.{name}] objective: unknown mode "
                            f"{vv['objective']!r}")
    if mode == "bridge" and not values["bridge"]["endpoint"]:
        problems.append("[bridge] endpoint: required in bridge mode")

    for check, msg in [
        (values["run"]["iterations"] >= 0, "[run] iterations: must be >= 0"),
        (values["run"]["learning_rate"] > 0, "[run] learning_rate: must be > 0"),
        (values["run"]["lambda"] >= 0, "[run] lambda: must be >= 0"),
        (values["wires"]["count"] >= 1, "[wires] count: must be >= 1"),
        (values["wires"]["segments"] >= 1, "[wires] segments: must be >= 1"),
        (0 < values["augment"]["crop_lo"] <= values["augment"]["crop_hi"] <= 1,
         "[augment] crop range: need 0 < lo <= hi <= 1"),
    ]:
        if not check:
            problems.append(msg)

    if problems:
        raise SpecValidationError(problems)
    values["run"]["out"] = os.path.normpath(
        os.path.join(base_dir, values["run"]["out"]))
    return RunSpec(values, views, base_dir)


def write_resolved_spec(spec: RunSpec, path) -> None:
    """Echo the spec with every default materialized; parses back identically."""
    cp = configparser.ConfigParser()
    for sec, keys in spec.values.items():
        cp[sec] = {}
        for key, val in keys.items():
            cp[sec][key] = repr(val) if isinstance(val, float) else str(val)
    for name in VIEWS:
        sec = f"view.{name}"
        cp[sec] = {}
        for key, val in spec.views[name].items():
            cp[sec][key] = repr(val) if isinstance(val, float) else str(val)
    with open(path, "w", encoding="ascii") as f:
        cp.write(f)


def export_svg(wires2d, canvas: Canvas, path) -> None:
    """SVG 1.1, one path per wire, cubic C commands, 6 decimals, y down."""
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{canvas.width}" height="{canvas.height}" '
        f'viewBox="0 0 {canvas.width} {canvas.height}">',
        f'<rect width="{canvas.width}" height="{canvas.height}" fill="white"/>',
    ]
    for ctrl in wires2d:
        ctrl = np.asarray(ctrl, dtype=np.float64)
        d = [f"M {ctrl[0, 0, 0]:.6f} {ctrl[0, 0, 1]:.6f}"]
        for seg in ctrl:
            d.append(f"C {seg[1, 0]:.6f} {seg[1, 1]:.6f}, "
                     f"{seg[2, 0]:.6f} {seg[2, 1]:.6f}, "
                     f"{seg[3, 0]:.6f} {seg[3, 1]:.6f}")
        lines.append(
            f'<path d="{" ".join(d)}" fill="none" stroke="black" '
            f'stroke-width="{canvas.stroke_width}" stroke-linecap="round"/>')
    lines.append("</svg>")
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def export_obj(art: WireArt, samples_per_segment: int, path) -> None:
    """OBJ polylines: v per flattened vertex, one l element per wire."""
    if samples_per_segment < 2:
        raise ValueError("samples_per_segment must be >= 2")
    t = np.linspace(0.0, 1.0, samples_per_segment)
    weights = geometry.bernstein3(t)
    out = []
    index = 1
    l_lines = []
    for wire in art.wires:
        ids = []
        for k in range(wire.n_segments):
            verts = weights @ wire.segment(k)
            if k > 0:
                verts = verts[1:]  # chain point already emitted
            for vtx in verts:
                out.append(f"v {vtx[0]:.6f} {vtx[1]:.6f} {vtx[2]:.6f}")
                ids.append(index)
                index += 1
        l_lines.append("l " + " ".join(str(i) for i in ids))
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(out + l_lines) + "\n")


def pixel_wires(art: WireArt, view: str, config: OptimConfig):
    """Final projected control points in pixel space for one view."""
    plane = axis_view_planes()[view]
    pmap = geometry.ProjectionMap.from_plane(plane, config.window)
    pts01 = pmap.apply(art.points)
    ptspx = rasterizer.to_pixel_space(pts01, config.canvas)
    return [ptspx[art.ctrl_index(i)] for i in range(art.n_wires)]


def write_bundle(spec: RunSpec, config: OptimConfig, art: WireArt, trace,
                 out_dir) -> None:
    with open(os.path.join(out_dir, "final_wireart.json"), "w",
              encoding="ascii") as f:
        json.dump(art.to_json_dict(), f)
    engine.write_trace_csv(trace, os.path.join(out_dir, "trace.csv"))
    exp = spec.values["export"]
    if exp["svg"]:
        for view in VIEWS:
            export_svg(pixel_wires(art, view, config), config.canvas,
                       os.path.join(out_dir, f"view_{view}.svg"))
    if exp["obj"]:
        export_obj(art, exp["obj_samples"], os.path.join(out_dir, "wireart.obj"))
    for view, img in engine.render_views(art, config).items():
        rasterizer.save_png(img, os.path.join(out_dir, f"final_{view}.png"))


def build_provider(spec: RunSpec, config: OptimConfig):
    if spec.mode == "offline":
        targets = {}
        for name in VIEWS:
            t = load_target(spec.views[name]["target"], view=name)
            if t.pixels.shape != (config.canvas.height, config.canvas.width):
                raise SpecValidationError(
                    [f"[view.{name}] target: size {t.pixels.shape} does not "
                     f"match canvas {(config.canvas.height, config.canvas.width)}"])
            targets[name] = t
        return OfflineProvider(
            targets,
            modes=config.objective_modes,
            blur_sigma=spec.values["objective"]["chamfer_blur_sigma"],
            schedule_switch=spec.values["objective"]["schedule_switch"],
            threshold=spec.values["objective"]["binarize_threshold"])
    conditions = {}
    for name in VIEWS:
        if spec.views[name]["condition"]:
            conditions[name] = load_target(
                spec.views[name]["condition"], view=name).pixels
    return BridgeProvider(
        spec.values["bridge"]["endpoint"],
        guidance_scale=config.guidance_scale,
        seed=config.seed,
        timeout=spec.values["bridge"]["timeout_s"],
        prompts={name: spec.views[name]["prompt"] for name in VIEWS
                 if spec.views[name]["prompt"]},
        conditions=conditions)


def cmd_run(args) -> int:
    spec = parse_spec(args.spec)
    for key, val in (("seed", args.seed), ("iterations", args.iterations),
                     ("lambda", getattr(args, "lambda"))):
        if val is not None:
            spec.values["run"][key] = val
    if args.out is not None:
        spec.values["run"]["out"] = os.path.abspath(args.out)
    if args.mode is not None:
        spec.values["run"]["mode"] = args.mode

    config = spec.to_optim_config()
    out_dir = spec.out_dir
    os.makedirs(out_dir, exist_ok=True)
    write_resolved_spec(spec, os.path.join(out_dir, "resolved_config.ini"))
    provider = build_provider(spec, config)

    interrupted = {"flag": False}

    def on_sigint(signum, frame):
        interrupted["flag"] = True
        print("interrupt: will checkpoint and exit after this step",
              file=sys.stderr)

    previous = signal.signal(signal.SIGINT, on_sigint)
    try:
        snap_dir = os.path.join(out_dir, "snapshots") if \
            spec.values["export"]["snapshots"] else None
        art, trace = engine.run(
            config, provider,
            cancel=lambda: interrupted["flag"],
            snapshot_dir=snap_dir,
            snapshot_every=spec.values["export"]["snapshot_every"])
    finally:
        signal.signal(signal.SIGINT, previous)

    if interrupted["flag"]:
        engine.write_checkpoint(art, os.path.join(out_dir, "checkpoint.json"))
        engine.write_trace_csv(trace, os.path.join(out_dir, "trace.csv"))
        print(f"cancelled; checkpoint written to {out_dir}/checkpoint.json")
        return EXIT_OK
    write_bundle(spec, config, art, trace, out_dir)
    print(f"done; artifacts in {out_dir}")
    return EXIT_OK


def cmd_export(args) -> int:
    with open(args.wireart, encoding="ascii") as f:
        art = WireArt.from_json_dict(json.load(f))
    canvas = Canvas(args.width, args.height, args.stroke_width)
    config = OptimConfig(n_wires=art.n_wires,
                         segments_per_wire=art.wires[0].n_segments,
                         canvas=canvas, iterations=1)
    os.makedirs(args.out, exist_ok=True)
    wrote = []
    if args.svg:
        for view in VIEWS:
            path = os.path.join(args.out, f"view_{view}.svg")
            export_svg(pixel_wires(art, view, config), canvas, path)
            wrote.append(path)
    if args.obj:
        path = os.path.join(args.out, "wireart.obj")
        export_obj(art, args.obj_samples, path)
        wrote.append(path)
    if not wrote:
        print("nothing to export: pass --svg and/or --obj", file=sys.stderr)
        return EXIT_VALIDATION
    for p in wrote:
        print(p)
    return EXIT_OK


def cmd_check(args) -> int:
    """Fast invariant self-test; a slimmed-down version of the test suite."""
    from . import connectivity
    from .objectives import TargetImage, mse_objective

    rng = np.random.default_rng(12345)
    failures = []

    def check(name, ok):
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
        if not ok:
            failures.append(name)

    # projection equivalence
    worst = 0.0
    ts = np.linspace(0, 1, 11)
    for _ in range(100):
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        u, v = q[:, 0], q[:, 1]
        n = np.cross(u, v)
        plane = geometry.ViewPlane(n / np.linalg.norm(n), rng.normal(size=3), u, v)
        seg = rng.normal(size=(4, 3)) * 2
        seg2d = geometry.project_point(seg, plane)
        for t in ts:
            lhs = geometry.project_point(geometry.bezier_point(seg, t), plane)
            rhs = geometry.bezier_point(seg2d, t)
            worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    check(f"projection equivalence (worst {worst:.2e})", worst < 1e-9)

    # projection adjoint
    ok = True
    for _ in range(50):
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        u, v = q[:, 0], q[:, 1]
        n = np.cross(u, v)
        plane = geometry.ViewPlane(n / np.linalg.norm(n), rng.normal(size=3), u, v)
        pmap = geometry.ProjectionMap.from_plane(plane)
        d3 = rng.normal(size=3)
        g2 = rng.normal(size=2)
        ok = ok and abs(float(g2 @ (pmap.matrix @ d3))
                        - float(pmap.adjoint(g2) @ d3)) < 1e-12
    check("projection adjoint exactness", ok)

    # MST against brute force on small graphs
    from itertools import product
    ok = True
    for _ in range(50):
        nv = int(rng.integers(2, 6))
        w = rng.uniform(0.1, 10, size=(nv, nv))
        w = (w + w.T) / 2
        ww = w.copy()
        np.fill_diagonal(ww, np.inf)
        got = connectivity.prim_mst(
            connectivity.WireGraph(ww, np.zeros_like(w, dtype=np.int64)))
        best = np.inf
        if nv == 2:
            best = w[0, 1]
        else:
            for seq in product(range(nv), repeat=nv - 2):
                deg = [1] * nv
                for x in seq:
                    deg[x] += 1
                edges, leaves = [], sorted(i for i in range(nv) if deg[i] == 1)
                for x in seq:
                    leaf = leaves.pop(0)
                    edges.append((leaf, x))
                    deg[x] -= 1
                    if deg[x] == 1:
                        import bisect
                        bisect.insort(leaves, x)
                edges.append((leaves[0], leaves[1]))
                best = min(best, sum(w[i, j] for i, j in edges))
        ok = ok and abs(got.total_weight - best) < 1e-9
    check("prim vs spanning-tree enumeration", ok)

    # rasterizer gradient spot check
    from .rasterizer import Canvas as Cv
    cv = Cv(64, 64, stroke_width=4.0)
    ok = True
    tried = 0
    for _ in range(10):
        ctrl = rng.uniform(10, 54, size=(1, 4, 2))
        img = rasterizer.render([ctrl], cv).pixels
        band = (img > 0.05) & (img < 0.95)
        ys, xs = np.nonzero(band)
        if ys.size == 0:
            continue
        tried += 1
        up = np.zeros_like(img)
        up[ys[0], xs[0]] = 1.0
        g = rasterizer.render_backward([ctrl], cv, up)[0]
        h = 1e-4
        ci = int(rng.integers(0, 4))
        moved_p = [ctrl.copy()]
        moved_p[0][0, ci, 0] += h
        moved_m = [ctrl.copy()]
        moved_m[0][0, ci, 0] -= h
        fd = (float(np.sum(up * rasterizer.render(moved_p, cv).pixels))
              - float(np.sum(up * rasterizer.render(moved_m, cv).pixels))) / (2 * h)
        an = float(g[0, ci, 0])
        if max(abs(fd), abs(an)) > 1e-7:
            ok = ok and abs(fd - an) <= 2e-3 * max(abs(fd), abs(an))
    check(f"rasterizer gradient spot check ({tried} probes)", ok and tried >= 5)

    # wireart json round trip
    cfg = OptimConfig(n_wires=3, segments_per_wire=2, canvas=cv, iterations=1)
    art = engine.initialize(cfg)
    clone = WireArt.from_json_dict(
        json.loads(json.dumps(art.to_json_dict())))
    check("wireart json round trip",
          np.array_equal(clone.points, art.points))

    # objective gradient sanity
    img = rasterizer.RasterImage(rng.uniform(0, 1, size=(32, 32)))
    tgt = TargetImage(rng.uniform(0, 1, size=(32, 32)))
    res = mse_objective(img, tgt)
    check("mse objective at identical images",
          mse_objective(img, TargetImage(img.pixels.copy())).loss == 0.0
          and np.isfinite(res.loss))

    if failures:
        print(f"{len(failures)} self-test(s) failed", file=sys.stderr)
        return EXIT_NUMERIC
    print("all self-tests passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wireforge",
                                description="multi-view wire art synthesis")
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("run", help="optimize a wire art from a run spec")
    pr.add_argument("spec")
    pr.add_argument("--seed", type=int)
    pr.add_argument("--lambda", dest="lambda", type=float)
    pr.add_argument("--iterations", type=int)
    pr.add_argument("--out")
    pr.add_argument("--mode", choices=["offline", "bridge"])
    pr.set_defaults(func=cmd_run)

    pe = sub.add_parser("export", help="re-export artifacts from a wireart json")
    pe.add_argument("wireart")
    pe.add_argument("--svg", action="store_true")
    pe.add_argument("--obj", action="store_true")
    pe.add_argument("--out", default=".")
    pe.add_argument("--width", type=int, default=256)
    pe.add_argument("--height", type=int, default=256)
    pe.add_argument("--stroke-width", type=float, default=4.0)
    pe.add_argument("--obj-samples", type=int, default=24)
    pe.set_defaults(func=cmd_export)

    pc = sub.add_parser("check", help="run the invariant self-test suite")
    pc.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SpecValidationError as exc:
        for line in exc.problems:
            print(f"spec error: {line}", file=sys.stderr)
        return EXIT_VALIDATION
    except ContractError as exc:
        print(f"contract error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (BridgeAbortError, BridgeProtocolError) as exc:
        print(f"bridge failure: {exc}", file=sys.stderr)
        return EXIT_BRIDGE
    except NumericalAbortError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
