"""Command-line entry point.

Subcommands: simulate, render, optimize, gradcheck, evaluate. Any flag can
also be given as ``key = value`` in a file passed with ``--config``;
command-line flags win over the file. Exit status is 0 on success, 1 for a
failed check or a convergence warning and 2 for usage, I/O or shape errors.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from . import plots
from .comprender import DepthPlanes, render_pmf, softmax_pmf
from .core import as_depth, as_image, make_aperture
from .io import read_pfm, read_plane_stack, read_png, write_pfm, write_plane_stack, write_png
from .lfrender import LfRenderConfig, render_light_field
from .metrics import depth_mae, psnr, ssim
from .optim import (FOCUS_ORDERS, GAUGES, SCHEDULES, OptimConfig, OptimizationError, SupervisionSet, Target,
                    optimize_depth_comp, optimize_depth_lf)
from .scenesim import SCENE_KINDS, central_view, make_test_scene, oracle_sdof, scene_manifest_lines
from .smooth import ConvergenceWarning, SmoothConfig

EXIT_OK, EXIT_WARN, EXIT_USAGE = 0, 1, 2
MANIFEST = "manifest.txt"
INPUT_PATHS = ("image", "depth", "pmf", "target", "manifest", "pred", "ref", "pred_depth", "ref_depth")

log = logging.getLogger("defocus")


class UsageError(Exception):
    pass


# -- manifest -------------------------------------------------------------------------------


@dataclass
class Manifest:
    image: Path
    depth: Path | None = None
    m: int | None = None
    targets: list[tuple[Path, float]] = field(default_factory=list)
    files: list[str] = field(default_factory=list)


def read_manifest(path) -> Manifest:
    """Parse the plain-text manifest written by ``simulate``."""
    path = Path(path)
    base = path.parent
    image, depth, m, targets, files = None, None, None, [], []
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        key = parts[0]
        if key == "image":
            image = base / parts[1]
            files.append(parts[1])
        elif key == "depth":
            depth = base / parts[1]
            files.append(parts[1])
        elif key == "aperture":
            m = int(parts[1])
        elif key == "target":
            targets.append((base / parts[2], float(parts[3])))
            files.append(parts[2])
        elif key == "layer":
            files.extend(parts[2:4])
        elif key not in ("scene", "seed", "size"):
            raise UsageError(f"{path}:{ln}: unknown manifest entry {key!r}")
    if image is None:
        raise UsageError(f"{path}: manifest names no image")
    return Manifest(image, depth, m, targets, files)


# -- config plumbing ------------------------------------------------------------------------


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def read_config(path) -> dict[str, str]:
    out = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{ln}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


class _Command:
    """A subparser that remembers its actions so config keys can be validated and converted."""

    def __init__(self, subparsers, name, help_text):
        self.parser = subparsers.add_parser(name, help=help_text, description=help_text)
        self.actions: dict[str, argparse.Action] = {}
        self.add("--config", help="key = value file with defaults for any flag below")

    def add(self, *flags, **kw):
        act = self.parser.add_argument(*flags, **kw)
        self.actions[act.dest] = act
        return act

    def defaults_from(self, cfg: dict[str, str]) -> dict:
        values = {}
        for key, raw in cfg.items():
            act = self.actions.get(key)
            if act is None or key == "config":
                raise UsageError(f"unknown config key {key!r} for this command")
            try:
                if act.nargs == 0:
                    val = _bool(raw)
                elif act.nargs in ("+", "*"):
                    conv = act.type or str
                    val = [conv(tok) for tok in raw.replace(",", " ").split()]
                else:
                    val = (act.type or str)(raw)
            except ValueError as e:
                raise UsageError(f"config key {key!r}: {e}") from e
            if act.choices is not None and val not in act.choices:
                raise UsageError(f"config key {key!r}: {val!r} not in {list(act.choices)}")
            values[key] = val
        return values


def _render_flags(cmd: _Command, m_default=13):
    cmd.add("--m", type=int, default=m_default, help="aperture grid size (views per axis)")
    cmd.add("--expansion-iters", type=int, default=3, help="depth expansion steps K")
    cmd.add("--d-min", type=int, default=-15, help="lowest depth plane / depth bound")
    cmd.add("--d-max", type=int, default=15, help="highest depth plane / depth bound")
    cmd.add("--threads", type=int, default=None, help="worker threads (default: DEFOCUS_THREADS or 1)")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, _Command]]:
    parser = argparse.ArgumentParser(prog="defocus", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    cmds = {}

    c = cmds["simulate"] = _Command(sub, "simulate", "render a procedural scene and its shallow-DOF targets")
    c.add("--scene", choices=SCENE_KINDS, default="two_plane")
    c.add("--seed", type=int, default=0)
    c.add("--size", type=int, default=64)
    c.add("--m", type=int, default=13, help="aperture grid size for the targets")
    c.add("--focus", type=float, nargs="+", default=[0.0], help="one target per focus disparity")
    c.add("--disparities", type=float, nargs="+", default=None, help="layer disparities, front first")
    c.add("--flat-region", action="store_true", help="paint an untextured square into the back layer")
    c.add("--out", help="output directory")

    c = cmds["render"] = _Command(sub, "render", "render a shallow-DOF image from an image and depth or PMF")
    c.add("--model", choices=("lf", "comp"), default="lf")
    c.add("--image", help="all-in-focus image (PNG or PFM)")
    c.add("--depth", help="depth map PFM")
    c.add("--pmf", help="depth PMF plane stack PFM (comp only)")
    c.add("--focus", type=float, default=0.0)
    _render_flags(c)
    c.add("--out", help="output PNG")
    c.add("--pfm-out", help="optional float PFM copy of the render")

    c = cmds["optimize"] = _Command(sub, "optimize", "recover depth from shallow-DOF supervision")
    c.add("--model", choices=("lf", "comp"), default="lf")
    c.add("--manifest", help="manifest from simulate (image, targets, focus, reference depth)")
    c.add("--image", help="all-in-focus image")
    c.add("--target", nargs="+", help="shallow-DOF supervision images")
    c.add("--ref-depth", help="reference depth PFM for the report")
    _render_flags(c, m_default=None)
    defaults = OptimConfig()
    for name in ("steps",):
        c.add("--" + name, type=int, default=getattr(defaults, name))
    for name in ("lr_depth", "lr_logits", "lr_focus", "lambda_d", "lambda_tv", "beta1", "beta2", "eps",
                 "init_focus", "mirror_check"):
        c.add("--" + name.replace("_", "-"), type=float, default=getattr(defaults, name))
    c.add("--schedule", choices=SCHEDULES, default=defaults.schedule)
    c.add("--focus-order", choices=FOCUS_ORDERS, default=defaults.focus_order,
          help="known order of the target focus disparities; resolves the global depth mirror")
    c.add("--gauge", choices=GAUGES, default=defaults.gauge,
          help="how the unobservable common depth/focus offset is fixed")
    c.add("--post-smooth", action="store_true", help="smooth once after optimizing instead of every step")
    sdef = SmoothConfig()
    c.add("--sigma-xy", type=float, default=sdef.sigma_xy)
    c.add("--sigma-c", type=float, default=sdef.sigma_c)
    c.add("--lam", type=float, default=sdef.lam, help="smoothness weight")
    c.add("--cg-iters", type=int, default=sdef.cg_iters)
    c.add("--cg-tol", type=float, default=sdef.cg_tol)
    c.add("--out", help="output directory")

    c = cmds["gradcheck"] = _Command(sub, "gradcheck", "compare analytic gradients with finite differences")
    c.add("--model", choices=("lf", "comp", "smooth", "all"), default="all")
    c.add("--seed", type=int, default=0)
    c.add("--size", type=int, default=12)
    c.add("--m", type=int, default=5, help="aperture grid size for the lf check")
    c.add("--corrupt", action="store_true", help="scale analytic gradients by 1.01 (checker self-test)")
    c.add("--out", help="optional CSV report")

    c = cmds["evaluate"] = _Command(sub, "evaluate", "image and depth metrics against references")
    c.add("--pred", help="predicted image (PNG or PFM)")
    c.add("--ref", help="reference image (PNG or PFM)")
    c.add("--pred-depth", help="predicted depth PFM")
    c.add("--ref-depth", help="reference depth PFM")
    c.add("--out", help="CSV path; figures are written next to it")
    return parser, cmds


def parse_args(argv=None):
    parser, cmds = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cmd = cmds[args.command]
        try:
            cfg = read_config(args.config)
        except OSError as e:
            raise UsageError(f"cannot read config: {e}") from e
        cmd.parser.set_defaults(**cmd.defaults_from(cfg))
        args = parser.parse_args(argv)
    for name in INPUT_PATHS:
        value = getattr(args, name, None)
        for p in value if isinstance(value, list) else [value]:
            if p is not None and not Path(p).exists():
                raise UsageError(f"--{name.replace('_', '-')}: no such file {p}")
    return args


def _need(args, *names):
    for n in names:
        if getattr(args, n, None) in (None, []):
            raise UsageError(f"--{n.replace('_', '-')} is required")


def _read_image(path) -> np.ndarray:
    return read_pfm(path) if str(path).lower().endswith(".pfm") else read_png(path)


# -- commands -------------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    _need(args, "out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = make_test_scene(args.scene, args.seed, args.size, args.disparities, args.flat_region)
    aperture = make_aperture(args.m)
    image, depth = central_view(scene)
    write_png(out / "aif.png", image)
    write_pfm(out / "depth.pfm", depth)
    lines = [f"scene {args.scene}", f"seed {args.seed}", f"size {args.size}", f"aperture {args.m}",
             "image aif.png", "depth depth.pfm"]
    for i, f in enumerate(args.focus):
        name = f"sdof_{i}.png"
        write_png(out / name, oracle_sdof(scene, aperture, f))
        lines.append(f"target {i} {name} {f!r}")
    lines += scene_manifest_lines(scene, out)
    (out / MANIFEST).write_text("# defocus scene manifest\n" + "\n".join(lines) + "\n")
    print(f"wrote {len(args.focus)} target(s) to {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    _need(args, "image", "out")
    image = as_image(_read_image(args.image))
    if args.model == "lf":
        _need(args, "depth")
        depth = as_depth(read_pfm(args.depth))
        cfg = LfRenderConfig(make_aperture(args.m), args.focus, args.expansion_iters, args.d_min, args.d_max)
        result = render_light_field(image, depth, cfg, args.threads)
    else:
        planes = DepthPlanes(args.d_min, args.d_max)
        if args.pmf:
            P, disp = read_plane_stack(args.pmf)
            if not np.array_equal(disp, planes.disparities):
                raise ValueError(f"PMF planes {disp.min():g}..{disp.max():g} differ from "
                                 f"--d-min/--d-max {planes.d_min}..{planes.d_max}")
        elif args.depth:
            depth = as_depth(read_pfm(args.depth))
            P = np.zeros(depth.shape + (planes.n,))
            idx = np.clip(np.round(depth - planes.d_min).astype(int), 0, planes.n - 1)
            np.put_along_axis(P, idx[..., None], 1.0, axis=-1)
        else:
            raise UsageError("comp needs --pmf or --depth")
        result = render_pmf(image, P, args.focus, planes, threads=args.threads)
    write_png(args.out, result)
    if args.pfm_out:
        write_pfm(args.pfm_out, result if result.shape[2] == 3 else result[:, :, 0])
    return EXIT_OK


def _supervision(args):
    ref_depth = args.ref_depth
    m = args.m
    if args.manifest:
        man = read_manifest(args.manifest)
        image_path = args.image or man.image
        targets = [p for p, _ in man.targets] if not args.target else args.target
        m = m or man.m
        ref_depth = ref_depth or man.depth
    else:
        _need(args, "image", "target")
        image_path, targets = args.image, args.target
    if not targets:
        raise UsageError("at least one supervision image is required")
    aperture = make_aperture(m or 13)
    image = as_image(_read_image(image_path))
    sup = SupervisionSet(image, [Target(as_image(_read_image(t)), aperture) for t in targets])
    ref = None if ref_depth is None else as_depth(read_pfm(ref_depth))
    return sup, ref


def _optim_config(args) -> OptimConfig:
    smooth = SmoothConfig(args.sigma_xy, args.sigma_c, args.lam, args.cg_iters, args.cg_tol)
    return OptimConfig(steps=args.steps, lr_depth=args.lr_depth, lr_logits=args.lr_logits, lr_focus=args.lr_focus,
                       lambda_d=args.lambda_d, lambda_tv=args.lambda_tv, beta1=args.beta1, beta2=args.beta2,
                       eps=args.eps, d_lo=args.d_min, d_hi=args.d_max, expansion_iters=args.expansion_iters,
                       smooth_in_loop=not args.post_smooth, smooth=smooth, planes=DepthPlanes(args.d_min, args.d_max),
                       init_focus=args.init_focus, schedule=args.schedule, mirror_check=args.mirror_check,
                       focus_order=args.focus_order, gauge=args.gauge, threads=args.threads)


def cmd_optimize(args) -> int:
    _need(args, "out")
    sup, ref = _supervision(args)
    cfg = _optim_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    # intermediate solves are warm-started and may stop early; only the final one is reported
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        try:
            if args.model == "lf":
                res = optimize_depth_lf(sup, cfg)
            else:
                res = optimize_depth_comp(sup, cfg)
        except OptimizationError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_WARN
    elapsed = time.perf_counter() - t0
    write_pfm(out / "depth.pfm", res.depth)
    res.write_trace(out / "loss.csv")
    if res.logits is not None:
        write_plane_stack(out / "pmf.pfm", softmax_pmf(res.logits), cfg.planes.disparities)
    plots.loss_trace_figure(res.trace, out / "loss.png")
    plots.depth_figure(res.depth, out / "depth.png", reference=ref)
    rows = [("model", args.model), ("steps", cfg.steps), ("final_loss", repr(res.trace[-1].total)),
            ("seconds", f"{elapsed:.2f}")]
    for i, (t, f) in enumerate(zip(sup.targets, res.focus)):
        if args.model == "lf":
            rc = LfRenderConfig(t.aperture, float(f), cfg.expansion_iters, cfg.d_lo, cfg.d_hi)
            pred = render_light_field(sup.image, res.depth, rc, cfg.threads)
        else:
            pred = render_pmf(sup.image, softmax_pmf(res.logits), float(f), cfg.planes, threads=cfg.threads)
        write_png(out / f"preview_{i}.png", pred)
        plots.comparison_figure(pred, t.image, out / f"preview_{i}_compare.png", title=f"target {i}, focus {f:.2f}")
        rows += [(f"focus_{i}", repr(float(f))), (f"psnr_{i}", f"{psnr(pred, t.image):.4f}")]
    if ref is not None:
        mask = res.confidence > 0.2
        err = np.abs(res.depth - ref)
        rows += [("depth_mae", f"{depth_mae(res.depth, ref):.6f}"),
                 ("depth_median_err_conf", f"{float(np.median(err[mask])) if mask.any() else math.nan:.6f}")]
    with open(out / "summary.csv", "w", newline="") as f:
        csv.writer(f).writerows([("key", "value")] + rows)
    for k, v in rows:
        print(f"{k}: {v}")
    if not math.isfinite(res.trace[-1].total):
        return EXIT_WARN
    if res.smoothing_converged is False:
        print("warning: final smoothing solve hit its iteration limit", file=sys.stderr)
        return EXIT_WARN
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = ("lf", "comp", "smooth") if args.model == "all" else (args.model,)
    reports = []
    t0 = time.perf_counter()
    for name in names:
        kw = {"seed": args.seed, "size": args.size, "corrupt": args.corrupt}
        if name == "lf":
            kw["m"] = args.m
        rep = gc.CHECKS[name](**kw)
        reports.append(rep)
        for line in rep.lines():
            print(line)
    ok = all(r.passed for r in reports)
    print(f"gradcheck: {'PASS' if ok else 'FAIL'} ({time.perf_counter() - t0:.1f}s)")
    if args.out:
        with open(args.out, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["model", "group", "max_rel_err", "checked", "skipped", "threshold", "passed"])
            for r in reports:
                for g in r.groups:
                    wr.writerow([r.model, g.name, repr(g.max_rel_err), g.checked, g.skipped, r.threshold, r.passed])
    return EXIT_OK if ok else EXIT_WARN


def cmd_evaluate(args) -> int:
    rows = []
    if args.pred or args.ref:
        _need(args, "pred", "ref")
        pred, ref = as_image(_read_image(args.pred)), as_image(_read_image(args.ref))
        if pred.shape != ref.shape:
            raise ValueError(f"image shapes differ: {pred.shape} vs {ref.shape}")
        rows += [("psnr", f"{psnr(pred, ref):.4f}"), ("ssim", f"{ssim(pred, ref):.6f}")]
    if args.pred_depth or args.ref_depth:
        _need(args, "pred_depth", "ref_depth")
        pd, rd = as_depth(read_pfm(args.pred_depth)), as_depth(read_pfm(args.ref_depth))
        if pd.shape != rd.shape:
            raise ValueError(f"depth shapes differ: {pd.shape} vs {rd.shape}")
        rows.append(("depth_mae", f"{depth_mae(pd, rd):.6f}"))
    if not rows:
        raise UsageError("give --pred/--ref and/or --pred-depth/--ref-depth")
    for k, v in rows:
        print(f"{k}: {v}")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as f:
            csv.writer(f).writerows([("metric", "value")] + rows)
        if args.pred:
            plots.comparison_figure(pred, ref, out.with_name(out.stem + "_images.png"))
        if args.pred_depth:
            plots.depth_figure(pd, out.with_name(out.stem + "_depth.png"), reference=rd)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "render": cmd_render, "optimize": cmd_optimize,
            "gradcheck": cmd_gradcheck, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
