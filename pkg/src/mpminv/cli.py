"""Command-line pipeline: generate, init-search, optimize, run, eval, dms-compare, wt-plot, report.

Exit codes: 0 success, 1 validation error, 2 simulation or optimization
failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import plots
from .dms import DMSConfig, dms_loss
from .init_search import DEFAULT_CANDIDATES, DEFAULT_INIT_FRAMES, init_search, select_index
from .metrics import default_tau, ms_ssim, psnr, trajectory_metrics
from .mpm import SimulationError, load_trajectory, rollout, save_trajectory
from .optim import OptimizationError, OptimizeOptions, optimize
from .params import PARAM_NAMES, ParamLayout, PartParams, theta_from_mapping
from .render import (
    VideoTensor,
    dominant_frequency,
    load_video,
    project,
    render_scene,
    save_video,
    spectrum,
    wt_slice,
)
from .scene import SceneConfig, SceneError, resolve_scene, save_scene

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("mpminv")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# helpers


def write_json(path: Path, data: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"schema_version": SCHEMA_VERSION, **data}, indent=2))
    return path


def read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc


def load_config(args) -> dict:
    return read_json(args.config) if args.config else {}


def require(value, flag: str):
    if value is None:
        raise ValueError(f"missing required flag {flag}")
    return value


def load_scene_arg(args) -> SceneConfig:
    return resolve_scene(require(args.scene, "--scene"))


def params_from_json(data, cfg: SceneConfig) -> PartParams:
    """Accept a PartParams document or a bare per-part list of ``{name: value}`` rows."""
    rows = data["theta"] if isinstance(data, dict) else data
    if len(rows) != cfg.n_parts:
        raise ValueError(f"expected parameters for {cfg.n_parts} parts, got {len(rows)}")
    base = cfg.part_params().theta
    theta = np.array([theta_from_mapping(r, base[m]) if isinstance(r, dict) else np.asarray(r, float)
                      for m, r in enumerate(rows)])
    return PartParams(theta, cfg.bounds)


def params_rows(params: PartParams) -> list[dict]:
    return [dict(zip(PARAM_NAMES, row)) for row in params.theta.tolist()]


def optimize_options(section: dict, args) -> OptimizeOptions:
    section = dict(section)
    if "loss" in section:
        loss = section.pop("loss")
        section["loss"] = DMSConfig.preset(loss) if isinstance(loss, str) else DMSConfig(**loss)
    if "trainable" in section:
        section["trainable"] = tuple(section["trainable"])
    for flag in ("iterations", "lr", "granularity"):
        if getattr(args, flag, None) is not None:
            section[flag] = getattr(args, flag)
    section.setdefault("seed", args.seed)
    return OptimizeOptions(**section)


def reference_paths(ref: Path) -> dict:
    """Sibling files written by ``generate`` next to a reference video directory."""
    root = ref.parent
    return {"truth": root / "truth.json", "trajectory": root / "trajectory.bin"}


def wt_diagnostic(video: VideoTensor, cfg: SceneConfig | None, row: int | None = None) -> dict:
    """w-t slice row, dominant frequency and amplitude of a video."""
    if row is None and cfg is not None:
        # scanline through the centroid of the last part (the free end in the templates)
        r, _ = project(cfg.positions[cfg.labels == cfg.labels.max()].mean(0), cfg.camera)
        row = int(np.clip(np.round(float(r)), 0, video.shape[1] - 1))
    wt = wt_slice(video, row)
    freq, amp = dominant_frequency(wt, video.fps)
    return {"row": wt.row, "frequency_hz": freq, "amplitude": amp, "fps": video.fps, "frames": len(video)}


# ---------------------------------------------------------------------------
# verbs


def cmd_generate(args) -> int:
    cfg = load_scene_arg(args)
    config = load_config(args)
    if "truth" in config:
        cfg = cfg.with_params(params_from_json(config["truth"], cfg))
    out = Path(require(args.out, "--out"))
    truth = cfg.part_params()
    traj = rollout(cfg, truth)
    video = render_scene(traj, cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_scene(cfg, out / "scene.json")
    save_video(video, out / "reference")
    save_trajectory(traj, out / "trajectory.bin")
    write_json(out / "truth.json", {"parts": [p.name for p in cfg.parts], **truth.to_json()})
    print(f"wrote {len(video)} frames to {out / 'reference'}")
    return EXIT_OK


def _init_stage(cfg, ref, args, config, layout, out: Path) -> PartParams:
    section = config.get("init", {})
    n = args.n if getattr(args, "n", None) is not None else section.get("n", DEFAULT_CANDIDATES)
    frames = section.get("init_frames", DEFAULT_INIT_FRAMES)
    if getattr(args, "init_frames", None) is not None:
        frames = args.init_frames
    frames = min(frames, len(ref))
    cands, params = init_search(cfg, ref, n=n, init_frames=frames, seed=args.seed, layout=layout)
    write_json(out / "candidates.json", {"labels": layout.labels(), **cands.to_json()})
    write_json(out / "init.json", {"selected": select_index(cands.scores), **params.to_json()})
    return params


def _layout(cfg: SceneConfig, opts: OptimizeOptions) -> ParamLayout:
    return ParamLayout(cfg.n_parts, opts.active(), shared=opts.granularity == "object")


def cmd_init_search(args) -> int:
    cfg = load_scene_arg(args)
    ref = load_video(require(args.ref, "--ref"))
    config = load_config(args)
    opts = optimize_options(config.get("optimize", {}), args)
    out = Path(require(args.out, "--out"))
    params = _init_stage(cfg, ref, args, config, _layout(cfg, opts), out)
    print(json.dumps(params_rows(params)))
    return EXIT_OK


def _initial_params(cfg, args) -> PartParams:
    if args.init:
        return params_from_json(read_json(args.init), cfg)
    return cfg.part_params()


def _optimize_stage(cfg, ref, init, opts, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    res = optimize(cfg, ref, init, opts, trace_path=out / "trace.jsonl")
    return res


def cmd_optimize(args) -> int:
    cfg = load_scene_arg(args)
    ref = load_video(require(args.ref, "--ref"))
    config = load_config(args)
    opts = optimize_options(config.get("optimize", {}), args)
    out = Path(require(args.out, "--out"))
    res = _optimize_stage(cfg, ref, _initial_params(cfg, args), opts, out)
    write_json(out / "result.json", {"options": opts.to_json(), **res.to_json()})
    print(f"best L_DMS {res.best_loss:.6g} (initial {res.initial_loss:.6g}) at iteration {res.best_iteration}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_scene_arg(args)
    ref_dir = Path(require(args.ref, "--ref"))
    ref = load_video(ref_dir)
    config = load_config(args)
    opts = optimize_options(config.get("optimize", {}), args)
    out = Path(require(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", {"scene": str(args.scene), "reference": str(ref_dir.resolve()),
                                     "seed": args.seed, "skip_init": args.skip_init, "overrides": config,
                                     "optimize": opts.to_json()})
    timings = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            value = fn()
        except (SimulationError, OptimizationError, ValueError) as exc:
            raise StageError(name, exc) from exc
        timings[name] = time.perf_counter() - t0
        return value

    if args.skip_init:
        init = _initial_params(cfg, args)
    else:
        init = stage("init-search", lambda: _init_stage(cfg, ref, args, config, _layout(cfg, opts), out))
    res = stage("optimize", lambda: _optimize_stage(cfg, ref, init, opts, out))

    def evaluate():
        traj = rollout(cfg, res.params, frames=len(ref))
        video = render_scene(traj, cfg)
        save_video(video, out / "final")
        save_trajectory(traj, out / "final_trajectory.bin")
        report = {"psnr": psnr(video, ref), "ms_ssim": ms_ssim(video, ref),
                  "loss": dms_loss(video, ref, opts.loss).to_json()}
        siblings = reference_paths(ref_dir)
        if siblings["trajectory"].exists():
            ref_traj = load_trajectory(siblings["trajectory"])
            tau = config.get("eval", {}).get("tau") or default_tau(cfg.positions)
            report["points"] = trajectory_metrics(traj.x, ref_traj.x[: len(traj)], tau)
        if siblings["truth"].exists():
            shutil.copyfile(siblings["truth"], out / "truth.json")
        return video, report

    final_video, metrics = stage("eval", evaluate)
    diagnostics = {"reference": wt_diagnostic(ref, cfg), "final": wt_diagnostic(final_video, cfg)}
    write_json(out / "result.json", {
        "reference": str(ref_dir.resolve()),
        "init": init.to_json(),
        "final": res.params.to_json(),
        "best_loss": res.best_loss,
        "initial_loss": res.initial_loss,
        "best_iteration": res.best_iteration,
        "trace": res.trace,
        "warnings": res.warnings,
        "metrics": metrics,
        "diagnostics": diagnostics,
        "wall_time_s": timings,
    })
    print(f"best L_DMS {res.best_loss:.6g} (initial {res.initial_loss:.6g}); bundle in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = load_trajectory(require(args.pred, "--pred"))
    ref_path = args.ref_traj or (reference_paths(Path(args.ref))["trajectory"] if args.ref else None)
    ref = load_trajectory(require(ref_path, "--ref-traj"))
    n = min(len(pred), len(ref))
    tau = args.tau or default_tau(ref.x[0])
    report = trajectory_metrics(pred.x[:n], ref.x[:n], tau)
    if args.out:
        write_json(Path(args.out) / "metrics.json", report)
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_dms_compare(args) -> int:
    pred = load_video(require(args.pred, "--pred"))
    ref = load_video(require(args.ref, "--ref"))
    config = load_config(args)
    loss = config.get("loss", "ssim+fft")
    cfg = DMSConfig.preset(loss) if isinstance(loss, str) else DMSConfig(**loss)
    report = {**dms_loss(pred, ref, cfg).to_json(), "config": cfg.to_json()}
    if args.out:
        write_json(Path(args.out) / "dms.json", report)
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_wt_plot(args) -> int:
    video = load_video(require(args.ref, "--ref"))
    cfg = resolve_scene(args.scene) if args.scene else None
    diag = wt_diagnostic(video, cfg, args.row)
    out = Path(require(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    plots.heatmap(wt_slice(video, diag["row"]).slice, out / "wt.png")
    write_json(out / "wt.json", diag)
    print(json.dumps(diag))
    return EXIT_OK


REPORT_FILES = ("loss_curve.png", "wt_reference.png", "wt_final.png", "spectrum.png", "summary.txt")


def cmd_report(args) -> int:
    bundle = Path(require(args.out, "--out"))
    needed = [bundle / "result.json", bundle / "final" / "manifest.json"]
    missing = [str(p) for p in needed if not p.exists()]
    if missing:
        raise FileNotFoundError("result bundle is missing: " + ", ".join(missing))
    result = read_json(bundle / "result.json")
    ref = load_video(result["reference"])
    final = load_video(bundle / "final")
    diag = result["diagnostics"]

    trace = result["trace"]
    iters = [r["iter"] for r in trace]
    curves = {key: (iters, [r[key] for r in trace]) for key in ("L_DMS", "L_spatial", "L_mag", "L_phase")}
    plots.line_plot(curves, bundle / "loss_curve.png", log_y=True, title="loss per iteration")
    plots.heatmap(wt_slice(ref, diag["reference"]["row"]).slice, bundle / "wt_reference.png")
    plots.heatmap(wt_slice(final, diag["final"]["row"]).slice, bundle / "wt_final.png")
    f_ref, m_ref = spectrum(wt_slice(ref, diag["reference"]["row"]), ref.fps)
    f_fin, m_fin = spectrum(wt_slice(final, diag["final"]["row"]), final.fps)
    plots.line_plot({"reference": (f_ref, m_ref), "final": (f_fin, m_fin)}, bundle / "spectrum.png",
                    marker_x=diag["reference"]["frequency_hz"], title="w-t temporal spectrum (Hz)")

    (bundle / "summary.txt").write_text(summary_text(result, bundle))
    print((bundle / "summary.txt").read_text())
    return EXIT_OK


def summary_text(result: dict, bundle: Path) -> str:
    final = PartParams.from_json(result["final"]).theta
    truth_path = bundle / "truth.json"
    truth = PartParams.from_json(read_json(truth_path)).theta if truth_path.exists() else None
    lines = [f"best L_DMS {result['best_loss']:.6g} at iteration {result['best_iteration']} "
             f"(initial {result['initial_loss']:.6g})", ""]
    header = f"{'part':>4} {'parameter':<16} {'recovered':>12}"
    if truth is not None:
        header += f" {'true':>12} {'log10 err':>10}"
    lines.append(header)
    for m, row in enumerate(final):
        for j, name in enumerate(PARAM_NAMES):
            line = f"{m:>4} {name:<16} {row[j]:>12.5g}"
            if truth is not None:
                line += f" {truth[m, j]:>12.5g} {np.log10(row[j] / truth[m, j]):>+10.3f}"
            lines.append(line)
    if truth is None:
        lines += ["", "note: no truth.json in the bundle, so no error column is shown"]
    metrics = result.get("metrics", {})
    lines += ["", f"PSNR {metrics.get('psnr', float('nan')):.3f} dB, MS-SSIM {metrics.get('ms_ssim', float('nan')):.5f}"]
    if "points" in metrics:
        p = metrics["points"]
        lines.append(f"Chamfer {p['chamfer']:.4g} m^2, HD95 {p['hd95']:.4g} m, F-score {p['fscore']:.4f} (tau {p['tau']:.4g} m)")
    for key, d in result["diagnostics"].items():
        lines.append(f"dominant frequency ({key}, row {d['row']}): {d['frequency_hz']:.4g} Hz, amplitude {d['amplitude']:.4g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scene", help="scene JSON path or bundled scene name (beam, two_part_pendulum, blob_drop)")
    common.add_argument("--ref", help="reference video directory (PNG frames + manifest.json)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    common.add_argument("--config", help="JSON file with overrides (sections: truth, init, optimize, eval, loss)")
    common.add_argument("-v", "--verbose", action="store_true")

    # the global flags are attached to every verb, so they follow the verb on the command line
    parser = argparse.ArgumentParser(prog="mpminv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("generate", parents=[common], help="simulate and render a reference video")

    def optim_flags(p):
        p.add_argument("--iterations", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--granularity", choices=("part", "object", "particle"))
        p.add_argument("--init", help="initial parameter JSON (PartParams or per-part list)")

    def init_flags(p):
        p.add_argument("--n", type=int, help="number of LHS candidates")
        p.add_argument("--init-frames", type=int, help="frames simulated per candidate")

    p = sub.add_parser("init-search", parents=[common], help="LHS initialization scored by MS-SSIM")
    init_flags(p)
    optim_flags(p)
    p = sub.add_parser("optimize", parents=[common], help="fit parameters to the reference video")
    optim_flags(p)
    p = sub.add_parser("run", parents=[common], help="init-search, optimize and eval in one bundle")
    init_flags(p)
    optim_flags(p)
    p.add_argument("--skip-init", action="store_true", help="start from --init (or the scene values)")
    p = sub.add_parser("eval", parents=[common], help="point metrics between two trajectories")
    p.add_argument("--pred", help="predicted trajectory blob")
    p.add_argument("--ref-traj", help="reference trajectory blob (default: next to --ref)")
    p.add_argument("--tau", type=float, help="F-score threshold in meters")
    p = sub.add_parser("dms-compare", parents=[common], help="loss report between two videos")
    p.add_argument("--pred", help="predicted video directory")
    p = sub.add_parser("wt-plot", parents=[common], help="w-t slice image and dominant frequency")
    p.add_argument("--row", type=int)
    sub.add_parser("report", parents=[common], help="plots and summary for a run bundle (--out)")
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "init-search": cmd_init_search,
    "optimize": cmd_optimize,
    "run": cmd_run,
    "eval": cmd_eval,
    "dms-compare": cmd_dms_compare,
    "wt-plot": cmd_wt_plot,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME if isinstance(exc.cause, (SimulationError, OptimizationError)) else EXIT_INVALID
    except (SimulationError, OptimizationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SceneError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        # unreadable scene files surface as scene errors but are I/O failures
        return EXIT_IO if isinstance(exc.__cause__, OSError) else EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
