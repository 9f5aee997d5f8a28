"""Command-line interface: ``qbs simulate | pipeline | analyze``.

Configuration files are flat ``key = value`` text (``#`` starts a comment).
Every key a command accepts is listed in its ``--help``; unknown keys are
rejected.  Command-line flags override file values.

Exit codes: 0 success, 2 usage/config error, 3 I/O error, 4 model/domain error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import analysis
from .align import AlignConfig
from .core_model import PRESETS, DomainError, SensorSpec, preset
from .io import read_image, read_qbs, write_pfm, write_pgm, write_qbs
from .merge import MergeConfig, SRConfig, merge_pipeline
from .reconstruct import GaussianDenoiser, correct_hot_pixels, finalize_image
from .simulator import (DcrMap, MotionTrajectory, emulate_conventional_burst, plan_exposure,
                        sample_jot_sequence, sample_spad_sequence)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DOMAIN = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str


SENSOR_KEYS = {
    "frame_exposure_s": Key(float, None, "sensor frame exposure (s), overrides the preset"),
    "pde": Key(float, None, "photon detection efficiency, overrides the preset"),
    "dcr_cps": Key(float, None, "SPAD dark count rate (counts/s), overrides the preset"),
    "dark_current_eps": Key(float, None, "dark current (e-/s), overrides the preset"),
    "read_noise_e": Key(float, None, "read noise (e- RMS), overrides the preset"),
    "bit_depth": Key(int, None, "bit depth, overrides the preset"),
    "full_well_e": Key(int, None, "full well capacity (e-), overrides the preset"),
}

SIMULATE_KEYS = {
    "preset": Key(str, "spad-swiss2", f"sensor preset: {', '.join(PRESETS)}"),
    **SENSOR_KEYS,
    "flux_path": Key(str, "", "flux image (.pfm, .pgm or .npy), photons/s; relative to the config file"),
    "flux_value": Key(float, None, "uniform flux (photons/s) when no flux_path is given"),
    "flux_scale": Key(float, 1.0, "multiplier applied to the flux image"),
    "width": Key(int, 64, "image width for a uniform flux"),
    "height": Key(int, 64, "image height for a uniform flux"),
    "n_frames": Key(int, 0, "number of frames; 0 plans the exposure automatically"),
    "velocity_x": Key(float, 0.0, "scene motion along x (px/s)"),
    "velocity_y": Key(float, 0.0, "scene motion along y (px/s)"),
    "jitter_px": Key(float, 0.0, "amplitude of smooth hand-shake jitter (px)"),
    "jitter_hz": Key(float, 5.0, "fundamental frequency of the jitter (Hz)"),
    "boundary_flux": Key(float, 0.0, "flux entering from outside the image"),
    "dcr_map": Key(str, "", "per-pixel dark count rate image (counts/s)"),
    "plan_c_t": Key(float, 1000.0, "auto-exposure photon target per pixel"),
    "plan_m_max": Key(float, 60.0, "auto-exposure total motion budget (px)"),
    "plan_m_f": Key(float, 1.0, "auto-exposure per-frame motion budget (px, conventional)"),
    "seed": Key(int, 0, "random seed"),
}

PIPELINE_KEYS = {
    "block_size": Key(int, 100, "frames per alignment block"),
    "merge_block_size": Key(int, 0, "frames per merge block; 0 uses block_size"),
    "patch_size": Key(int, 16, "alignment patch size (px)"),
    "levels": Key(int, 3, "pyramid levels"),
    "search_radius": Key(int, 4, "search radius per pyramid level (px)"),
    "presmooth_px": Key(float, 1.0, "Gaussian pre-smoothing before matching (px)"),
    "lambda_reg": Key(float, 0.0, "flow regularization weight; 0 disables"),
    "reg_iterations": Key(int, 100, "flow regularization iterations"),
    "noise_scale": Key(float, 8.0, "robust merge tuning factor c (inf disables robustness)"),
    "tile_size": Key(int, 16, "merge tile size (px, power of two)"),
    "sr": Key(int, 1, "super-resolution factor; 1 disables"),
    "naive": Key(_bool, False, "skip alignment"),
    "frame_level": Key(_bool, True, "interpolate flow to every frame"),
    "dcr_map": Key(str, "", "per-pixel dark count rate image for hot-pixel removal"),
    "hot_threshold_cps": Key(float, math.inf, "dark count rate above which a pixel is hot"),
    "gamma": Key(float, 2.2, "display gamma"),
    "percentile": Key(float, 99.9, "flux percentile mapped to white"),
    "denoise_sigma": Key(float, 0.0, "Gaussian denoiser width after Anscombe (px); 0 disables"),
    "seed": Key(int, 0, "seed for hot-pixel replacement"),
}

SNR_KEYS = {
    "quanta_preset": Key(str, "spad-swiss2", "photon-counting sensor preset"),
    "conv_preset": Key(str, "conv-machinevision", "conventional sensor preset"),
    "flux_min": Key(float, 1.0, "smallest flux (photons/s)"),
    "flux_max": Key(float, 1e7, "largest flux (photons/s)"),
    "flux_points": Key(int, 29, "log-spaced flux samples"),
    "speed_min": Key(float, 1.0, "smallest nonzero speed (px/s)"),
    "speed_max": Key(float, 1e4, "largest speed (px/s)"),
    "speed_points": Key(int, 17, "log-spaced speed samples"),
    "include_static": Key(_bool, True, "add speed 0 to the grid"),
    "c_t": Key(float, 1000.0, "auto-exposure photon target"),
    "m_max": Key(float, 60.0, "auto-exposure total motion budget (px)"),
    "m_f": Key(float, 1.0, "auto-exposure per-frame motion budget (px)"),
}

DR_KEYS = {
    "quanta_preset": Key(str, "spad-swiss2", "photon-counting sensor preset"),
    "conv_preset": Key(str, "conv-machinevision", "conventional sensor preset"),
    "exposure_min": Key(float, 1e-3, "shortest total exposure (s)"),
    "exposure_max": Key(float, 1.0, "longest total exposure (s)"),
    "exposure_points": Key(int, 31, "log-spaced exposure samples"),
    "quanta_rates": Key(_floats, [1e5], "comma-separated quanta frame rates (fps)"),
    "conv_rates": Key(_floats, [1e3], "comma-separated conventional frame rates (fps)"),
    "snr_floor_db": Key(float, 0.0, "SNR defining the smallest measurable flux (dB)"),
    "full_well_e": Key(int, None, "conventional full well override (e-)"),
}


# ---------------------------------------------------------------------------
# Config handling

def parse_config_text(text: str, keys: dict[str, Key], origin: str = "<config>") -> dict[str, Any]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{origin}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in keys:
            raise UsageError(f"{origin}:{lineno}: unknown key {k!r}")
        try:
            values[k] = keys[k].parse(v)
        except ValueError as exc:
            raise UsageError(f"{origin}:{lineno}: bad value for {k}: {exc}") from None
    return values


def load_config(path: str | None, keys: dict[str, Key]) -> dict[str, Any]:
    cfg = {k: key.default for k, key in keys.items()}
    if path:
        text = Path(path).read_text(encoding="utf-8")
        cfg.update(parse_config_text(text, keys, str(path)))
        cfg["_dir"] = str(Path(path).resolve().parent)
    else:
        cfg["_dir"] = os.getcwd()
    return cfg


def _resolve(cfg, name: str) -> Path:
    p = Path(cfg[name])
    return p if p.is_absolute() else Path(cfg["_dir"]) / p


def _keys_help(keys: dict[str, Key]) -> str:
    width = max(len(k) for k in keys)
    lines = ["config keys:"]
    for k, key in keys.items():
        default = "" if key.default in (None, "") else f" (default {key.default})"
        lines.append(f"  {k.ljust(width)}  {key.help}{default}")
    return "\n".join(lines)


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        n = flag
    else:
        env = os.environ.get("QBS_THREADS", "")
        try:
            n = int(env) if env else 1
        except ValueError:
            raise UsageError(f"QBS_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def sensor_from_config(cfg: dict[str, Any]) -> SensorSpec:
    overrides = {k: cfg[k] for k in SENSOR_KEYS if cfg.get(k) is not None}
    try:
        return preset(cfg["preset"], **overrides)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None


# ---------------------------------------------------------------------------
# Commands

def cmd_simulate(config_path: str | None, out_path: str, seed: int | None = None,
                 preset_name: str | None = None, threads: int = 1) -> dict[str, str]:
    """Simulate a sequence from a config and write it as ``.qbs``; returns the metadata."""
    cfg = load_config(config_path, SIMULATE_KEYS)
    if seed is not None:
        cfg["seed"] = seed
    if preset_name is not None:
        cfg["preset"] = preset_name
    spec = sensor_from_config(cfg)
    if cfg["flux_path"]:
        flux = read_image(_resolve(cfg, "flux_path"))
    elif cfg["flux_value"] is not None:
        flux = np.full((cfg["height"], cfg["width"]), cfg["flux_value"], dtype=np.float64)
    else:
        raise UsageError("config needs flux_path or flux_value")
    flux = flux * cfg["flux_scale"]
    traj = MotionTrajectory(velocity_px_per_s=(cfg["velocity_x"], cfg["velocity_y"]),
                            jitter_px=cfg["jitter_px"], jitter_hz=cfg["jitter_hz"], jitter_seed=cfg["seed"])
    speed = math.hypot(cfg["velocity_x"], cfg["velocity_y"])
    meta: dict[str, str] = {}
    plan = None
    n_frames = cfg["n_frames"]
    if n_frames <= 0 or spec.kind == "conventional":
        plan = plan_exposure(float(np.mean(flux)), speed, spec, cfg["plan_c_t"], cfg["plan_m_max"],
                             cfg["plan_m_f"])
        if n_frames <= 0:
            n_frames = plan.n_frames
        meta["plan.n_frames"] = str(plan.n_frames)
        meta["plan.total_exposure_s"] = repr(plan.total_exposure_s)
    if n_frames < 1:
        raise DomainError("planned exposure is shorter than one frame")
    dcr_map = None
    if cfg["dcr_map"]:
        dcr = read_image(_resolve(cfg, "dcr_map"))
        dcr_map = DcrMap.from_dcr(dcr, math.inf)
    if spec.kind == "spad":
        seq = sample_spad_sequence(flux, spec, traj, n_frames, dcr_map, cfg["seed"], cfg["boundary_flux"],
                                   workers=threads)
    elif spec.kind == "jot":
        seq = sample_jot_sequence(flux, spec, traj, n_frames, 1, cfg["seed"], cfg["boundary_flux"],
                                  raw=True, workers=threads)
    else:
        if n_frames != plan.n_frames:
            plan = dataclasses.replace(plan, n_frames=n_frames)
        seq = emulate_conventional_burst(flux, spec, traj, plan, cfg["seed"], cfg["boundary_flux"], threads)
    meta.update({
        "n_frames": str(n_frames),
        "seed": str(cfg["seed"]),
        "trajectory.kind": traj.kind,
        "trajectory.velocity_x": repr(float(cfg["velocity_x"])),
        "trajectory.velocity_y": repr(float(cfg["velocity_y"])),
        "trajectory.jitter_px": repr(float(cfg["jitter_px"])),
        "trajectory.jitter_hz": repr(float(cfg["jitter_hz"])),
        "flux.source": cfg["flux_path"] or f"uniform:{cfg['flux_value']!r}",
        "flux.scale": repr(float(cfg["flux_scale"])),
        "flux.mean": repr(float(np.mean(flux))),
    })
    write_qbs(out_path, seq, meta)
    return meta


def write_flow_csv(path, block_flows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["block", "row", "col", "u", "v"])
        for b, f in enumerate(block_flows):
            gh, gw = f.grid_shape
            for i in range(gh):
                for j in range(gw):
                    w.writerow([b, i, j, repr(float(f.flow[i, j, 0])), repr(float(f.flow[i, j, 1]))])


def cmd_pipeline(seq_path: str, config_path: str | None, out_prefix: str,
                 overrides: dict[str, Any] | None = None, threads: int = 1) -> dict[str, str]:
    """Hot pixels, align + merge, finalize; returns the written file paths."""
    cfg = load_config(config_path, PIPELINE_KEYS)
    cfg.update({k: v for k, v in (overrides or {}).items() if v is not None})
    seq, _meta = read_qbs(seq_path)
    if cfg["dcr_map"]:
        dmap = DcrMap.from_dcr(read_image(_resolve(cfg, "dcr_map")), cfg["hot_threshold_cps"])
        seq = correct_hot_pixels(seq, dmap, cfg["seed"])
    acfg = AlignConfig(block_size_frames=cfg["block_size"], patch_size_px=cfg["patch_size"],
                       pyramid_levels=cfg["levels"], search_radius_px=cfg["search_radius"],
                       lambda_reg=cfg["lambda_reg"], reg_iterations=cfg["reg_iterations"],
                       match_presmooth_px=cfg["presmooth_px"])
    mcfg = MergeConfig(merge_block_size=cfg["merge_block_size"] or cfg["block_size"],
                       tile_size_px=cfg["tile_size"], noise_scale=cfg["noise_scale"])
    sr = SRConfig(upsample_factor=cfg["sr"]) if cfg["sr"] > 1 else None
    merged = merge_pipeline(seq, acfg, mcfg, sr, naive=cfg["naive"], frame_level=cfg["frame_level"],
                            workers=threads)
    denoiser = GaussianDenoiser(cfg["denoise_sigma"]) if cfg["denoise_sigma"] > 0 else None
    final = finalize_image(merged, seq.spec, cfg["gamma"], denoiser, cfg["percentile"])
    prefix = str(out_prefix)
    paths = {
        "merged": prefix + "_merged.pfm",
        "linear": prefix + "_linear.pgm",
        "display": prefix + "_display.pgm",
        "flow": prefix + "_flow.csv",
    }
    write_pfm(paths["merged"], merged.counts)
    scale = final.scale if final.scale > 0 else 1.0
    lin16 = np.rint(np.clip(final.linear / scale, 0.0, 1.0) * 65535).astype(np.uint16)
    write_pgm(paths["linear"], lin16)
    write_pgm(paths["display"], np.rint(final.display * 255).astype(np.uint8))
    write_flow_csv(paths["flow"], merged.block_flows)
    return paths


def _presets(cfg):
    try:
        return preset(cfg["quanta_preset"]), preset(cfg["conv_preset"])
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None


def cmd_analyze(kind: str, config_path: str | None, out_csv: str, preset_name: str | None = None) -> str:
    """Write an SNR-surface or DR-curve table; returns the CSV text."""
    if kind == "snr":
        cfg = load_config(config_path, SNR_KEYS)
        if preset_name:
            cfg["conv_preset"] = preset_name
        q, c = _presets(cfg)
        flux = analysis.SnrGridSpec.log_grid(cfg["flux_min"], cfg["flux_max"], cfg["flux_points"])
        speed = list(analysis.SnrGridSpec.log_grid(cfg["speed_min"], cfg["speed_max"], cfg["speed_points"]))
        if cfg["include_static"]:
            speed = [0.0] + speed
        grid = analysis.SnrGridSpec(flux, speed, q, c, cfg["c_t"], cfg["m_max"], cfg["m_f"])
        return analysis.rows_to_csv(analysis.snr_surface(grid), analysis.SNR_COLUMNS, out_csv)
    if kind == "dr":
        cfg = load_config(config_path, DR_KEYS)
        if preset_name:
            cfg["conv_preset"] = preset_name
        q, c = _presets(cfg)
        if cfg["full_well_e"] is not None:
            c = c.replace(full_well_e=cfg["full_well_e"])
        exp = np.logspace(math.log10(cfg["exposure_min"]), math.log10(cfg["exposure_max"]),
                          cfg["exposure_points"])
        curves = analysis.dr_curves(q, c, analysis.DrSpec(exp, cfg["quanta_rates"], cfg["conv_rates"],
                                                          cfg["snr_floor_db"]))
        text = analysis.rows_to_csv(curves.rows, analysis.DR_COLUMNS, out_csv)
        # crossovers go in a sidecar so the main table stays rectangular
        lines = ["quanta_rate,conv_rate,crossover_s"]
        for (qr, cr), t in curves.crossovers.items():
            lines.append(f"{qr!r},{cr!r},{'nan' if t is None else repr(t)}")
        Path(str(out_csv) + ".crossover.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        return text
    raise UsageError(f"unknown analysis kind {kind!r}")


# ---------------------------------------------------------------------------
# Argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qbs", description="Quanta burst photography toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("simulate", help="simulate a frame sequence", epilog=_keys_help(SIMULATE_KEYS),
                       formatter_class=fmt)
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--out", required=True, help="output .qbs path")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--preset", help=f"sensor preset: {', '.join(PRESETS)}")
    p.add_argument("--threads", type=int, help="worker threads (default: $QBS_THREADS or 1)")

    p = sub.add_parser("pipeline", help="align, merge and reconstruct a sequence",
                       epilog=_keys_help(PIPELINE_KEYS), formatter_class=fmt)
    p.add_argument("input", help="input .qbs sequence")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--seed", type=int, help="hot-pixel replacement seed")
    p.add_argument("--block-size", type=int, dest="block_size")
    p.add_argument("--merge-block-size", type=int, dest="merge_block_size")
    p.add_argument("--patch-size", type=int, dest="patch_size")
    p.add_argument("--levels", type=int)
    p.add_argument("--lambda", type=float, dest="lambda_reg", help="flow regularization weight")
    p.add_argument("--c", type=float, dest="noise_scale", help="robust merge factor")
    p.add_argument("--sr", type=int, help="super-resolution factor")
    p.add_argument("--naive", action="store_const", const=True, default=None, help="skip alignment")
    p.add_argument("--threads", type=int, help="worker threads (default: $QBS_THREADS or 1)")

    p = sub.add_parser("analyze", help="SNR or dynamic-range tables",
                       epilog="snr " + _keys_help(SNR_KEYS) + "\n\ndr " + _keys_help(DR_KEYS),
                       formatter_class=fmt)
    p.add_argument("kind", choices=["snr", "dr"])
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--preset", help="conventional sensor preset to compare against")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "simulate":
            threads = resolve_threads(args.threads)
            cmd_simulate(args.config, args.out, args.seed, args.preset, threads)
        elif args.command == "pipeline":
            threads = resolve_threads(args.threads)
            overrides = {k: getattr(args, k) for k in ("block_size", "merge_block_size", "patch_size", "levels",
                                                       "lambda_reg", "noise_scale", "sr", "naive", "seed")}
            cmd_pipeline(args.input, args.config, args.out, overrides, threads)
        else:
            cmd_analyze(args.kind, args.config, args.out, args.preset)
    except UsageError as exc:
        print(f"qbs: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"qbs: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DomainError, ValueError) as exc:
        print(f"qbs: error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
