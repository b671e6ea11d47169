"""Command-line entry point: ``v1mt <command> [options]``.

Every command accepts ``--config FILE`` (``key = value`` lines, ``#``
comments) and per-key flags; flags win over the file, unknown keys are
rejected.  Each run writes ``manifest.json`` with the resolved settings into
its output directory.

Exit codes: 0 success, 1 validation error, 2 runtime or capacity error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MANIFEST_SCHEMA = "v1mt.manifest/1"
log = logging.getLogger("v1mt")


class ConfigError(ValueError):
    pass


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


@dataclass(frozen=True)
class Key:
    type: type
    default: object
    help: str = ""


COMMON = {
    "out": Key(str, "out", "output directory"),
    "seed": Key(int, 0, "global seed"),
}

SCHEMAS = {
    "synth": {
        "stimulus": Key(str, "grating", "grating|gabor|plaid|missing_fundamental|barber_pole|gabor_array|texture"),
        "frames": Key(int, 16), "height": Key(int, 64), "width": Key(int, 64),
        "vx": Key(float, 1.0, "velocity x (px/frame)"), "vy": Key(float, 0.0, "velocity y (px/frame)"),
        "orientation": Key(float, 0.0, "grating normal, degrees"),
        "sf": Key(float, 0.1, "spatial frequency, cycles/px"), "contrast": Key(float, 1.0),
        "phase": Key(float, 0.0, "radians"), "waveform": Key(str, "sine"),
        "envelope_sigma": Key(float, 8.0), "half_angle": Key(float, 60.0, "plaid half angle, degrees"),
        "aperture_h": Key(int, 16), "aperture_w": Key(int, 48),
        "n_patches": Key(int, 10), "polarity_flip": Key(_bool, False), "bit_depth": Key(int, 8),
    },
    "infer": {
        "input": Key(str, "", "directory of frames"),
        "checkpoint": Key(str, "", "checkpoint directory (bank.json + stage2.npz)"),
        "bank": Key(str, "", "bank JSON (overrides checkpoint)"),
        "params": Key(str, "", "stage-II npz (overrides checkpoint)"),
        "iterations": Key(int, 0, "0 = model default"),
        "max_magnitude": Key(str, "auto"),
    },
    "neuro": {
        "stage": Key(int, 1, "1 or 2"),
        "checkpoint": Key(str, ""), "bank": Key(str, ""), "params": Key(str, ""),
        "units": Key(str, "all", "'all', 'a-b' or comma list"),
        "k_dirs": Key(int, 24), "half_angle": Key(float, 60.0),
        "iteration": Key(int, -1, "stage-II iteration read out"),
        "rf_units": Key(int, 8, "number of units given spectral RFs"),
        "rf_grid": Key(int, 9, "points per spectral axis"),
        "size": Key(int, 0, "probe frame size, 0 = default per stage"),
    },
    "psycho": {
        "checkpoint": Key(str, ""), "bank": Key(str, ""), "params": Key(str, ""),
    },
    "eval": {
        "model": Key(str, "", ".flo file"), "reference": Key(str, "", ".flo file"),
        "control": Key(str, "", "optional .flo file"),
    },
    "fit": {
        "stage": Key(str, "both", "1|2|both"),
        "bank": Key(str, "", "initial bank JSON"),
        "steps": Key(int, 200), "step_size": Key(float, 0.05), "momentum": Key(float, 0.9),
        "optimizer": Key(str, "sgd", "sgd|adam (stage II; stage I always uses sgd)"),
        "K2": Key(float, 16.0, "stage-II renormalisation gain"), "sigma2": Key(float, 1.0),
        "loss_decay": Key(float, 0.8), "batch_size": Key(int, 4), "size": Key(int, 32),
        "frames": Key(int, 8), "clip_norm": Key(float, 1.0), "iterations": Key(int, 12),
        "warmup_fraction": Key(float, 0.3), "pool_size": Key(int, 96),
        "stage1_steps": Key(int, 200), "stage1_size": Key(int, 16), "stage1_step_size": Key(float, 0.05),
    },
}


def read_config(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def resolve(command: str, file_values: dict, flag_values: dict) -> dict:
    schema = {**COMMON, **SCHEMAS[command]}
    unknown = sorted(set(file_values) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys for {command!r}: {', '.join(unknown)}")
    cfg = {}
    for k, key in schema.items():
        if flag_values.get(k) is not None:
            raw = flag_values[k]
        elif k in file_values:
            raw = file_values[k]
        else:
            raw = key.default
        try:
            cfg[k] = key.type(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {k!r}: {raw!r}") from exc
    return cfg


def write_manifest(out_dir: Path, command: str, cfg: dict, outputs: list, extra: dict | None = None) -> Path:
    from . import __version__

    man = {"schema": MANIFEST_SCHEMA, "package_version": __version__, "command": command,
           "config": cfg, "outputs": sorted(str(Path(p).relative_to(out_dir)) for p in outputs)}
    if extra:
        man.update(extra)
    p = out_dir / "manifest.json"
    p.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return p


# ---------------------------------------------------------------------------
# model loading
# ---------------------------------------------------------------------------

def _load_models(cfg, need_stage2: bool):
    from .stage1 import EnergyBank
    from .stage2 import Stage2

    ckpt = Path(cfg["checkpoint"]) if cfg.get("checkpoint") else None
    if cfg.get("bank"):
        bank = EnergyBank.load(cfg["bank"])
    elif ckpt is not None:
        bank = EnergyBank.load(ckpt / "bank.json")
    else:
        bank = EnergyBank.default(cfg["seed"])
    model = None
    if cfg.get("params"):
        model = Stage2.load(cfg["params"])
    elif ckpt is not None and (ckpt / "stage2.npz").exists():
        model = Stage2.load(ckpt / "stage2.npz")
    if need_stage2 and model is None:
        raise ConfigError("stage-II parameters required: pass params=... or checkpoint=...")
    return bank, model


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg, out: Path):
    from . import stimuli

    T, H, W = cfg["frames"], cfg["height"], cfg["width"]
    th = math.radians(cfg["orientation"])
    spec = stimuli.MotionSpec(velocity=(cfg["vx"], cfg["vy"]), orientation=th % (2 * math.pi),
                              spatial_frequency=cfg["sf"], contrast=cfg["contrast"], phase=cfg["phase"],
                              seed=cfg["seed"])
    kind = cfg["stimulus"]
    extra = {}
    if kind == "grating":
        seq = stimuli.drifting_grating(spec, T, H, W, cfg["waveform"])
    elif kind == "gabor":
        seq = stimuli.drifting_gabor(spec, cfg["envelope_sigma"], ((W - 1) / 2, (H - 1) / 2), T, H, W)
    elif kind == "plaid":
        speed = math.hypot(cfg["vx"], cfg["vy"])
        a, b = stimuli.plaid_specs(math.atan2(cfg["vy"], cfg["vx"]), speed, math.radians(cfg["half_angle"]),
                                   cfg["sf"], cfg["contrast"])
        seq = stimuli.plaid(a, b, T, H, W)
        extra["ioc_velocity"] = stimuli.ioc_velocity(a, b).tolist()
    elif kind == "missing_fundamental":
        seq = stimuli.missing_fundamental(spec, T, H, W)
    elif kind == "barber_pole":
        seq = stimuli.barber_pole(spec, cfg["aperture_h"], cfg["aperture_w"], T, H, W)
    elif kind == "gabor_array":
        seq = stimuli.global_gabor_array(cfg["n_patches"], (cfg["vx"], cfg["vy"]), T, H, W, seed=cfg["seed"],
                                         spatial_frequency=cfg["sf"], contrast=cfg["contrast"])
    elif kind == "texture":
        tex = stimuli.random_texture(H, W, seed=cfg["seed"])
        seq = stimuli.translate_texture(tex, (cfg["vx"], cfg["vy"]), T, cfg["polarity_flip"])
    else:
        raise ConfigError(f"unknown stimulus {kind!r}")
    files = stimuli.save_sequence(seq, out / "frames", bit_depth=cfg["bit_depth"])
    return files, extra


def cmd_infer(cfg, out: Path):
    import torch

    from . import metrics, stimuli
    from PIL import Image

    if not cfg["input"]:
        raise ConfigError("input=... is required")
    bank, model = _load_models(cfg, need_stage2=True)
    seq = stimuli.load_sequence(cfg["input"])
    if len(seq) < bank.t_window:
        raise ConfigError(f"need at least {bank.t_window} frames, got {len(seq)}")
    seq = seq[-bank.t_window:]
    with torch.no_grad():
        E0 = bank(torch.from_numpy(seq)).to(model.W1.dtype)
        flows = model(E0, iterations=cfg["iterations"] or None)
    mm = cfg["max_magnitude"]
    mm = mm if mm == "auto" else float(mm)
    files = []
    for k, f in enumerate(flows, 1):
        arr = f[0].permute(1, 2, 0).double().numpy()
        p = out / f"flow_iter{k:02d}.flo"
        metrics.write_flo(arr, p)
        img = (metrics.flow_to_color(arr, mm) * 255).round().astype(np.uint8)
        q = out / f"flow_iter{k:02d}.png"
        Image.fromarray(img).save(q)
        files += [p, q]
    return files, {"iterations": len(flows)}


def _unit_list(spec: str, n: int):
    if spec == "all":
        return list(range(n))
    if "-" in spec and "," not in spec:
        a, b = spec.split("-")
        return list(range(int(a), int(b) + 1))
    return [int(s) for s in spec.split(",") if s.strip()]


def cmd_neuro(cfg, out: Path):
    from . import neurophys as nph

    stage = cfg["stage"]
    if stage not in (1, 2):
        raise ConfigError("stage must be 1 or 2")
    bank, model = _load_models(cfg, need_stage2=stage == 2)
    files = []
    if stage == 1:
        units = _unit_list(cfg["units"], len(bank.levels))
        size = cfg["size"] or 64
        reports = nph.stage1_census(bank, units, cfg["k_dirs"], cfg["half_angle"], size=size)
        probes = {u: nph.Stage1Probe(bank, u, size=size) for u in units[:cfg["rf_units"]]}
    else:
        size = cfg["size"] or 32
        reports = nph.stage2_census(bank, model, cfg["iteration"], cfg["k_dirs"], cfg["half_angle"], size=size)
        keep = set(_unit_list(cfg["units"], len(reports)))
        reports = [r for r in reports if r.unit in keep]
        probes = {r.unit: nph.Stage2Probe(bank, model, r.unit, iteration=cfg["iteration"], size=size)
                  for r in reports[:cfg["rf_units"]]}
    nph.write_tuning_csv(out / "tuning.csv", reports)
    nph.write_classification_csv(out / "classification.csv", reports)
    files += [out / "tuning.csv", out / "classification.csv"]
    sf_grid, tf_grid = nph.default_grids(cfg["rf_grid"], cfg["rf_grid"])
    rfs = {u: nph.spectral_rf(p, sf_grid, tf_grid) for u, p in probes.items()}
    fits = {u: nph.fit_oriented_gaussian(rf) for u, rf in rfs.items()}
    speed = {u: nph.speed_tuning_partial_corr(rf) for u, rf in rfs.items()}
    nph.write_rf_csv(out / "rf.csv", rfs)
    nph.write_fits_csv(out / "fits.csv", fits, speed)
    files += [out / "rf.csv", out / "fits.csv"]
    meta = {"stage": stage, "probe": "centre location", "probe_contrast": 0.5, "k_dirs": cfg["k_dirs"],
            "plaid_half_angle_deg": cfg["half_angle"], "frame_size": size,
            "averaging": "last t_window/2 frames" if stage == 1 else f"iteration {cfg['iteration']}",
            "z_threshold": nph.Z_THRESHOLD, "rf_grid_sf": sf_grid.tolist(), "rf_grid_tf": tf_grid.tolist()}
    summary = nph.census_summary(reports, meta)
    (out / "census.json").write_text(json.dumps(summary, indent=2) + "\n")
    files.append(out / "census.json")
    if stage == 1:
        rows = nph.parameter_table(bank)
        with open(out / "parameters.csv", "w") as fh:
            fh.write(",".join(rows[0]) + "\n")
            for r in rows:
                fh.write(",".join(repr(v) for v in r.values()) + "\n")
        files.append(out / "parameters.csv")
    return files, {"census": {k: summary[k] for k in ("component", "pattern", "unclassified")}}


def cmd_psycho(cfg, out: Path):
    from . import battery

    bank, model = _load_models(cfg, need_stage2=False)
    results = [r.to_dict() for r in battery.run_battery(bank, model, seed=cfg["seed"])]
    p = out / "battery.json"
    p.write_text(json.dumps(results, indent=2) + "\n")
    return [p], {"verdicts": {r["test"]: r["verdict"] for r in results}}


def cmd_eval(cfg, out: Path):
    from . import metrics

    if not cfg["model"] or not cfg["reference"]:
        raise ConfigError("model=... and reference=... are required")
    m = metrics.read_flo(cfg["model"])
    r = metrics.read_flo(cfg["reference"])
    c = metrics.read_flo(cfg["control"]) if cfg["control"] else None
    rep = metrics.compare_flows(m, r, c)
    p = out / "report.json"
    p.write_text(rep.to_json() + "\n")
    print(rep.to_json())
    return [p], {}


def cmd_fit(cfg, out: Path):
    from . import train
    from .stage1 import EnergyBank
    from .stage2 import Stage2

    if cfg["stage"] not in ("1", "2", "both"):
        raise ConfigError("stage must be 1, 2 or both")
    bank = EnergyBank.load(cfg["bank"]) if cfg["bank"] else EnergyBank.default(cfg["seed"])
    common = dict(momentum=cfg["momentum"], seed=cfg["seed"],
                  loss_decay=cfg["loss_decay"], batch_size=cfg["batch_size"], clip_norm=cfg["clip_norm"])
    files, extra, last_cfg = [], {}, None
    if cfg["stage"] in ("1", "both"):
        c1 = train.TrainConfig(steps=cfg["stage1_steps"], step_size=cfg["stage1_step_size"], size=cfg["stage1_size"],
                               frames=bank.t_window, **common)
        fit1 = train.fit_stage1(bank, c1)
        bank, last_cfg = fit1.bank, c1
        train.write_log(out / "stage1_log.csv", fit1.losses)
        files.append(out / "stage1_log.csv")
        extra["stage1_loss"] = [fit1.losses[0], fit1.losses[-1]] if fit1.losses else []
    params = Stage2(iterations=cfg["iterations"], K2=cfg["K2"], sigma2=cfg["sigma2"], seed=cfg["seed"])
    if cfg["stage"] in ("2", "both"):
        c2 = train.TrainConfig(steps=cfg["steps"], step_size=cfg["step_size"], size=cfg["size"], frames=cfg["frames"],
                               iterations=cfg["iterations"], warmup_fraction=cfg["warmup_fraction"],
                               pool_size=cfg["pool_size"], optimizer=cfg["optimizer"], **common)
        fit2 = train.fit_stage2(params, bank, c2)
        params, last_cfg = fit2.params, c2
        train.write_log(out / "stage2_log.csv", fit2.losses, fit2.phases)
        files.append(out / "stage2_log.csv")
        extra["stage2_loss"] = [fit2.losses[0], fit2.losses[-1]] if fit2.losses else []
    ck = out / "checkpoint"
    train.save_checkpoint(ck, bank, params, last_cfg)
    files += sorted(ck.iterdir())
    return files, extra


COMMANDS = {"synth": cmd_synth, "infer": cmd_infer, "neuro": cmd_neuro, "psycho": cmd_psycho,
            "eval": cmd_eval, "fit": cmd_fit}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="v1mt", description="Two-stage motion-energy / graph-integration model.")
    p.add_argument("--threads", type=int, default=None, help="cap on intra-op worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMAS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="key = value file")
        for k, key in {**COMMON, **schema}.items():
            sp.add_argument(f"--{k.replace('_', '-')}", dest=k, default=None, help=key.help or None)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .stage2 import CapacityError

    try:
        import torch

        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            torch.set_num_threads(args.threads)
        file_values = read_config(args.config) if args.config else {}
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "threads", "verbose")}
        cfg = resolve(args.command, file_values, flags)
        torch.manual_seed(cfg["seed"])
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        files, extra = COMMANDS[args.command](cfg, out)
        write_manifest(out, args.command, cfg, files, extra)
    except (CapacityError, RuntimeError, MemoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
