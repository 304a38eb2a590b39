"""
Command line interface.

    tweezersim simulate   --config cfg.yaml --out DIR     simulate and archive frames
    tweezersim classify   --frames DIR/frames.twza ...    calibrate + label an archived stack
    tweezersim analyze    --labels DIR/labels.twza        transition statistics and jumps
    tweezersim reproduce  <figure> [--out DIR]            run a built-in figure scenario
    tweezersim run        --config cfg.yaml --out DIR      run the config's pipeline
    tweezersim selftest                                    quick physics sanity checks

Every flag has an environment fallback: TWEEZERSIM_CONFIG, TWEEZERSIM_SEED,
TWEEZERSIM_OUT, TWEEZERSIM_JOBS. ``--set key=value`` overrides any config
key by dotted path and may repeat.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis as an
from . import archive
from .config import PIPELINES, ConfigError, Scenario, config_hash, load_config, resolve

ENV = {"config": "TWEEZERSIM_CONFIG", "seed": "TWEEZERSIM_SEED", "out": "TWEEZERSIM_OUT", "jobs": "TWEEZERSIM_JOBS"}


def _common(p):
    p.add_argument("--config", default=os.environ.get(ENV["config"]))
    p.add_argument("--seed", type=int, default=_env_int("seed"))
    p.add_argument("--out", default=os.environ.get(ENV["out"]))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides")
    p.add_argument("--jobs", type=int, default=_env_int("jobs") or 1)


def _env_int(key):
    v = os.environ.get(ENV[key])
    return int(v) if v not in (None, "") else None


def _overrides(args):
    ov = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        k, v = item.split("=", 1)
        ov[k.strip()] = v
    if args.seed is not None:
        ov["run.seed"] = str(args.seed)
    return ov


def _load(args, default_pipeline=None):
    ov = _overrides(args)
    if args.config:
        return load_config(args.config, ov)
    if default_pipeline:
        from .runner import builtin_config

        return resolve(builtin_config(default_pipeline), ov)
    raise ConfigError("config", "no config given (use --config or TWEEZERSIM_CONFIG)")


def _out(args, default="."):
    p = Path(args.out or default)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _print_manifest(man):
    for c in man.acceptance:
        print(f"{'PASS' if c['pass'] else 'FAIL'}  {c['name']}: measured {c['measured']} "
              f"target {c['target']} tol {c['tolerance']} ({c['rule']})")
    if man.path:
        print(f"manifest: {man.path}")


def cmd_run(args):
    from .runner import run_config

    cfg = _load(args)
    man = run_config(cfg, _out(args), args.jobs)
    _print_manifest(man)
    return 0 if man.passed else 1


def cmd_reproduce(args):
    from .runner import builtin_config, run_config

    ov = _overrides(args)
    cfg = load_config(args.config, ov) if args.config else resolve(builtin_config(args.figure), ov)
    if cfg["pipeline"] != args.figure:
        raise ConfigError("pipeline", f"config runs {cfg['pipeline']!r}, not {args.figure!r}")
    man = run_config(cfg, _out(args, f"out/{args.figure}"), args.jobs)
    _print_manifest(man)
    return 0 if man.passed else 1


def cmd_simulate(args):
    from . import pipelines as pl

    cfg = _load(args, "fig3a-histogram")
    sc = Scenario(cfg)
    ms = cfg["imaging"]["exposure_ms"]
    job = pl.make_job(sc, ms, 0)
    n_rec = args.records or pl.records_for(job, cfg["run"]["site_frames_per_exposure"])
    block = pl.simulate_block(job, n_rec, args.jobs)
    out = _out(args)
    h = config_hash(cfg)
    meta = {"seed": sc.seed, "config_hash": h, "exposure": block.exposure, "frame_period": block.frame_period,
            "layout": [sc.layout.rows, sc.layout.cols, sc.layout.roi]}
    archive.save(out / "frames.twza", "roi_frames",
                 {"rois": block.rois.astype("<i4"), "truth": block.truth(), "loaded": block.loaded.astype("u1")},
                 meta)
    (out / "config.json").write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"{block.rois.shape[0]} records x {block.rois.shape[1]} frames x {sc.layout.n_sites} sites -> "
          f"{out / 'frames.twza'}")
    return 0


def _layout_from(meta):
    from .camera import SiteLayout

    r, c, roi = meta["layout"]
    return SiteLayout(r, c, roi)


def cmd_classify(args):
    from .classify import calibrate, classify_bayes, classify_threshold

    kind, arr, meta = archive.load(args.frames)
    if kind != "roi_frames":
        raise SystemExit(f"{args.frames}: expected a frame archive, found {kind!r}")
    layout = _layout_from(meta)
    cfg = _load(args, "fig3a-histogram")
    cam = Scenario(cfg).camera
    cal = calibrate(arr["rois"], layout, read_noise=cam.read_noise * cam.gain, gain=cam.gain)
    fn = classify_threshold if args.method == "threshold" else classify_bayes
    st = fn(arr["rois"], cal, layout, meta["frame_period"], meta["exposure"])
    out = _out(args)
    (out / "labels.twza").write_bytes(archive.encode(st, {"seed": meta["seed"], "config_hash": meta["config_hash"]}))
    rows = [{"site": k, "prior_bright": c.prior_bright, "threshold": c.threshold,
             "bright_sum": float(c.bright_template.sum()), "background_sum": float(c.background_template.sum())}
            for k, c in enumerate(cal)]
    archive.write_csv(out / "calibration.csv", rows, list(rows[0]), meta["seed"], meta["config_hash"])
    if "truth" in arr:
        t = arr["truth"]
        from .pipelines import classifier_errors

        e = classifier_errors(st.labels, t)
        print(f"{args.method}: b->d {e.p_bd.value:.3g}, d->b {e.p_db.value:.3g} against ground truth")
    print(f"labels -> {out / 'labels.twza'}")
    return 0


def cmd_analyze(args):
    st = archive.decode(Path(args.labels).read_bytes())
    _, _, meta = archive.read_bytes(Path(args.labels).read_bytes())
    a = _load(args, "fig3bcd-fidelity-jumps")["analysis"]
    jumps = an.detect_jumps(st, a["min_dark_frames"], a["min_bright_before"], a["min_bright_after"])
    s = an.excluded_error_rate(st, jumps, a["ci_level"])
    row = {"exposure_ms": st.exposure * 1e3, **s.counts, "p_bd": s.p_bd.value, "p_db": s.p_db.value,
           "p_db_excl": s.p_db_excl.value, "infidelity": s.infidelity.value,
           "n_jumps": sum(not e.right_censored for e in jumps)}
    out = _out(args)
    archive.write_csv(out / "transitions.csv", [row], list(row), meta.get("seed", ""), meta.get("config_hash", ""))
    for k, v in row.items():
        print(f"{k}: {v}")
    return 0


def cmd_selftest(args):
    from .physics import YB174_556, TrapSpec, doppler_limit_temperature, light_shift, trap_depth

    checks = []
    t = doppler_limit_temperature(YB174_556, 0.0, -0.5)
    checks.append(("doppler minimum 4.37 uK", abs(t * 1e6 - 4.37) / 4.37 < 0.02))
    d = trap_depth(TrapSpec())
    checks.append(("6 mW -> 6 MHz", abs(d.depth_freq - 6e6) < 6e4))
    checks.append(("6 MHz -> 0.288 mK", abs(d.depth_temp * 1e3 - 0.288) / 0.288 < 0.01))
    s = light_shift(TrapSpec(), 6e6, 0)
    checks.append(("light shift ~ Gamma/2", abs(s - YB174_556.linewidth_hz / 2) / (YB174_556.linewidth_hz / 2) < 0.1))
    checks.append(("N_max(4.5e-3) = 222", an.max_defect_free_size(4.5e-3) == 222))
    rt = archive.archive_roundtrip(an.ClassifiedStack.from_labels(np.array([[1, 0, 1]], bool)))
    checks.append(("archive roundtrip", bool(np.array_equal(rt.labels, [[True, False, True]]))))
    for name, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return 0 if all(ok for _, ok in checks) else 1


def build_parser():
    p = argparse.ArgumentParser(prog="tweezersim", description=__doc__.split("\n\n")[0].strip())
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate frames and write a frame archive")
    _common(s)
    s.add_argument("--records", type=int, default=None, help="number of records (default: from site_frames)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("classify", help="calibrate and label a frame archive")
    _common(s)
    s.add_argument("--frames", required=True)
    s.add_argument("--method", choices=("bayes", "threshold"), default="bayes")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("analyze", help="transition statistics and jumps from a label archive")
    _common(s)
    s.add_argument("--labels", required=True)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("reproduce", help="run a built-in figure scenario")
    _common(s)
    s.add_argument("figure", choices=PIPELINES)
    s.set_defaults(func=cmd_reproduce)

    s = sub.add_parser("run", help="run the pipeline named in a config file")
    _common(s)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("selftest", help="quick sanity checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
