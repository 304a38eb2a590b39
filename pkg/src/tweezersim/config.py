"""
Scenario configuration.

Configs are YAML mappings whose keys carry their units (``exposure_ms``,
``waist_nm``, ...). Missing optional keys take the defaults below;
``imaging.exposure_ms`` and ``pipeline`` are always required. A resolved
config converts to the SI-unit spec objects through :class:`Scenario`.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

import yaml

from .camera import CameraSpec, PSFModel, SiteLayout
from .dynamics import LifetimeModel, LoadingModel, StateChainParams, imaging_lifetime
from .physics import ImagingSpec, TransitionSpec, TrapSpec

PIPELINES = (
    "fig2a-lightshift",
    "fig2b-lifetime",
    "fig3a-histogram",
    "fig3bcd-fidelity-jumps",
    "fig4-loading",
    "rr-thermometry",
)

REQUIRED = ("pipeline", "imaging.exposure_ms")

DEFAULTS = {
    "name": "",
    "pipeline": None,
    "transition": {"wavelength_nm": 556.0, "linewidth_khz": 182.0, "mass_u": 173.9388664},
    "trap": {
        "wavelength_nm": 532.0,
        "waist_nm": 700.0,
        "power_mw": 6.0,
        "depth_mhz_per_mw": 1.0,
        "shift_fraction_mj0": 0.016,
        "shift_fraction_mj1": -0.022,
    },
    "imaging": {
        "saturation": 3.0,
        "detuning_gamma": -1.5,
        "exposure_ms": None,
        "dead_time_ms": 0.0,
        "detection_efficiency": None,
        "temperature_uk": 13.0,
    },
    "lifetime": {"tau_ref_s": 7.2, "s_ref": 3.0, "slope_per_saturation": 1.0, "tau_background_s": 60.0},
    "chain": {"tau_loss_s": None, "tau_m_s": 0.54, "p_m": 4e-3, "rate_m_to_loss_per_s": 0.0},
    "camera": {
        "pixel_pitch_nm": 300.0,
        "roi_px": 7,
        "quantum_efficiency": 0.72,
        "optics_transmission": 0.20,
        "read_noise_e": 1.5,
        "gain_counts_per_e": 1.0,
        "background_counts_per_px_s_per_tweezer": 1.0,
        "na": 0.6,
    },
    "loading": {"rows": 3, "cols": 3, "p_load": 0.49, "p_site": None},
    "run": {
        "seed": 20190117,
        "exposures_ms": [10.0, 15.0, 20.0, 25.0, 30.0, 50.0, 100.0],
        "record_s": 5.0,
        "site_frames_per_exposure": 200_000,
        "n_shots": 10_000,
        "powers_mw": [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        "shift_noise_khz": 5.0,
        "saturations": [0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0],
        "rr_temperature_uk": 6.4,
        "rr_release_us": [5.0, 10.0, 15.0, 20.0, 30.0, 40.0, 60.0, 80.0],
        "rr_shots_per_point": 200,
        "rr_traj": 10_000,
        "rr_grid_uk": [3.0, 3.5, 4.0, 4.5, 5.0, 5.5, 6.0, 6.5, 7.0, 7.5, 8.0, 9.0, 10.0, 11.0, 12.0],
        "gravity_axis": 0,
        "write_frames": False,
    },
    "analysis": {
        "min_dark_frames": 2,
        "min_bright_before": 1,
        "min_bright_after": 2,
        "jump_fit_min_exposure_ms": 30.0,
        "ci_level": 0.68,
        "classifier": "bayes",
    },
}


class ConfigError(ValueError):
    def __init__(self, path, msg):
        super().__init__(f"{path}: {msg}" if path else msg)
        self.path = path


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in over.items():
        p = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(p, "unknown key")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(p, "expected a mapping")
            out[k] = _merge(base[k], v, p)
        else:
            out[k] = v
    return out


def _get(cfg, dotted):
    cur = cfg
    for part in dotted.split("."):
        if not isinstance(cur, dict) or part not in cur:
            return None
        cur = cur[part]
    return cur


def set_dotted(cfg, dotted, value):
    """Assign ``value`` (a YAML scalar string or object) at a dotted key path."""
    if isinstance(value, str):
        value = yaml.load(value, Loader=_Loader) if value.strip() else value
    parts = dotted.split(".")
    cur, base = cfg, DEFAULTS
    for i, part in enumerate(parts[:-1]):
        if part not in base or not isinstance(base[part], dict):
            raise ConfigError(".".join(parts[: i + 1]), "unknown section")
        cur = cur.setdefault(part, {})
        base = base[part]
    if parts[-1] not in base:
        raise ConfigError(dotted, "unknown key")
    cur[parts[-1]] = value
    return cfg


class _Loader(yaml.SafeLoader):
    pass


# YAML 1.1 reads exponent floats without a dot ("4e-3") as strings
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"))


def parse_yaml(text):
    return yaml.load(text, Loader=_Loader)


def _check_number(cfg, path, positive=False, allow_none=False, integer=False):
    v = _get(cfg, path)
    if v is None and allow_none:
        return
    ok = isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)
    if ok and integer:
        ok = float(v).is_integer()
    if not ok:
        raise ConfigError(path, f"expected a {'whole ' if integer else ''}number, got {v!r}")
    if positive and v <= 0:
        raise ConfigError(path, f"must be positive, got {v!r}")


def validate(cfg):
    for key in REQUIRED:
        if _get(cfg, key) is None:
            raise ConfigError(key, "required field is missing")
    if cfg["pipeline"] not in PIPELINES:
        raise ConfigError("pipeline", f"unknown pipeline {cfg['pipeline']!r}; choose from {', '.join(PIPELINES)}")
    for path in ("imaging.exposure_ms", "transition.wavelength_nm", "transition.linewidth_khz",
                 "transition.mass_u", "trap.waist_nm", "trap.power_mw", "trap.depth_mhz_per_mw",
                 "chain.tau_m_s", "camera.pixel_pitch_nm", "run.record_s"):
        _check_number(cfg, path, positive=True)
    for path in ("run.seed", "run.site_frames_per_exposure", "run.n_shots", "camera.roi_px"):
        _check_number(cfg, path, positive=path != "run.seed", integer=True)
    _check_number(cfg, "imaging.detection_efficiency", positive=True, allow_none=True)
    _check_number(cfg, "chain.tau_loss_s", positive=True, allow_none=True)
    ex = _get(cfg, "run.exposures_ms")
    if not isinstance(ex, list) or not ex or not all(isinstance(x, (int, float)) and x > 0 for x in ex):
        raise ConfigError("run.exposures_ms", "expected a non-empty list of positive numbers")
    try:
        Scenario(cfg)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError("", f"invalid parameter: {exc}") from exc
    return cfg


def resolve(user, overrides=None):
    """Merge a user mapping over the defaults, apply dotted overrides and validate."""
    if user is None:
        user = {}
    if not isinstance(user, dict):
        raise ConfigError("", "config must be a mapping")
    cfg = _merge(DEFAULTS, user)
    for dotted, value in (overrides or {}).items():
        set_dotted(cfg, dotted, value)
    return validate(cfg)


def load_config(path, overrides=None):
    text = Path(path).read_text(encoding="utf-8")
    try:
        user = parse_yaml(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"cannot parse {path}: {exc}") from exc
    return resolve(user, overrides)


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def config_hash(cfg):
    """SHA-256 of the canonical JSON form; independent of key order."""
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


@dataclass
class Scenario:
    """SI-unit spec objects built from a resolved config mapping."""

    cfg: dict

    def __post_init__(self):
        c = self.cfg
        t, tr, im, cam, ch = c["transition"], c["trap"], c["imaging"], c["camera"], c["chain"]
        self.transition = TransitionSpec.from_hz(t["wavelength_nm"] * 1e-9, t["linewidth_khz"] * 1e3,
                                                 t["mass_u"])
        self.trap = TrapSpec(tr["wavelength_nm"] * 1e-9, tr["waist_nm"] * 1e-9, tr["power_mw"] * 1e-3,
                             tr["depth_mhz_per_mw"] * 1e9, tr["shift_fraction_mj0"], tr["shift_fraction_mj1"])
        self.camera = CameraSpec(cam["pixel_pitch_nm"] * 1e-9, int(cam["roi_px"]), cam["quantum_efficiency"],
                                 cam["optics_transmission"], cam["read_noise_e"], cam["gain_counts_per_e"],
                                 cam["background_counts_per_px_s_per_tweezer"], cam["na"])
        lt = c["lifetime"]
        self.lifetime = LifetimeModel(lt["tau_ref_s"], lt["s_ref"], lt["slope_per_saturation"], lt["tau_background_s"])
        # without an explicit loss time the lifetime model sets it at the imaging saturation
        tau_loss = ch["tau_loss_s"]
        if tau_loss is None:
            tau_loss = imaging_lifetime(c["imaging"]["saturation"], self.lifetime)
        self.chain = StateChainParams(tau_loss, ch["tau_m_s"], ch["p_m"], ch["rate_m_to_loss_per_s"])
        ld = c["loading"]
        self.layout = SiteLayout(int(ld["rows"]), int(ld["cols"]), int(cam["roi_px"]))
        p_site = ld["p_site"] if ld["p_site"] is not None else [ld["p_load"]] * self.layout.n_sites
        if len(p_site) != self.layout.n_sites:
            raise ConfigError("loading.p_site", "needs one probability per site")
        self.loading = LoadingModel(tuple(p_site))
        self.psf = PSFModel.for_imaging(self.transition, cam["na"], self.trap, im["temperature_uk"] * 1e-6)

    @property
    def name(self):
        return self.cfg["name"] or self.cfg["pipeline"]

    @property
    def seed(self):
        return int(self.cfg["run"]["seed"])

    def imaging(self, exposure_ms=None):
        im = self.cfg["imaging"]
        e = (im["exposure_ms"] if exposure_ms is None else exposure_ms) * 1e-3
        return ImagingSpec(im["saturation"], im["detuning_gamma"], e, e + im["dead_time_ms"] * 1e-3,
                           im["detection_efficiency"])
