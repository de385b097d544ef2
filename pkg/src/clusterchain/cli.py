"""Command-line entry point driven by JSON experiment configurations.

Subcommands: ``simulate`` writes point patterns, ``theory`` writes
closed-form PCF curves and kernels, ``validate`` runs envelope tests
against a matched Poisson null, ``gamma`` tabulates the gamma index, and
``presets``/``show``/``schema`` inspect configurations.

Exit codes: 0 success, 2 configuration error, 3 numeric or existence error.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import scipy

from .chain import ChainParams, intensity_after_n, simulate_chain, simulation_windows
from .core import (BernoulliCount, ConfigError, DomainError, FixedCount, GaussianDisplacement,
                   NegativeBinomialCount, PointPattern, PoissonCount, RandomStream,
                   UniformBallDisplacement, Window, grid_pattern)
from .equilibrium import EquilibriumConfig, simulate_equilibrium
from .noise import GaussianDPP, PoissonNoise, WeightedPermanental, pcf_coefficient, sample_noise
from .summaries import (SummaryCurve, default_bandwidth, empirical_pcf, global_rank_envelope,
                        j_function, l_function, pooled_j_function, pooled_l_function, pooled_pcf)
from .theory import PcfModelConfig, SameSystem, gamma_index, pcf_generation_n, pcf_limit

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

DEFAULTS = {
    "model": {"dim": 2, "p": 1.0, "q": 0.0, "noise": None},
    "run": {"mode": "chain", "generations": 1, "epsilon": 1e-3, "method": "thinned",
            "replicates": 1, "seed": 1, "threads": 1, "buffer_multiplier": 4.0},
    "theory": {"generations": [], "convention": "exact"},
    "validate": {"simulations": 499, "repetitions": 1, "level": 0.95,
                 "statistics": ["pcf", "L", "J"]},
    "output": {"directory": "out", "statistics": [], "r_max": 0.25, "r_steps": 256,
               "gnuplot": False},
}


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------


def _gaussian_model(offspring: dict, sd: float, noise=None, **extra) -> dict:
    return {"offspring": offspring, "displacement": {"law": "gaussian", "sd": sd},
            "noise": noise, **extra}


def _case_models() -> dict[str, dict]:
    c1, c2 = 0.1, 0.01
    nb2 = {"law": "negative_binomial", "mean": 0.95, "c": 5.0}
    return {
        "case1-poisson": _gaussian_model({"law": "poisson", "mean": 0.3}, c1,
                                         {"type": "poisson", "intensity": 70.0}),
        "case1-dpp": _gaussian_model({"law": "bernoulli", "mean": 0.3}, c1,
                                     {"type": "dpp", "intensity": 70.0,
                                      "scale": 1 / math.sqrt(70 * math.pi), "alpha": 1}),
        "case1-wper": _gaussian_model({"law": "negative_binomial", "mean": 0.3, "c": 10.0}, c1,
                                      {"type": "wper", "intensity": 70.0, "scale": 1.0,
                                       "alpha": 0.5}),
        "case2-poisson": _gaussian_model(nb2, c2, {"type": "poisson", "intensity": 5.0}),
        "case2-dpp": _gaussian_model(nb2, c2, {"type": "dpp", "intensity": 5.0,
                                               "scale": 1 / math.sqrt(5 * math.pi), "alpha": 1}),
        "case2-wper": _gaussian_model(nb2, c2, {"type": "wper", "intensity": 5.0, "scale": 1.0,
                                                "alpha": 0.5}),
    }


def _build_presets() -> dict[str, dict]:
    rho0 = 100.0
    centres = {
        "det": {"type": "dpp", "intensity": rho0, "scale": 1 / math.sqrt(rho0 * math.pi), "alpha": 1},
        "pois": {"type": "poisson", "intensity": rho0},
        "wper": {"type": "wper", "intensity": rho0, "scale": 0.1, "alpha": 0.5},
    }
    presets = {
        "fig1": {
            "name": "fig1",
            "model": _gaussian_model({"law": "poisson", "mean": 10.0}, 0.01),
            "variants": [{"label": k, "model": {"initial": v}} for k, v in centres.items()],
            "run": {"mode": "chain", "generations": 1},
            "theory": {"generations": [1]},
            "output": {"directory": "out/fig1", "r_max": 0.25, "gnuplot": True},
        },
        "fig2-dpp-centre": {
            "name": "fig2-dpp-centre",
            "extends": "fig1",
            "run": {"replicates": 1, "seed": 2},
            "output": {"directory": "out/fig2"},
        },
        "fig3": {
            "name": "fig3",
            "model": _gaussian_model({"law": "poisson", "mean": 0.8}, 0.1,
                                     initial={"type": "poisson", "intensity": rho0}),
            "variants": [
                {"label": "det", "model": {"noise": {"type": "dpp", "intensity": 20.0,
                                                     "scale": 1 / math.sqrt(20 * math.pi),
                                                     "alpha": 1}}},
                {"label": "pois", "model": {"noise": {"type": "poisson", "intensity": 20.0}}},
                {"label": "wper", "model": {"noise": {"type": "wper", "intensity": 20.0,
                                                      "scale": 0.1, "alpha": 0.5}}},
            ],
            "run": {"mode": "chain", "generations": 16},
            "theory": {"generations": [8, 16], "limit": True},
            "output": {"directory": "out/fig3", "r_max": 0.5, "gnuplot": True},
        },
    }
    cases = _case_models()
    for label, model in cases.items():
        presets[label] = {
            "name": label,
            "model": model,
            "run": {"mode": "equilibrium", "epsilon": 1e-3},
            "validate": {"simulations": 2499},
            "output": {"directory": f"out/{label}"},
        }
    presets["fig4"] = {
        "name": "fig4",
        "model": {},
        "variants": [{"label": k, "model": v} for k, v in cases.items()],
        "run": {"mode": "equilibrium", "epsilon": 1e-3},
        "validate": {"simulations": 2499, "statistics": ["pcf", "L", "J"]},
        "output": {"directory": "out/fig4", "gnuplot": True},
    }
    return presets


PRESETS = _build_presets()
PRESET_ALIASES = {"fig2": "fig2-dpp-centre"}
CASE_PRESETS = tuple(_case_models())


def preset_document(name: str) -> dict:
    """Raw document of a preset (possibly with an ``extends`` reference)."""
    key = PRESET_ALIASES.get(name, name)
    if key not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    return copy.deepcopy(PRESETS[key])


# ---------------------------------------------------------------------------
# Parsing and validation
# ---------------------------------------------------------------------------


def load_schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("config.schema.json").read_text())


def _skip_ws(text: str, i: int) -> int:
    while i < len(text) and text[i] in " \t\r\n":
        i += 1
    return i


def _value_start(text: str, path) -> int:
    """Character offset of the value at ``path`` in a JSON document.

    Walks the containers along the path, using the stdlib decoder to step
    over sibling values. Returns the deepest offset reached.
    """
    dec = json.JSONDecoder()
    pos = _skip_ws(text, 0)
    for part in path:
        if pos >= len(text) or text[pos] not in "{[":
            return pos
        i = _skip_ws(text, pos + 1)
        found = None
        if text[pos] == "{":
            while i < len(text) and text[i] != "}":
                key, i = json.decoder.scanstring(text, i + 1)
                i = _skip_ws(text, _skip_ws(text, i) + 1)
                if key == part:
                    found = i
                    break
                _, i = dec.raw_decode(text, i)
                i = _skip_ws(text, i)
                if text[i] == ",":
                    i = _skip_ws(text, i + 1)
        else:
            k = 0
            while i < len(text) and text[i] != "]":
                if k == part:
                    found = i
                    break
                _, i = dec.raw_decode(text, i)
                i = _skip_ws(text, i)
                if text[i] == ",":
                    i = _skip_ws(text, i + 1)
                k += 1
        if found is None:
            return pos
        pos = found
    return pos


def _line_of(text: str, offset: int) -> int:
    return text.count("\n", 0, offset) + 1


def _where(path) -> str:
    return "/".join(str(p) for p in path) or "<root>"


def _schema_check(doc: dict, text: str | None, source: str):
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if not errors:
        return
    lines = []
    for err in errors:
        path = list(err.absolute_path)
        line = _line_of(text, _value_start(text, path)) if text is not None else None
        anchor = f"{source}:{line}" if line is not None else source
        lines.append(f"{anchor}: {_where(path)}: {err.message}")
    raise ConfigError("\n".join(lines))


def _merge(base, over):
    """Recursive dict merge; ``over`` wins, lists are replaced."""
    if not isinstance(base, dict) or not isinstance(over, dict):
        return copy.deepcopy(over)
    for tag in ("law", "type"):
        # a different distribution or process replaces the section outright
        if tag in over and base.get(tag) != over[tag]:
            return copy.deepcopy(over)
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if k in out else copy.deepcopy(v)
    return out


def _extends_target(name: str, base_dir: Path | None) -> tuple[dict, Path | None, str]:
    """Document behind an ``extends`` value: a preset name, or a JSON file
    path (anything ending in ``.json``) relative to the extending file."""
    if not name.endswith(".json"):
        return preset_document(name), None, name
    path = Path(name)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read extended configuration: {exc.strerror}") from None
    return parse_text(text, str(path)), path.parent, str(path.resolve())


def _resolve_extends(doc: dict, base_dir: Path | None = None, seen=()) -> dict:
    name = doc.get("extends")
    if name is None:
        return doc
    parent, parent_dir, key = _extends_target(name, base_dir)
    if key in seen:
        raise ConfigError(f"circular extends reference through {name!r}")
    parent = _resolve_extends(parent, parent_dir, seen + (key,))
    child = {k: v for k, v in doc.items() if k != "extends"}
    return _merge(parent, child)


def parse_text(text: str, source: str = "<config>") -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}:1: the configuration must be a JSON object")
    _schema_check(doc, text, source)
    return doc


# ---------------------------------------------------------------------------
# Typed configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridInitial:
    """Deterministic square lattice used as a starting pattern."""

    spacing: float


@dataclass(frozen=True)
class Variant:
    label: str
    params: ChainParams
    initial: object
    model: dict


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully resolved, validated experiment.

    ``document`` is the canonical JSON form (defaults filled in, presets
    expanded); :meth:`from_document` of it rebuilds an equal config.
    """

    name: str
    variants: tuple[Variant, ...]
    window: Window
    document: dict

    @property
    def run(self) -> dict:
        return self.document["run"]

    @property
    def theory(self) -> dict:
        return self.document["theory"]

    @property
    def validate(self) -> dict:
        return self.document["validate"]

    @property
    def output(self) -> dict:
        return self.document["output"]

    @property
    def dim(self) -> int:
        return self.window.dim

    def to_json(self) -> str:
        return json.dumps(self.document, indent=2, sort_keys=True)

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.to_json() == other.to_json()

    def __hash__(self):
        return hash(self.to_json())

    @classmethod
    def from_document(cls, doc: dict, text: str | None = None, source: str = "<config>",
                      overrides: dict | None = None, base_dir: Path | None = None) -> ExperimentConfig:
        if text is None:
            _schema_check(doc, None, source)
        full = _resolve_extends(doc, base_dir)
        if overrides:
            full = _merge(full, overrides)
        _schema_check(full, None, f"{source} (resolved)")
        full = _merge(DEFAULTS, full)
        full.pop("extends", None)
        full.setdefault("name", Path(source).stem if source != "<config>" else "experiment")
        dim = int(full["model"]["dim"])
        run = full["run"]
        run.setdefault("window", {"lower": [0.0] * dim, "upper": [1.0] * dim})
        try:
            window = Window(tuple(run["window"]["lower"]), tuple(run["window"]["upper"]))
        except DomainError as exc:
            raise ConfigError(f"{source}: run/window: {exc}") from None
        if window.dim != dim:
            raise ConfigError(f"{source}: run/window: window dimension {window.dim} != model dim {dim}")
        if not full["theory"]["generations"] and run["mode"] == "chain":
            full["theory"]["generations"] = [run["generations"]]
        full["theory"].setdefault("limit", run["mode"] == "equilibrium")
        base = full["model"]
        raw = full.get("variants") or [{"label": full["name"], "model": {}}]
        full["variants"] = [{"label": v["label"], "model": v.get("model", {})} for v in raw]
        labels = [v["label"] for v in raw]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"{source}: variants: labels must be unique")
        variants = []
        for i, v in enumerate(raw):
            model = _merge(base, v.get("model", {}))
            variants.append(_build_variant(v["label"], model, run, f"{source}: variants/{i}/model"))
        return cls(full["name"], tuple(variants), window, full)


def _count_law(d: dict):
    law = d["law"]
    if law == "poisson":
        return PoissonCount(d["mean"])
    if law == "bernoulli":
        return BernoulliCount(d["mean"])
    if law == "negative_binomial":
        return NegativeBinomialCount.from_c(d["mean"], d["c"])
    return FixedCount(d["k"])


def _displacement(d: dict, dim: int):
    if d["law"] == "gaussian":
        return GaussianDisplacement.from_sd(d["sd"], dim)
    return UniformBallDisplacement(d["radius"], dim)


def _process(d: dict | None, dim: int):
    if d is None:
        return None
    kind = d["type"]
    if kind == "grid":
        return GridInitial(d["spacing"])
    if kind == "poisson":
        return PoissonNoise(d["intensity"])
    if kind == "dpp":
        spec = GaussianDPP(d["intensity"], d["scale"], d.get("alpha", 1))
        spec.check_exists(dim)
        return spec
    return WeightedPermanental(d["intensity"], d["scale"], d.get("alpha", 0.5), d.get("grid_step"))


def _build_variant(label: str, model: dict, run: dict, where: str) -> Variant:
    for key in ("offspring", "displacement"):
        if key not in model:
            raise ConfigError(f"{where}: missing required section {key!r}")
    dim = int(model["dim"])
    try:
        noise = _process(model.get("noise"), dim)
        if isinstance(noise, GridInitial):
            raise ConfigError(f"{where}/noise: a grid is not a stationary noise process")
        params = ChainParams(_count_law(model["offspring"]), _displacement(model["displacement"], dim),
                             model["p"], model["q"], noise)
        initial = _process(model.get("initial"), dim)
    except ConfigError as exc:
        raise ConfigError(str(exc) if str(exc).startswith(where) else f"{where}: {exc}") from None
    if run["mode"] == "chain" and initial is None:
        raise ConfigError(f"{where}: chain mode needs an 'initial' process")
    if run["mode"] == "equilibrium":
        # raises DomainError when no equilibrium exists
        EquilibriumConfig(params, Window.unit(dim), run["epsilon"], run["buffer_multiplier"])
    return Variant(label, params, initial, model)


def load_config(path=None, preset: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Read, validate and resolve a configuration file or preset."""
    if (path is None) == (preset is None):
        raise ConfigError("give exactly one of a config path or --preset")
    if preset is not None:
        return ExperimentConfig.from_document(preset_document(preset), source=f"<preset {preset}>",
                                              overrides=overrides)
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read configuration: {exc.strerror}") from None
    doc = parse_text(text, str(path))
    return ExperimentConfig.from_document(doc, text, str(path), overrides, p.parent)


# ---------------------------------------------------------------------------
# Replicates
# ---------------------------------------------------------------------------


def replicate_stream(seed: int, label: str, index: int) -> RandomStream:
    return RandomStream(seed).split("variant", label).split("replicate", index)


def _initial_pattern(spec, window: Window, rng: RandomStream) -> PointPattern:
    if isinstance(spec, GridInitial):
        return grid_pattern(window, spec.spacing)
    return sample_noise(spec, window, rng)


def simulate_replicate(variant: Variant, run: dict, window: Window, index: int) -> PointPattern:
    """One replicate of ``variant``; depends only on the seed, label and index."""
    rng = replicate_stream(run["seed"], variant.label, index)
    bm = run["buffer_multiplier"]
    if run["mode"] == "equilibrium":
        cfg = EquilibriumConfig(variant.params, window, run["epsilon"], bm)
        return simulate_equilibrium(cfg, rng, method=run["method"])
    n = run["generations"]
    wins = simulation_windows(window, [variant.params] * n, bm)
    start = _initial_pattern(variant.initial, wins[0], rng.split("initial"))
    traces = simulate_chain(start, variant.params, n, window, bm, rng.split("chain"))
    return traces[-1].pattern


def _replicate_task(args):
    return simulate_replicate(*args).points


def _fan_out(fn, jobs, threads: int):
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(threads) as pool:
            return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * threads))))
    return [fn(j) for j in jobs]


def simulate_replicates(cfg: ExperimentConfig, variant: Variant, indices) -> list[PointPattern]:
    jobs = [(variant, cfg.run, cfg.window, i) for i in indices]
    pts = _fan_out(_replicate_task, jobs, cfg.run["threads"])
    return [PointPattern(p, cfg.window) for p in pts]


def model_intensity(cfg: ExperimentConfig, variant: Variant) -> float:
    """Intensity of the simulated process under the variant's model."""
    pr = variant.params
    if cfg.run["mode"] == "equilibrium":
        return pr.rho_z / (1 - pr.growth)
    init = variant.initial
    if isinstance(init, GridInitial):
        raise DomainError("a grid start has no stationary intensity")
    gens = [(pr.beta, pr.p, pr.q, pr.rho_z)] * cfg.run["generations"]
    return intensity_after_n(init.intensity, gens)


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

COORDS = ("x", "y", "z")


def write_pattern_csv(path: Path, pattern: PointPattern):
    d = pattern.dim
    header = ",".join(COORDS[:d]) if d <= 3 else ",".join(f"x{i + 1}" for i in range(d))
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        for row in pattern.points:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_pattern_csv(path, window: Window) -> PointPattern:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return PointPattern(data.reshape(-1, window.dim), window)


def write_columns(path: Path, header: list[str], columns):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*columns):
            fh.write(",".join(f"{float(v):.17g}" for v in row) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, cfg: ExperimentConfig, command: str, files: list[Path], extra=None):
    from . import __version__

    manifest = {
        "command": command,
        "name": cfg.name,
        "seed": cfg.run["seed"],
        "config": cfg.document,
        "versions": {"clusterchain": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "files": [{"path": f.name, "sha256": _sha256(f)} for f in files],
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _write_gnuplot(path: Path, plots: list[tuple[str, list[tuple[str, str]]]]):
    """Minimal gnuplot script: one ``plot`` per entry of (title, [(file, spec)])."""
    lines = ["set datafile separator ','", "set key autotitle columnhead", "set term pngcairo",
             ""]
    for title, series in plots:
        lines.append(f"set output '{title}.png'")
        lines.append(f"set title '{title}'")
        lines.append("plot " + ", \\\n     ".join(f"'{f}' {spec}" for f, spec in series))
        lines.append("")
    path.write_text("\n".join(lines))


def _r_grid(cfg: ExperimentConfig, r_max: float | None = None) -> np.ndarray:
    o = cfg.output
    return np.linspace(0.0, o["r_max"] if r_max is None else r_max, o["r_steps"] + 1)


def j_r_max(cfg: ExperimentConfig, intensity: float) -> float:
    """Upper end of the J grid: the empty-space distance exceeded with probability 0.1."""
    if "j_r_max" in cfg.output:
        return cfg.output["j_r_max"]
    d = cfg.dim
    vol = math.pi ** (d / 2) / math.gamma(d / 2 + 1)
    return (math.log(10) / (vol * intensity)) ** (1 / d)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output["directory"])
    out.mkdir(parents=True, exist_ok=True)
    files, counts = [], {}
    plots = []
    for v in cfg.variants:
        pats = simulate_replicates(cfg, v, range(cfg.run["replicates"]))
        counts[v.label] = [len(p) for p in pats]
        for i, pat in enumerate(pats):
            f = out / f"{v.label}_{i:04d}.csv"
            write_pattern_csv(f, pat)
            files.append(f)
        plots.append((f"{v.label}_0000", [(f"{v.label}_0000.csv", "using 1:2 with points pt 7 ps 0.3")]))
        if cfg.output["statistics"]:
            rho = sum(counts[v.label]) / (len(pats) * cfg.window.volume)
            for stat in cfg.output["statistics"]:
                curve = _pooled_summary(stat, pats, cfg, rho)
                f = out / f"{v.label}_{stat}.csv"
                write_columns(f, ["r", "value"], [curve.r, curve.values])
                files.append(f)
    if cfg.output["gnuplot"] and cfg.dim == 2:
        _write_gnuplot(out / "plot.gp", plots)
        files.append(out / "plot.gp")
    write_manifest(out, cfg, "simulate", files, {"counts": counts})
    return out


def _pooled_summary(stat: str, pats, cfg: ExperimentConfig, rho: float) -> SummaryCurve:
    if stat == "pcf":
        return pooled_pcf(pats, default_bandwidth(rho), _r_grid(cfg))
    if stat == "L":
        return pooled_l_function(pats, _r_grid(cfg))
    return pooled_j_function(pats, np.linspace(0, j_r_max(cfg, rho), cfg.output["r_steps"] + 1))


def _generation_model(cfg: ExperimentConfig, v: Variant):
    try:
        return v.params.generation_model(cfg.theory["convention"])
    except DomainError as exc:
        raise ConfigError(f"variant {v.label!r}: {exc}") from None


def same_system(cfg: ExperimentConfig, v: Variant) -> SameSystem:
    gen = _generation_model(cfg, v)
    return SameSystem(gen.beta, gen.nu, gen.sigma2, gen.p, gen.q, gen.rho_z, dim=cfg.dim,
                      noise=gen.noise_kernel(cfg.dim))


def gamma_row(v: Variant, dim: int = 2) -> dict:
    """Gamma index under both noise-coefficient conventions."""
    pr = v.params
    row = {"label": v.label, "beta": pr.beta, "nu": pr.nu, "p": pr.p, "q": pr.q, "rho_z": pr.rho_z}
    for conv in ("exact", "paper"):
        b = pcf_coefficient(pr.noise, dim, conv).b
        row[f"b_{conv}"] = b
        row[f"gamma_{conv}"] = gamma_index(pr.beta, pr.nu, pr.p, pr.q, pr.rho_z, b)
    if isinstance(pr.noise, GaussianDPP) and dim == 2:
        # literature constant with the kernel scale taken from the total
        # intensity rho_G instead of rho_Z, i.e. b = -1/rho_G
        b = -1.0 / (pr.rho_z / (1 - pr.growth))
        row["b_paper_rho_g_scale"] = b
        row["gamma_paper_rho_g_scale"] = gamma_index(pr.beta, pr.nu, pr.p, pr.q, pr.rho_z, b)
    return row


def cmd_theory(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output["directory"])
    out.mkdir(parents=True, exist_ok=True)
    r = _r_grid(cfg)
    files, plots, gammas = [], [], []
    conv = cfg.theory["convention"]
    for v in cfg.variants:
        gen = _generation_model(cfg, v)
        curves = []
        if cfg.theory["generations"]:
            init = v.initial
            if init is None or isinstance(init, GridInitial):
                raise ConfigError(f"variant {v.label!r}: finite-generation PCFs need a stationary "
                                  "initial process")
            model = PcfModelConfig.same_system(init.intensity,
                                               pcf_coefficient(init, cfg.dim, conv).kernel(), gen,
                                               max(cfg.theory["generations"]))
            for n in cfg.theory["generations"]:
                curves.append((f"g{n}", pcf_generation_n(model, n)))
        if cfg.theory["limit"]:
            system = same_system(cfg, v)
            curves.append(("limit", pcf_limit(system)))
            row = gamma_row(v, cfg.dim)
            row["kernel_total_weight"] = curves[-1][1].total_weight
            gammas.append(row)
        series = []
        for tag, kernel in curves:
            stem = f"{v.label}_{tag}"
            write_columns(out / f"{stem}.csv", ["r", "g"], [r, 1 + np.asarray(kernel(r))])
            (out / f"{stem}.json").write_text(kernel.to_json(indent=2) + "\n")
            files += [out / f"{stem}.csv", out / f"{stem}.json"]
            series.append((f"{stem}.csv", f"using 1:2 with lines title '{stem}'"))
        plots.append((f"{v.label}_pcf", series))
    if gammas:
        f = out / "gamma.json"
        f.write_text(json.dumps(gammas, indent=2) + "\n")
        files.append(f)
    if cfg.output["gnuplot"]:
        _write_gnuplot(out / "plot.gp", plots)
        files.append(out / "plot.gp")
    write_manifest(out, cfg, "theory", files)
    return out


def _curve(stat: str, pattern: PointPattern, r: np.ndarray, bandwidth: float) -> np.ndarray:
    if stat == "pcf":
        return empirical_pcf(pattern, bandwidth=bandwidth, r_grid=r).values
    if stat == "L":
        return l_function(pattern, r_grid=r).values
    return j_function(pattern, r_grid=r).values


def _null_task(args):
    seed, intensity, window, index, grids, bandwidth = args
    rng = RandomStream(seed).split("null", index)
    pat = sample_noise(PoissonNoise(intensity), window, rng)
    return {s: _curve(s, pat, r, bandwidth) for s, r in grids.items()}


def _observed_task(args):
    variant, run, window, index, grids, bandwidth = args
    pat = simulate_replicate(variant, run, window, index)
    return {s: _curve(s, pat, r, bandwidth) for s, r in grids.items()}


def validate_variant(cfg: ExperimentConfig, v: Variant, null_cache: dict | None = None) -> dict:
    """Envelope tests of one variant against a Poisson null of the model intensity.

    Returns per-statistic verdict summaries plus the envelope of the first
    repetition.
    """
    val = cfg.validate
    rho = model_intensity(cfg, v)
    bw = default_bandwidth(rho)
    grids = {s: (_r_grid(cfg) if s != "J" else
                 np.linspace(0, j_r_max(cfg, rho), cfg.output["r_steps"] + 1))
             for s in val["statistics"]}
    key = (rho, val["simulations"], tuple(val["statistics"]))
    cache = {} if null_cache is None else null_cache
    if key not in cache:
        jobs = [(cfg.run["seed"], rho, cfg.window, i, grids, bw) for i in range(val["simulations"])]
        cache[key] = _fan_out(_null_task, jobs, cfg.run["threads"])
    null = cache[key]
    jobs = [(v, cfg.run, cfg.window, i, grids, bw) for i in range(val["repetitions"])]
    observed = _fan_out(_observed_task, jobs, cfg.run["threads"])
    result = {}
    for s, r in grids.items():
        sims = [SummaryCurve(s, r, c[s]) for c in null]
        envs = [global_rank_envelope(SummaryCurve(s, r, o[s]), sims, val["level"]) for o in observed]
        outside = sum(not e.inside for e in envs)
        result[s] = {
            "verdict": "outside" if 2 * outside > len(envs) else "inside",
            "outside": outside,
            "repetitions": len(envs),
            "p_values": [e.p_value for e in envs],
            "envelope": envs[0],
        }
    return {"intensity": rho, "statistics": result}


def cmd_validate(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output["directory"])
    out.mkdir(parents=True, exist_ok=True)
    files, plots, table = [], [], {}
    cache: dict = {}
    for v in cfg.variants:
        res = validate_variant(cfg, v, cache)
        row = {"intensity": res["intensity"]}
        for s, info in res["statistics"].items():
            f = out / f"{v.label}_{s}_envelope.csv"
            info["envelope"].to_csv(f)
            files.append(f)
            plots.append((f"{v.label}_{s}", [
                (f.name, "using 1:2 with lines lt 2 title 'lo'"),
                (f.name, "using 1:3 with lines lt 2 title 'hi'"),
                (f.name, "using 1:4 with lines lt 1 title 'observed'")]))
            row[s] = {k: info[k] for k in ("verdict", "outside", "repetitions", "p_values")}
        table[v.label] = row
    f = out / "verdicts.json"
    f.write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    files.append(f)
    if cfg.output["gnuplot"]:
        _write_gnuplot(out / "plot.gp", plots)
        files.append(out / "plot.gp")
    write_manifest(out, cfg, "validate", files)
    return out


def gamma_report(names=CASE_PRESETS) -> list[dict]:
    rows = []
    for name in names:
        cfg = load_config(preset=name)
        for v in cfg.variants:
            row = gamma_row(v, cfg.dim)
            row["label"] = name if len(cfg.variants) == 1 else f"{name}/{v.label}"
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------


def _overrides(args) -> dict:
    ov: dict = {}
    if getattr(args, "seed", None) is not None:
        ov.setdefault("run", {})["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        ov.setdefault("run", {})["threads"] = args.threads
    if getattr(args, "out", None) is not None:
        ov.setdefault("output", {})["directory"] = args.out
    return ov


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="clusterchain", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def runnable(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", nargs="?", help="JSON configuration file")
        p.add_argument("--preset", help="use a built-in configuration")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--threads", type=int, help="worker processes (results do not depend on it)")
        p.add_argument("--out", help="override output.directory")
        return p

    runnable("simulate", "simulate replicate patterns")
    runnable("theory", "closed-form PCF curves and kernels")
    runnable("validate", "envelope tests against a matched Poisson null")
    runnable("show", "print the resolved configuration")
    g = sub.add_parser("gamma", help="gamma index table for the case presets")
    g.add_argument("--preset", action="append", help="restrict to these presets")
    g.add_argument("--out", help="also write gamma.json here")
    sub.add_parser("presets", help="list built-in presets")
    sub.add_parser("schema", help="print the configuration JSON schema")
    return ap


COMMANDS = {"simulate": cmd_simulate, "theory": cmd_theory, "validate": cmd_validate}


def run(args) -> int:
    if args.command == "presets":
        for name in sorted(PRESETS):
            print(name)
        for alias, target in sorted(PRESET_ALIASES.items()):
            print(f"{alias} -> {target}")
        return EXIT_OK
    if args.command == "schema":
        print(json.dumps(load_schema(), indent=2))
        return EXIT_OK
    if args.command == "gamma":
        rows = gamma_report(tuple(args.preset) if args.preset else CASE_PRESETS)
        text = json.dumps(rows, indent=2)
        print(text)
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "gamma.json").write_text(text + "\n")
        return EXIT_OK
    if args.threads is not None and args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    cfg = load_config(args.config, args.preset, _overrides(args))
    if args.command == "show":
        print(cfg.to_json())
        return EXIT_OK
    out = COMMANDS[args.command](cfg)
    print(f"wrote {out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConfigError as exc:
        print(f"clusterchain: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DomainError, ArithmeticError) as exc:
        print(f"clusterchain: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
