"""Experiment configuration: TOML schema, validation, and builders.

A config file declares one experiment: the forward map, the truth and
initialization distributions for the parameters u, sample counts, flow
settings, optional reference noise, and named thresholds for the theory
verdicts.  Unknown sections or keys are hard errors; silent typos in
experiment configs are the main reproducibility hazard.

Per-run randomness derives from the single top-level seed: child seeds
are SeedSequence(seed).generate_state(4) used in the fixed order
(truth sampling, reference noise, init sampling, init2 sampling).
"""

import json
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .ensemble import KdeConfig, ParticleEnsemble, sample_gaussian, sample_uniform
from .errors import ConfigError
from .flow import FlowConfig
from .forward import Elliptic1D, Elliptic2D, EllipticGrid2D, LinearMap

__all__ = ["ExperimentConfig", "DistSpec", "parse_config", "load_config", "dump_config", "build_forward"]

_SCHEMA = {
    "": {"name", "output_dir", "n_ref", "n_sim", "seed"},
    "forward": {"kind", "matrix", "measure_points", "n_cells", "receivers", "f"},
    "truth": {"kind", "mean", "cov", "coords"},
    "init": {"kind", "mean", "cov", "coords"},
    "init2": {"kind", "mean", "cov", "coords"},
    "flow": {"dt", "n_iters", "divergence", "record_every", "kde_rule", "kde_bandwidth"},
    "noise": {"sigma"},
    "thresholds": None,  # free-form name -> number map
    "gd": {"y_star", "u_init", "dt", "n_iters"},
}

_FORWARD_KEYS = {
    "linear": {"kind", "matrix"},
    "elliptic1d": {"kind", "measure_points"},
    "elliptic2d": {"kind", "n_cells", "receivers", "f"},
}


@dataclass(frozen=True)
class DistSpec:
    """Distribution of the parameter vector u.

    Either a joint Gaussian (mean vector + covariance) or a product of
    independent per-coordinate laws, each gaussian(mean, var) or
    uniform(lo, hi).  Per-coordinate sampling derives one child seed per
    coordinate (SeedSequence spawn order = coordinate order).
    """

    kind: str  # "gaussian" | "product"
    params: tuple

    @classmethod
    def from_dict(cls, d, where):
        if "coords" in d:
            if set(d) != {"coords"}:
                raise ConfigError(f"[{where}] with coords takes no other keys")
            coords = []
            for i, c in enumerate(d["coords"]):
                ck = c.get("kind")
                if ck == "gaussian":
                    _require_keys(c, {"kind", "mean", "var"}, f"{where}.coords[{i}]")
                    if not c["var"] > 0:
                        raise ConfigError(f"[{where}] coords[{i}]: var must be > 0")
                    coords.append(("gaussian", float(c["mean"]), float(c["var"])))
                elif ck == "uniform":
                    _require_keys(c, {"kind", "lo", "hi"}, f"{where}.coords[{i}]")
                    if not c["lo"] < c["hi"]:
                        raise ConfigError(f"[{where}] coords[{i}]: need lo < hi")
                    coords.append(("uniform", float(c["lo"]), float(c["hi"])))
                else:
                    raise ConfigError(f"[{where}] coords[{i}]: kind must be gaussian or uniform")
            return cls("product", tuple(coords))
        if d.get("kind") != "gaussian":
            raise ConfigError(f"[{where}] needs coords=[...] or kind='gaussian'")
        _require_keys(d, {"kind", "mean", "cov"}, where)
        mean = tuple(float(x) for x in d["mean"])
        cov = tuple(tuple(float(x) for x in row) for row in d["cov"])
        return cls("gaussian", (mean, cov))

    @property
    def dim(self):
        if self.kind == "gaussian":
            return len(self.params[0])
        return len(self.params)

    def sample(self, n, seed):
        if self.kind == "gaussian":
            mean, cov = self.params
            return sample_gaussian(mean, cov, n, seed)
        child = np.random.SeedSequence(seed).generate_state(self.dim)
        cols = []
        for c, s in zip(self.params, child):
            if c[0] == "gaussian":
                ens = sample_gaussian([c[1]], [[c[2]]], n, int(s))
            else:
                ens = sample_uniform([c[1]], [c[2]], n, int(s))
            cols.append(ens.particles)
        return ParticleEnsemble(np.hstack(cols), seed_provenance=int(seed))

    def to_dict(self):
        if self.kind == "gaussian":
            return {"kind": "gaussian", "mean": list(self.params[0]),
                    "cov": [list(r) for r in self.params[1]]}
        out = []
        for c in self.params:
            if c[0] == "gaussian":
                out.append({"kind": "gaussian", "mean": c[1], "var": c[2]})
            else:
                out.append({"kind": "uniform", "lo": c[1], "hi": c[2]})
        return {"coords": out}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    n_ref: int
    n_sim: int
    seed: int
    forward: dict
    truth: DistSpec
    init: DistSpec
    flow: FlowConfig
    init2: DistSpec = None
    noise_sigma: float = None
    thresholds: dict = field(default_factory=dict)
    gd: dict = None
    output_dir: str = None


def _require_keys(d, allowed, where):
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown config key(s) in [{where}]: {sorted(unknown)}")


def parse_config(text):
    """Parse and validate a TOML config string into an ExperimentConfig."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None
    sections = {k for k, v in raw.items() if isinstance(v, dict)}
    unknown = (sections - (set(_SCHEMA) - {""})) | (set(raw) - sections - _SCHEMA[""])
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    for sect in ("name", "n_ref", "n_sim", "seed", "forward", "truth", "init", "flow"):
        if sect not in raw:
            raise ConfigError(f"missing required config entry: {sect}")

    fwd = dict(raw["forward"])
    kind = fwd.get("kind")
    if kind not in _FORWARD_KEYS:
        raise ConfigError("forward.kind must be linear, elliptic1d or elliptic2d")
    _require_keys(fwd, _FORWARD_KEYS[kind], "forward")
    if kind == "linear" and "matrix" not in fwd:
        raise ConfigError("[forward] kind='linear' requires matrix")

    flow_raw = dict(raw["flow"])
    _require_keys(flow_raw, _SCHEMA["flow"], "flow")
    try:
        rule = flow_raw.get("kde_rule", "silverman")
        kde = KdeConfig(rule=rule, bandwidth=flow_raw.get("kde_bandwidth"))
        flow = FlowConfig(
            dt=float(flow_raw["dt"]),
            n_iters=int(flow_raw["n_iters"]),
            divergence=flow_raw.get("divergence", "kl"),
            kde=kde,
            seed=int(raw["seed"]),
            record_every=int(flow_raw.get("record_every", 1)),
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid [flow] section: {exc}") from None

    if not (int(raw["n_ref"]) >= 1 and int(raw["n_sim"]) >= 1):
        raise ConfigError("n_ref and n_sim must be >= 1")

    noise = raw.get("noise")
    if noise is not None:
        _require_keys(noise, _SCHEMA["noise"], "noise")
        if "sigma" not in noise or not float(noise["sigma"]) >= 0:
            raise ConfigError("[noise] requires sigma >= 0")

    thresholds = dict(raw.get("thresholds", {}))
    for k, v in thresholds.items():
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise ConfigError(f"threshold {k!r} must be a number")
        thresholds[k] = float(v)

    gd = raw.get("gd")
    if gd is not None:
        _require_keys(gd, _SCHEMA["gd"], "gd")
        gd = dict(gd)

    return ExperimentConfig(
        name=str(raw["name"]),
        n_ref=int(raw["n_ref"]),
        n_sim=int(raw["n_sim"]),
        seed=int(raw["seed"]),
        forward=fwd,
        truth=DistSpec.from_dict(raw["truth"], "truth"),
        init=DistSpec.from_dict(raw["init"], "init"),
        init2=DistSpec.from_dict(raw["init2"], "init2") if "init2" in raw else None,
        flow=flow,
        noise_sigma=float(noise["sigma"]) if noise else None,
        thresholds=thresholds,
        gd=gd,
        output_dir=raw.get("output_dir"),
    )


def load_config(path):
    with open(path, "rb") as fh:
        return parse_config(fh.read().decode("utf-8"))


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{k} = {_fmt(x)}" for k, x in v.items()) + "}"
    raise TypeError(f"cannot serialize {type(v)}")


def dump_config(cfg):
    """Serialize an ExperimentConfig back to TOML; parse_config round-trips it."""
    lines = [f"name = {_fmt(cfg.name)}"]
    if cfg.output_dir is not None:
        lines.append(f"output_dir = {_fmt(cfg.output_dir)}")
    lines += [f"n_ref = {cfg.n_ref}", f"n_sim = {cfg.n_sim}", f"seed = {cfg.seed}"]

    def section(name, d):
        lines.append(f"\n[{name}]")
        for k, v in d.items():
            lines.append(f"{k} = {_fmt(v)}")

    section("forward", cfg.forward)
    section("truth", cfg.truth.to_dict())
    section("init", cfg.init.to_dict())
    if cfg.init2 is not None:
        section("init2", cfg.init2.to_dict())
    flow = {"dt": cfg.flow.dt, "n_iters": cfg.flow.n_iters, "divergence": cfg.flow.divergence,
            "record_every": cfg.flow.record_every, "kde_rule": cfg.flow.kde.rule}
    if cfg.flow.kde.bandwidth is not None:
        flow["kde_bandwidth"] = cfg.flow.kde.bandwidth
    section("flow", flow)
    if cfg.noise_sigma is not None:
        section("noise", {"sigma": cfg.noise_sigma})
    if cfg.thresholds:
        section("thresholds", cfg.thresholds)
    if cfg.gd is not None:
        section("gd", cfg.gd)
    return "\n".join(lines) + "\n"


def build_forward(fwd):
    """Construct the ForwardMap declared by a validated [forward] section."""
    kind = fwd["kind"]
    if kind == "linear":
        return LinearMap(fwd["matrix"])
    if kind == "elliptic1d":
        return Elliptic1D(tuple(fwd.get("measure_points", (0.25, 0.75))))
    grid = EllipticGrid2D(
        n_cells=fwd.get("n_cells", 64),
        receivers=fwd.get("receivers", ((0.25, 0.75), (0.75, 0.5))),
        f=fwd.get("f", 1.0),
    )
    return Elliptic2D(grid)


def derive_child_seeds(seed):
    """(truth, noise, init, init2) child seeds from the master seed."""
    s = np.random.SeedSequence(seed).generate_state(4)
    return tuple(int(x) for x in s)
