"""Run configuration: YAML schema (version 1), validation and normalisation.

A config has the top-level keys below; everything except ``model`` is
optional.  See the README for a full example.

    version: 1
    mode: evaluate | experiment | sweep | oracle-check
    master_seed: 0
    output: runs/demo            # output directory
    model:
      name: tanh_network(3, 1)   # or regular_normal, product_regression
      params: {sigma: 0.1}
    truth: {w_true: [...]}       # truth parameters of the chosen model
    posterior:
      backend: quadrature        # or mcmc
      beta: 1.0
      grid_points_per_dim: 201
      mcmc: {chains: 4, burn_in_steps: 10000, ...}
    plan:
      n: 200
      replicates: 20
      ...

``serialize(parse(x))`` is a fixpoint: parsing the serialised form gives
the same config and serialises to the same bytes.
"""

from __future__ import annotations

import difflib
import inspect
import re
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError
from .experiments import ExperimentPlan
from .models import MODEL_REGISTRY
from .posterior import McmcConfig, QuadratureConfig

SCHEMA_VERSION = 1
MODES = ("evaluate", "experiment", "sweep", "oracle-check")
DEFAULT_SWEEP = (25, 50, 100, 200, 400)

TOP_KEYS = ("version", "mode", "master_seed", "output", "model", "truth", "posterior", "plan")
MODEL_KEYS = ("name", "params")
POSTERIOR_KEYS = ("backend", "beta", "grid_points_per_dim", "mcmc")
MCMC_KEYS = ("chains", "burn_in_steps", "thin", "draws_per_chain", "proposal_scale", "init_scale")
PLAN_KEYS = ("n", "replicates", "test_size", "rule_order", "n_sweep", "cv1",
             "paired_n_minus_1", "nu_prime_h")
# factory arguments that describe the truth rather than the model
TRUTH_PARAMS = {"w_true", "a_true", "b_true", "H0"}

def _mcmc_defaults():
    d = McmcConfig()
    return {k: getattr(d, k) for k in MCMC_KEYS}


_CALL = re.compile(r"^\s*([a-z_]+)\s*(?:\((.*)\))?\s*$")


@dataclass(frozen=True)
class RunConfig:
    mode: str = "experiment"
    master_seed: int = 0
    output: str | None = None
    model: str = "regular_normal"
    model_params: dict = field(default_factory=dict)
    truth_params: dict = field(default_factory=dict)
    backend: str = "quadrature"
    beta: float = 1.0
    grid_points_per_dim: int = 201
    mcmc: dict = field(default_factory=lambda: _mcmc_defaults())
    n: int = 200
    replicates: int = 20
    test_size: int = 10_000
    rule_order: int | None = None
    n_sweep: tuple | None = None
    cv1: bool = False
    paired_n_minus_1: bool = False
    nu_prime_h: float | None = None

    def backend_config(self):
        if self.backend == "mcmc":
            return McmcConfig(seed=self.master_seed, **self.mcmc)
        return QuadratureConfig(self.grid_points_per_dim)

    def factory_params(self):
        return {**self.model_params, **self.truth_params}

    def plan(self):
        sweep = self.n_sweep
        if self.mode == "sweep" and sweep is None:
            sweep = DEFAULT_SWEEP
        return ExperimentPlan(
            model=self.model, n=self.n, replicates=self.replicates, beta=self.beta,
            backend=self.backend_config(), model_params=self.factory_params(),
            test_size=self.test_size, rule_order=self.rule_order, n_sweep=sweep,
            master_seed=self.master_seed, cv1=self.cv1,
            paired_n_minus_1=self.paired_n_minus_1, nu_prime_h=self.nu_prime_h,
        )

    def to_dict(self):
        mcmc = {k: self.mcmc[k] for k in MCMC_KEYS if k in self.mcmc}
        posterior = {"backend": self.backend, "beta": self.beta}
        if self.backend == "mcmc":
            posterior["mcmc"] = mcmc
        else:
            posterior["grid_points_per_dim"] = self.grid_points_per_dim
        return {
            "version": SCHEMA_VERSION,
            "mode": self.mode,
            "master_seed": self.master_seed,
            "output": self.output,
            "model": {"name": self.model, "params": dict(sorted(self.model_params.items()))},
            "truth": dict(sorted(self.truth_params.items())),
            "posterior": posterior,
            "plan": {
                "n": self.n, "replicates": self.replicates, "test_size": self.test_size,
                "rule_order": self.rule_order,
                "n_sweep": list(self.n_sweep) if self.n_sweep is not None else None,
                "cv1": self.cv1, "paired_n_minus_1": self.paired_n_minus_1,
                "nu_prime_h": self.nu_prime_h,
            },
        }


def serialize(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)


def _edit_distance(a, b):
    """Optimal string alignment distance (adjacent transpositions cost 1)."""
    d = [[i + j if i * j == 0 else 0 for j in range(len(b) + 1)] for i in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
            if i > 1 and j > 1 and a[i - 1] == b[j - 2] and a[i - 2] == b[j - 1]:
                d[i][j] = min(d[i][j], d[i - 2][j - 2] + 1)
    return d[-1][-1]


def nearest_key(key, valid):
    """Closest valid key, or ``None`` if nothing is plausibly a typo of ``key``."""
    key = str(key)
    near = difflib.get_close_matches(key, valid, n=len(valid), cutoff=0.5)
    if not near:
        return None
    return min(near, key=lambda v: (_edit_distance(key, v), abs(len(v) - len(key))))


def _unknown(keys, valid, where, errors):
    for k in keys:
        if k not in valid:
            near = nearest_key(k, valid)
            hint = f"; did you mean '{where}{near}'?" if near else ""
            errors.append(f"unknown key '{where}{k}'{hint}")


def _block(raw, key, errors):
    val = raw.get(key)
    if val is None:
        return {}
    if not isinstance(val, dict):
        errors.append(f"{key!r} must be a mapping")
        return {}
    return val


def _typed(value, kind, name, errors, minimum=None, allow_none=False):
    if value is None and allow_none:
        return None
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        errors.append(f"{name} must be an integer, got {value!r}")
        return None
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{name} must be a number, got {value!r}")
            return None
        value = float(value)
    if kind is bool and not isinstance(value, bool):
        errors.append(f"{name} must be true or false, got {value!r}")
        return None
    if minimum is not None and value < minimum:
        errors.append(f"{name} must be >= {minimum}, got {value!r}")
        return None
    return value


def _parse_model_name(text, errors):
    """``'tanh_network(3, 1)'`` -> ``('tanh_network', {'H': 3, 'H0': 1})``."""
    m = _CALL.match(str(text))
    if not m:
        errors.append(f"cannot parse model name {text!r}")
        return None, {}
    name, args = m.group(1), m.group(2)
    if name not in MODEL_REGISTRY:
        near = nearest_key(name, list(MODEL_REGISTRY))
        hint = f"; did you mean {near!r}?" if near else ""
        errors.append(f"unknown model {name!r}{hint}")
        return None, {}
    pos = {}
    if args and args.strip():
        if name != "tanh_network":
            errors.append(f"model {name!r} takes no positional arguments")
            return name, {}
        try:
            vals = [int(a) for a in args.split(",")]
        except ValueError:
            errors.append(f"tanh_network arguments must be integers: {args!r}")
            return name, {}
        if len(vals) not in (1, 2):
            errors.append("tanh_network takes (H) or (H, H0)")
            return name, {}
        pos["H"] = vals[0]
        if len(vals) == 2:
            pos["H0"] = vals[1]
    return name, pos


def parse_config_dict(raw):
    """Validate a decoded config mapping; raise :class:`ConfigError` listing every problem."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at top level")
    errors = []
    _unknown(raw, TOP_KEYS, "", errors)
    version = raw.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        errors.append(f"unsupported schema version {version!r} (expected {SCHEMA_VERSION})")
    out = {}

    mode = raw.get("mode", "experiment")
    if mode not in MODES:
        errors.append(f"mode must be one of {list(MODES)}, got {mode!r}")
    out["mode"] = mode
    seed = raw.get("master_seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        errors.append(f"master_seed must be an integer in [0, 2**64), got {seed!r}")
    out["master_seed"] = seed
    output = raw.get("output")
    if output is not None and not isinstance(output, str):
        errors.append("output must be a path string")
    out["output"] = output

    mblock = raw.get("model")
    if mblock is None:
        if mode != "oracle-check":
            errors.append("missing required key 'model'")
        mblock = {}
    if isinstance(mblock, str):
        mblock = {"name": mblock}
    if not isinstance(mblock, dict):
        errors.append("'model' must be a name or a mapping")
        mblock = {}
    _unknown(mblock, MODEL_KEYS, "model.", errors)
    name, pos = _parse_model_name(mblock.get("name", "regular_normal"), errors)
    mparams = _block(mblock, "params", errors)
    tparams = _block(raw, "truth", errors)
    if name is not None:
        sig = inspect.signature(MODEL_REGISTRY[name]).parameters
        valid = [p for p in sig if p not in TRUTH_PARAMS]
        valid_t = [p for p in sig if p in TRUTH_PARAMS]
        _unknown(mparams, valid, "model.params.", errors)
        _unknown(tparams, valid_t, "truth.", errors)
        h0 = pos.pop("H0", None)
        if h0 is not None:
            tparams = {**tparams, "H0": h0}
        mparams = {**mparams, **pos}
        for k, v in list(mparams.items()) + list(tparams.items()):
            if isinstance(v, (list, tuple)):
                continue
            if v is not None and (isinstance(v, bool) or not isinstance(v, (int, float))):
                errors.append(f"parameter {k!r} must be numeric, got {v!r}")
        for k, v in tparams.items():
            if isinstance(v, tuple):
                tparams[k] = list(v)
    out["model"] = name or "regular_normal"
    out["model_params"] = dict(mparams)
    out["truth_params"] = dict(tparams)

    post = _block(raw, "posterior", errors)
    _unknown(post, POSTERIOR_KEYS, "posterior.", errors)
    backend = post.get("backend", "quadrature")
    if backend not in ("quadrature", "mcmc"):
        errors.append(f"posterior.backend must be 'quadrature' or 'mcmc', got {backend!r}")
    out["backend"] = backend
    beta = _typed(post.get("beta", 1.0), float, "posterior.beta", errors)
    if beta is not None and not beta > 0:
        errors.append("posterior.beta must be > 0")
    out["beta"] = beta
    out["grid_points_per_dim"] = _typed(post.get("grid_points_per_dim", 201), int,
                                        "posterior.grid_points_per_dim", errors, minimum=2)
    mcmc = _block(post, "mcmc", errors)
    _unknown(mcmc, MCMC_KEYS, "posterior.mcmc.", errors)
    defaults = McmcConfig()
    mc = {}
    for k in MCMC_KEYS:
        if k in ("proposal_scale", "init_scale"):
            mc[k] = _typed(mcmc.get(k, getattr(defaults, k)), float, f"posterior.mcmc.{k}", errors,
                           allow_none=True)
            if mc[k] is not None and not mc[k] > 0:
                errors.append(f"posterior.mcmc.{k} must be > 0")
        else:
            mc[k] = _typed(mcmc.get(k, getattr(defaults, k)), int, f"posterior.mcmc.{k}", errors,
                           minimum=1)
    out["mcmc"] = mc

    plan = _block(raw, "plan", errors)
    _unknown(plan, PLAN_KEYS, "plan.", errors)
    out["n"] = _typed(plan.get("n", 200), int, "plan.n", errors, minimum=1)
    out["replicates"] = _typed(plan.get("replicates", 20), int, "plan.replicates", errors, minimum=1)
    out["test_size"] = _typed(plan.get("test_size", 10_000), int, "plan.test_size", errors, minimum=1)
    out["rule_order"] = _typed(plan.get("rule_order"), int, "plan.rule_order", errors, minimum=1,
                               allow_none=True)
    sweep = plan.get("n_sweep")
    if sweep is not None:
        if not isinstance(sweep, list) or not all(isinstance(v, int) and not isinstance(v, bool)
                                                  and v > 0 for v in sweep):
            errors.append("plan.n_sweep must be a list of positive integers")
            sweep = None
        elif any(b <= a for a, b in zip(sweep, sweep[1:])):
            errors.append("plan.n_sweep must be strictly increasing")
            sweep = None
        else:
            sweep = tuple(sweep)
    out["n_sweep"] = sweep
    out["cv1"] = _typed(plan.get("cv1", False), bool, "plan.cv1", errors)
    out["paired_n_minus_1"] = _typed(plan.get("paired_n_minus_1", False), bool,
                                     "plan.paired_n_minus_1", errors)
    h = _typed(plan.get("nu_prime_h"), float, "plan.nu_prime_h", errors, allow_none=True)
    if h is not None and beta is not None and not 0 < h <= beta / 2:
        errors.append("plan.nu_prime_h must lie in (0, beta/2]")
    out["nu_prime_h"] = h

    if errors:
        raise ConfigError(errors)
    cfg = RunConfig(**out)
    if cfg.mode != "oracle-check":
        # resolve the registry entry now so bad parameter values surface as config errors
        try:
            cfg.plan().build()
        except (TypeError, ValueError) as exc:
            raise ConfigError([f"invalid model parameters: {exc}"]) from None
    return cfg


def parse_config(path):
    """Read and validate a YAML run config."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError([f"cannot read config {path!r}: {exc.strerror}"]) from None
    except yaml.YAMLError as exc:
        raise ConfigError([f"invalid YAML in {path!r}: {exc}"]) from None
    return parse_config_dict(raw if raw is not None else {})

