"""Scenario files: parsing, validation and environment construction.

A scenario is one JSON or TOML document holding the environment, learner
hyperparameters, experiment parameters and the seed. Probabilities may be
floats or decimal strings; matrices are row-major. See docs/scenario-schema.md.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .env import Clock, EnvError, EnvironmentModel, regional_kernel, validate
from .measure import Event
from .rng import MAX_SEED

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SHIPPED = ("nominal-6state", "aliasing-4state", "injective-3state", "single-observation")


class ScenarioError(ValueError):
    """Parse or validation failure; ``errors`` lists every problem with its field path."""

    def __init__(self, errors: list[str], source: str | None = None) -> None:
        self.errors = list(errors)
        self.source = source
        where = f"{source}: " if source else ""
        super().__init__(where + "; ".join(self.errors))


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    env: EnvironmentModel
    document: dict = field(repr=False)
    epsilon: float | None = None
    delta: float | None = None
    source: str | None = None

    @property
    def learners(self) -> dict:
        return self.document.get("learners", {})

    @property
    def experiments(self) -> dict:
        return self.document.get("experiments", {})

    def experiment(self, name: str) -> dict:
        return dict(self.experiments.get(name, {}))

    @property
    def digest(self) -> str:
        """SHA-256 of the canonical JSON form of the document."""
        return hashlib.sha256(canonical_json(self.document).encode()).hexdigest()

    def with_changes(self, seed: int | None = None, epsilon=None, delta=None, experiments: dict | None = None) -> Scenario:
        """Re-parse the document with overrides (a new seed, region crossing rates, experiment fields)."""
        doc = copy.deepcopy(self.document)
        if seed is not None:
            doc["seed"] = seed
        dyn = doc["environment"].get("dynamics")
        if (epsilon is not None or delta is not None) and dyn is None:
            raise ScenarioError(["environment.dynamics: epsilon/delta overrides need the regional form"], self.source)
        if epsilon is not None:
            dyn["epsilon"] = epsilon
        if delta is not None:
            dyn["delta"] = delta
        for name, fields in (experiments or {}).items():
            doc.setdefault("experiments", {}).setdefault(name, {}).update(fields)
        return parse_scenario(doc, self.source)


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def number(x) -> float:
    """A probability or real given as a float, int or decimal/fraction string."""
    if isinstance(x, bool):
        raise ValueError("booleans are not numbers")
    if isinstance(x, str):
        return float(Fraction(x.strip()))
    if isinstance(x, (int, float)):
        return float(x)
    raise ValueError(f"expected a number, got {type(x).__name__}")


class _Reader:
    """Collects field-addressed errors while pulling values out of a document."""

    def __init__(self) -> None:
        self.errors: list[str] = []

    def fail(self, path: str, msg: str) -> None:
        self.errors.append(f"{path}: {msg}")

    def get(self, obj: dict, key: str, path: str, required: bool = True, default=None):
        if not isinstance(obj, dict):
            self.fail(path, "expected a table/object")
            return default
        if key not in obj:
            if required:
                self.fail(f"{path}.{key}" if path else key, "required")
            return default
        return obj[key]

    def num(self, x, path: str, default=None):
        try:
            return number(x)
        except (ValueError, ZeroDivisionError) as e:
            self.fail(path, str(e))
            return default

    def integer(self, x, path: str, lo: int | None = None, hi: int | None = None, default=None):
        if isinstance(x, bool) or not isinstance(x, int):
            self.fail(path, f"expected an integer, got {x!r}")
            return default
        if (lo is not None and x < lo) or (hi is not None and x > hi):
            self.fail(path, f"{x} outside [{lo}, {hi if hi is not None else 'inf'}]")
            return default
        return x

    def array(self, x, shape: tuple[int, ...], path: str):
        """Numeric array of the given shape, or None with errors naming the offending entry."""
        if len(shape) == 0:
            return self.num(x, path)
        if not isinstance(x, list):
            self.fail(path, f"expected a list of length {shape[0]}")
            return None
        if len(x) != shape[0]:
            self.fail(path, f"expected {shape[0]} entries, got {len(x)}")
            return None
        parts = [self.array(v, shape[1:], f"{path}[{i}]") for i, v in enumerate(x)]
        if any(p is None for p in parts):
            return None
        return np.array(parts, float)

    def rows(self, m: np.ndarray | None, path: str) -> None:
        """Check the last axis of ``m`` is a probability vector, naming the row on failure."""
        if m is None:
            return
        for idx in np.ndindex(m.shape[:-1]):
            row = m[idx]
            where = path + "".join(f"[{i}]" for i in idx)
            if np.any(~np.isfinite(row)) or np.any(row < 0):
                self.fail(where, "entries must be finite and non-negative")
            elif abs(float(np.sum(row)) - 1.0) > 1e-12:
                self.fail(where, f"row sums to {float(np.sum(row)):.15g}, expected 1")


def _states(r: _Reader, x, n: int, path: str) -> list[int] | None:
    if not isinstance(x, list):
        r.fail(path, "expected a list of state indices")
        return None
    out = []
    for i, s in enumerate(x):
        v = r.integer(s, f"{path}[{i}]", 0, n - 1)
        if v is not None:
            out.append(v)
    return out if len(out) == len(x) else None


def parse_scenario(doc: Any, source: str | None = None) -> Scenario:
    """Validate a scenario document and build its environment; raises :class:`ScenarioError`."""
    r = _Reader()
    if not isinstance(doc, dict):
        raise ScenarioError(["document must be a table/object at the top level"], source)
    name = r.get(doc, "name", "", required=False, default=Path(source).stem if source else "scenario")
    if "seed" not in doc:
        r.errors.append("seed required")
        seed = None
    else:
        seed = r.integer(doc["seed"], "seed", 0, MAX_SEED)
    env_doc = r.get(doc, "environment", "")
    env, eps, delta = None, None, None
    if isinstance(env_doc, dict):
        env, eps, delta = _parse_environment(r, env_doc)
    elif env_doc is not None:
        r.fail("environment", "expected a table/object")
    _parse_learners(r, doc.get("learners", {}))
    _parse_experiments(r, doc.get("experiments", {}), env)
    if r.errors:
        raise ScenarioError(r.errors, source)
    return Scenario(str(name), seed, env, copy.deepcopy(doc), eps, delta, source)


def _parse_environment(r: _Reader, e: dict):
    p = "environment"
    n_s = r.integer(r.get(e, "states", p), f"{p}.states", 1)
    n_a = r.integer(r.get(e, "actions", p), f"{p}.actions", 1)
    n_o = r.integer(r.get(e, "observations", p), f"{p}.observations", 1)
    if None in (n_s, n_a, n_o):
        return None, None, None
    nominal = _states(r, r.get(e, "nominal", p, default=[]), n_s, f"{p}.nominal")
    disruption = _states(r, r.get(e, "disruption", p, default=[]), n_s, f"{p}.disruption")
    obs_map = r.array(r.get(e, "obs_map", p), (n_s, n_o), f"{p}.obs_map")
    r.rows(obs_map, f"{p}.obs_map")
    rewards = r.array(r.get(e, "rewards", p), (n_s, n_a), f"{p}.rewards")

    eps = delta = None
    entry = None
    if "kernel" in e and "dynamics" in e:
        r.fail(p, "give either kernel or dynamics, not both")
        return None, None, None
    if "kernel" in e:
        kernel = r.array(e["kernel"], (n_s, n_a, n_s), f"{p}.kernel")
        r.rows(kernel, f"{p}.kernel")
    elif "dynamics" in e:
        kernel, eps, delta, entry = _parse_dynamics(r, e["dynamics"], nominal, disruption, n_a)
    else:
        r.fail(f"{p}.kernel", "required (or give environment.dynamics)")
        kernel = None
    if "entry" in e:
        entry = r.array(e["entry"], (n_s,), f"{p}.entry")

    clock_doc = e.get("clock", {})
    tau0 = r.num(clock_doc.get("tau0", 0.0), f"{p}.clock.tau0", 0.0)
    dtau = r.num(clock_doc.get("delta_tau", 1.0), f"{p}.clock.delta_tau", 1.0)
    if dtau is not None and not dtau > 0:
        r.fail(f"{p}.clock.delta_tau", "must be positive")
    reward_range = None
    if "reward_range" in e:
        rr = r.array(e["reward_range"], (2,), f"{p}.reward_range")
        reward_range = None if rr is None else (float(rr[0]), float(rr[1]))
    initial = r.integer(e.get("initial_state", 0), f"{p}.initial_state", 0, n_s - 1, 0)
    lossy = e.get("require_lossy_projection", True)
    if not isinstance(lossy, bool):
        r.fail(f"{p}.require_lossy_projection", "expected true or false")
        lossy = True

    if r.errors or kernel is None:
        return None, eps, delta
    try:
        env = EnvironmentModel(
            kernel=kernel,
            obs_map=obs_map,
            rewards=rewards,
            nominal=Event(frozenset(nominal)),
            disruption=Event(frozenset(disruption)),
            entry=entry,
            initial_state=initial,
            clock=Clock(tau0, dtau),
            reward_range=reward_range,
            require_lossy=lossy,
        )
    except EnvError as err:
        r.fail(p, str(err))
        return None, eps, delta
    for msg in validate(env):
        r.fail(p, msg)
    return env, eps, delta


def _parse_dynamics(r: _Reader, d, nominal, disruption, n_a):
    p = "environment.dynamics"
    if not isinstance(d, dict):
        r.fail(p, "expected a table/object")
        return None, None, None, None
    if nominal is None or disruption is None:
        return None, None, None, None
    n_n, n_d = len(nominal), len(disruption)
    eps = r.num(r.get(d, "epsilon", p), f"{p}.epsilon")
    delta = r.num(d.get("delta", 0.0), f"{p}.delta", 0.0)
    for key, v in (("epsilon", eps), ("delta", delta)):
        if v is not None and not 0.0 <= v <= 1.0:
            r.fail(f"{p}.{key}", f"must lie in [0, 1], got {v}")

    def within(key, n):
        raw = r.get(d, key, p)
        if isinstance(raw, list) and raw and isinstance(raw[0], list) and raw[0] and isinstance(raw[0][0], list):
            m = r.array(raw, (n, n_a, n), f"{p}.{key}")
        else:
            m = r.array(raw, (n, n), f"{p}.{key}")
        r.rows(m, f"{p}.{key}")
        return m

    wn, wd = within("within_nominal", n_n), within("within_disruption", n_d)
    crossing = r.array(r.get(d, "crossing", p), (n_d,), f"{p}.crossing")
    recovery = r.array(d.get("recovery", [1.0 / n_n] * n_n), (n_n,), f"{p}.recovery")
    for key, v in (("crossing", crossing), ("recovery", recovery)):
        if v is not None:
            r.rows(v[None, :], f"{p}.{key}")
    if r.errors:
        return None, eps, delta, None
    kernel = regional_kernel(nominal, disruption, wn, wd, crossing, recovery, eps, delta, n_a)
    entry = np.zeros(n_n + n_d)
    entry[disruption] = crossing
    return kernel, eps, delta, entry


_LEARNER_FIELDS = {
    "erm": {"train_steps": "int"},
    "expert_weights": {"eta": "eta"},
    "q_learning": {"alpha": "unit", "xi": "unit", "gamma": "discount"},
}


def _parse_learners(r: _Reader, doc) -> None:
    if not isinstance(doc, dict):
        r.fail("learners", "expected a table/object")
        return
    for name, cfg in doc.items():
        path = f"learners.{name}"
        if name not in _LEARNER_FIELDS:
            r.fail(path, f"unknown learner; expected one of {sorted(_LEARNER_FIELDS)}")
            continue
        if not isinstance(cfg, dict):
            r.fail(path, "expected a table/object")
            continue
        for key, kind in _LEARNER_FIELDS[name].items():
            if key not in cfg:
                continue
            v = cfg[key]
            if kind == "int":
                r.integer(v, f"{path}.{key}", 1)
            elif kind == "eta" and v == "auto":
                continue
            else:
                x = r.num(v, f"{path}.{key}")
                hi_open = kind == "discount"
                if x is not None and not (0.0 <= x < 1.0 if hi_open else 0.0 <= x <= 1.0):
                    r.fail(f"{path}.{key}", f"{x} outside {'[0, 1)' if hi_open else '[0, 1]'}")


def _parse_experiments(r: _Reader, doc, env: EnvironmentModel | None) -> None:
    if not isinstance(doc, dict):
        r.fail("experiments", "expected a table/object")
        return
    known = {"prop1", "erm_neglect", "markov", "adaptation"}
    for name, cfg in doc.items():
        path = f"experiments.{name}"
        if name not in known:
            r.fail(path, f"unknown experiment; expected one of {sorted(known)}")
            continue
        if not isinstance(cfg, dict):
            r.fail(path, "expected a table/object")
            continue
        for key in ("window", "event_step", "post_event_steps", "schedule_length"):
            if key in cfg:
                r.integer(cfg[key], f"{path}.{key}", 1)
        if "train_steps" in cfg:
            r.integer(cfg["train_steps"], f"{path}.train_steps", 0)
        if "epsilons" in cfg:
            if not isinstance(cfg["epsilons"], list) or not cfg["epsilons"]:
                r.fail(f"{path}.epsilons", "expected a non-empty list")
            else:
                for i, v in enumerate(cfg["epsilons"]):
                    x = r.num(v, f"{path}.epsilons[{i}]")
                    if x is not None and not 0.0 < x < 1.0:
                        r.fail(f"{path}.epsilons[{i}]", f"{x} outside (0, 1)")
        for key in ("rho", "band", "contrast_epsilon", "margin", "vi_gamma"):
            if key in cfg:
                r.num(cfg[key], f"{path}.{key}")
        pol = cfg.get("policy")
        if isinstance(pol, list) and env is not None:
            if len(pol) != env.observation_count:
                r.fail(f"{path}.policy", f"expected {env.observation_count} actions, one per observation")
            else:
                for i, a in enumerate(pol):
                    r.integer(a, f"{path}.policy[{i}]", 0, env.action_count - 1)
        elif pol is not None and pol not in ("nominal_optimal", "disruption_optimal", "uniform"):
            r.fail(f"{path}.policy", "expected a table or one of nominal_optimal, disruption_optimal, uniform")


def read_document(path: str | Path) -> dict:
    """Parse a JSON or TOML file (by suffix; JSON is tried first for other suffixes)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ScenarioError([f"cannot read file: {e.strerror or e}"], str(path)) from e
    if path.suffix.lower() == ".toml":
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ScenarioError([f"TOML parse error: {e}"], str(path)) from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        if path.suffix.lower() == ".json":
            raise ScenarioError([f"JSON parse error at line {e.lineno}, column {e.colno}: {e.msg}"], str(path)) from e
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError:
            raise ScenarioError([f"JSON parse error at line {e.lineno}, column {e.colno}: {e.msg}"], str(path)) from e


def load_scenario(path: str | Path) -> Scenario:
    return parse_scenario(read_document(path), str(path))


def shipped_path(name: str) -> Path:
    """Path of a scenario bundled with the package."""
    base = resources.files("tailrisk") / "scenarios"
    for suffix in (".json", ".toml"):
        p = Path(str(base / (name + suffix)))
        if p.exists():
            return p
    raise ScenarioError([f"no shipped scenario named {name!r}; available: {', '.join(SHIPPED)}"])


def load_shipped(name: str) -> Scenario:
    return load_scenario(shipped_path(name))
