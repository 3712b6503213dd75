"""JSON run configurations (schema version 1).

A configuration names a graph, a kernel, the model and coupling, initial
conditions, the horizon and the commands to run. Unknown keys are errors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dynamics import AgentState, star_graph
from .graph import GraphError, InteractionGraph, chain_graph, cycle_graph, uniform_graph
from .kernel import CommunicationKernel, KernelError, kernel_from_config

SCHEMA_VERSION = 1
COMMANDS = ("analyze", "certify", "simulate", "verify")

_TOP_KEYS = {"schema", "graph", "offsets", "kernel", "alpha", "model", "initial", "T", "dt", "seed",
             "commands", "output", "verify", "export_every", "description"}
_VERIFY_KEYS = {"horizon", "mc_paths", "mc_times", "mc_states", "contraction_pairs", "export_paths", "bound_times"}
_VERIFY_DEFAULTS = {"horizon": None, "mc_paths": 20000, "mc_times": None, "mc_states": None, "contraction_pairs": 100,
                    "export_paths": 20, "bound_times": None}


class ConfigError(ValueError):
    """Malformed configuration; ``where`` names the offending field or line."""

    def __init__(self, where: str, msg: str):
        super().__init__(f"{where}: {msg}")
        self.where = where


@dataclass(frozen=True, eq=False)
class RunConfig:
    graph: InteractionGraph
    kernel: CommunicationKernel
    alpha: float
    model: str
    state0: AgentState
    T: float
    dt: Optional[float]
    seed: Optional[int]
    commands: tuple
    output: Optional[str]
    verify: dict = field(default_factory=dict)
    export_every: int = 1
    description: str = ""
    raw: dict = field(default_factory=dict, repr=False)


def _check_keys(obj: dict, allowed: set, where: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(where, "expected an object")
    extra = sorted(set(obj) - allowed)
    if extra:
        raise ConfigError(where, f"unknown key(s) {extra}")


def _need(obj: dict, key: str, where: str):
    if key not in obj:
        raise ConfigError(where, f"missing required key '{key}'")
    return obj[key]


def _number(val, where: str, positive: bool = False, nonneg: bool = False) -> float:
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(where, f"expected a number, got {val!r}")
    val = float(val)
    if not np.isfinite(val) or (positive and val <= 0) or (nonneg and val < 0):
        raise ConfigError(where, f"invalid value {val}")
    return val


def _int(val, where: str, minimum: int = 0) -> int:
    if isinstance(val, bool) or not isinstance(val, int) or val < minimum:
        raise ConfigError(where, f"expected an integer >= {minimum}, got {val!r}")
    return val


def _graph(spec: dict, offsets) -> InteractionGraph:
    where = "graph"
    kind = _need(spec, "type", where)
    try:
        if kind == "dense":
            _check_keys(spec, {"type", "weights"}, where)
            return InteractionGraph(np.asarray(_need(spec, "weights", where), dtype=float), offsets)
        if kind == "edges":
            _check_keys(spec, {"type", "n", "edges"}, where)
            n = _int(_need(spec, "n", where), "graph.n", 1)
            edges = [tuple(e) for e in _need(spec, "edges", where)]
            return InteractionGraph.from_edges(n, edges, offsets)
        if kind == "uniform":
            _check_keys(spec, {"type", "n", "weight"}, where)
            n = _int(_need(spec, "n", where), "graph.n", 1)
            g = uniform_graph(n, spec.get("weight"))
        elif kind in ("chain", "cycle"):
            _check_keys(spec, {"type", "n", "weight"}, where)
            n = _int(_need(spec, "n", where), "graph.n", 1)
            make = chain_graph if kind == "chain" else cycle_graph
            g = make(n, float(spec.get("weight", 1.0)))
        elif kind == "star":
            _check_keys(spec, {"type", "A", "B"}, where)
            g, _ = star_graph(_need(spec, "A", where), _need(spec, "B", where))
        else:
            raise ConfigError("graph.type", f"unknown graph type {kind!r}")
        return InteractionGraph(g.weights, offsets) if offsets is not None else g
    except (GraphError, ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(where, str(exc)) from None


def _sample_block(spec, count: int, dim: int, rng, where: str) -> np.ndarray:
    if isinstance(spec, dict):
        _check_keys(spec, {"sampler", "low", "high"}, where)
        if spec.get("sampler") != "uniform_box":
            raise ConfigError(f"{where}.sampler", "only 'uniform_box' is supported")
        if rng is None:
            raise ConfigError(where, "a seed is required when samplers are used")
        low = np.asarray(_need(spec, "low", where), dtype=float)
        high = np.asarray(_need(spec, "high", where), dtype=float)
        if low.shape != (dim,) or high.shape != (dim,) or np.any(high < low):
            raise ConfigError(where, "low/high must be length-d vectors with low <= high")
        return low + (high - low) * rng.random((count, dim))
    arr = np.asarray(spec, dtype=float)
    if arr.shape == (dim,):
        return np.tile(arr, (count, 1))
    if arr.shape == (count, dim):
        return arr
    raise ConfigError(where, f"expected a length-{dim} vector, a {count}x{dim} array or a sampler")


def _initial(spec: dict, n: int, seed: Optional[int]) -> AgentState:
    where = "initial"
    if "groups" in spec:
        _check_keys(spec, {"groups", "dim"}, where)
        dim = _int(_need(spec, "dim", where), "initial.dim", 1)
        rng = np.random.default_rng(seed) if seed is not None else None
        xs, vs = [], []
        for k, grp in enumerate(spec["groups"]):
            gw = f"initial.groups[{k}]"
            _check_keys(grp, {"count", "position", "velocity"}, gw)
            count = _int(_need(grp, "count", gw), f"{gw}.count", 1)
            xs.append(_sample_block(_need(grp, "position", gw), count, dim, rng, f"{gw}.position"))
            vs.append(_sample_block(_need(grp, "velocity", gw), count, dim, rng, f"{gw}.velocity"))
        x, v = np.concatenate(xs), np.concatenate(vs)
    else:
        _check_keys(spec, {"x", "v"}, where)
        x = np.atleast_2d(np.asarray(_need(spec, "x", where), dtype=float))
        v = np.atleast_2d(np.asarray(_need(spec, "v", where), dtype=float))
        if x.shape != v.shape:
            raise ConfigError(where, f"x {x.shape} and v {v.shape} differ in shape")
    if x.shape[0] != n:
        raise ConfigError(where, f"{x.shape[0]} agents given, graph has {n}")
    return AgentState(0.0, x, v)


def parse_config(raw: dict) -> RunConfig:
    _check_keys(raw, _TOP_KEYS, "config")
    schema = _need(raw, "schema", "config")
    if schema != SCHEMA_VERSION:
        raise ConfigError("schema", f"unsupported schema version {schema!r}")
    seed = raw.get("seed")
    if seed is not None:
        seed = _int(seed, "seed")
    offsets = raw.get("offsets")
    gspec = _need(raw, "graph", "config")
    if offsets is not None and not isinstance(offsets, list):
        n_guess = gspec.get("n") if isinstance(gspec, dict) else None
        if n_guess is None:
            probe = _graph(gspec, None)
            n_guess = probe.n
        offsets = [_number(offsets, "offsets", nonneg=True)] * n_guess
    g = _graph(gspec, offsets)
    try:
        kernel = kernel_from_config(_need(raw, "kernel", "config"))
    except (KernelError, KeyError, TypeError) as exc:
        raise ConfigError("kernel", str(exc)) from None
    alpha = _number(raw.get("alpha", 1.0), "alpha", positive=True)
    model = raw.get("model", "CS")
    if model not in ("CS", "MT"):
        raise ConfigError("model", f"expected 'CS' or 'MT', got {model!r}")
    state0 = _initial(_need(raw, "initial", "config"), g.n, seed)
    T = _number(_need(raw, "T", "config"), "T", positive=True)
    dt = raw.get("dt")
    if dt is not None:
        dt = _number(dt, "dt", positive=True)
        if dt > T:
            raise ConfigError("dt", "dt must not exceed T")
    commands = tuple(raw.get("commands", COMMANDS))
    for c in commands:
        if c not in COMMANDS:
            raise ConfigError("commands", f"unknown command {c!r}")
    verify = dict(_VERIFY_DEFAULTS)
    if "verify" in raw:
        _check_keys(raw["verify"], _VERIFY_KEYS, "verify")
        verify.update(raw["verify"])
    export_every = _int(raw.get("export_every", 1), "export_every", 1)
    return RunConfig(g, kernel, alpha, model, state0, T, dt, seed, commands, raw.get("output"),
                     verify, export_every, str(raw.get("description", "")), raw)


def load_config(path, seed: Optional[int] = None) -> RunConfig:
    """Read and validate a configuration file; ``seed`` overrides the file's seed."""
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}, column {exc.colno}", exc.msg) from None
    if seed is not None and isinstance(raw, dict):
        raw = dict(raw, seed=seed)
    return parse_config(raw)


def bundled_config(name: str) -> Path:
    """Path of a configuration shipped with the package."""
    p = Path(__file__).parent / "configs" / name
    if not p.exists():
        raise FileNotFoundError(name)
    return p
