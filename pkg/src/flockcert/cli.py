"""Command-line entry point: ``flockcert {analyze,certify,simulate,verify,all} --config PATH``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import flocking, markov
from .config import COMMANDS, ConfigError, RunConfig, load_config
from .dynamics import (IntegrationError, Trajectory, asymptotic_velocity, default_dt, fit_decay_rate,
                       simulate, write_summary_csv, write_trajectory_csv)
from .graph import GraphError, classify, closed_class_measure, structural_constants

DUALITY_TOL = 1e-6
MC_SIGMAS = 3.0
MC_PASS_FRACTION = 0.99
SOUNDNESS_RTOL = 1e-9


def _clean(obj):
    """JSON-safe copy: arrays to lists, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (frozenset, set)):
        return sorted(_clean(v) for v in obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


class Session:
    """Runs the requested sections once each and collects the report."""

    def __init__(self, cfg: RunConfig, out: Path, quiet: bool = False):
        self.cfg = cfg
        self.out = out
        self.quiet = quiet
        self.report: dict = {"description": cfg.description}
        self.failures: list = []
        self.lines: list = []
        self._profile = None
        self._consts = None
        self._certs = None
        self._traj = None

    def say(self, line: str = "") -> None:
        self.lines.append(line)
        if not self.quiet:
            print(line)

    def check(self, name: str, ok: bool, detail: str) -> None:
        status = "PASS" if ok else "FAIL"
        self.say(f"  [{status}] {name}: {detail}")
        if not ok:
            self.failures.append(name)

    # --- sections -----------------------------------------------------------

    def analyze(self) -> None:
        if self._profile is not None:
            return
        g = self.cfg.graph
        prof = classify(g)
        consts = structural_constants(g)
        self._profile, self._consts = prof, consts
        self.say("== analyze ==")
        self.say(f"  agents: {g.n}   model: {self.cfg.model}   alpha: {self.cfg.alpha:g}")
        self.say(f"  regimes: {', '.join(prof.regimes()) or 'none'}")
        warnings = []
        if len(prof.closed_classes) != 1:
            warnings.append(f"no unique closed class ({len(prof.closed_classes)} closed classes)")
        if not prof.regimes():
            warnings.append("no regime applies; no certificate is possible")
        for w in warnings:
            self.say(f"  warning: {w}")
        for key in ("chi", "chi_B", "A_star", "A_hat", "A_bar", "B_star", "B_bar", "K", "a_bar",
                    "pi_star", "c_P", "H", "D"):
            val = getattr(consts, key)
            if val is not None:
                self.say(f"  {key:8s} = {val:.12g}" if isinstance(val, float) else f"  {key:8s} = {val}")
        prof_d = dataclasses.asdict(prof)
        prof_d["regimes"] = prof.regimes()
        self.report["analyze"] = {"profile": prof_d, "constants": consts.as_dict(), "warnings": warnings}

    def certify(self) -> None:
        if self._certs is not None:
            return
        self.analyze()
        cfg = self.cfg
        self.say("== certify ==")
        try:
            certs = flocking.certify_all(cfg.graph, cfg.kernel, cfg.alpha, cfg.state0, cfg.model,
                                         self._profile)
        except (GraphError, ValueError) as exc:
            raise ValueError(f"certify: {exc}") from exc
        best = flocking.best_certificate(certs)
        self._certs = certs
        rows = []
        for c in certs:
            flag = " (best)" if c is best else ""
            if c.unconditional:
                verdict = "unconditional"
            else:
                verdict = f"holds={c.holds} lhs={c.lhs:.6g} threshold={c.threshold:.6g} margin={c.margin:.6g}"
            self.say(f"  {c.regime:13s}{verdict}{flag}")
            if c.holds:
                self.say(f"  {'':13s}radius={c.radius:.6g} rate={c.rate:.6g}")
            if c.note:
                self.say(f"  {'':13s}note: {c.note}")
            d = c.as_dict()
            d["best"] = c is best
            rows.append(d)
        if not certs:
            self.say("  no applicable regime")
        self.report["certify"] = rows

    def _trajectory(self) -> Trajectory:
        if self._traj is None:
            cfg = self.cfg
            dt = cfg.dt if cfg.dt is not None else default_dt(cfg.graph, cfg.alpha)
            try:
                self._traj = simulate(cfg.graph, cfg.kernel, cfg.model, cfg.alpha, cfg.state0, cfg.T, dt)
            except IntegrationError as exc:
                raise RuntimeError(f"simulate: {exc}") from exc
        return self._traj

    def simulate(self) -> None:
        if "simulate" in self.report:
            return
        self.certify()
        cfg = self.cfg
        traj = self._trajectory()
        self.say("== simulate ==")
        self.out.mkdir(parents=True, exist_ok=True)
        write_trajectory_csv(traj, self.out / "trajectory.csv", cfg.export_every)
        write_summary_csv(traj, self.out / "summary.csv", cfg.export_every)
        rate = fit_decay_rate(traj)
        sec = {"steps": traj.times.size - 1, "dt": float(traj.times[1] - traj.times[0]),
               "final_X": float(traj.X[-1]), "final_V": float(traj.V[-1]),
               "sup_X": float(traj.X.max()), "fitted_rate": rate}
        self.say(f"  steps={sec['steps']} dt={sec['dt']:g} final X={sec['final_X']:.6g} "
                 f"V={sec['final_V']:.6g} sup X={sec['sup_X']:.6g}")
        if rate is not None:
            self.say(f"  fitted decay rate: {rate:.6g}")
        pi = self._profile.pi if self._profile.pi is not None else closed_class_measure(cfg.graph)
        if pi is not None:
            try:
                v_star = asymptotic_velocity(cfg.graph, pi, cfg.state0.v)
            except GraphError:
                v_star = None
            if v_star is not None:
                dev = float(np.linalg.norm(traj.v[-1] - v_star, axis=1).max())
                sec["v_star"] = v_star
                sec["max_deviation_from_v_star"] = dev
                self.say(f"  v* = {np.array2string(v_star, precision=6)}  max |v_i(T) - v*| = {dev:.3e}")
        checks = []
        for c in self._certs:
            if not c.holds:
                continue
            slack = SOUNDNESS_RTOL * max(traj.V[0], 1e-300)
            ok_r = bool(traj.X.max() <= c.radius * (1 + SOUNDNESS_RTOL)) if c.radius != math.inf else True
            ok_v = bool(np.all(traj.V <= c.decay_bound(traj.times) + slack))
            self.check(f"{c.regime} radius", ok_r, f"sup X = {traj.X.max():.6g} <= {c.radius:.6g}")
            self.check(f"{c.regime} decay", ok_v, "V(t) below the certified bound at every grid time")
            checks.append({"regime": c.regime, "radius_ok": ok_r, "decay_ok": ok_v})
        sec["soundness"] = checks
        self.report["simulate"] = sec

    def verify(self) -> None:
        if "verify" in self.report:
            return
        self.simulate()
        cfg = self.cfg
        opts = cfg.verify
        traj = self._trajectory()
        if opts["horizon"] is not None:
            traj = _prefix(traj, float(opts["horizon"]))
        self.say("== verify ==")
        g, k, model = cfg.graph, cfg.kernel, cfg.model
        tf = markov.solve_transition(traj, g, k, model)
        gap = tf.duality_gap()
        self.check("duality", gap <= DUALITY_TOL, f"max gap {gap:.3e} (tolerance {DUALITY_TOL:g})")
        rep = markov.contraction_check(tf, traj, n_pairs=int(opts["contraction_pairs"]), seed=_seed(cfg))
        self.check("contraction", rep.ok, f"{len(rep.pairs)} pairs, worst slack {rep.worst_slack:.3e}")
        sec = {"duality_gap": gap, "contraction": {"pairs": len(rep.pairs), "worst_slack": rep.worst_slack,
                                                   "violations": rep.violations}}
        sec["mc"] = self._mc(traj, tf, opts)
        sec["bounds"] = self._bounds(traj, tf, opts)
        if self._profile.hierarchical and g.n > 1:
            finals = markov.sample_jump_paths(traj, g, k, model, None, g.n - 1, traj.horizon,
                                              int(opts["mc_paths"]), _seed(cfg), record=False)
            frac = float(np.mean(finals == 0))
            self.say(f"  absorption at the leader from state {g.n - 1} by T: {frac:.4f}")
            sec["absorption_at_leader"] = frac
        n_exp = int(opts["export_paths"])
        if n_exp > 0:
            paths = markov.sample_jump_paths(traj, g, k, model, None, g.n - 1, traj.horizon, n_exp, _seed(cfg))
            markov.write_paths_csv(paths, self.out / "paths.csv")
        self.report["verify"] = sec

    def _mc(self, traj, tf, opts) -> dict:
        cfg = self.cfg
        n = cfg.graph.n
        states = opts["mc_states"] or (list(range(n)) if n <= 6 else [0, 1, n - 1])
        times = opts["mc_times"] or [traj.horizon / 4, traj.horizon / 2, traj.horizon]
        n_paths = int(opts["mc_paths"])
        cells = []
        self.say(f"  Monte Carlo ({n_paths} paths per cell)")
        self.say(f"    {'state':>5s} {'t':>9s} {'comp':>4s} {'solver':>12s} {'estimate':>12s} {'z':>7s}")
        for t in times:
            kt = traj.index_of(t)
            for i in states:
                est = markov.mc_velocity_estimate(traj, cfg.graph, cfg.kernel, cfg.model, None, i,
                                                  float(traj.times[kt]), n_paths, _seed(cfg) + kt)
                exact = traj.v[kt, i]
                for m in range(exact.size):
                    err = abs(est.mean[m] - exact[m])
                    se = est.stderr[m]
                    ok = bool(err <= MC_SIGMAS * se) if se > 0 else bool(err <= 1e-12)
                    z = err / se if se > 0 else 0.0
                    cells.append(ok)
                    self.say(f"    {i:5d} {traj.times[kt]:9.4g} {m:4d} {exact[m]:12.6g} {est.mean[m]:12.6g} {z:7.2f}")
        frac = float(np.mean(cells))
        self.check("monte carlo", frac >= MC_PASS_FRACTION,
                   f"{sum(cells)}/{len(cells)} cells within {MC_SIGMAS:g} standard errors")
        return {"cells": len(cells), "passed": int(sum(cells)), "fraction": frac}

    def _bounds(self, traj, tf, opts) -> list:
        cfg = self.cfg
        prof, consts = self._profile, self._consts
        times = opts["bound_times"] or [traj.horizon / 4, traj.horizon / 2, traj.horizon]
        rows = []
        regimes = [r for r in ("hierarchical", "general") if getattr(
            prof, "hierarchical" if r == "hierarchical" else "general_leadership")]
        if cfg.graph.n < 2:
            return rows
        if cfg.model == "MT" and consts.K is None:
            regimes = [r for r in regimes if r != "general"]
        for t in times:
            kt = traj.index_of(t)
            mu = markov.dobrushin(tf.at(kt))
            r = float(traj.X[: kt + 1].max())
            for regime in regimes:
                b = markov.ergodicity_bounds(regime, consts, float(traj.times[kt]), r, cfg.kernel,
                                             cfg.alpha, cfg.model)
                ok = b <= mu + 1e-12
                self.check(f"{regime} ergodicity bound t={traj.times[kt]:g}", ok,
                           f"bound {b:.6g} <= mu {mu:.6g}")
                rows.append({"regime": regime, "t": float(traj.times[kt]), "bound": b, "mu": mu, "ok": ok})
        return rows

    def finish(self) -> int:
        self.out.mkdir(parents=True, exist_ok=True)
        self.report["failures"] = self.failures
        self.report["status"] = "fail" if self.failures else "pass"
        with open(self.out / "report.json", "w") as fh:
            json.dump(_clean(self.report), fh, indent=2, sort_keys=True)
            fh.write("\n")
        text = "\n".join(self.lines + [f"status: {self.report['status']}"]) + "\n"
        (self.out / "report.txt").write_text(text)
        if not self.quiet:
            print(f"status: {self.report['status']}")
        return 1 if self.failures else 0


def _prefix(traj: Trajectory, T: float) -> Trajectory:
    """The part of ``traj`` on ``[0, T]`` (``T`` must be a grid time)."""
    k = traj.index_of(T) + 1
    return Trajectory(traj.times[:k], traj.x[:k], traj.v[:k], traj.model, traj.alpha, traj.X[:k], traj.V[:k])


def _seed(cfg: RunConfig) -> int:
    return cfg.seed if cfg.seed is not None else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flockcert",
                                description="Flocking certificates and verification for alignment dynamics.")
    p.add_argument("command", choices=COMMANDS + ("all",))
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--quiet", action="store_true", help="suppress console output")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out or cfg.output or "flockcert_out")
    sess = Session(cfg, out, args.quiet)
    commands = cfg.commands if args.command == "all" else (args.command,)
    try:
        for c in COMMANDS:
            if c in commands:
                getattr(sess, c)()
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        sess.failures.append(str(exc))
        sess.finish()
        return 1
    return sess.finish()


if __name__ == "__main__":
    sys.exit(main())
