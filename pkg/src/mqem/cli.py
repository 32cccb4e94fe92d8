"""Batch experiment runner.

Usage: ``mqem <subcommand> --config PATH [--trajectories N] [--seed S] [--workers W] [--out DIR]``

Configs are INI files. Every key is validated; a misspelt key is an error
rather than a silent default.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .complexla import SIGMA_MINUS, SIGMA_PLUS, SIGMA_X, SIGMA_Y, SIGMA_Z, trace_distance
from .jumps import EngineSpec, run_ensemble, write_events
from .lloyd_viola import PHYSICAL_STEPS, lv_mitigation_run
from .martingale import cost_bound, make_plan
from .mitigate import (
    INJECTION_KINDS,
    ErrorInjection,
    MitigationRun,
    engineered_channels,
    improvement_metric,
    run_mitigation,
    simulate_monitored_system,
)
from .models import (
    Channel,
    NoiseModel,
    RateFunction,
    all_up_state,
    build_bandgap_two_level,
    channel_sites,
    heisenberg_model,
    read_rate_table,
)
from .propagate import integrate, unitary_states
from .qprob import apply_kraus, depolarizing_inverse, depolarizing_kraus, normalize, qp_estimate, read_decomposition

SUBCOMMANDS = ("oracle", "unravel", "mitigate", "lv", "cost", "qprob")

# section -> key -> parser
SCHEMA: dict[str, dict[str, type]] = {
    "model": {
        "kind": str, "J": float, "gamma": float, "h": float, "gamma_R": float, "gamma_D": float,
        "omega": float, "rate_minus": float, "rate_plus": float, "rate_z": float,
        "shift_table": str, "decay_table": str, "initial": str,
    },
    "grid": {"t_end": float, "dt": float, "output_dt": float},
    "run": {"trajectories": int, "seed": int, "workers": int, "m": str, "steps": int, "physical": str,
            "substeps": int, "fidelity": str, "dump_events": str},
    "errors": {"kind": str, "strength": float, "realization": int, "gamma_base": float},
    "qprob": {"p": float, "samples": int, "observable": str, "decomposition": str, "state": str},
}

DEFAULTS = {
    "model": {"kind": "heisenberg", "J": 1.0, "gamma": 0.5, "h": 1.0, "gamma_R": 0.001, "gamma_D": 0.001,
              "omega": 0.0, "rate_minus": 0.0, "rate_plus": 0.0, "rate_z": 0.0, "initial": "up"},
    "grid": {"t_end": 1.0, "dt": 0.01, "output_dt": None},
    "run": {"trajectories": 1000, "seed": 0, "workers": 1, "m": "auto", "steps": 50, "physical": "trotter",
            "substeps": 1, "fidelity": "unsquared", "dump_events": "no"},
    "errors": {"kind": "none", "strength": 0.0, "realization": 0, "gamma_base": 0.001},
    "qprob": {"p": 0.1, "samples": 100_000, "observable": "z", "state": "zero"},
}

# stable column sets, one per output file
COLUMNS = {
    "oracle.csv": ["t", "fidelity", "trace", "purity"],
    "unravel.csv": ["t", "trace_distance", "ensemble_trace", "trace_stderr"],
    "fidelity.csv": ["t", "F_noisy", "F_both", "F_mitigated", "stderr", "cost"],
    "cost.csv": ["t", "cost", "cost_stderr", "bound_corrected", "bound_min_noise",
                 "bound_min_target", "bound_unit_norm"],
    "qprob.csv": ["exact", "mean", "stderr", "cost", "samples"],
}

MODEL_KINDS = ("heisenberg", "two_level", "bandgap")
FIDELITY_CONVENTIONS = ("unsquared", "squared")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    subcommand: str
    values: dict[str, dict]
    text: str
    base_dir: Path = field(default_factory=Path.cwd)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()[:16]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def path(self, name: str) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.base_dir / p


def _parse_value(section: str, key: str, raw: str):
    kind = SCHEMA[section][key]
    try:
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from None


def load_config(text: str, subcommand: str, base_dir: Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    values = {s: dict(d) for s, d in DEFAULTS.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser[section].items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"[{section}] unknown key {key!r}")
            values[section][key] = _parse_value(section, key, raw)
    for key, val in (overrides or {}).items():
        if val is not None:
            values["run"][key] = val
    cfg = ExperimentConfig(subcommand, values, text, base_dir or Path.cwd())
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    g, r, mdl, err = cfg["grid"], cfg["run"], cfg["model"], cfg["errors"]
    for key in ("t_end", "dt"):
        if not g[key] > 0:
            raise ConfigError(f"[grid] {key} must be positive")
    n = g["t_end"] / g["dt"]
    if abs(n - round(n)) > 1e-9 * max(1.0, n):
        raise ConfigError("[grid] dt must divide t_end")
    if g["output_dt"] is not None:
        s = g["output_dt"] / g["dt"]
        if g["output_dt"] <= 0 or abs(s - round(s)) > 1e-9 or round(n) % round(s):
            raise ConfigError("[grid] output_dt must be a multiple of dt that divides t_end")
    for key in ("trajectories", "workers", "steps", "substeps"):
        if r[key] < 1:
            raise ConfigError(f"[run] {key} must be at least 1")
    if r["seed"] < 0:
        raise ConfigError("[run] seed must be non-negative")
    if r["fidelity"] not in FIDELITY_CONVENTIONS:
        raise ConfigError(f"[run] fidelity must be one of {FIDELITY_CONVENTIONS}")
    if r["dump_events"] not in ("yes", "no"):
        raise ConfigError("[run] dump_events must be yes or no")
    if r["physical"] not in PHYSICAL_STEPS:
        raise ConfigError(f"[run] physical must be one of {PHYSICAL_STEPS}")
    if r["m"] != "auto":
        try:
            if float(r["m"]) < 0:
                raise ValueError
        except ValueError:
            raise ConfigError("[run] m must be 'auto' or a non-negative number") from None
    if mdl["kind"] not in MODEL_KINDS:
        raise ConfigError(f"[model] kind must be one of {MODEL_KINDS}")
    if err["kind"] not in INJECTION_KINDS:
        raise ConfigError(f"[errors] kind must be one of {INJECTION_KINDS}")
    if err["strength"] < 0 or err["gamma_base"] <= 0:
        raise ConfigError("[errors] strength must be >= 0 and gamma_base > 0")
    q = cfg["qprob"]
    if not 0 <= q["p"] < 1:
        raise ConfigError("[qprob] p must lie in [0, 1)")
    if q["samples"] < 1:
        raise ConfigError("[qprob] samples must be at least 1")
    if q["observable"] not in ("x", "y", "z"):
        raise ConfigError("[qprob] observable must be x, y or z")
    if q["state"] not in ("zero", "one", "plus"):
        raise ConfigError("[qprob] state must be zero, one or plus")


# Builders ----------------------------------------------------------------------

def build_model(cfg: ExperimentConfig) -> tuple[NoiseModel, np.ndarray]:
    mdl = cfg["model"]
    if mdl["kind"] == "heisenberg":
        model = heisenberg_model(mdl["J"], mdl["gamma"], mdl["h"], mdl["gamma_R"], mdl["gamma_D"])
        init = mdl["initial"]
        if init == "up":
            return model, all_up_state()
        # a basis state given as four bits, site 1 first; 1 is spin up
        if len(init) != 4 or set(init) - {"0", "1"}:
            raise ConfigError("[model] initial must be 'up' or four bits such as 1010")
        psi = np.zeros(16, dtype=complex)
        psi[int(init, 2)] = 1.0
        return model, psi
    if mdl["kind"] == "two_level":
        chans = tuple(Channel(op, RateFunction.const(mdl[key]), key[5:])
                      for op, key in ((SIGMA_MINUS, "rate_minus"), (SIGMA_PLUS, "rate_plus"), (SIGMA_Z, "rate_z")))
        model = NoiseModel(2, 0.5 * mdl["omega"] * SIGMA_X, chans)
    else:
        for key in ("shift_table", "decay_table"):
            if key not in mdl:
                raise ConfigError(f"[model] {key} is required for kind = bandgap")
        model = build_bandgap_two_level(read_rate_table(cfg.path(mdl["shift_table"])),
                                        read_rate_table(cfg.path(mdl["decay_table"])))
    states = {"up": np.array([0, 1], dtype=complex), "down": np.array([1, 0], dtype=complex),
              "plus": np.array([1, 1], dtype=complex) / np.sqrt(2)}
    if mdl["initial"] not in states:
        raise ConfigError("[model] initial must be up, down or plus for two-level models")
    return model, states[mdl["initial"]]


def _m(cfg: ExperimentConfig):
    m = cfg["run"]["m"]
    return None if m == "auto" else RateFunction.const(float(m))


def _grid(cfg: ExperimentConfig) -> tuple[np.ndarray, int]:
    g = cfg["grid"]
    n = int(round(g["t_end"] / g["dt"]))
    stride = 1 if g["output_dt"] is None else int(round(g["output_dt"] / g["dt"]))
    return np.linspace(0.0, g["t_end"], n + 1), stride


def _mitigation_run(cfg: ExperimentConfig, model, psi) -> MitigationRun:
    g, r, e = cfg["grid"], cfg["run"], cfg["errors"]
    return MitigationRun(model, psi, t_end=g["t_end"], dt=g["dt"],
                         output_dt=g["output_dt"] if g["output_dt"] is not None else g["dt"],
                         n_trajectories=r["trajectories"], master_seed=r["seed"], workers=r["workers"],
                         m=_m(cfg), injection=ErrorInjection(e["kind"], e["strength"], e["realization"], e["gamma_base"]),
                         sites=channel_sites() if cfg["model"]["kind"] == "heisenberg" else None)


# Subcommands ---------------------------------------------------------------------

def cmd_oracle(cfg):
    model, psi = build_model(cfg)
    grid, stride = _grid(cfg)
    rho = integrate(model, np.outer(psi, psi.conj()), grid, substeps=cfg["run"]["substeps"])[::stride]
    times = grid[::stride]
    if model.time_dependent_hamiltonian:
        raise ConfigError("oracle fidelity needs a constant Hamiltonian")
    pure = unitary_states(model.hamiltonian_at(0.0), psi, times)
    ov = np.einsum("ti,tij,tj->t", pure.conj(), rho, pure).real
    tr = np.trace(rho, axis1=1, axis2=2).real
    pur = np.einsum("tij,tji->t", rho, rho).real
    rows = np.column_stack([times, np.sqrt(np.clip(ov, 0, None)), tr, pur])
    return {"oracle.csv": rows}, [f"final fidelity {rows[-1, 1]:.10f}"]


def cmd_unravel(cfg):
    model, psi = build_model(cfg)
    grid, stride = _grid(cfg)
    r = cfg["run"]
    oracle = integrate(model, np.outer(psi, psi.conj()), grid, substeps=r["substeps"])[::stride]
    rates_negative = any(np.any(np.asarray(c.rate(grid)) < 0) for c in model.channels)
    if rates_negative:
        # reweight trajectories so that the average follows the signed rates
        paired = make_plan([c.with_rate(-c.rate) for c in model.channels], _m(cfg), check_times=grid)
        spec = EngineSpec(model.with_channels(paired.channels), psi, grid, r["seed"], stride=stride,
                          weighting=paired.plan, keep_events=False)
    else:
        spec = EngineSpec(model, psi, grid, r["seed"], stride=stride, keep_events=False)
    res = run_ensemble(spec, r["trajectories"], workers=r["workers"]).result
    td = np.array([trace_distance(a, b) for a, b in zip(res.mean, oracle)])
    tr = res.trace
    tr_se = np.sqrt(np.sum(res.stderr_re[:, range(model.dim), range(model.dim)] ** 2, axis=1))
    rows = np.column_stack([res.times, td, tr, tr_se])
    mode = "reweighted" if rates_negative else "plain"
    return {"unravel.csv": rows}, [f"mode {mode}", f"max trace distance {td.max():.6g}"]


def apply_convention(rep, convention: str):
    """Square the fidelities of a report when the Uhlmann convention is requested."""
    if convention == "unsquared":
        return rep
    imp, fin = improvement_metric(rep.f_mitigated ** 2, rep.f_noisy ** 2)
    return replace(rep, f_noisy=rep.f_noisy ** 2, f_both=rep.f_both ** 2, f_mitigated=rep.f_mitigated ** 2,
                   stderr=2 * rep.f_mitigated * rep.stderr, improvement=imp, improvement_final=fin)


def _fidelity_rows(rep):
    return np.column_stack([rep.times, rep.f_noisy, rep.f_both, rep.f_mitigated, rep.stderr, rep.cost])


def _report_summary(rep):
    lines = [f"trajectories {rep.n_trajectories}"]
    imp = "nan" if rep.improvement is None else f"{rep.improvement:.6f}"
    fin = "nan" if rep.improvement_final is None else f"{rep.improvement_final:.6f}"
    lines += [f"improvement {imp}", f"improvement_final {fin}",
              f"final_fidelity_noisy {rep.f_noisy[-1]:.10f}", f"final_fidelity_mitigated {rep.f_mitigated[-1]:.10f}"]
    return lines


def cmd_mitigate(cfg):
    model, psi = build_model(cfg)
    rep = apply_convention(run_mitigation(_mitigation_run(cfg, model, psi)), cfg["run"]["fidelity"])
    tables = {"fidelity.csv": _fidelity_rows(rep)}
    if cfg["run"]["dump_events"] == "yes":
        tables["events.csv"] = rep.records
    return tables, _report_summary(rep)


def cmd_lv(cfg):
    model, psi = build_model(cfg)
    r = cfg["run"]
    rep = lv_mitigation_run(model, psi, r["trajectories"], r["seed"], r["steps"], t_end=cfg["grid"]["t_end"],
                            m=_m(cfg), physical=r["physical"], workers=r["workers"])
    rep = apply_convention(rep, r["fidelity"])
    return {"fidelity.csv": _fidelity_rows(rep)}, [f"steps {r['steps']}"] + _report_summary(rep)


def cmd_cost(cfg):
    model, psi = build_model(cfg)
    run = _mitigation_run(cfg, model, psi)
    paired = engineered_channels(run)
    ens = simulate_monitored_system(run, paired)
    res = ens.weighted
    bounds = cost_bound(paired.plan, [c.lindblad for c in paired.channels], ens.times)
    rows = np.column_stack([ens.times, res.cost, res.cost_stderr, bounds.corrected, bounds.min_noise,
                            bounds.min_target, bounds.unit_norm])
    ok = bool(np.all(res.cost <= bounds.corrected + 3 * res.cost_stderr))
    return {"cost.csv": rows}, [f"final cost {res.cost[-1]:.6f}", f"within corrected bound {ok}"]


def cmd_qprob(cfg):
    q = cfg["qprob"]
    ops = {"x": SIGMA_X, "y": SIGMA_Y, "z": SIGMA_Z}
    states = {"zero": np.diag([1.0, 0.0]), "one": np.diag([0.0, 1.0]), "plus": np.full((2, 2), 0.5)}
    rho = states[q["state"]].astype(complex)
    O = ops[q["observable"]]
    decomp = read_decomposition(cfg.path(q["decomposition"])) if "decomposition" in q else depolarizing_inverse(q["p"])
    noisy = apply_kraus(depolarizing_kraus(q["p"]), rho)
    s = normalize(decomp)
    mean, se = qp_estimate(s, decomp, noisy, O, q["samples"], cfg.seed)
    exact = float(np.trace(O @ rho).real)
    return {"qprob.csv": np.array([[exact, mean, se, s.cost, q["samples"]]])}, [f"cost {s.cost:.6f}"]


COMMANDS = {"oracle": cmd_oracle, "unravel": cmd_unravel, "mitigate": cmd_mitigate, "lv": cmd_lv,
            "cost": cmd_cost, "qprob": cmd_qprob}


# Output ------------------------------------------------------------------------

def header_lines(cfg: ExperimentConfig) -> list[str]:
    return [f"# mqem {__version__} subcommand={cfg.subcommand}", f"# config_sha256={cfg.digest} seed={cfg.seed}"]


def write_csv(path: Path, cfg: ExperimentConfig, columns, rows) -> None:
    buf = io.StringIO()
    buf.write("\n".join(header_lines(cfg)) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in np.atleast_2d(rows):
        w.writerow([repr(float(x)) for x in row])
    path.write_text(buf.getvalue())


def write_outputs(out: Path, cfg: ExperimentConfig, tables: dict, summary: list[str]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, rows in tables.items():
        if name == "events.csv":
            write_events(out / name, rows)
            text = (out / name).read_text()
            (out / name).write_text("\n".join(header_lines(cfg)) + "\n" + text)
        else:
            write_csv(out / name, cfg, COLUMNS[name], rows)
    (out / "summary.txt").write_text("\n".join(header_lines(cfg) + summary) + "\n")
    manifest = header_lines(cfg) + [f"# resolved run settings: {cfg['run']}", "# config follows", cfg.text]
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n")


def run(subcommand: str, config_path, overrides: dict | None = None, out=None) -> int:
    path = Path(config_path)
    cfg = load_config(path.read_text(), subcommand, path.parent, overrides)
    tables, summary = COMMANDS[subcommand](cfg)
    write_outputs(Path(out) if out is not None else Path("mqem-out") / subcommand, cfg, tables, summary)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mqem", description="Master-equation error mitigation experiments")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="INI experiment file")
    p.add_argument("--trajectories", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="output directory (default mqem-out/<subcommand>)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {"trajectories": args.trajectories, "seed": args.seed, "workers": args.workers}
    try:
        return run(args.subcommand, args.config, overrides, args.out)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"mqem: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
