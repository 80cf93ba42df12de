"""Batch front end: ``ccontrol <subcommand> [options]``.

Each run writes into its own directory (``--out``, or a directory under
``$CCTL_OUTPUT_ROOT`` named after the subcommand and a hash of the
effective configuration).  Every file is written to a temporary name and
renamed into place.  ``manifest.tsv`` lists every artifact, including
``config.json``, as ``path<TAB>sha256<TAB>bytes``.

Exit status: 0 when every verdict passes, 1 on any fail verdict, 2 on a
usage, spec-file or budget error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import io
import json
import math
import os
import sys
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, fixtures
from .boundary import check_class_R_sufficient, check_feedback_invariance, check_hamiltonian_regularity
from .dpp import (
    TestFixture,
    check_dpp_lower,
    check_dpp_upper,
    check_open_closed,
    check_right_continuity,
    standard_cases,
)
from .hjb import (
    CFLError,
    Grid,
    GridBudgetError,
    HamiltonianParams,
    solve_constraint_floor,
    solve_expectation_constrained,
    solve_state_constrained,
)
from .hjb.io import FieldFormatError, field_from_bytes, field_to_bytes, field_to_csv
from .model import SpecError
from .reports import FAIL, INCONCLUSIVE, PASS, VerificationReport
from .specfile import dumps, load

OUTPUT_ENV = "CCTL_OUTPUT_ROOT"
DEFAULT_ROOT = "runs"
DEFAULT_BUDGET = 20_000_000
MANIFEST = "manifest.tsv"

SUBCOMMANDS = ("solve-floor", "solve-constrained", "solve-state", "verify-dpp", "verify-rc",
               "verify-open-closed", "audit-boundary", "export")


class UsageError(Exception):
    pass


@dataclasses.dataclass
class RunConfig:
    subcommand: str
    spec: Optional[str]
    fixture: Optional[str]
    nt: int
    nx: list
    nm: Optional[int]
    x_lower: list
    x_upper: list
    m_lower: Optional[float]
    m_upper: Optional[float]
    A: float
    u_points: Optional[int]
    a_points: int
    boundary: str
    delta: float
    n_paths: int
    seed: int
    probes: list
    box: list
    format: str
    node_budget: int
    out: str

    def validate(self):
        if self.nt < 2 or any(n < 2 for n in self.nx) or (self.nm is not None and self.nm < 2):
            raise UsageError("all resolutions must be >= 2")
        if self.n_paths < 1:
            raise UsageError("n_paths must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise UsageError("seed must be a 64-bit unsigned integer")
        if self.format not in ("csv", "bin"):
            raise UsageError("format must be csv or bin")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ccontrol", description="Solve and verify constrained stochastic control problems.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        if name == "export":
            s.add_argument("--input", required=True, help="binary field dump to convert")
            s.add_argument("--format", choices=("csv", "bin"), default="csv")
            s.add_argument("--out", default=None)
            continue
        src = s.add_mutually_exclusive_group(required=True)
        src.add_argument("--spec", help="problem-spec file")
        src.add_argument("--fixture", choices=sorted(fixtures.FIXTURES), help="built-in fixture")
        s.add_argument("--nt", type=int)
        s.add_argument("--nx", type=int, nargs="+", help="nodes per x axis")
        s.add_argument("--nm", type=int)
        s.add_argument("--x-lower", type=float, nargs="+")
        s.add_argument("--x-upper", type=float, nargs="+")
        s.add_argument("--m-lower", type=float)
        s.add_argument("--m-upper", type=float)
        s.add_argument("--A", type=float, dest="A", help="martingale integrand truncation")
        s.add_argument("--u-points", type=int)
        s.add_argument("--a-points", type=int)
        s.add_argument("--boundary", choices=("neumann", "extrapolate"))
        s.add_argument("--delta", type=float, default=0.05)
        s.add_argument("--n-paths", type=int, default=100_000)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--probe", type=float, nargs="+", action="append", dest="probes",
                       help="probe point (x..., [m]); repeatable")
        s.add_argument("--format", choices=("csv", "bin"), default="csv")
        s.add_argument("--node-budget", type=int, default=DEFAULT_BUDGET)
        s.add_argument("--out", default=None)
    return p


def _problem(args):
    if args.spec:
        if not os.path.isfile(args.spec):
            raise UsageError(f"spec file not found: {args.spec}")
        spec, grid = load(args.spec)
        params = {k: grid[k] for k in ("A", "u_points", "a_points", "boundary") if k in grid}
        box = grid.get("validation_box")
        return spec, grid, params, box, grid.get("probes", [])
    fd = fixtures.get(args.fixture)
    return fd.spec, dict(fd.grid), dict(fd.params), [list(b) for b in fd.box], [list(p) for p in fd.probes]


def _pick(cli, defaults, key, fallback):
    if cli is not None:
        return cli
    return defaults.get(key, fallback)


def _config(args) -> tuple:
    spec, g, pdef, box, probes = _problem(args)
    d = spec.dim
    nx = _pick(args.nx, g, "nx", 101)
    nx = [int(v) for v in (nx if isinstance(nx, list) else [nx] * d)]
    if len(nx) == 1 and d > 1:
        nx = nx * d
    xl = _pick(args.x_lower, g, "x_lower", [-2.0] * d)
    xu = _pick(args.x_upper, g, "x_upper", [2.0] * d)
    xl = [float(v) for v in (xl if isinstance(xl, list) else [xl] * d)]
    xu = [float(v) for v in (xu if isinstance(xu, list) else [xu] * d)]
    if len(nx) != d or len(xl) != d or len(xu) != d:
        raise UsageError(f"grid axes must match the state dimension {d}")
    with_m = args.subcommand in ("solve-constrained", "verify-dpp", "verify-rc") and not (
        args.subcommand == "verify-rc" and spec.domain is not None and spec.admissible_feedback is not None)
    if args.probes:
        probes = [list(p) for p in args.probes]
    if not probes:
        probes = [[(a + b) / 2 for a, b in zip(xl, xu)] + ([0.0] if with_m else [])]
    if box is None:
        box = [[a, b] for a, b in zip(xl, xu)]
    cfg = RunConfig(
        subcommand=args.subcommand, spec=args.spec, fixture=args.fixture,
        nt=int(_pick(args.nt, g, "nt", 100)), nx=nx,
        nm=int(_pick(args.nm, g, "nm", 41)) if with_m else None,
        x_lower=xl, x_upper=xu,
        m_lower=float(_pick(args.m_lower, g, "m_lower", -2.0)) if with_m else None,
        m_upper=float(_pick(args.m_upper, g, "m_upper", 2.0)) if with_m else None,
        A=float(_pick(args.A, pdef, "A", 2.0)), u_points=_pick(args.u_points, pdef, "u_points", None),
        a_points=int(_pick(args.a_points, pdef, "a_points", 21)),
        boundary=_pick(args.boundary, pdef, "boundary", "neumann"),
        delta=float(args.delta), n_paths=int(args.n_paths), seed=int(args.seed), probes=probes, box=box,
        format=args.format, node_budget=int(args.node_budget), out="")
    cfg.validate()
    return spec, cfg


def _grid(spec, cfg: RunConfig) -> Grid:
    return Grid.make(spec.horizon, cfg.nt, cfg.x_lower, cfg.x_upper, cfg.nx, cfg.m_lower, cfg.m_upper, cfg.nm)


def _params(cfg: RunConfig) -> HamiltonianParams:
    return HamiltonianParams(A=cfg.A, u_points=cfg.u_points, a_points=cfg.a_points, boundary=cfg.boundary,
                             max_nodes=cfg.node_budget)


# --------------------------------------------------------------------------
# artifacts


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _atomic_write(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Artifacts:
    def __init__(self):
        self.files: dict = {}

    def add(self, name: str, data):
        self.files[name] = data.encode() if isinstance(data, str) else bytes(data)

    def write(self, out: Path) -> bytes:
        lines = []
        for name in sorted(self.files):
            data = self.files[name]
            _atomic_write(out / name, data)
            lines.append(f"{name}\t{_sha(data)}\t{len(data)}")
        manifest = ("\n".join(lines) + "\n").encode()
        _atomic_write(out / MANIFEST, manifest)
        return manifest


def _field_artifact(art, stem, field, policy, fmt):
    if fmt == "csv":
        art.add(f"{stem}.csv", field_to_csv(field, policy))
    else:
        art.add(f"{stem}.bin", field_to_bytes(field, policy))


def _csv(header, rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for r in rows:
        buf.write(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in r) + "\n")
    return buf.getvalue()


def _m_slices(field, probes) -> str:
    """Value at t0 along the m axis for each probe x (plot table)."""
    g = field.grid
    rows = []
    for p in probes:
        x = p[:g.dim]
        vals = field.interp(g.t0, np.array([x] * g.nm), g.m_axis)
        for m, v in zip(g.m_axis, vals):
            rows.append(list(x) + [m, v])
    return _csv([f"x{i + 1}" for i in range(g.dim)] + ["m", "value"], rows)


def _policy_table(policy, field) -> str:
    """Policy at t0 on every x (and m) node (heatmap table)."""
    g = field.grid
    rows = []
    for idx in np.ndindex(*g.state_shape):
        coords = [g.axes[k][i] for k, i in enumerate(idx)]
        node = (0,) + idx
        u = list(policy.u[node])
        a = list(policy.a[node]) if policy.a is not None else []
        rows.append(coords + u + a + [int(field.masked[node])])
    head = [f"x{i + 1}" for i in range(g.dim)] + (["m"] if g.has_m else [])
    head += [f"u{j + 1}" for j in range(policy.u.shape[-1])]
    head += [f"a{j + 1}" for j in range(policy.a.shape[-1])] if policy.a is not None else []
    return _csv(head + ["masked"], rows)


# --------------------------------------------------------------------------
# subcommands


def _solve_constrained(spec, cfg):
    return solve_expectation_constrained(spec, _grid(spec, cfg), _params(cfg))


def _solve_state(spec, cfg):
    return solve_state_constrained(spec, _grid(spec, cfg), _params(cfg))


def cmd_solve_floor(spec, cfg, art):
    fld = solve_constraint_floor(spec, _grid(spec, cfg), _params(cfg))
    _field_artifact(art, "floor", fld, None, cfg.format)
    rows = [[*p[:spec.dim], fld.at(0.0, p[:spec.dim])] for p in cfg.probes]
    art.add("probes.csv", _csv([f"x{i + 1}" for i in range(spec.dim)] + ["floor"], rows))
    return [], [f"floor at {p[:spec.dim]}: {r[-1]:.6f}" for p, r in zip(cfg.probes, rows)]


def cmd_solve_constrained(spec, cfg, art):
    V, pol, fl = _solve_constrained(spec, cfg)
    _field_artifact(art, "value", V, pol, cfg.format)
    _field_artifact(art, "floor", fl, None, cfg.format)
    art.add("m_slices.csv", _m_slices(V, cfg.probes))
    art.add("policy_t0.csv", _policy_table(pol, V))
    lines = []
    for p in cfg.probes:
        x, m = p[:spec.dim], p[spec.dim] if len(p) > spec.dim else 0.0
        lines.append(f"V(0, {x}, {m:g}) = {V.at(0.0, x, m):.6f}")
    report = VerificationReport("field_invariants", (0.0,), 0.0, 0.0, 0.0,
                                PASS if V.check_invariants() else FAIL)
    return [report], lines


def cmd_solve_state(spec, cfg, art):
    V, pol = _solve_state(spec, cfg)
    _field_artifact(art, "state_value", V, pol, cfg.format)
    art.add("policy_t0.csv", _policy_table(pol, V))
    lines = [f"V({p[:spec.dim]}) = {V.at(0.0, p[:spec.dim]):.6f}" for p in cfg.probes]
    report = VerificationReport("field_invariants", (0.0,), 0.0, 0.0, 0.0,
                                PASS if V.check_invariants() else FAIL)
    return [report], lines


def cmd_verify_dpp(spec, cfg, art):
    V, pol, fl = _solve_constrained(spec, cfg)
    fx = TestFixture(spec, _params(cfg), value=V, floor=fl, policy=pol)
    reports, skipped = [], 0
    for p in cfg.probes:
        point = (0.0, *p)
        for i, (side, label, nu, alpha, tau) in enumerate(standard_cases(spec, point)):
            seed = cfg.seed + i
            if side == "upper":
                r = check_dpp_upper(fx, point, nu, alpha, tau, cfg.n_paths, seed)
            else:
                r = check_dpp_lower(fx, point, cfg.delta, nu, alpha, tau, cfg.n_paths, seed)
            r.notes.insert(0, label)
            if r.verdict == INCONCLUSIVE and "inadmissible input" in r.notes:
                skipped += 1
                continue
            reports.append(r)
    return reports, [f"{skipped} inadmissible (nu, alpha) pairs skipped"]


def cmd_verify_rc(spec, cfg, art):
    state = spec.domain is not None and spec.admissible_feedback is not None
    reports = []
    if state:
        V, pol = _solve_state(spec, cfg)
        fx = TestFixture(spec, _params(cfg), state_value=V, state_policy=pol)
        for p in cfg.probes:
            reports.append(check_right_continuity(fx, (0.0, *p[:spec.dim]), n_paths=cfg.n_paths, seed=cfg.seed,
                                                  mode="state", box=cfg.box))
    else:
        V, pol, fl = _solve_constrained(spec, cfg)
        fx = TestFixture(spec, _params(cfg), value=V, floor=fl, policy=pol)
        for p in cfg.probes:
            reports.append(check_right_continuity(fx, (0.0, *p), mode="grid", box=cfg.box))
    return reports, []


def cmd_verify_open_closed(spec, cfg, art):
    if spec.domain is None:
        raise UsageError("verify-open-closed needs a [domain] section")
    V, pol = _solve_state(spec, cfg)
    fx = TestFixture(spec, _params(cfg), state_value=V, state_policy=pol)
    class_r = None
    if spec.inward_feedback is not None:
        class_r = check_class_R_sufficient(spec, cfg.box, seed=cfg.seed)
    r = check_open_closed(fx, [p[:spec.dim] for p in cfg.probes], n_paths=cfg.n_paths, seed=cfg.seed,
                          class_r=class_r)
    return [r] + ([class_r] if class_r is not None else []), []


def _interior_starts(spec, cfg):
    """Probes strictly inside the domain, else interior nodes of a 9-point lattice on the box."""
    pts = np.array([p[:spec.dim] for p in cfg.probes], dtype=float)
    pts = pts[spec.domain.delta(pts) > 0]
    if len(pts) == 0:
        axes = [np.linspace(lo, hi, 9) for lo, hi in cfg.box]
        lattice = np.array(np.meshgrid(*axes, indexing="ij")).reshape(spec.dim, -1).T
        pts = lattice[spec.domain.delta(lattice) > 0]
    return [tuple(p) for p in pts]


def cmd_audit_boundary(spec, cfg, art):
    reports = [check_hamiltonian_regularity(spec, cfg.box, seed=cfg.seed)]
    if spec.domain is not None and spec.admissible_feedback is not None:
        reports.append(check_feedback_invariance(spec, _interior_starts(spec, cfg),
                                                 n_paths=min(cfg.n_paths, 10_000), seed=cfg.seed))
    if spec.domain is not None and spec.inward_feedback is not None:
        reports.append(check_class_R_sufficient(spec, cfg.box, seed=cfg.seed))
    return reports, []


COMMANDS = {
    "solve-floor": cmd_solve_floor,
    "solve-constrained": cmd_solve_constrained,
    "solve-state": cmd_solve_state,
    "verify-dpp": cmd_verify_dpp,
    "verify-rc": cmd_verify_rc,
    "verify-open-closed": cmd_verify_open_closed,
    "audit-boundary": cmd_audit_boundary,
}


def _summary(reports, lines) -> str:
    out = [r.summary_row() for r in reports] + list(lines)
    counts = {v: sum(r.verdict == v for r in reports) for v in (PASS, FAIL, INCONCLUSIVE)}
    out.append(f"{counts[PASS]} pass, {counts[FAIL]} fail, {counts[INCONCLUSIVE]} inconclusive")
    return "\n".join(out) + "\n"


def _out_dir(cfg_dict, explicit) -> Path:
    if explicit:
        return Path(explicit)
    root = os.environ.get(OUTPUT_ENV, DEFAULT_ROOT)
    tag = _sha(json.dumps(cfg_dict, sort_keys=True).encode())[:12]
    return Path(root) / f"{cfg_dict['subcommand']}-{tag}"


def _export(args) -> int:
    try:
        data = Path(args.input).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {args.input}: {exc.strerror}") from None
    field, policy = field_from_bytes(data)
    cfg = {"subcommand": "export", "input": args.input, "input_sha256": _sha(data), "format": args.format}
    out = _out_dir(cfg, args.out)
    art = Artifacts()
    art.add("config.json", json.dumps(cfg, sort_keys=True, indent=1))
    _field_artifact(art, "field", field, policy, args.format)
    art.write(out)
    print(f"wrote {out}")
    return 0


def run(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
        if args.subcommand == "export":
            return _export(args)
        spec, cfg = _config(args)
        cfg_dict = cfg.as_dict()
        cfg_dict.pop("out")
        out = _out_dir(cfg_dict, args.out)
        art = Artifacts()
        full = dict(cfg_dict, version=__version__, spec_text=dumps(spec))
        if args.spec:
            full["spec_sha256"] = _sha(Path(args.spec).read_bytes())
        art.add("config.json", json.dumps(full, sort_keys=True, indent=1))
        reports, lines = COMMANDS[cfg.subcommand](spec, cfg, art)
    except UsageError as exc:
        print(f"ccontrol: error: {exc}", file=sys.stderr)
        return 2
    except (SpecError, FieldFormatError, GridBudgetError, CFLError) as exc:
        print(f"ccontrol: error: {exc}", file=sys.stderr)
        return 2
    if reports:
        art.add("reports.jsonl", "".join(r.to_text() + "\n" for r in reports))
    summary = _summary(reports, lines)
    art.add("summary.txt", summary)
    art.write(out)
    sys.stdout.write(summary)
    print(f"wrote {out}")
    return 1 if any(r.verdict == FAIL for r in reports) else 0


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
