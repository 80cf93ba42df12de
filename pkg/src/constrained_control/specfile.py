"""Problem-spec files.

Grammar (one item per line)::

    file     := { line NEWLINE }
    line     := blank | comment | header | entry
    comment  := "#" any*
    header   := "[" name "]"
    entry    := key "=" value
    value    := a JSON value on the rest of the line

Expressions are JSON strings.  Sections and their keys:

``[problem]``
    ``name`` (string), ``dim`` (int, required), ``horizon`` (number,
    required), ``discount`` (number), ``log_coords`` (list of 0-based ints),
    ``reward_bounded``, ``reward_lsc``, ``constraint_usc`` (booleans)
``[dynamics]``
    ``drift`` (list of d strings), ``diffusion`` (d x d nested list, or a
    single string when d = 1)
``[objective]``
    ``reward`` (string)
``[constraint]``
    ``function`` (string in x1..xd, t and optionally y)
``[controls]``
    ``kind`` ("box" or "points"); box: ``lower``, ``upper``,
    ``points_per_axis``; points: ``points`` (list of lists)
``[domain]`` (optional)
    ``kind`` ("halfspace", "box", "ball", "level") with ``normal``/``offset``,
    ``lower``/``upper``, ``center``/``radius`` or ``delta`` (string)
``[feedback]`` (optional)
    ``admissible``, ``inward`` (lists of k strings)
``[grid]`` (optional, solver defaults for the CLI)
    ``nt``, ``x_lower``, ``x_upper``, ``nx``, ``m_lower``, ``m_upper``,
    ``nm``, ``A``, ``u_points``, ``a_points``, ``boundary``,
    ``validation_box`` ([[lo, hi], ...]), ``probes`` (list of points)

Every error is a :class:`SpecFileError` whose message starts with
``line N:``.
"""

from __future__ import annotations

import json
import re
from typing import Optional

from .expr import ExpressionError, parse_expression, to_text
from .model import ControlSet, Domain, ProblemSpec, SpecError

SECTIONS = {
    "problem": {"name", "dim", "horizon", "discount", "log_coords", "reward_bounded", "reward_lsc",
                "constraint_usc"},
    "dynamics": {"drift", "diffusion"},
    "objective": {"reward"},
    "constraint": {"function"},
    "controls": {"kind", "lower", "upper", "points_per_axis", "points"},
    "domain": {"kind", "normal", "offset", "lower", "upper", "center", "radius", "delta"},
    "feedback": {"admissible", "inward"},
    "grid": {"nt", "x_lower", "x_upper", "nx", "m_lower", "m_upper", "nm", "A", "u_points", "a_points",
             "boundary", "validation_box", "probes"},
}
REQUIRED = ("problem", "dynamics", "objective", "constraint", "controls")

_HEADER = re.compile(r"^\[([A-Za-z_][A-Za-z0-9_]*)\]$")
_ENTRY = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*)$")


class SpecFileError(SpecError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class _Doc:
    """Parsed sections with the line of every key and header."""

    def __init__(self):
        self.values: dict = {}
        self.lines: dict = {}
        self.headers: dict = {}

    def get(self, section, key, default=None, required=False):
        sec = self.values.get(section, {})
        if key not in sec:
            if required:
                raise SpecFileError(self.headers[section], f"[{section}] is missing '{key}'")
            return default
        return sec[key]

    def line(self, section, key=None):
        if key is not None and (section, key) in self.lines:
            return self.lines[(section, key)]
        return self.headers.get(section, 0)


def _tokenise(text: str) -> _Doc:
    doc = _Doc()
    section = None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = _HEADER.match(line)
        if m:
            section = m.group(1)
            if section not in SECTIONS:
                raise SpecFileError(n, f"unknown section [{section}]")
            if section in doc.headers:
                raise SpecFileError(n, f"duplicate section [{section}]")
            doc.headers[section] = n
            doc.values[section] = {}
            continue
        m = _ENTRY.match(line)
        if not m:
            raise SpecFileError(n, f"expected 'key = value' or '[section]', got {line!r}")
        if section is None:
            raise SpecFileError(n, "entry before the first section header")
        key, rhs = m.group(1), m.group(2)
        if key not in SECTIONS[section]:
            raise SpecFileError(n, f"unknown key '{key}' in [{section}]")
        if key in doc.values[section]:
            raise SpecFileError(n, f"duplicate key '{key}' in [{section}]")
        try:
            doc.values[section][key] = json.loads(rhs)
        except json.JSONDecodeError as exc:
            raise SpecFileError(n, f"bad value for '{key}': {exc.msg}") from None
        doc.lines[(section, key)] = n
    for s in REQUIRED:
        if s not in doc.headers:
            raise SpecFileError(len(text.splitlines()) + 1, f"missing section [{s}]")
    return doc


def _expr(doc, section, key, value):
    if not isinstance(value, str):
        raise SpecFileError(doc.line(section, key), f"'{key}' must be a quoted expression")
    try:
        return parse_expression(value)
    except ExpressionError as exc:
        raise SpecFileError(doc.line(section, key), f"bad expression for '{key}': {exc}") from None


def _expr_list(doc, section, key, value):
    if isinstance(value, str):
        value = [value]
    if not isinstance(value, list):
        raise SpecFileError(doc.line(section, key), f"'{key}' must be a list of expressions")
    return tuple(_expr(doc, section, key, v) for v in value)


def _numbers(doc, section, key, value, kind=float):
    vals = value if isinstance(value, list) else [value]
    try:
        if any(isinstance(v, bool) for v in vals):
            raise TypeError
        out = [kind(v) for v in vals]
        if kind is int and any(o != v for o, v in zip(out, vals)):
            raise TypeError
        return out
    except (TypeError, ValueError):
        raise SpecFileError(doc.line(section, key), f"'{key}' must be numeric") from None


def _number(doc, section, key, default=None, required=False, kind=float):
    v = doc.get(section, key, default, required)
    if v is None:
        return None
    if isinstance(v, list):
        raise SpecFileError(doc.line(section, key), f"'{key}' must be a single number")
    return _numbers(doc, section, key, v, kind)[0]


def _bool(doc, section, key, default):
    v = doc.get(section, key, default)
    if not isinstance(v, bool):
        raise SpecFileError(doc.line(section, key), f"'{key}' must be true or false")
    return v


def _controls(doc) -> ControlSet:
    kind = doc.get("controls", "kind", "box")
    s = "controls"
    try:
        if kind == "box":
            lo = _numbers(doc, s, "lower", doc.get(s, "lower", required=True))
            hi = _numbers(doc, s, "upper", doc.get(s, "upper", required=True))
            ppa = _number(doc, s, "points_per_axis", 11, kind=int)
            return ControlSet.box(lo, hi, ppa)
        if kind == "points":
            pts = doc.get(s, "points", required=True)
            if not isinstance(pts, list):
                raise SpecFileError(doc.line(s, "points"), "'points' must be a list of lists")
            return ControlSet.finite([_numbers(doc, s, "points", p) for p in pts])
    except SpecFileError:
        raise
    except SpecError as exc:
        raise SpecFileError(doc.line(s), str(exc)) from None
    raise SpecFileError(doc.line(s, "kind"), f"unknown control set kind {kind!r}")


def _domain(doc, dim) -> Optional[Domain]:
    s = "domain"
    if s not in doc.headers:
        return None
    kind = doc.get(s, "kind", required=True)
    try:
        if kind == "halfspace":
            return Domain.halfspace(_numbers(doc, s, "normal", doc.get(s, "normal", required=True)),
                                    _number(doc, s, "offset", 0.0))
        if kind == "box":
            return Domain.box(_numbers(doc, s, "lower", doc.get(s, "lower", required=True)),
                              _numbers(doc, s, "upper", doc.get(s, "upper", required=True)))
        if kind == "ball":
            return Domain.ball(_numbers(doc, s, "center", doc.get(s, "center", required=True)),
                               _number(doc, s, "radius", required=True))
        if kind == "level":
            return Domain.level(dim, _expr(doc, s, "delta", doc.get(s, "delta", required=True)))
    except SpecFileError:
        raise
    except SpecError as exc:
        raise SpecFileError(doc.line(s), str(exc)) from None
    raise SpecFileError(doc.line(s, "kind"), f"unknown domain kind {kind!r}")


def loads(text: str) -> tuple:
    """Parse spec-file text into ``(ProblemSpec, grid_defaults)``."""
    doc = _tokenise(text)
    dim = _number(doc, "problem", "dim", required=True, kind=int)
    horizon = _number(doc, "problem", "horizon", required=True)
    drift = _expr_list(doc, "dynamics", "drift", doc.get("dynamics", "drift", required=True))
    raw = doc.get("dynamics", "diffusion", required=True)
    if isinstance(raw, str):
        raw = [[raw]]
    if not isinstance(raw, list) or not all(isinstance(r, list) for r in raw):
        raise SpecFileError(doc.line("dynamics", "diffusion"), "'diffusion' must be a nested list of expressions")
    diffusion = tuple(_expr_list(doc, "dynamics", "diffusion", r) for r in raw)
    reward = _expr(doc, "objective", "reward", doc.get("objective", "reward", required=True))
    constraint = _expr(doc, "constraint", "function", doc.get("constraint", "function", required=True))
    controls = _controls(doc)
    domain = _domain(doc, dim)
    fb = {}
    for key, name in (("admissible", "admissible_feedback"), ("inward", "inward_feedback")):
        v = doc.get("feedback", key)
        if v is not None:
            fb[name] = _expr_list(doc, "feedback", key, v)
    log_coords = tuple(_numbers(doc, "problem", "log_coords", doc.get("problem", "log_coords", []), int))
    name = doc.get("problem", "name", "problem")
    if not isinstance(name, str):
        raise SpecFileError(doc.line("problem", "name"), "'name' must be a string")
    try:
        spec = ProblemSpec(
            dim=dim, horizon=horizon, drift=drift, diffusion=diffusion, reward=reward, constraint=constraint,
            controls=controls, domain=domain, discount=_number(doc, "problem", "discount", 0.0), name=name,
            log_coords=log_coords, reward_bounded=_bool(doc, "problem", "reward_bounded", False),
            reward_lsc=_bool(doc, "problem", "reward_lsc", True),
            constraint_usc=_bool(doc, "problem", "constraint_usc", True), **fb)
    except SpecFileError:
        raise
    except SpecError as exc:
        raise SpecFileError(doc.line("problem"), str(exc)) from None
    return spec, dict(doc.values.get("grid", {}))


def load(path) -> tuple:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def dumps(spec: ProblemSpec, grid: Optional[dict] = None) -> str:
    """Render a problem (and optional grid defaults) in the spec-file grammar."""
    j = json.dumps
    out = ["[problem]", f"name = {j(spec.name)}", f"dim = {spec.dim}", f"horizon = {j(spec.horizon)}",
           f"discount = {j(spec.discount)}", f"log_coords = {j(list(spec.log_coords))}",
           f"reward_bounded = {j(spec.reward_bounded)}", f"reward_lsc = {j(spec.reward_lsc)}",
           f"constraint_usc = {j(spec.constraint_usc)}", "",
           "[dynamics]", f"drift = {j([to_text(e) for e in spec.drift])}",
           f"diffusion = {j([[to_text(e) for e in r] for r in spec.diffusion])}", "",
           "[objective]", f"reward = {j(to_text(spec.reward))}", "",
           "[constraint]", f"function = {j(to_text(spec.constraint))}", "", "[controls]"]
    U = spec.controls
    if U.kind == "box":
        out += ['kind = "box"', f"lower = {j(list(U.lower))}", f"upper = {j(list(U.upper))}",
                f"points_per_axis = {U.points_per_axis}"]
    else:
        out += ['kind = "points"', f"points = {j([list(p) for p in U.points])}"]
    D = spec.domain
    if D is not None:
        out += ["", "[domain]", f"kind = {j(D.kind)}"]
        if D.kind == "halfspace":
            out += [f"normal = {j(list(D.normal))}", f"offset = {j(D.offset)}"]
        elif D.kind == "box":
            out += [f"lower = {j(list(D.lower))}", f"upper = {j(list(D.upper))}"]
        elif D.kind == "ball":
            out += [f"center = {j(list(D.center))}", f"radius = {j(D.radius)}"]
        else:
            out += [f"delta = {j(to_text(D.delta_expr))}"]
    if spec.admissible_feedback is not None or spec.inward_feedback is not None:
        out += ["", "[feedback]"]
        if spec.admissible_feedback is not None:
            out.append(f"admissible = {j([to_text(e) for e in spec.admissible_feedback])}")
        if spec.inward_feedback is not None:
            out.append(f"inward = {j([to_text(e) for e in spec.inward_feedback])}")
    if grid:
        out += ["", "[grid]"] + [f"{k} = {j(v)}" for k, v in grid.items()]
    return "\n".join(out) + "\n"
