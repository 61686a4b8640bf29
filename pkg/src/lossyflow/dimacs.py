"""Extended DIMACS text format for lossy networks.

::

    c comment
    p glf <n> <m> [U]
    n <id> s
    n <id> t
    a <tail> <head> <cap> <gnum> <gden> [cost]

Vertex ids are 1-based in the file and 0-based in :class:`FlowNetwork`.
Either every arc carries a cost or none does. When the optional ``U`` is
given, capacities and costs must lie in ``{1..U}`` (costs may be 0).
"""
from __future__ import annotations

import io
from pathlib import Path

from .genflow import FlowNetwork

__all__ = ["DimacsError", "parse_network", "read_network", "format_network",
           "write_network"]


class DimacsError(ValueError):
    """Malformed network text; carries the 1-based line and column."""

    def __init__(self, message, line, column=1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


def _fields(raw):
    """Split a line into ``(token, column)`` pairs."""
    out, pos = [], 0
    for tok in raw.split():
        pos = raw.index(tok, pos)
        out.append((tok, pos + 1))
        pos += len(tok)
    return out


def _int(tok, col, lineno, what):
    try:
        return int(tok)
    except ValueError:
        raise DimacsError(f"{what} must be an integer, got {tok!r}", lineno, col) from None


def parse_network(text: str) -> FlowNetwork:
    """Parse extended DIMACS text into a :class:`FlowNetwork`.

    Raises
    ------
    DimacsError
        On the first offending line, with its line and column.
    """
    n = m = U = None
    p_line = 0
    ends = {}
    arcs = []
    has_cost = None
    for lineno, raw in enumerate(io.StringIO(text), start=1):
        f = _fields(raw)
        if not f or f[0][0] == "c":
            continue
        kind, kcol = f[0]
        if kind == "p":
            if n is not None:
                raise DimacsError("duplicate problem line", lineno, kcol)
            if len(f) not in (4, 5) or f[1][0] != "glf":
                raise DimacsError("expected 'p glf <n> <m> [U]'", lineno, kcol)
            n = _int(*f[2], lineno, "n")
            m = _int(*f[3], lineno, "m")
            if n < 2:
                raise DimacsError("n must be >= 2", lineno, f[2][1])
            if m < 0:
                raise DimacsError("m must be >= 0", lineno, f[3][1])
            if len(f) == 5:
                U = _int(*f[4], lineno, "U")
                if U < 1:
                    raise DimacsError("U must be >= 1", lineno, f[4][1])
            p_line = lineno
            continue
        if n is None:
            raise DimacsError(f"'{kind}' line before the problem line", lineno, kcol)
        if kind == "n":
            if len(f) != 3 or f[2][0] not in ("s", "t"):
                raise DimacsError("expected 'n <id> s' or 'n <id> t'", lineno, kcol)
            v = _int(*f[1], lineno, "node id")
            if not 1 <= v <= n:
                raise DimacsError(f"node id {v} outside 1..{n}", lineno, f[1][1])
            role = f[2][0]
            if role in ends:
                raise DimacsError(f"duplicate {role} designation (first on line "
                                  f"{ends[role][1]})", lineno, f[2][1])
            other = ends.get("t" if role == "s" else "s")
            if other is not None and other[0] == v - 1:
                raise DimacsError("source and sink must differ", lineno, f[1][1])
            ends[role] = (v - 1, lineno)
        elif kind == "a":
            if len(f) not in (6, 7):
                raise DimacsError("expected 'a <tail> <head> <cap> <gnum> <gden> [cost]'",
                                  lineno, kcol)
            if has_cost is None:
                has_cost = len(f) == 7
            elif has_cost != (len(f) == 7):
                raise DimacsError("either every arc has a cost or none does", lineno, kcol)
            names = ("tail", "head", "capacity", "gamma numerator",
                     "gamma denominator", "cost")
            vals = [_int(tok, col, lineno, name)
                    for (tok, col), name in zip(f[1:], names)]
            tail, head, cap, gnum, gden = vals[:5]
            for v, (_, col) in ((tail, f[1]), (head, f[2])):
                if not 1 <= v <= n:
                    raise DimacsError(f"node id {v} outside 1..{n}", lineno, col)
            if tail == head:
                raise DimacsError("self-loop", lineno, f[2][1])
            if cap < 1 or (U is not None and cap > U):
                hi = "" if U is None else f"..{U}"
                raise DimacsError(f"capacity {cap} outside 1{hi}", lineno, f[3][1])
            if gnum < 1 or gden < 1:
                raise DimacsError("gamma terms must be >= 1", lineno, f[4][1])
            if gnum > gden:
                raise DimacsError(f"gamma {gnum}/{gden} exceeds 1", lineno, f[4][1])
            if has_cost:
                cost = vals[5]
                if cost < 0 or (U is not None and cost > U):
                    hi = "" if U is None else f"..{U}"
                    raise DimacsError(f"cost {cost} outside 0{hi}", lineno, f[6][1])
            arcs.append((tail - 1, head - 1, *vals[2:]))
        else:
            raise DimacsError(f"unknown line type {kind!r}", lineno, kcol)
    if n is None:
        raise DimacsError("missing problem line", max(1, text.count("\n")))
    for role, word in (("s", "source"), ("t", "sink")):
        if role not in ends:
            raise DimacsError(f"missing {word} line 'n <id> {role}'", p_line)
    if len(arcs) != m:
        raise DimacsError(f"header declares {m} arcs, found {len(arcs)}", p_line)
    return FlowNetwork.from_edges(n, arcs, ends["s"][0], ends["t"][0])


def read_network(path) -> FlowNetwork:
    """Parse a file; ``"-"`` reads standard input."""
    if str(path) == "-":
        import sys
        return parse_network(sys.stdin.read())
    return parse_network(Path(path).read_text())


def format_network(net: FlowNetwork, comment=None) -> str:
    lines = []
    if comment:
        lines += [f"c {row}" for row in str(comment).splitlines()]
    lines.append(f"p glf {net.n} {net.m}")
    lines.append(f"n {net.s + 1} s")
    lines.append(f"n {net.t + 1} t")
    for e in net.edges():
        lines.append("a " + " ".join(str(v + 1) for v in e[:2]) + " "
                     + " ".join(str(v) for v in e[2:]))
    return "\n".join(lines) + "\n"


def write_network(path, net: FlowNetwork, comment=None):
    Path(path).write_text(format_network(net, comment))
