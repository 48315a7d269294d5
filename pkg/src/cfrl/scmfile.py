"""Text description files for finite SCMs.

Example::

    # two-coin bandit
    [node]
    name = A
    domain = a1, a2

    [node]
    name = O
    domain = 0, 1

    [noise]
    name = U_A
    support = 0
    probs = 1

    [noise]
    name = U_O
    support = 0, 1
    probs = 0.5, 0.5

    [mechanism]
    node = A
    noise = U_A
    parents=() noise=0 -> a1

    [mechanism]
    node = O
    parents = A
    noise = U_O
    parents=(a1) noise=0 -> 0
    parents=(a1) noise=1 -> 1
    parents=(a2) noise=0 -> 1
    parents=(a2) noise=1 -> 0

    [expect]
    node = O
    value = 1
    prob = 0.5

All values are strings.  ``[expect]`` sections are optional checks on the
observational marginal of one node, used by the verification suite.
"""

import re

from . import textfmt
from .errors import ConfigError, ConstructionError
from .scm import Mechanism, NoiseSpec, Scm

SECTIONS = {"node", "noise", "mechanism", "expect"}
_ROW = re.compile(r"^parents=\((.*)\)\s+noise=(\S+)\s*->\s*(\S+)$")


def parse_scm(text):
    """Return ``(scm, expectations)`` where expectations are ``(node, value, prob, lineno)``."""
    sections = textfmt.parse(text, SECTIONS, allow_rows={"mechanism"})
    domains, noises, mechs, expects = {}, [], [], []
    for sec in sections:
        if sec.name == "node":
            sec.check_keys({"name", "domain"})
            name = sec.require("name")
            if name in domains:
                raise ConfigError(f"node {name!r} declared twice", sec.lineno)
            domains[name] = tuple(textfmt.split_list(sec.require("domain")))
        elif sec.name == "noise":
            sec.check_keys({"name", "support", "probs"})
            try:
                noises.append(NoiseSpec(sec.require("name"), tuple(textfmt.split_list(sec.require("support"))),
                                        tuple(textfmt.parse_float_list(sec.require("probs"), sec.line_of("probs")))))
            except ConstructionError as exc:
                raise ConfigError(str(exc), sec.lineno) from None
        elif sec.name == "mechanism":
            sec.check_keys({"node", "parents", "noise"})
            node = sec.require("node")
            parents = tuple(textfmt.split_list(sec.get("parents", "")))
            table = {}
            for row, lineno in sec.rows:
                m = _ROW.match(row)
                if not m:
                    raise ConfigError(f"malformed mechanism row: {row!r}", lineno)
                pv = tuple(textfmt.split_list(m.group(1)))
                if len(pv) != len(parents):
                    raise ConfigError(f"row gives {len(pv)} parent values, expected {len(parents)}", lineno)
                key = (*pv, m.group(2))
                if key in table:
                    raise ConfigError(f"duplicate mechanism row for {key!r}", lineno)
                table[key] = m.group(3)
            mechs.append(Mechanism.from_table(node, parents, sec.require("noise"), table))
        else:
            sec.check_keys({"node", "value", "prob"})
            expects.append((sec.require("node"), sec.require("value"),
                            textfmt.parse_float(sec.require("prob"), sec.line_of("prob")), sec.lineno))
    # noise supports are strings in the file; mechanism rows key on the same strings
    noises = [NoiseSpec(n.id, tuple(str(v) for v in n.support), n.probs) for n in noises]
    try:
        return Scm(domains, noises, mechs), expects
    except ConstructionError as exc:
        raise ConfigError(str(exc)) from None


def load_scm(path):
    with open(path, encoding="utf-8") as fh:
        return parse_scm(fh.read())


def dump_scm(scm):
    """Text form of a table-only SCM (inverse of :func:`parse_scm`)."""
    lines = []
    for node in scm.nodes:
        lines += ["[node]", f"name = {node}", f"domain = {', '.join(map(str, scm.domains[node]))}", ""]
    for nid in sorted(scm.noise):
        spec = scm.noise[nid]
        if spec.is_uniform:
            raise ConstructionError("uniform noise has no file representation; quantize it first")
        lines += ["[noise]", f"name = {nid}", f"support = {', '.join(map(str, spec.support))}",
                  f"probs = {', '.join(repr(p) for p in spec.probs)}", ""]
    for node in scm.nodes:
        mech = scm.mechanisms[node]
        if mech.table is None:
            raise ConstructionError(f"mechanism {node!r} is not a table")
        lines += ["[mechanism]", f"node = {node}"]
        if mech.parents:
            lines.append(f"parents = {', '.join(mech.parents)}")
        lines.append(f"noise = {mech.noise}")
        for key in sorted(mech.table, key=lambda k: tuple(map(str, k))):
            pv = ", ".join(map(str, key[:-1]))
            lines.append(f"parents=({pv}) noise={key[-1]} -> {mech.table[key]}")
        lines.append("")
    return "\n".join(lines)
