"""Line-oriented ``[section]`` / ``key = value`` text format.

Shared by SCM description files, POMDP description files and experiment
configs.  Grammar::

    file    := (blank | comment | header | entry | row)*
    comment := '#' anything
    header  := '[' name ']'
    entry   := key '=' value          (no '->' on the line)
    row     := anything containing '->'

Values keep their surrounding whitespace stripped; list values are split on
commas by :func:`split_list`.
"""

import re
from dataclasses import dataclass, field

from .errors import ConfigError

_HEADER = re.compile(r"^\[([A-Za-z_][A-Za-z0-9_]*)\]$")
_ENTRY = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*)$")


@dataclass
class Section:
    name: str
    lineno: int
    entries: dict = field(default_factory=dict)   # key -> (value, lineno)
    rows: list = field(default_factory=list)      # (text, lineno)

    def get(self, key, default=None):
        if key in self.entries:
            return self.entries[key][0]
        return default

    def require(self, key):
        if key not in self.entries:
            raise ConfigError(f"[{self.name}] missing required key '{key}'", self.lineno)
        return self.entries[key][0]

    def line_of(self, key):
        return self.entries.get(key, (None, self.lineno))[1]

    def check_keys(self, allowed):
        for key, (_, lineno) in self.entries.items():
            if key not in allowed:
                raise ConfigError(f"[{self.name}] unknown key '{key}'", lineno)


def parse(text, allowed_sections=None, allow_rows=()):
    """Parse ``text`` into a list of :class:`Section` in file order."""
    sections = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = _HEADER.match(line)
        if m:
            name = m.group(1)
            if allowed_sections is not None and name not in allowed_sections:
                raise ConfigError(f"unknown section [{name}]", lineno)
            current = Section(name, lineno)
            sections.append(current)
            continue
        if current is None:
            raise ConfigError("content before the first [section] header", lineno)
        if "->" in line:
            if current.name not in allow_rows:
                raise ConfigError(f"table rows are not allowed in [{current.name}]", lineno)
            current.rows.append((line, lineno))
            continue
        m = _ENTRY.match(line)
        if not m:
            raise ConfigError(f"cannot parse line: {line!r}", lineno)
        key, value = m.group(1), m.group(2).strip()
        if key in current.entries:
            raise ConfigError(f"[{current.name}] duplicate key '{key}'", lineno)
        current.entries[key] = (value, lineno)
    return sections


def split_list(value):
    if value is None or value.strip() == "":
        return []
    return [v.strip() for v in value.split(",")]


def parse_float_list(value, lineno=None):
    try:
        return [float(v) for v in split_list(value)]
    except ValueError as exc:
        raise ConfigError(f"expected a list of numbers, got {value!r}", lineno) from exc


def parse_int(value, lineno=None):
    try:
        return int(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"expected an integer, got {value!r}", lineno) from exc


def parse_float(value, lineno=None):
    try:
        return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"expected a number, got {value!r}", lineno) from exc
