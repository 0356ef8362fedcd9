"""Anchored name patterns for selecting tensors.

A pattern is either a glob (``*`` matches any run of characters, ``?`` a
single character) optionally containing ``{name}`` capture groups that match
one dot-free name segment, or a raw regular expression prefixed with ``re:``.
Patterns always match the full tensor name.
"""

from __future__ import annotations

import re

_CAPTURE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


def compile_name_pattern(pattern: str) -> re.Pattern:
    if pattern.startswith("re:"):
        return re.compile(pattern[3:])
    out = []
    i = 0
    while i < len(pattern):
        m = _CAPTURE.match(pattern, i)
        if m:
            out.append(f"(?P<{m.group(1)}>[^.]+)")
            i = m.end()
            continue
        ch = pattern[i]
        if ch == "*":
            out.append(".*")
        elif ch == "?":
            out.append(".")
        else:
            out.append(re.escape(ch))
        i += 1
    return re.compile("".join(out))


def matches_any(name: str, patterns: list[re.Pattern]) -> bool:
    return any(p.fullmatch(name) for p in patterns)
