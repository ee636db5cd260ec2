"""Minimal TOML reader for run configs, used only where the standard
library's ``tomllib`` (Python 3.11+) is unavailable.

Covers the subset run configs need: ``[table]`` and ``[[array-of-table]]``
headers, dotted keys inside headers, basic strings, integers, floats,
booleans, and single-line arrays.  Not a general TOML implementation.
"""

from __future__ import annotations

import re


class TOMLDecodeError(ValueError):
    pass


_HEADER_RE = re.compile(r"^\[(\[)?\s*([^\]]+?)\s*\](\])?\s*(?:#.*)?$")
_KEY_RE = re.compile(r'^([A-Za-z0-9_.-]+|"[^"]*")\s*=\s*(.+)$')


def _split_dotted(name: str) -> list[str]:
    parts = []
    for piece in name.split("."):
        piece = piece.strip()
        if piece.startswith('"') and piece.endswith('"'):
            piece = piece[1:-1]
        if not piece:
            raise TOMLDecodeError(f"empty key component in {name!r}")
        parts.append(piece)
    return parts


def _strip_comment(text: str) -> str:
    out = []
    in_string = False
    for ch in text:
        if ch == '"':
            in_string = not in_string
        if ch == "#" and not in_string:
            break
        out.append(ch)
    return "".join(out).strip()


def _parse_value(text: str, lineno: int):
    text = text.strip()
    if not text:
        raise TOMLDecodeError(f"line {lineno}: missing value")
    if text.startswith('"'):
        if not text.endswith('"') or len(text) < 2:
            raise TOMLDecodeError(f"line {lineno}: unterminated string")
        body = text[1:-1]
        return body.replace("\\\\", "\x00").replace('\\"', '"') \
                   .replace("\\n", "\n").replace("\\t", "\t") \
                   .replace("\x00", "\\")
    if text.startswith("'"):
        if not text.endswith("'") or len(text) < 2:
            raise TOMLDecodeError(f"line {lineno}: unterminated string")
        return text[1:-1]
    if text == "true":
        return True
    if text == "false":
        return False
    if text.startswith("["):
        if not text.endswith("]"):
            raise TOMLDecodeError(f"line {lineno}: arrays must be single-line")
        inner = text[1:-1].strip()
        if not inner:
            return []
        items = []
        depth = 0
        in_string = False
        start = 0
        for i, ch in enumerate(inner):
            if ch == '"':
                in_string = not in_string
            elif not in_string:
                if ch == "[":
                    depth += 1
                elif ch == "]":
                    depth -= 1
                elif ch == "," and depth == 0:
                    items.append(inner[start:i])
                    start = i + 1
        items.append(inner[start:])
        return [_parse_value(item, lineno) for item in items if item.strip()]
    try:
        cleaned = text.replace("_", "")
        if re.fullmatch(r"[+-]?\d+", cleaned):
            return int(cleaned)
        return float(cleaned)
    except ValueError:
        raise TOMLDecodeError(f"line {lineno}: cannot parse value {text!r}")


def loads(text: str) -> dict:
    root: dict = {}
    current = root
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        header = _HEADER_RE.match(line)
        if header:
            is_array = header.group(1) is not None
            if is_array != (header.group(3) is not None):
                raise TOMLDecodeError(f"line {lineno}: unbalanced table header")
            parts = _split_dotted(header.group(2))
            node = root
            for part in parts[:-1]:
                node = node.setdefault(part, {})
                if isinstance(node, list):
                    node = node[-1]
                if not isinstance(node, dict):
                    raise TOMLDecodeError(f"line {lineno}: {part!r} is not a table")
            leaf = parts[-1]
            if is_array:
                array = node.setdefault(leaf, [])
                if not isinstance(array, list):
                    raise TOMLDecodeError(f"line {lineno}: {leaf!r} is not an array")
                current = {}
                array.append(current)
            else:
                current = node.setdefault(leaf, {})
                if not isinstance(current, dict):
                    raise TOMLDecodeError(f"line {lineno}: {leaf!r} redefined")
            continue
        line = _strip_comment(raw)
        if not line:
            continue
        m = _KEY_RE.match(line)
        if m is None:
            raise TOMLDecodeError(f"line {lineno}: cannot parse {raw.strip()!r}")
        key = _split_dotted(m.group(1))
        value = _parse_value(m.group(2), lineno)
        node = current
        for part in key[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise TOMLDecodeError(f"line {lineno}: {part!r} is not a table")
        if key[-1] in node:
            raise TOMLDecodeError(f"line {lineno}: duplicate key {key[-1]!r}")
        node[key[-1]] = value
    return root


def load_toml_text(text: str) -> dict:
    try:
        import tomllib  # Python >= 3.11
        return tomllib.loads(text)
    except ModuleNotFoundError:
        return loads(text)
