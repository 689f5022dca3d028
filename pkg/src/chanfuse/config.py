"""Line-oriented ``key = value`` configuration files."""

from pathlib import Path

from chanfuse.errors import FormatError


def parse_config(text, source="<config>"):
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise FormatError(f"{source}:{n}: empty key")
        out[key.replace("-", "_")] = value
    return out


def read_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def get(conf, key, kind=str, default=None):
    if key not in conf:
        return default
    try:
        return kind(conf[key])
    except ValueError as exc:
        raise FormatError(f"config key {key!r}: cannot parse {conf[key]!r} as {kind.__name__}") from exc
