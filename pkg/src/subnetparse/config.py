"""Key-value config files: `key = value` lines, `#` comments, no sections.

Config values fill in for flags the user did not pass explicitly; explicit
flags always win. Unknown keys are rejected.
"""

from __future__ import annotations

from .errors import UsageError
from .treebank import ToyGrammarSpec


def load_keyvalue(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            key = key.strip().replace("-", "_")
            if not key:
                raise UsageError(f"{path}:{lineno}: empty key")
            if key in out:
                raise UsageError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value.strip()
    return out


_BOOL_STRINGS = {"true": True, "1": True, "yes": True,
                 "false": False, "0": False, "no": False}


def coerce(value: str, kind):
    if kind is bool:
        v = value.lower()
        if v not in _BOOL_STRINGS:
            raise UsageError(f"expected a boolean, got {value!r}")
        return _BOOL_STRINGS[v]
    try:
        return kind(value)
    except ValueError:
        raise UsageError(f"cannot parse {value!r} as {kind.__name__}") from None


class Resolver:
    """Precedence: built-in defaults < config file < explicit flags."""

    def __init__(self, flags: dict, config: dict[str, str], known_keys: set[str]):
        unknown = set(config) - known_keys
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        self.flags = flags
        self.config = config

    def get(self, name: str, default, kind=None):
        flag_value = self.flags.get(name)
        if flag_value is not None:
            return flag_value
        if name in self.config:
            return coerce(self.config[name], kind or type(default))
        return default


def load_toy_spec(path: str) -> ToyGrammarSpec:
    """Toy grammar spec file with keys: word_order, adposition, vocab_seed,
    labels (comma separated), noise_rate."""
    raw = load_keyvalue(path)
    known = {"word_order", "adposition", "vocab_seed", "labels", "noise_rate"}
    unknown = set(raw) - known
    if unknown:
        raise UsageError(f"{path}: unknown toy-spec keys: {sorted(unknown)}")
    kwargs = {}
    if "word_order" in raw:
        kwargs["word_order"] = raw["word_order"]
    if "adposition" in raw:
        kwargs["adposition"] = raw["adposition"]
    if "vocab_seed" in raw:
        kwargs["vocab_seed"] = coerce(raw["vocab_seed"], int)
    if "labels" in raw:
        labels = tuple(x.strip() for x in raw["labels"].split(",") if x.strip())
        kwargs["label_inventory"] = labels
    if "noise_rate" in raw:
        kwargs["noise_rate"] = coerce(raw["noise_rate"], float)
    return ToyGrammarSpec(**kwargs)
