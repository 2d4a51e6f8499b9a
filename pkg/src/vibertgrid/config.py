"""Config schema for the command line: defaults, YAML files and dotted overrides.

The dataclasses (``TrainConfig``, ``SyntheticSpec``, ``MatchPolicy``) are the single
source of truth; this module flattens them to dotted keys so ``--help`` and the
override parser stay in lockstep with the code.
"""
from __future__ import annotations

from dataclasses import asdict, fields
from pathlib import Path

import re

import yaml

from .document import MatchPolicy, ValidationError
from .model import ModelConfig
from .synthetic import SyntheticSpec
from .training import TrainConfig


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads ``1e-3`` as a float (YAML 1.1 insists on a dot)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*\.[0-9_]*(?:[eE][-+]?[0-9]+)?|\.[0-9_]+(?:[eE][-+]?[0-9]+)?
               |[0-9][0-9_]*[eE][-+]?[0-9]+|\.(?:inf|Inf|INF)|[-+]\.(?:inf|Inf|INF)|\.(?:nan|NaN|NAN))$""",
               re.X),
    list("-+0123456789."))


def _load(text: str):
    return yaml.load(text, Loader=_Loader)


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and v:
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _unflatten(flat: dict) -> dict:
    out: dict = {}
    for key, v in flat.items():
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = v
    return out


def _model_defaults() -> dict:
    d = ModelConfig().to_dict()
    # set from the data and from top-level train keys
    for k in ("head_kind", "num_fields"):
        d.pop(k)
    d["encoder"].pop("vocab_size")
    d["word"].pop("channels")
    d["word"].pop("dropout")
    return d


def defaults(kind: str) -> dict:
    """Flat ``{dotted key: default}`` for ``train``, ``generate`` or ``annotate``."""
    if kind == "train":
        d = TrainConfig().to_dict()
        d["model"] = _model_defaults()
        return _flatten(d)
    if kind == "generate":
        d = asdict(SyntheticSpec())
        d = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        templates = d.pop("templates")
        flat = _flatten(d)
        flat.update({f"templates.{k}": v for k, v in templates.items()})
        return flat
    if kind == "annotate":
        return {f.name: f.default for f in fields(MatchPolicy)}
    raise ValueError(f"unknown config kind {kind!r}")


def describe(kind: str) -> str:
    lines = [f"{kind} config keys (default):"]
    for key, value in defaults(kind).items():
        shown = yaml.safe_dump(value, default_flow_style=True).strip().removesuffix("...").strip()
        lines.append(f"  {key} = {shown}")
    return "\n".join(lines)


def load_file(path) -> dict:
    """YAML (or JSON, a YAML subset) mapping; ``None`` gives an empty config."""
    if path is None:
        return {}
    try:
        obj = _load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path}: cannot parse config ({exc})") from None
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise ValidationError(f"{path}: config must be a mapping")
    return _flatten(obj)


def parse_overrides(args: list[str]) -> dict:
    """``["--a.b", "3", "--c=x"]`` -> ``{"a.b": 3, "c": "x"}``, values parsed as YAML scalars."""
    out, i = {}, 0
    while i < len(args):
        arg = args[i]
        if not arg.startswith("--") or len(arg) == 2:
            raise ValidationError(f"unexpected argument {arg!r}; overrides look like --key value")
        key = arg[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ValidationError(f"override {arg} needs a value")
            raw = args[i + 1]
            i += 2
        try:
            out[key.replace("-", "_")] = _load(raw)
        except yaml.YAMLError:
            out[key.replace("-", "_")] = raw
    return out


# keys under these prefixes are open-ended (one template per user label)
_OPEN = {"generate": ("templates.",)}
# keys under these prefixes only apply when set; the preset supplies the rest
_SPARSE = {"train": ("model.",)}


def resolve(kind: str, *layers: dict) -> dict:
    """Merge flat layers over the defaults (later wins) and return the nested result."""
    known = defaults(kind)
    sparse = _SPARSE.get(kind, ())
    merged = {k: v for k, v in known.items() if not k.startswith(sparse) or not sparse}
    for layer in layers:
        for key, value in layer.items():
            if key not in known and not key.startswith(_OPEN.get(kind, ())):
                raise ValidationError(f"unknown {kind} config key {key!r}; see --help")
            merged[key] = value
    return _unflatten(merged)


def train_config(*layers: dict) -> TrainConfig:
    d = resolve("train", *layers)
    d.setdefault("model", {})
    try:
        return TrainConfig(**d)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid train config: {exc}") from None


def synthetic_spec(*layers: dict) -> SyntheticSpec:
    d = resolve("generate", *layers)
    try:
        return SyntheticSpec(**d)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid generate config: {exc}") from None


def match_policy(*layers: dict) -> MatchPolicy:
    try:
        return MatchPolicy(**resolve("annotate", *layers))
    except TypeError as exc:
        raise ValidationError(f"invalid annotate config: {exc}") from None
