"""Flat ``key = value`` run configuration and the manifest written beside outputs."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

from . import storage


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: str = "desk"
    T: int = 0                  # 0 selects the model's default step count
    eta: float = 1.0
    seed: int = 0
    steps: int = 50             # sampling steps (DDIM subsequence length)
    train_steps: int = 2000
    batch: int = 32
    lr: float = 2e-3
    dataset_size: int = 4096
    entangled: float = 0.6
    n_samples: int = 2048
    k: int = 16
    gammas: str = "-8,-4,0,4,8"
    attributes: str = "eyes,smile,scale,brightness"
    pairs: int = 32
    pool: int = 256
    repeats: int = 10
    trials: int = 25

    def resolved_T(self) -> int:
        if self.T:
            return self.T
        return {"tiny": 100, "desk": 200}.get(self.model, 200)

    def gamma_list(self) -> list:
        return parse_floats(self.gammas)

    def attribute_list(self) -> list:
        return [a.strip() for a in self.attributes.split(",") if a.strip()]

    def with_values(self, values: dict) -> "RunConfig":
        known = {f.name: f for f in fields(self)}
        typed = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            typed[key] = _coerce(key, raw, type(getattr(self, key)))
        return replace(self, **typed)

    def items(self) -> list:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


def _coerce(key, raw, kind):
    if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        return raw
    try:
        return kind(str(raw).strip())
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot read {raw!r} as {kind.__name__}") from None


def parse_floats(text: str) -> list:
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}") from None


def parse_config_text(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {n}: empty key")
        out[key] = value
    return out


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return (base or RunConfig()).with_values(parse_config_text(fh.read()))


def format_manifest(entries: dict) -> str:
    """Sorted ``key = value`` lines."""
    lines = []
    for key in sorted(entries):
        val = entries[key]
        if isinstance(val, (list, tuple)):
            val = " ".join(str(v) for v in val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


def write_manifest(out_dir, command: str, argv: list, cfg: RunConfig, extra: dict | None = None):
    entries = {f"config.{k}": v for k, v in cfg.items()}
    entries.update({"command": command, "argv": list(argv)})
    entries.update(extra or {})
    return storage.atomic_write(f"{out_dir}/manifest.txt", format_manifest(entries))


def read_manifest(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())
