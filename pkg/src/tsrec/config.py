"""Run configuration: model/training knobs, key=value config files, hashing.

Precedence when resolving a run config is defaults < config file < CLI flags;
the CLI applies that ordering and every artifact records the resolved hash.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields


@dataclass
class ModelConfig:
    d: int = 100                 # embedding width (must be even)
    seq_len: int = 10            # fixed behavior-sequence length
    p_min: int | None = None     # interval quantum in seconds; None = derive from data
    bin_max: int = 256           # interval bins are capped here; NEW sentinel is bin_max + 1
    matrix_m: int = 10           # top repeat consumers kept per item
    matrix_n: int = 10           # interval columns per matrix row / history width
    conv_channels: int = 8       # output channels per 2D kernel scale
    conv1d_widths: tuple = (2, 3)
    dropout: float = 0.5
    lr: float = 0.001
    batch_size: int = 256
    train_negatives: int = 3
    val_negatives: int = 3
    test_negatives: int = 100
    patience: int = 20
    max_epochs: int = 200
    seed: int = 0
    train_on_short: bool = True  # also train positions below seq_len via left padding
    resample_negatives: bool = True
    use_utrm: bool = True
    use_itrm: bool = True
    use_sram: bool = True
    min_item_count: int = 10
    split_fractions: tuple = (0.70, 0.10, 0.20)
    threads: int = 1

    @property
    def new_bin(self) -> int:
        """Interval-vocabulary id for a never-before-seen target item."""
        return self.bin_max + 1

    def validate(self):
        if self.d <= 0 or self.d % 2 != 0:
            raise ValueError(f"d must be positive and even, got {self.d}")
        if self.d % len(self.conv1d_widths) != 0:
            raise ValueError(
                f"d={self.d} must be divisible by the number of conv widths "
                f"{len(self.conv1d_widths)}")
        for name in ("seq_len", "bin_max", "matrix_m", "matrix_n", "conv_channels",
                     "batch_size", "train_negatives", "max_epochs", "min_item_count",
                     "threads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.p_min is not None and self.p_min <= 0:
            raise ValueError(f"p_min must be positive, got {self.p_min}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.patience < 0:
            raise ValueError(f"patience must be >= 0, got {self.patience}")
        fr = self.split_fractions
        if len(fr) != 3 or any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be 3 positive values summing to 1, got {fr}")
        return self


def parse_kv_file(path) -> dict:
    """Read a key=value config file; '#' starts a comment, blank lines ignored."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _coerce(raw: str, ftype):
    if ftype is bool or ftype == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected boolean, got {raw!r}")
    if ftype is int or ftype == "int":
        return int(raw)
    if ftype is float or ftype == "float":
        return float(raw)
    if ftype is tuple or ftype == "tuple" or str(ftype).startswith("tuple"):
        parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
        vals = tuple(float(p) if "." in p else int(p) for p in parts)
        return vals
    if str(ftype).startswith("int | None") or str(ftype) == "Optional[int]":
        if raw.lower() in ("none", ""):
            return None
        return int(raw)
    return raw


def apply_overrides(cfg, overrides: dict):
    """Return a copy of a dataclass config with string overrides coerced and applied."""
    known = {f.name: f for f in fields(cfg)}
    updates = {}
    for key, raw in overrides.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}; known keys: {sorted(known)}")
        value = _coerce(raw, known[key].type) if isinstance(raw, str) else raw
        updates[key] = value
    return dataclasses.replace(cfg, **updates)


def config_hash(cfg) -> str:
    """Stable short hash over the resolved config, recorded in artifact headers."""
    items = sorted(dataclasses.asdict(cfg).items())
    blob = "\n".join(f"{k}={v!r}" for k, v in items).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]
