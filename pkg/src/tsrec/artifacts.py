"""Artifact headers: every emitted file records tool version, config hash, seed."""

from __future__ import annotations

import json

from . import __version__
from .config import config_hash


def header_lines(cfg, seed: int) -> list:
    return [f"tsrec {__version__}", f"config_hash={config_hash(cfg)}", f"seed={seed}"]


def header_dict(cfg, seed: int) -> dict:
    return {"tool": "tsrec", "version": __version__,
            "config_hash": config_hash(cfg), "seed": seed}


def write_json_report(path, cfg, seed: int, body: dict):
    payload = {"header": header_dict(cfg, seed), **body}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
