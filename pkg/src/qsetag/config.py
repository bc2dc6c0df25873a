"""One YAML config drives the whole pipeline; flags override file values.

Outputs land under <workdir>/runs/<config-hash>/ so that re-running a stage
with the same effective config reuses the same run directory, and any config
change starts a fresh one.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError

DEFAULTS: dict[str, Any] = {
    "workdir": "work",
    "corpus": {
        "exports": [],  # [{forum, path, answers?}]
        "tags": {},  # forum -> [tag, ...]; falls back to the study tag sets
        "out": "corpus.jsonl",
    },
    "llm": {
        "mode": "http",  # "http" | "recorded"
        "replies": None,  # recorded mode: JSONL script
        "audit_log": "llm_audit.jsonl",
        "max_in_flight": 4,
        "max_retries": 3,
    },
    "annotation": {
        "human": "human:A1",
        "llm": "llm",
        "round": 1,
        "max_rounds": 3,
        "annotations": None,  # CSV for import-annotations
        "decisions": None,  # CSV of scripted human decisions for negotiate
    },
    "dataset": {"max_len": 128, "k": 5, "seed": 7},
    "train": {
        "checkpoint_id": "bert-base-uncased",
        "epochs": 30,
        "batch_size": 16,
        "learning_rate": 2.0e-5,
        "warmup_fraction": 0.1,
        "weight_decay": 0.01,
        "seed": 7,
        "device": None,
    },
    "eval": {"outdir": "eval"},
    "explain": {"sample_size": 200, "top_n": 20, "budget": 256, "seed": 7},
    "serve": {
        "port": 8000,
        "cors_origin": None,
        # optional overrides; default to the run directory's artifacts
        "model_dir": None,
        "store_path": None,
    },
}


def _deep_merge(base: dict, override: Mapping) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


class PipelineConfig:
    def __init__(self, values: dict, base_dir: Path):
        self.values = values
        self.base_dir = base_dir

    @classmethod
    def load(cls, path: str | Path | None, overrides: Mapping | None = None) -> "PipelineConfig":
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
            if not isinstance(raw, dict):
                raise ConfigError(f"config root must be a mapping: {path}")
            base_dir = path.parent.resolve()
        else:
            raw = {}
            base_dir = Path.cwd()
        values = _deep_merge(DEFAULTS, raw)
        if overrides:
            values = _deep_merge(values, overrides)
        return cls(values, base_dir)

    def section(self, name: str) -> dict:
        return self.values[name]

    def resolve_input(self, value: str | None) -> Path | None:
        """Input paths are relative to the config file's directory."""
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def hash(self) -> str:
        payload = json.dumps(self.values, sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]

    @property
    def run_dir(self) -> Path:
        workdir = self.resolve_input(self.values["workdir"])
        return workdir / "runs" / self.hash()

    def artifact(self, *parts: str) -> Path:
        return self.run_dir.joinpath(*parts)

    def require_artifact(self, relative: str, produced_by: str) -> Path:
        path = self.artifact(relative)
        if not path.exists():
            raise ConfigError(
                f"missing {relative} under {self.run_dir}; run `qsetag {produced_by}` first"
            )
        return path
