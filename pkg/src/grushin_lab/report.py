"""Structured experiment records shared by every module of the lab."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np


def _plain(value: Any) -> Any:
    """Convert numpy scalars/arrays and non-finite floats into JSON-safe values."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    return value


@dataclass
class ExperimentReport:
    """One experiment: what was measured, against which tolerance, and the verdicts.

    ``wall_time`` is kept out of :meth:`to_dict` unless requested so that
    serialized reports are reproducible byte for byte.
    """

    name: str
    config: dict[str, Any] = field(default_factory=dict)
    measurements: dict[str, Any] = field(default_factory=dict)
    tolerances: dict[str, Any] = field(default_factory=dict)
    verdicts: dict[str, bool] = field(default_factory=dict)
    seed: int | None = None
    notes: list[str] = field(default_factory=list)
    rejected: str | None = None
    wall_time: float = 0.0

    @property
    def passed(self) -> bool:
        return self.rejected is None and all(self.verdicts.values())

    def check(self, key: str, ok: bool, tolerance: Any = None) -> bool:
        self.verdicts[key] = bool(ok)
        if tolerance is not None:
            self.tolerances[key] = tolerance
        return bool(ok)

    def to_dict(self, timing: bool = False) -> dict[str, Any]:
        out = {
            "name": self.name,
            "config": self.config,
            "measurements": self.measurements,
            "tolerances": self.tolerances,
            "verdicts": self.verdicts,
            "passed": self.passed,
            "seed": self.seed,
            "notes": self.notes,
            "rejected": self.rejected,
        }
        if timing:
            out["wall_time"] = self.wall_time
        return _plain(out)

    def to_json(self, timing: bool = False) -> str:
        return dumps(self.to_dict(timing=timing))

    def summary_line(self) -> str:
        state = "REJECTED" if self.rejected else ("PASS" if self.passed else "FAIL")
        return f"[{state}] {self.name}"


def dumps(obj: Any) -> str:
    """Canonical JSON: UTF-8 safe, sorted keys, fixed separators."""
    return json.dumps(_plain(obj), sort_keys=True, indent=2, ensure_ascii=False) + "\n"
