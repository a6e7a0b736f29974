"""Evaluation reports, training logs and run summaries on disk."""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .attacks import AttackConfig
from .checkpoint import atomic_write_bytes

EVAL_COLUMNS = [
    "model_id",
    "scheme",
    "samples",
    "sigma",
    "attack",
    "family",
    "epsilon",
    "k",
    "backward_samples",
    "grad_budget",
    "random_start",
    "clean_mean",
    "clean_std",
    "adv_mean",
    "adv_std",
    "clean_per_seed",
    "adv_per_seed",
    "seeds",
]


def mean_std(values: Sequence[float]) -> Tuple[float, Optional[float]]:
    """Mean and sample standard deviation; the std is absent below two values."""
    values = [float(v) for v in values]
    if not values:
        return float("nan"), None
    mean = math.fsum(values) / len(values)
    mean = min(max(mean, min(values)), max(values))
    if len(values) < 2:
        return mean, None
    return mean, float(np.std(values, ddof=1))


def format_mean_std(mean: float, std: Optional[float], digits: int = 2) -> str:
    """'55.92±0.22', or just the mean when the std is absent."""
    if std is None or (isinstance(std, float) and math.isnan(std)):
        return f"{mean:.{digits}f}"
    return f"{mean:.{digits}f}±{std:.{digits}f}"


def _join(values: Sequence[Any]) -> str:
    return ";".join(repr(float(v)) if isinstance(v, float) else str(v) for v in values)


@dataclass
class ReportRow:
    model_id: str
    scheme: str
    samples: int
    sigma: float
    attack: Optional[AttackConfig] = None
    threat: str = "direct"
    clean_per_seed: List[float] = field(default_factory=list)
    adv_per_seed: List[float] = field(default_factory=list)
    seeds: List[int] = field(default_factory=list)

    @property
    def clean(self) -> Tuple[float, Optional[float]]:
        return mean_std(self.clean_per_seed)

    @property
    def adversarial(self) -> Tuple[float, Optional[float]]:
        return mean_std(self.adv_per_seed)

    def as_record(self) -> Dict[str, Any]:
        attack = self.attack
        spec = "none"
        if attack is not None:
            spec = attack.to_spec()
            if self.threat != "direct":
                spec = f"{self.threat}({spec})"
        clean_mean, clean_std = self.clean
        adv_mean, adv_std = self.adversarial
        return {
            "model_id": self.model_id,
            "scheme": self.scheme,
            "samples": self.samples,
            "sigma": float(self.sigma),
            "attack": spec,
            "family": attack.family.value if attack else "none",
            "epsilon": float(attack.epsilon) if attack else 0.0,
            "k": attack.k if attack else 0,
            "backward_samples": attack.backward_samples if attack else 0,
            "grad_budget": attack.grad_budget if attack else 0,
            "random_start": bool(attack.random_start) if attack else False,
            "clean_mean": clean_mean,
            "clean_std": clean_std,
            "adv_mean": adv_mean,
            "adv_std": adv_std,
            "clean_per_seed": _join(self.clean_per_seed),
            "adv_per_seed": _join(self.adv_per_seed),
            "seeds": _join(self.seeds),
        }


@dataclass
class EvalReport:
    rows: List[ReportRow] = field(default_factory=list)
    wall_time: float = 0.0

    def __len__(self) -> int:
        return len(self.rows)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.as_record() for row in self.rows], columns=EVAL_COLUMNS)

    def write_csv(self, path: Union[str, Path]):
        write_frame_csv(self.to_frame(), path)


def write_frame_csv(frame: pd.DataFrame, path: Union[str, Path]):
    """CSV with a header row, '.' decimals and LF line endings, written atomically."""
    text = frame.to_csv(index=False, lineterminator="\n")
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(document: Dict[str, Any], path: Union[str, Path]):
    text = json.dumps(document, indent=2, sort_keys=True, default=str) + "\n"
    atomic_write_bytes(path, text.encode("utf-8"))


def run_summary(
    command: str,
    config_text: str,
    report: Optional[EvalReport] = None,
    checkpoint_hash: Optional[str] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """One JSON object per run: config echo, checkpoint content hash and headline results."""
    document: Dict[str, Any] = {"command": command, "config": config_text}
    if checkpoint_hash:
        document["checkpoint_sha256"] = checkpoint_hash
    if report is not None:
        document["wall_time_seconds"] = round(report.wall_time, 3)
        document["rows"] = [
            {
                "scheme": row.scheme,
                "samples": row.samples,
                "sigma": row.sigma,
                "attack": row.as_record()["attack"],
                "clean": format_mean_std(*row.clean),
                "adversarial": format_mean_std(*row.adversarial),
            }
            for row in report.rows
        ]
    if extra:
        document.update(extra)
    return document
