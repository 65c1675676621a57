"""
Sample Tracer

Records every sample a sampled verification evaluates (point, flags,
numerator, denominator, ratio or penalized value) together with the
samples it dropped, so reported suprema and minima come with the
witness that attained them and can be exported to CSV.
"""

import logging
from datetime import datetime
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


class SampleTracer:
    """Per-sample log of one verification run"""

    def __init__(self, m: int):
        self.m = m
        self.current_trace: Optional[Dict] = None
        self.reset()

    def reset(self, operation: str = ""):
        """Start a new trace"""
        self.current_trace = {
            "timestamp": datetime.now().isoformat(),
            "operation": operation,
            "samples": [],
            "dropped": [],
        }

    def track_sample(self, x: float, y: Sequence[float], level: int, origin: str, **values):
        """
        Log one evaluated sample

        Args:
            x, y: Sample point
            level: Coarsest refinement level containing the sample
            origin: "center", "branch" or "ray"
            values: Quantities computed at the sample (numerator,
                denominator, ratio, penalized, ...)
        """
        if not self.current_trace:
            self.reset()
        row = {"x": float(x)}
        row.update({f"y{k + 1}": float(v) for k, v in enumerate(y)})
        row["level"] = int(level)
        row["origin"] = origin
        row.update({k: (float(v) if isinstance(v, (int, float, np.floating)) and not isinstance(v, bool) else v)
                    for k, v in values.items()})
        self.current_trace["samples"].append(row)

    def track_drop(self, x: float, y: Sequence[float], reason: str):
        """Log a sample excluded from the statistics"""
        if not self.current_trace:
            self.reset()
        self.current_trace["dropped"].append({
            "x": float(x),
            "y": [float(v) for v in y],
            "reason": reason,
        })
        logger.debug(f"Dropped sample at x={x:.6g}: {reason}")

    @property
    def samples(self) -> List[Dict]:
        return self.current_trace["samples"] if self.current_trace else []

    @property
    def dropped(self) -> List[Dict]:
        return self.current_trace["dropped"] if self.current_trace else []

    def worst(self, key: str, largest: bool = True) -> Optional[Dict]:
        """Logged sample with the largest (or smallest) finite value of key"""
        rows = [r for r in self.samples if r.get(key) is not None and not np.isnan(r[key])]
        if not rows:
            return None
        pick = max if largest else min
        return pick(rows, key=lambda r: r[key])

    def to_frame(self) -> pd.DataFrame:
        columns = ["x"] + [f"y{k + 1}" for k in range(self.m)] + ["level", "origin"]
        frame = pd.DataFrame(self.samples)
        if frame.empty:
            return pd.DataFrame(columns=columns)
        extra = [c for c in frame.columns if c not in columns]
        return frame[columns + extra]

    def get_trace_report(self) -> Dict:
        if not self.current_trace:
            return {}
        return {
            "timestamp": self.current_trace["timestamp"],
            "operation": self.current_trace["operation"],
            "samples": len(self.samples),
            "dropped": len(self.dropped),
            "drop_reasons": sorted({d["reason"] for d in self.dropped}),
            "summary": self._generate_summary(),
        }

    def _generate_summary(self) -> str:
        parts = []
        if self.samples:
            parts.append(f"Evaluated {len(self.samples)} sample(s)")
            origins = pd.Series([r["origin"] for r in self.samples]).value_counts()
            parts.append(", ".join(f"{name}: {count}" for name, count in origins.items()))
        if self.dropped:
            parts.append(f"Dropped {len(self.dropped)}")
        return ". ".join(parts) if parts else "No samples tracked"
