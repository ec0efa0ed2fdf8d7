"""Static quality-score provider: (model, method, task) -> score 0-100.

Stands in for live benchmark-suite execution; the shipped table encodes the
known anchor cells plus trend-synthesized values (see the provenance tags).
"""

from __future__ import annotations

import importlib.resources

import yaml

TASKS = ("chat-S", "chat-R", "chat-M", "code", "summarization")


class QualityError(KeyError):
    pass


class QualityTable:
    def __init__(self, raw: dict):
        self.entries: dict[tuple[str, str, str], float] = {}
        self.provenance: dict[tuple[str, str, str], str] = {}
        for model, methods in raw["entries"].items():
            for method, tasks in methods.items():
                for task, cell in tasks.items():
                    score = float(cell["score"])
                    if not 0.0 <= score <= 100.0:
                        raise ValueError(f"score out of range for ({model}, {method}, {task})")
                    self.entries[(model, method, task)] = score
                    self.provenance[(model, method, task)] = cell.get("provenance", "unknown")
        for (model, _, task) in list(self.entries):
            if (model, "FP16", task) not in self.entries:
                raise ValueError(f"missing FP16 baseline for ({model}, {task})")

    def models(self) -> list[str]:
        return sorted({m for m, _, _ in self.entries})

    def methods(self, model: str) -> list[str]:
        return sorted({meth for m, meth, _ in self.entries if m == model})

    def quality(self, model: str, method: str, task: str) -> float:
        key = (model, method, task)
        if key not in self.entries:
            available = sorted({(m, me) for m, me, t in self.entries if t == task})
            raise QualityError(
                f"no quality entry for {key}; available (model, method) pairs for "
                f"task {task!r}: {available}"
            )
        return self.entries[key]

    def pct_change_vs_fp16(self, model: str, method: str, task: str) -> float:
        score = self.quality(model, method, task)
        base = self.quality(model, "FP16", task)
        if base == 0:
            raise ZeroDivisionError(f"FP16 score for ({model}, {task}) is 0")
        return 100.0 * (score - base) / base


_cached: QualityTable | None = None


def load_quality(path: str | None = None) -> QualityTable:
    global _cached
    if path is None:
        if _cached is None:
            text = importlib.resources.files("quantsweep.data").joinpath("quality.yaml").read_text()
            _cached = QualityTable(yaml.safe_load(text))
        return _cached
    with open(path) as fh:
        return QualityTable(yaml.safe_load(fh))
