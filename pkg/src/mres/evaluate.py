"""Benchmark evaluation producing per-setting mIoU/oIoU reports."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataset import BenchmarkSplit, EvalSetting, Granularity, ReferringSample, Vocabulary, tokenize
from .errors import EmptyEvaluation
from .masks import DEFAULT_THRESHOLD, IoUStats, binarize, iou_stats, miou, oiou

# predictor(sample, image) -> probability map of shape (image_h, image_w)
Predictor = Callable[[ReferringSample, np.ndarray], np.ndarray]

SETTING_ORDER = (EvalSetting.OBJECT_ONLY, EvalSetting.PART_ONLY, EvalSetting.OBJECT_AND_PART)

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["dataset", "split", "checkpoint", "threshold", "settings", "wall_time_s"],
    "properties": {
        "dataset": {"type": "string"},
        "split": {"type": "string"},
        "checkpoint": {"type": "string"},
        "threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "wall_time_s": {"type": "number", "minimum": 0},
        "settings": {
            "type": "object",
            "propertyNames": {"enum": [s.value for s in SETTING_ORDER]},
            "additionalProperties": {
                "type": "object",
                "required": ["count", "miou"],
                "properties": {
                    "count": {"type": "integer", "minimum": 0},
                    "miou": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                    "oiou": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                },
                "additionalProperties": False,
            },
        },
    },
    "additionalProperties": False,
}


@dataclass
class EvalReport:
    dataset: str
    split: str
    checkpoint: str
    threshold: float
    settings: dict[str, dict] = field(default_factory=dict)
    wall_time_s: float = 0.0

    def to_json(self) -> dict:
        return {
            "dataset": self.dataset,
            "split": self.split,
            "checkpoint": self.checkpoint,
            "threshold": self.threshold,
            "settings": self.settings,
            "wall_time_s": self.wall_time_s,
        }

    def render_table(self) -> str:
        lines = [f"{self.dataset} / {self.split}  (checkpoint {self.checkpoint}, threshold {self.threshold})",
                 f"{'setting':<18}{'count':>8}{'mIoU':>10}{'oIoU':>10}"]
        for name, m in self.settings.items():
            def cell(v):
                return f"{v:>10.4f}" if v is not None else f"{'-':>10}"
            lines.append(f"{name:<18}{m['count']:>8d}{cell(m.get('miou'))}{cell(m.get('oiou'))}")
        return "\n".join(lines) + "\n"


def validate_report(obj: dict) -> None:
    import jsonschema

    jsonschema.validate(obj, REPORT_SCHEMA)


def sample_stats(split: BenchmarkSplit, predictor: Predictor, threshold: float) -> dict[str, IoUStats]:
    out = {}
    for s in split:
        image = split.load_image(s)
        prob = predictor(s, image)
        out[s.sample_id] = iou_stats(binarize(prob, threshold), s.decode_mask())
    return out


def evaluate(split: BenchmarkSplit, predictor: Predictor, settings: Sequence[EvalSetting | str] = SETTING_ORDER,
             *, threshold: float = DEFAULT_THRESHOLD, dataset: str = "", checkpoint: str = "") -> EvalReport:
    """Predict every sample once and aggregate per granularity setting.

    A setting with no samples raises :class:`EmptyEvaluation` when it is the
    only one requested; otherwise it is reported with null metrics.
    """
    settings = [EvalSetting(s) for s in settings]
    t0 = time.perf_counter()
    per_sample = sample_stats(split, predictor, threshold)
    report = EvalReport(dataset, split.name, checkpoint, threshold)
    for setting in SETTING_ORDER:
        if setting not in settings:
            continue
        stats = [per_sample[s.sample_id] for s in split if _in_setting(s, setting)]
        if not stats:
            if len(settings) == 1:
                raise EmptyEvaluation(f"no samples for setting {setting.value} in split {split.name}")
            report.settings[setting.value] = {"count": 0, "miou": None}
            continue
        entry = {"count": len(stats), "miou": miou(stats)}
        if setting is EvalSetting.OBJECT_ONLY:
            entry["oiou"] = oiou(stats)
        report.settings[setting.value] = entry
    report.wall_time_s = time.perf_counter() - t0
    return report


def _in_setting(sample: ReferringSample, setting: EvalSetting) -> bool:
    if setting is EvalSetting.OBJECT_AND_PART:
        return True
    want = Granularity.OBJECT if setting is EvalSetting.OBJECT_ONLY else Granularity.PART
    return sample.granularity is want


def oracle_predictor(sample: ReferringSample, image: np.ndarray) -> np.ndarray:
    """Returns the ground truth as a confidence map (1.0 inside, 0.0 outside)."""
    return sample.decode_mask().astype(np.float64)


def model_predictor(model, vocab: Vocabulary) -> Predictor:
    from .model import predict

    max_len = model.cfg.max_text_len

    def run(sample: ReferringSample, image: np.ndarray) -> np.ndarray:
        prob, _ = predict(model, image, tokenize(sample.expression, vocab, max_len))
        return prob

    return run
