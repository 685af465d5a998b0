"""JSON reports: construction, schema validation and content digests."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema

from .model_io import weight_payload_bytes
from .tdnn import TdnnModel

SCHEMA_VERSION = 1
# keys whose values legitimately differ between identical runs
VOLATILE_KEYS = ("timing",)


@lru_cache(maxsize=None)
def report_schema() -> dict:
    text = resources.files("tdnnq").joinpath(f"schemas/report-v{SCHEMA_VERSION}.json").read_text()
    return json.loads(text)


def validate_report(report: dict) -> None:
    """Raise ``jsonschema.ValidationError`` when ``report`` does not match the shipped schema."""
    jsonschema.validate(report, report_schema())


def float_weight_bytes(model: TdnnModel) -> int:
    """Bytes the model's weight tensors occupy stored as float32."""
    return 4 * sum(w.size for layer in model.all_layers for w in layer.weight_tensors().values())


@dataclass
class MetricsReport:
    command: str
    model_name: str
    quant_config: dict | None
    params: int
    size_bytes: int
    weight_bytes: int
    baseline_weight_bytes: int | None
    size_ratio: float | None
    eval_accuracy: float | None = None
    layers: list | None = None
    details: dict | None = None
    timing: dict | None = None

    @classmethod
    def for_model(cls, command: str, model: TdnnModel, path, quant_config: dict | None = None, **kw) -> "MetricsReport":
        """Sizes come from the serialized file at ``path``; the ratio is against float32 weights."""
        wbytes = weight_payload_bytes(path)
        base = float_weight_bytes(model)
        return cls(
            command=command,
            model_name=model.name,
            quant_config=quant_config,
            params=model.param_count,
            size_bytes=Path(path).stat().st_size,
            weight_bytes=wbytes,
            baseline_weight_bytes=base,
            size_ratio=wbytes / base,
            **kw,
        )

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "kind": "metrics", **asdict(self)}


def comparison_report(baseline: str, rows: list[dict]) -> dict:
    return {"schema_version": SCHEMA_VERSION, "kind": "comparison", "baseline": baseline, "rows": rows}


def dumps(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def write_report(report: dict, path) -> None:
    validate_report(report)
    Path(path).write_text(dumps(report))


def stable_content(report: dict) -> dict:
    return {k: v for k, v in report.items() if k not in VOLATILE_KEYS}


def report_digest(report: dict) -> str:
    """SHA-256 of the canonical JSON with timing fields removed."""
    blob = json.dumps(stable_content(report), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
