"""Post-training quantization: weight-only, and weights plus calibrated activations."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .quant_core import QuantParams, RangeStats, compute_qparams, fake_quantize
from .tdnn import TdnnModel, linear_map, build_plans, forward_float, forward_quantized

DEFAULT_CALIB_UTTS = 100

SCHEMES = ("weights-only", "full-custom", "full-requant")


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationStats:
    """Observed min/max of every layer's spliced input, and of its pre-bias matmul output."""

    per_layer: tuple[RangeStats, ...]
    per_layer_output: tuple[RangeStats, ...]
    frames_seen: int

    def to_dict(self) -> dict:
        return {
            "frames_seen": self.frames_seen,
            "inputs": [[s.min, s.max] for s in self.per_layer],
            "outputs": [[s.min, s.max] for s in self.per_layer_output],
        }

    @classmethod
    def from_ranges(cls, inputs, outputs=None, frames_seen: int = 1) -> "CalibrationStats":
        ins = tuple(RangeStats(float(a), float(b)) for a, b in inputs)
        outs = tuple(RangeStats(float(a), float(b)) for a, b in outputs) if outputs is not None else ()
        return cls(ins, outs, frames_seen)


@dataclass(frozen=True)
class QuantConfig:
    weight_bits: int = 8
    act_bits: int | None = 8  # None means weight-only
    act_mode: str = "symmetric"
    requant_output: bool = False
    weight_mode: str = field(default="symmetric", init=False)

    def __post_init__(self):
        if self.weight_bits not in (8, 16):
            raise ValueError(f"weight_bits must be 8 or 16, got {self.weight_bits}")
        if self.act_bits is not None and self.act_bits not in (8, 16):
            raise ValueError(f"act_bits must be 8, 16 or None, got {self.act_bits}")
        if self.requant_output and self.act_bits is None:
            raise ValueError("output requantization needs quantized activations")

    @property
    def weight_only(self) -> bool:
        return self.act_bits is None

    @classmethod
    def for_scheme(cls, scheme: str, bits: int) -> "QuantConfig":
        """``full-custom``: signed activations, float output. ``full-requant``: unsigned-range
        activations and a requantized integer output, as a framework's built-in linear does."""
        if scheme == "weights-only":
            return cls(bits, None)
        if scheme == "full-custom":
            return cls(bits, bits, "symmetric", False)
        if scheme == "full-requant":
            return cls(bits, bits, "asymmetric", True)
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")

    @property
    def scheme(self) -> str:
        if self.weight_only:
            return "weights-only"
        return "full-requant" if self.requant_output else "full-custom"

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "weight_bits": self.weight_bits,
            "act_bits": self.act_bits,
            "weight_mode": self.weight_mode,
            "act_mode": None if self.weight_only else self.act_mode,
            "requant_output": self.requant_output,
        }


def _utterances(features) -> Iterable[np.ndarray]:
    if isinstance(features, np.ndarray):
        if features.ndim == 2:
            yield features
            return
        if features.ndim == 3:
            yield from features
            return
        raise CalibrationError(f"calibration features must be (T, D) or (B, T, D), got {features.shape}")
    yield from features


def calibrate(model: TdnnModel, calibration_features) -> CalibrationStats:
    """Run the float model over every utterance, recording per-layer activation ranges."""
    n_layers = len(model.all_layers)
    lo_in = np.full(n_layers, np.inf)
    hi_in = np.full(n_layers, -np.inf)
    lo_out = np.full(n_layers, np.inf)
    hi_out = np.full(n_layers, -np.inf)
    frames = 0

    def hook(i, xs):
        lo_in[i] = min(lo_in[i], xs.min())
        hi_in[i] = max(hi_in[i], xs.max())
        y = linear_map(model.all_layers[i], xs)
        lo_out[i] = min(lo_out[i], y.min())
        hi_out[i] = max(hi_out[i], y.max())

    for utt in _utterances(calibration_features):
        utt = np.asarray(utt)
        if utt.ndim != 2 or utt.shape[0] == 0:
            raise CalibrationError(f"each calibration utterance must be a non-empty (T, D) matrix, got {utt.shape}")
        forward_float(model, utt, hook=hook)
        frames += utt.shape[0]
    if frames == 0:
        raise CalibrationError("calibration set is empty")
    return CalibrationStats(
        tuple(RangeStats(float(a), float(b)) for a, b in zip(lo_in, hi_in)),
        tuple(RangeStats(float(a), float(b)) for a, b in zip(lo_out, hi_out)),
        frames,
    )


def _snap(arr: np.ndarray, existing: QuantParams | None, bits: int) -> tuple[np.ndarray, QuantParams]:
    if existing is not None and existing.bits == bits and existing.mode == "symmetric":
        if np.array_equal(fake_quantize(arr, existing), arr):
            return arr, existing
    params = compute_qparams(RangeStats.of(arr), bits, "symmetric")
    return fake_quantize(arr.astype(np.float32), params), params


def quantize_weights_only(model: TdnnModel, bits: int = 8) -> TdnnModel:
    """Snap every weight tensor to a per-tensor symmetric grid; inference stays float.

    Biases and batch-norm vectors are untouched. The returned model still runs
    through :func:`forward_float`, and serializes its weights as integer codes.
    """
    if bits not in (8, 16):
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    new_layers = []
    for layer in model.all_layers:
        snapped, wq = {}, {}
        for key, arr in layer.weight_tensors().items():
            snapped[key], wq[key] = _snap(arr, layer.weight_qparams.get(key), bits)
        if layer.factors is not None:
            factors = replace(layer.factors, factor_a=snapped["factor_a"], factor_b=snapped["factor_b"])
            new = replace(layer, factors=factors, weight_qparams=wq, act_qparams=None, out_qparams=None)
        else:
            new = replace(layer, weights=snapped["weights"], weight_qparams=wq, act_qparams=None, out_qparams=None)
        new_layers.append(new)
    md = dict(model.metadata, quant_scheme="weights-only", weight_bits=str(bits))
    return replace(model.with_layers(new_layers), metadata=md)


def quantize_full(
    model: TdnnModel,
    stats: CalibrationStats,
    bits: int = 8,
    act_mode: str = "symmetric",
    requant_output: bool = False,
) -> TdnnModel:
    """Weights and layer-input activations quantized to the same ``bits``.

    The result carries per-layer activation parameters and executes through
    :func:`forward_quantized`.
    """
    n = len(model.all_layers)
    if len(stats.per_layer) != n:
        raise CalibrationError(f"stats cover {len(stats.per_layer)} layers, model has {n}")
    if requant_output and len(stats.per_layer_output) != n:
        raise CalibrationError("output requantization needs per-layer output ranges")
    for i, layer in enumerate(model.all_layers):
        if layer.factors is not None:
            raise ValueError(f"layer {i} is factorized; full quantization needs dense weights")
    wmodel = quantize_weights_only(model, bits)
    new_layers = []
    for i, layer in enumerate(wmodel.all_layers):
        act = compute_qparams(stats.per_layer[i], bits, act_mode)
        out = compute_qparams(stats.per_layer_output[i], bits, act_mode) if requant_output else None
        new_layers.append(replace(layer, act_qparams=act, out_qparams=out))
    cfg = QuantConfig(bits, bits, act_mode, requant_output)
    md = dict(model.metadata, quant_scheme=cfg.scheme, weight_bits=str(bits), act_bits=str(bits), act_mode=act_mode)
    return replace(wmodel.with_layers(new_layers), metadata=md)


def apply_config(model: TdnnModel, config: QuantConfig, stats: CalibrationStats | None = None) -> TdnnModel:
    if config.weight_only:
        return quantize_weights_only(model, config.weight_bits)
    if stats is None:
        raise CalibrationError(f"scheme {config.scheme} needs calibration statistics")
    if config.act_bits != config.weight_bits:
        raise ValueError("weights and activations share one integer type")
    return quantize_full(model, stats, config.weight_bits, config.act_mode, config.requant_output)


def is_integer_model(model: TdnnModel) -> bool:
    return all(layer.act_qparams is not None for layer in model.all_layers)


def run_model(model: TdnnModel, features, plans=None) -> np.ndarray:
    """Dispatch to the integer path when activations are quantized, else the float path."""
    if is_integer_model(model):
        return forward_quantized(model, features, plans)
    return forward_float(model, features)


def _saturated(xs: np.ndarray, p: QuantParams) -> int:
    q = np.rint(xs / p.scale) + p.zero_point
    return int(np.count_nonzero((q < p.qmin) | (q > p.qmax)))


def saturation_counts(model: TdnnModel, features: Sequence, path: str = "quantized") -> list[dict]:
    """Per-layer count of activation values that clip, along the float or integer path."""
    if not is_integer_model(model):
        raise CalibrationError("saturation counts need activation quantization parameters")
    counts = [{"saturated": 0, "total": 0} for _ in model.all_layers]
    params = [layer.act_qparams for layer in model.all_layers]

    def hook(i, xs):
        counts[i]["saturated"] += _saturated(xs, params[i])
        counts[i]["total"] += xs.size

    plans = build_plans(model) if path == "quantized" else None
    for utt in _utterances(features):
        if path == "quantized":
            forward_quantized(model, utt, plans, hook=hook)
        elif path == "float":
            forward_float(model, utt, hook=hook)
        else:
            raise ValueError(f"path must be 'quantized' or 'float', got {path!r}")
    return counts


def quantization_report(model: TdnnModel, stats: CalibrationStats | None = None, features=None) -> list[dict]:
    """Per-layer scales, zero-points, observed ranges and saturation counts."""
    sat = saturation_counts(model, features) if features is not None and is_integer_model(model) else None
    rows = []
    for i, layer in enumerate(model.all_layers):
        row = {
            "layer": i,
            "kind": "head" if i == len(model.layers) else "hidden",
            "weights": {k: p.to_dict() for k, p in sorted(layer.weight_qparams.items())},
            "activation": layer.act_qparams.to_dict() if layer.act_qparams else None,
            "output": layer.out_qparams.to_dict() if layer.out_qparams else None,
            "observed_range": None,
            "saturation": None,
        }
        if stats is not None:
            s = stats.per_layer[i]
            row["observed_range"] = [s.min, s.max]
        if sat is not None:
            row["saturation"] = sat[i]
        rows.append(row)
    return rows
