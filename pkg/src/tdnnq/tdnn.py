"""TDNN model representation and forward passes.

A layer splices its input over ``context`` offsets, applies a linear map and
bias, then (hidden layers only) ReLU followed by an inference-time batch-norm
affine ``y * bn_scale + bn_shift``. The output head is a layer without the
ReLU/batch-norm stage; its outputs go through log-softmax.

Features are ``(T, D)`` for one utterance or ``(B, T, D)`` for a batch of
equal-length utterances. Arithmetic is float64 throughout; parameters are
stored as float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import log_softmax

from .int_kernels import IntConvPlan, build_plan, conv1d_int, int_matmul_requant
from .quant_core import QuantParams, dequantize, quantize

REFERENCE_LAYERS = 7
REFERENCE_HIDDEN = 625
HEAD_SIZES = {"monophone": 41, "biphone": 5984}
HEAD_KINDS = ("monophone", "biphone", "toy")


class MissingCalibrationError(ValueError):
    """A quantized forward pass was requested for a layer without activation parameters."""


@dataclass(frozen=True, eq=False)
class FactorizedLayer:
    """Low-rank linear map ``factor_a @ factor_b`` replacing a dense weight matrix."""

    factor_a: np.ndarray  # out x r
    factor_b: np.ndarray  # r x in_cols

    def __post_init__(self):
        if self.factor_a.ndim != 2 or self.factor_b.ndim != 2:
            raise ValueError("factors must be matrices")
        if self.factor_a.shape[1] != self.factor_b.shape[0]:
            raise ValueError(f"inner dims differ: {self.factor_a.shape} @ {self.factor_b.shape}")

    @property
    def rank_r(self) -> int:
        return self.factor_a.shape[1]

    @property
    def param_count(self) -> int:
        return self.factor_a.size + self.factor_b.size

    def dense(self) -> np.ndarray:
        return self.factor_a.astype(np.float64) @ self.factor_b.astype(np.float64)


@dataclass(frozen=True, eq=False)
class TdnnLayer:
    weights: np.ndarray | None
    bias: np.ndarray
    context: tuple[int, ...] = (0,)
    bn_scale: np.ndarray | None = None
    bn_shift: np.ndarray | None = None
    factors: FactorizedLayer | None = None
    # grid each weight tensor is snapped to, keyed "weights" / "factor_a" / "factor_b"
    weight_qparams: dict = field(default_factory=dict)
    act_qparams: QuantParams | None = None
    out_qparams: QuantParams | None = None

    def __post_init__(self):
        ctx = tuple(int(c) for c in self.context)
        object.__setattr__(self, "context", ctx)
        if not ctx or any(b <= a for a, b in zip(ctx, ctx[1:])):
            raise ValueError(f"context offsets must be non-empty and strictly increasing, got {ctx}")
        if (self.weights is None) == (self.factors is None):
            raise ValueError("a layer holds exactly one of dense weights or factors")
        out_dim, cols = self.linear_shape
        if cols % len(ctx):
            raise ValueError(f"{cols} weight columns do not split over {len(ctx)} context offsets")
        if self.bias.shape != (out_dim,):
            raise ValueError(f"bias shape {self.bias.shape} != ({out_dim},)")
        if (self.bn_scale is None) != (self.bn_shift is None):
            raise ValueError("batch-norm scale and shift come together")
        if self.bn_scale is not None:
            if self.bn_scale.shape != (out_dim,) or self.bn_shift.shape != (out_dim,):
                raise ValueError("batch-norm vectors must have one entry per output")
            if not np.all(self.bn_scale > 0):
                raise ValueError("batch-norm scale must be strictly positive")

    @property
    def kind(self) -> str:
        return "dense" if self.factors is None else "factorized"

    @property
    def linear_shape(self) -> tuple[int, int]:
        if self.factors is not None:
            return self.factors.factor_a.shape[0], self.factors.factor_b.shape[1]
        return self.weights.shape

    @property
    def out_dim(self) -> int:
        return self.linear_shape[0]

    @property
    def in_dim(self) -> int:
        return self.linear_shape[1] // len(self.context)

    @property
    def has_bn(self) -> bool:
        return self.bn_scale is not None

    def weight_tensors(self) -> dict[str, np.ndarray]:
        if self.factors is not None:
            return {"factor_a": self.factors.factor_a, "factor_b": self.factors.factor_b}
        return {"weights": self.weights}

    def effective_weights(self) -> np.ndarray:
        if self.factors is not None:
            return self.factors.dense()
        return self.weights.astype(np.float64)

    @property
    def param_count(self) -> int:
        n = sum(w.size for w in self.weight_tensors().values()) + self.bias.size
        if self.has_bn:
            n += self.bn_scale.size + self.bn_shift.size
        return n


@dataclass(frozen=True, eq=False)
class TdnnModel:
    layers: tuple[TdnnLayer, ...]
    head: TdnnLayer
    head_kind: str = "toy"
    name: str = "tdnn"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"head_kind must be one of {HEAD_KINDS}")
        if self.head.has_bn:
            raise ValueError("the output head has no ReLU/batch-norm stage")
        for i, layer in enumerate(self.layers):
            if not layer.has_bn:
                raise ValueError(f"hidden layer {i} lacks its batch-norm affine")
        prev = None
        for i, layer in enumerate(self.all_layers):
            if prev is not None and layer.in_dim != prev:
                raise ValueError(f"layer {i} expects input dim {layer.in_dim}, previous layer gives {prev}")
            prev = layer.out_dim
        if self.head_kind != "toy":
            hidden = {layer.out_dim for layer in self.layers}
            if len(self.layers) != REFERENCE_LAYERS or hidden != {REFERENCE_HIDDEN}:
                raise ValueError(f"{self.head_kind} geometry is {REFERENCE_LAYERS} layers x {REFERENCE_HIDDEN}")
            if self.head.out_dim != HEAD_SIZES[self.head_kind]:
                raise ValueError(f"{self.head_kind} head has {HEAD_SIZES[self.head_kind]} outputs")

    @property
    def all_layers(self) -> tuple[TdnnLayer, ...]:
        return self.layers + (self.head,)

    @property
    def output_weights(self):
        return self.head.weights

    @property
    def output_bias(self):
        return self.head.bias

    @property
    def feat_dim(self) -> int:
        return self.all_layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.head.out_dim

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.all_layers)

    def with_layers(self, all_layers: Sequence[TdnnLayer]) -> "TdnnModel":
        all_layers = tuple(all_layers)
        return replace(self, layers=all_layers[:-1], head=all_layers[-1])


def random_model(
    rng: np.random.Generator,
    feat_dim: int,
    hidden_dim: int = 64,
    num_layers: int = 7,
    num_classes: int = 41,
    context: Sequence[int] = (-1, 0, 1),
    head_kind: str = "toy",
    name: str = "tdnn",
) -> TdnnModel:
    """He-initialised model with identity batch-norm affines."""
    layers = []
    in_dim = feat_dim
    for _ in range(num_layers):
        cols = in_dim * len(context)
        w = rng.normal(0.0, np.sqrt(2.0 / cols), (hidden_dim, cols)).astype(np.float32)
        layers.append(
            TdnnLayer(
                w,
                np.zeros(hidden_dim, np.float32),
                tuple(context),
                np.ones(hidden_dim, np.float32),
                np.zeros(hidden_dim, np.float32),
            )
        )
        in_dim = hidden_dim
    wh = rng.normal(0.0, np.sqrt(1.0 / in_dim), (num_classes, in_dim)).astype(np.float32)
    head = TdnnLayer(wh, np.zeros(num_classes, np.float32), (0,))
    return TdnnModel(tuple(layers), head, head_kind, name)


def models_equal(a: TdnnModel, b: TdnnModel) -> bool:
    """Bit-exact comparison of two models, quantization records included."""

    def same(x, y):
        if x is None or y is None:
            return x is None and y is None
        return x.dtype == y.dtype and x.shape == y.shape and x.tobytes() == y.tobytes()

    if (a.name, a.head_kind, a.metadata) != (b.name, b.head_kind, b.metadata):
        return False
    if len(a.all_layers) != len(b.all_layers):
        return False
    for la, lb in zip(a.all_layers, b.all_layers):
        if la.kind != lb.kind or la.context != lb.context:
            return False
        ta, tb = la.weight_tensors(), lb.weight_tensors()
        if ta.keys() != tb.keys() or not all(same(ta[k], tb[k]) for k in ta):
            return False
        if not (same(la.bias, lb.bias) and same(la.bn_scale, lb.bn_scale) and same(la.bn_shift, lb.bn_shift)):
            return False
        if la.weight_qparams != lb.weight_qparams:
            return False
        if la.act_qparams != lb.act_qparams or la.out_qparams != lb.out_qparams:
            return False
    return True


def splice(frames, offsets: Sequence[int]) -> np.ndarray:
    """Concatenate ``frames[clamp(t + o)]`` over ``offsets`` for every frame ``t``."""
    frames = np.asarray(frames)
    if frames.ndim < 2 or frames.shape[-2] == 0:
        raise ValueError(f"need at least one frame of shape (T, D), got {frames.shape}")
    t, d = frames.shape[-2:]
    idx = np.clip(np.arange(t)[:, None] + np.asarray(offsets)[None, :], 0, t - 1)
    out = frames[..., idx, :]
    return out.reshape(*frames.shape[:-2], t, len(offsets) * d)


def splice_backward(grad, offsets: Sequence[int], in_dim: int) -> np.ndarray:
    """Adjoint of :func:`splice`: scatter-add spliced gradients back onto frames."""
    t = grad.shape[-2]
    c = len(offsets)
    g = grad.reshape(*grad.shape[:-2], t, c, in_dim)
    idx = np.clip(np.arange(t)[:, None] + np.asarray(offsets)[None, :], 0, t - 1)
    out = np.zeros((*grad.shape[:-2], t, in_dim), dtype=grad.dtype)
    for j in range(c):
        np.add.at(out, (Ellipsis, idx[:, j], slice(None)), g[..., :, j, :])
    return out


def _as_features(features, model: TdnnModel) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim not in (2, 3):
        raise ValueError(f"features must be (T, D) or (B, T, D), got {x.shape}")
    if x.shape[-1] != model.feat_dim:
        raise ValueError(f"feature dim {x.shape[-1]} != model input dim {model.feat_dim}")
    return x


def linear_map(layer: TdnnLayer, xs: np.ndarray, weight_fn=None) -> np.ndarray:
    tensors = layer.weight_tensors()
    if weight_fn is not None:
        tensors = {k: weight_fn(k, w) for k, w in tensors.items()}
    if layer.factors is not None:
        h = xs @ np.asarray(tensors["factor_b"], np.float64).T
        return h @ np.asarray(tensors["factor_a"], np.float64).T
    return xs @ np.asarray(tensors["weights"], np.float64).T


def _post(layer: TdnnLayer, y: np.ndarray) -> np.ndarray:
    y = y + layer.bias.astype(np.float64)
    if layer.has_bn:
        y = np.maximum(y, 0.0) * layer.bn_scale.astype(np.float64) + layer.bn_shift.astype(np.float64)
    return y


Hook = Callable[[int, np.ndarray], None]


def run_float(
    model: TdnnModel,
    features,
    *,
    act_fn: Callable[[int, np.ndarray], np.ndarray] | None = None,
    weight_fn: Callable[[int, str, np.ndarray], np.ndarray] | None = None,
    out_fn: Callable[[int, np.ndarray], np.ndarray] | None = None,
    hook: Hook | None = None,
) -> np.ndarray:
    """Float forward with optional per-layer transforms of spliced inputs, weights
    and pre-bias matmul outputs.

    ``hook(i, spliced)`` sees each layer's spliced input before ``act_fn`` runs.
    """
    x = _as_features(features, model)
    for i, layer in enumerate(model.all_layers):
        xs = splice(x, layer.context)
        if hook is not None:
            hook(i, xs)
        if act_fn is not None:
            xs = act_fn(i, xs)
        wf = None if weight_fn is None else (lambda k, w, i=i: weight_fn(i, k, w))
        y = linear_map(layer, xs, wf)
        if out_fn is not None:
            y = out_fn(i, y)
        x = _post(layer, y)
    return log_softmax(x, axis=-1)


def forward_float(model: TdnnModel, features, hook: Hook | None = None) -> np.ndarray:
    return run_float(model, features, hook=hook)


def build_plans(model: TdnnModel) -> list[IntConvPlan]:
    """One integer-matmul plan per layer (head last), from the model's stored parameters."""
    plans = []
    for i, layer in enumerate(model.all_layers):
        if layer.factors is not None:
            raise ValueError(f"layer {i} is factorized; integer inference needs dense weights")
        if layer.act_qparams is None:
            raise MissingCalibrationError(f"layer {i} has no activation quantization parameters")
        wq = layer.weight_qparams.get("weights")
        if wq is None:
            raise MissingCalibrationError(f"layer {i} has no weight quantization parameters")
        plans.append(build_plan(layer.weights, wq, layer.act_qparams, layer.out_qparams))
    return plans


def forward_quantized(
    model: TdnnModel,
    features,
    qconfig: Sequence[IntConvPlan] | None = None,
    hook: Hook | None = None,
) -> np.ndarray:
    """Integer-arithmetic forward: quantized spliced inputs times quantized weights.

    Bias, ReLU, batch-norm and log-softmax stay in floating point. ``qconfig`` is
    the per-layer plan list from :func:`build_plans`; it is built on the fly when
    omitted, so pass it in when running many utterances.
    """
    plans = list(qconfig) if qconfig is not None else build_plans(model)
    if len(plans) != len(model.all_layers) or any(p is None for p in plans):
        raise MissingCalibrationError("every layer, head included, needs a plan")
    x = _as_features(features, model)
    for i, (layer, plan) in enumerate(zip(model.all_layers, plans)):
        xs = splice(x, layer.context)
        if hook is not None:
            hook(i, xs)
        q = quantize(xs, plan.act_params)
        if plan.out_params is not None:
            y = dequantize(int_matmul_requant(plan, q))
        else:
            y = conv1d_int(plan, q)
        x = _post(layer, y)
    return log_softmax(x, axis=-1)
