"""Quantization-aware training on a synthetic frame-classification task.

Fake quantization snaps each layer's spliced input and weight tensors onto
their integer grids in the forward pass. The backward pass uses the
straight-through estimator: gradients pass unchanged where the value was inside
the representable range and are zeroed where it saturated.

Two schedules are supported. ``full_epoch`` fake-quantizes every step of the
run. ``final_iterations`` trains in float and switches fake quantization on for
the last ``1 - activate_after_fraction`` of the final epoch.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from .quant_core import (
    QuantParams,
    RangeStats,
    clamp_surrogate,
    compute_qparams,
    fake_quantize,
    in_range_mask,
)
from .ptq import CalibrationStats
from .tdnn import TdnnLayer, TdnnModel, forward_float, random_model, run_float, splice, splice_backward

SCHEDULE_KINDS = ("full_epoch", "final_iterations")
OBSERVER_KINDS = ("ema", "minibatch")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class QatSchedule:
    kind: str = "full_epoch"
    activate_after_fraction: float = 0.9
    observer_momentum: float = 0.99
    observer: str = "ema"

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"schedule kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.activate_after_fraction < 1.0:
            raise ValueError("activate_after_fraction must lie in [0, 1)")
        if not 0.0 < self.observer_momentum <= 1.0:
            raise ValueError("observer_momentum must lie in (0, 1]")
        if self.observer not in OBSERVER_KINDS:
            raise ValueError(f"observer must be one of {OBSERVER_KINDS}")

    def first_active_step(self, steps_per_epoch: int, epochs: int = 1) -> int:
        if self.kind == "full_epoch":
            return 0
        return (epochs - 1) * steps_per_epoch + math.floor(self.activate_after_fraction * steps_per_epoch)

    def is_active(self, step: int, steps_per_epoch: int, epochs: int = 1) -> bool:
        return step >= self.first_active_step(steps_per_epoch, epochs)


@dataclass
class QatState:
    """Activation range observers, one per layer (head last), plus the step counter.

    With ``out_ranges`` present the pre-bias matmul output of every layer is also
    observed and fake-quantized, emulating a kernel that requantizes its output.
    """

    ranges: list
    bits: int = 8
    act_mode: str = "symmetric"
    out_ranges: list | None = None  # set when the matmul output is fake-quantized too
    step: int = 0
    steps_per_epoch: int = 1
    epochs: int = 1
    frozen: bool = False

    @classmethod
    def fresh(
        cls, model: TdnnModel, bits: int = 8, act_mode: str = "symmetric", quantize_output: bool = False, **kw
    ) -> "QatState":
        n = len(model.all_layers)
        return cls([None] * n, bits, act_mode, [None] * n if quantize_output else None, **kw)

    @classmethod
    def from_stats(cls, stats, bits: int = 8, act_mode: str = "symmetric", quantize_output: bool = False) -> "QatState":
        """Frozen observers pinned to calibration ranges."""
        outs = [(s.min, s.max) for s in stats.per_layer_output] if quantize_output else None
        return cls([(s.min, s.max) for s in stats.per_layer], bits, act_mode, outs, frozen=True)

    @property
    def quantize_output(self) -> bool:
        return self.out_ranges is not None

    def _params(self, ranges, i):
        if ranges[i] is None:
            raise ValueError(f"observer {i} has seen no data")
        return compute_qparams(RangeStats(*ranges[i]), self.bits, self.act_mode)

    def act_params(self, i: int) -> QuantParams:
        return self._params(self.ranges, i)

    def out_params(self, i: int) -> QuantParams:
        return self._params(self.out_ranges, i)

    def observe(self, i: int, x: np.ndarray, schedule: QatSchedule, output: bool = False) -> None:
        if self.frozen:
            return
        ranges = self.out_ranges if output else self.ranges
        lo, hi = float(x.min()), float(x.max())
        prev = ranges[i]
        if prev is None or schedule.observer == "minibatch":
            ranges[i] = (lo, hi)
            return
        mu = schedule.observer_momentum
        if mu == 1.0:
            ranges[i] = (min(prev[0], lo), max(prev[1], hi))
        else:
            ranges[i] = (mu * prev[0] + (1 - mu) * lo, mu * prev[1] + (1 - mu) * hi)

    def to_stats(self) -> CalibrationStats:
        return CalibrationStats.from_ranges(self.ranges, self.out_ranges)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ranges"] = [list(r) if r is not None else None for r in self.ranges]
        if self.out_ranges is not None:
            d["out_ranges"] = [list(r) if r is not None else None for r in self.out_ranges]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QatState":
        d = dict(d)
        d["ranges"] = [tuple(r) if r is not None else None for r in d["ranges"]]
        if d.get("out_ranges") is not None:
            d["out_ranges"] = [tuple(r) if r is not None else None for r in d["out_ranges"]]
        return cls(**d)


def weight_params(w: np.ndarray, bits: int = 8) -> QuantParams:
    return compute_qparams(RangeStats.of(w), bits, "symmetric")


def qat_forward(model: TdnnModel, batch, state: QatState, schedule: QatSchedule):
    """Forward pass with fake quantization when the schedule is active at ``state.step``.

    Returns ``(log_probs, new_state)``; the input state is not modified. When the
    schedule is inactive the output is exactly :func:`forward_float`'s.
    """
    new = copy.deepcopy(state)
    if not schedule.is_active(state.step, state.steps_per_epoch, state.epochs):
        return forward_float(model, batch), new

    def act_fn(i, xs):
        new.observe(i, xs, schedule)
        return fake_quantize(xs, new.act_params(i))

    def weight_fn(i, key, w):
        return fake_quantize(w, weight_params(w, new.bits))

    out_fn = None
    if new.quantize_output:

        def out_fn(i, y):
            new.observe(i, y, schedule, output=True)
            return fake_quantize(y, new.out_params(i))

    return run_float(model, batch, act_fn=act_fn, weight_fn=weight_fn, out_fn=out_fn), new


def ste_backward(grad, x, params: QuantParams) -> np.ndarray:
    """Straight-through gradient of ``fake_quantize(x, params)``."""
    return np.where(in_range_mask(x, params), grad, 0.0)


# -- differentiable engine ------------------------------------------------------

Params = list  # per layer: dict name -> float64 array


def params_from_model(model: TdnnModel) -> Params:
    out = []
    for layer in model.all_layers:
        p = {k: w.astype(np.float64) for k, w in layer.weight_tensors().items()}
        p["bias"] = layer.bias.astype(np.float64)
        if layer.has_bn:
            p["bn_scale"] = layer.bn_scale.astype(np.float64)
            p["bn_shift"] = layer.bn_shift.astype(np.float64)
        out.append(p)
    return out


def model_from_params(template: TdnnModel, params: Params) -> TdnnModel:
    layers = []
    for layer, p in zip(template.all_layers, params):
        f32 = {k: v.astype(np.float32) for k, v in p.items()}
        kw = dict(bias=f32["bias"], weight_qparams={}, act_qparams=None, out_qparams=None)
        if layer.factors is not None:
            kw["factors"] = replace(layer.factors, factor_a=f32["factor_a"], factor_b=f32["factor_b"])
        else:
            kw["weights"] = f32["weights"]
        if layer.has_bn:
            kw["bn_scale"] = f32["bn_scale"]
            kw["bn_shift"] = f32["bn_shift"]
        layers.append(replace(layer, **kw))
    return template.with_layers(layers)


@dataclass
class FakeQuant:
    """Quantization hooks for the training engine.

    ``surrogate=True`` replaces rounding with saturation only, giving a
    piecewise-linear loss whose exact gradient the STE backward must reproduce.
    ``weight_overrides`` pins weight parameters per ``(layer, tensor)``.
    """

    state: QatState
    schedule: QatSchedule
    surrogate: bool = False
    weight_overrides: dict = field(default_factory=dict)

    def _apply(self, x, p):
        return clamp_surrogate(x, p) if self.surrogate else fake_quantize(x, p)

    def act(self, i, xs):
        self.state.observe(i, xs, self.schedule)
        p = self.state.act_params(i)
        return self._apply(xs, p), in_range_mask(xs, p)

    def weight(self, i, key, w):
        p = self.weight_overrides.get((i, key)) or weight_params(w, self.state.bits)
        return self._apply(w, p), in_range_mask(w, p)

    def output(self, i, y):
        self.state.observe(i, y, self.schedule, output=True)
        p = self.state.out_params(i)
        return self._apply(y, p), in_range_mask(y, p)


def _forward_cached(template: TdnnModel, params: Params, x: np.ndarray, fq: FakeQuant | None):
    caches = []
    for i, (layer, p) in enumerate(zip(template.all_layers, params)):
        c = {"in_shape": x.shape}
        xs = splice(x, layer.context)
        if fq is not None:
            xs, c["mask_x"] = fq.act(i, xs)
        c["xs"] = xs
        w_eff = {}
        for key in ("weights", "factor_a", "factor_b"):
            if key in p:
                if fq is not None:
                    w_eff[key], c["mask_" + key] = fq.weight(i, key, p[key])
                else:
                    w_eff[key] = p[key]
        c["w"] = w_eff
        if "weights" in w_eff:
            a = xs @ w_eff["weights"].T
        else:
            c["h"] = xs @ w_eff["factor_b"].T
            a = c["h"] @ w_eff["factor_a"].T
        if fq is not None and fq.state.quantize_output:
            a, c["mask_out"] = fq.output(i, a)
        a = a + p["bias"]
        if "bn_scale" in p:
            c["a"] = a
            c["r"] = np.maximum(a, 0.0)
            x = c["r"] * p["bn_scale"] + p["bn_shift"]
        else:
            x = a
        caches.append(c)
    return x, caches


def _backward(template: TdnnModel, params: Params, caches, dz: np.ndarray) -> Params:
    grads = [None] * len(params)
    dout = dz
    for i in range(len(params) - 1, -1, -1):
        layer, p, c = template.all_layers[i], params[i], caches[i]
        g = {}
        if "bn_scale" in p:
            g["bn_shift"] = dout.sum(axis=tuple(range(dout.ndim - 1)))
            g["bn_scale"] = (dout * c["r"]).sum(axis=tuple(range(dout.ndim - 1)))
            da = dout * p["bn_scale"] * (c["a"] > 0)
        else:
            da = dout
        g["bias"] = da.sum(axis=tuple(range(da.ndim - 1)))
        if "mask_out" in c:
            da = np.where(c["mask_out"], da, 0.0)
        da2 = da.reshape(-1, da.shape[-1])
        xs2 = c["xs"].reshape(-1, c["xs"].shape[-1])
        w = c["w"]
        if "weights" in w:
            g["weights"] = da2.T @ xs2
            dxs = da @ w["weights"]
        else:
            h2 = c["h"].reshape(-1, c["h"].shape[-1])
            g["factor_a"] = da2.T @ h2
            dh = da @ w["factor_a"]
            g["factor_b"] = dh.reshape(-1, dh.shape[-1]).T @ xs2
            dxs = dh @ w["factor_b"]
        for key in ("weights", "factor_a", "factor_b"):
            if "mask_" + key in c:
                g[key] = np.where(c["mask_" + key], g[key], 0.0)
        grads[i] = g
        if i > 0:
            if "mask_x" in c:
                dxs = np.where(c["mask_x"], dxs, 0.0)
            dout = splice_backward(dxs, layer.context, c["in_shape"][-1])
    return grads


def loss_and_grads(template: TdnnModel, params: Params, x, labels, fq: FakeQuant | None = None):
    """Mean frame cross-entropy and its gradient for every parameter."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    z, caches = _forward_cached(template, params, x, fq)
    lp = log_softmax(z, axis=-1)
    n = labels.size
    loss = -np.take_along_axis(lp, labels[..., None], axis=-1).sum() / n
    dz = softmax(z, axis=-1)
    np.put_along_axis(dz, labels[..., None], np.take_along_axis(dz, labels[..., None], axis=-1) - 1.0, axis=-1)
    dz /= n
    return float(loss), _backward(template, params, caches, dz)


# -- optimizer and training loop ----------------------------------------------


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: Params, grads: Params) -> None:
        if not self.m:
            self.m = [{k: np.zeros_like(a) for k, a in p.items()} for p in params]
            self.v = [{k: np.zeros_like(a) for k, a in p.items()} for p in params]
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            for k in p:
                m[k] = self.beta1 * m[k] + (1 - self.beta1) * g[k]
                v[k] = self.beta2 * v[k] + (1 - self.beta2) * g[k] ** 2
                p[k] = p[k] - self.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + self.eps)
            if "bn_scale" in p:
                p["bn_scale"] = np.maximum(p["bn_scale"], BN_SCALE_FLOOR)


BN_SCALE_FLOOR = 1e-3


@dataclass
class TrainCheckpoint:
    """Everything needed to resume a run mid-epoch and land on identical bytes."""

    params: Params
    adam: Adam
    step: int
    qat_state: QatState | None
    history: list

    def save(self, path) -> None:
        arrays = {}
        for i, p in enumerate(self.params):
            for k, a in p.items():
                arrays[f"p/{i}/{k}"] = a
        for i, (m, v) in enumerate(zip(self.adam.m, self.adam.v)):
            for k in m:
                arrays[f"m/{i}/{k}"] = m[k]
                arrays[f"v/{i}/{k}"] = v[k]
        meta = {
            "n_layers": len(self.params),
            "step": self.step,
            "adam": {k: getattr(self.adam, k) for k in ("lr", "beta1", "beta2", "eps", "t")},
            "qat_state": self.qat_state.to_dict() if self.qat_state is not None else None,
            "history": self.history,
        }
        arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as f:
            np.savez(f, **arrays)

    @classmethod
    def load(cls, path) -> "TrainCheckpoint":
        with np.load(path) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            n = meta["n_layers"]
            params = [{} for _ in range(n)]
            m = [{} for _ in range(n)]
            v = [{} for _ in range(n)]
            for key in z.files:
                if key == "meta":
                    continue
                kind, i, name = key.split("/")
                {"p": params, "m": m, "v": v}[kind][int(i)][name] = z[key]
        adam = Adam(**meta["adam"], m=m if m[0] else [], v=v if v[0] else [])
        qs = QatState.from_dict(meta["qat_state"]) if meta["qat_state"] is not None else None
        return cls(params, adam, meta["step"], qs, meta["history"])


@dataclass
class TrainResult:
    model: TdnnModel
    qat_state: QatState | None
    history: list
    checkpoint: TrainCheckpoint
    finished: bool


def frame_accuracy(log_probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(log_probs, axis=-1) == np.asarray(labels)))


def train(
    model: TdnnModel,
    train_x: np.ndarray,
    train_y: np.ndarray,
    *,
    epochs: int = 1,
    lr: float = 1e-3,
    lr_final: float | None = None,
    batch_size: int = 16,
    seed: int = 0,
    schedule: QatSchedule | None = None,
    bits: int = 8,
    act_mode: str = "symmetric",
    quantize_output: bool = False,
    eval_fn: Callable[[TdnnModel, QatState | None], dict] | None = None,
    resume: TrainCheckpoint | None = None,
    stop_after_steps: int | None = None,
) -> TrainResult:
    """Minibatch Adam on frame cross-entropy; fake quantization per ``schedule``.

    ``train_x`` is ``(U, T, D)``, ``train_y`` is ``(U, T)``. The learning rate
    decays linearly from ``lr`` to ``lr_final`` (constant when omitted). Batch order for
    epoch ``e`` comes from ``default_rng([seed, e])`` so a run can stop after any
    step and resume from its checkpoint with identical results.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    n_utts = train_x.shape[0]
    spe = math.ceil(n_utts / batch_size)
    total = epochs * spe
    if resume is not None:
        params = [{k: a.copy() for k, a in p.items()} for p in resume.params]
        adam = copy.deepcopy(resume.adam)
        step = resume.step
        state = copy.deepcopy(resume.qat_state)
        history = list(resume.history)
    else:
        params = params_from_model(model)
        adam = Adam(lr=lr)
        step = 0
        state = QatState.fresh(
            model, bits, act_mode, quantize_output, steps_per_epoch=spe, epochs=epochs
        ) if schedule else None
        history = []
    fq = FakeQuant(state, schedule) if schedule is not None else None

    epoch_loss = 0.0
    while step < total:
        if stop_after_steps is not None and step >= stop_after_steps:
            break
        epoch, k = divmod(step, spe)
        order = np.random.default_rng([seed, epoch]).permutation(n_utts)
        idx = order[k * batch_size : (k + 1) * batch_size]
        active = schedule is not None and schedule.is_active(step, spe, epochs)
        if state is not None:
            state.step = step
        if lr_final is not None:
            adam.lr = lr + (lr_final - lr) * step / total
        loss, grads = loss_and_grads(model, params, train_x[idx], train_y[idx], fq if active else None)
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"loss became {loss} at step {step} (epoch {epoch}, lr {adam.lr})")
        adam.step(params, grads)
        step += 1
        if state is not None:
            state.step = step
        if step % spe == 0:
            current = model_from_params(model, params)
            row = {"epoch": step // spe, "step": step, "last_batch_loss": loss}
            if eval_fn is not None:
                row.update(eval_fn(current, state))
            history.append(row)
    ckpt = TrainCheckpoint(params, adam, step, state, history)
    return TrainResult(model_from_params(model, params), state, history, ckpt, step >= total)


# -- synthetic task -------------------------------------------------------------


@dataclass(frozen=True)
class ToyConfig:
    seed: int = 0
    feat_dim: int = 20
    hidden_dim: int = 64
    num_layers: int = 7
    num_classes: int = 41
    context: tuple = (-1, 0, 1)
    frames: int = 40
    train_utts: int = 4000
    eval_utts: int = 500
    calib_utts: int = 100
    teacher_hidden: int = 64
    teacher_layers: int = 2
    feature_noise: float = 0.5
    label_noise: float = 0.05
    epochs: int = 8
    batch_size: int = 8
    lr: float = 2e-3
    lr_final: float = 1e-4
    qat_epochs: int = 1
    qat_lr: float = 1e-4
    bits: int = 8

    def to_dict(self) -> dict:
        d = asdict(self)
        d["context"] = list(self.context)
        return d


@dataclass
class ToyData:
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    calib_x: np.ndarray
    teacher: TdnnModel


def _latent_classes(rng, n: int, t: int, num_classes: int, min_len: int = 3, max_len: int = 8) -> np.ndarray:
    """Piecewise-constant class sequences: runs of ``min_len``..``max_len`` frames."""
    out = np.empty((n, t), dtype=np.int64)
    for u in range(n):
        pos = 0
        while pos < t:
            run = int(rng.integers(min_len, max_len + 1))
            out[u, pos : pos + run] = rng.integers(num_classes)
            pos += run
    return out


def _head_input(model: TdnnModel, x) -> np.ndarray:
    captured = []
    run_float(model, x, hook=lambda i, xs: captured.append(xs) if i == len(model.layers) else None)
    return captured[0]


def make_toy_data(cfg: ToyConfig) -> ToyData:
    """Noisy class-prototype frame sequences, labelled by a random teacher TDNN.

    Each utterance is a run of latent classes; a frame is its class prototype plus
    Gaussian noise. The teacher's head rows are the centred per-class means of its
    last hidden layer, and labels are the argmax of its logits plus Gaussian noise.
    """
    rng = np.random.default_rng([cfg.seed, 1])
    prototypes = rng.standard_normal((cfg.num_classes, cfg.feat_dim))

    def frames(n):
        latent = _latent_classes(rng, n, cfg.frames, cfg.num_classes)
        return prototypes[latent] + cfg.feature_noise * rng.standard_normal(latent.shape + (cfg.feat_dim,)), latent

    teacher = random_model(rng, cfg.feat_dim, cfg.teacher_hidden, cfg.teacher_layers, cfg.num_classes, cfg.context)
    probe_x, probe_c = frames(200)
    h = _head_input(teacher, probe_x).reshape(-1, cfg.teacher_hidden)
    h = h - h.mean(axis=0)
    c = probe_c.ravel()
    centroids = np.stack([h[c == k].mean(axis=0) for k in range(cfg.num_classes)])
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    head_bias = -(centroids @ _head_input(teacher, probe_x).reshape(-1, cfg.teacher_hidden).mean(axis=0))
    teacher = teacher.with_layers(
        teacher.layers + (replace(teacher.head, weights=centroids.astype(np.float32), bias=head_bias.astype(np.float32)),)
    )

    def labelled(n):
        x, _ = frames(n)
        z = run_float(teacher, x)
        z = z + cfg.label_noise * z.std() * rng.standard_normal(z.shape)
        return x.astype(np.float32), np.argmax(z, axis=-1)

    train_x, train_y = labelled(cfg.train_utts)
    eval_x, eval_y = labelled(cfg.eval_utts)
    calib_x, _ = labelled(cfg.calib_utts)
    return ToyData(train_x, train_y, eval_x, eval_y, calib_x, teacher)


def initial_model(cfg: ToyConfig) -> TdnnModel:
    rng = np.random.default_rng([cfg.seed, 2])
    return random_model(rng, cfg.feat_dim, cfg.hidden_dim, cfg.num_layers, cfg.num_classes, cfg.context, name="toy-float")


def train_toy(cfg: ToyConfig, data: ToyData | None = None):
    """Train the float student from scratch. Returns ``(model, metrics, data)``."""
    data = data if data is not None else make_toy_data(cfg)

    def eval_fn(m, _state):
        return {"eval_accuracy": frame_accuracy(forward_float(m, data.eval_x), data.eval_y)}

    res = train(
        initial_model(cfg), data.train_x, data.train_y,
        epochs=cfg.epochs, lr=cfg.lr, lr_final=cfg.lr_final, batch_size=cfg.batch_size, seed=cfg.seed, eval_fn=eval_fn,
    )
    metrics = {
        "eval_accuracy": res.history[-1]["eval_accuracy"],
        "curve": [row["eval_accuracy"] for row in res.history],
        "train_frames": int(data.train_y.size),
    }
    return res.model, metrics, data
