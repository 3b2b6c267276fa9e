"""Losses, metrics, optimizer, and the training/evaluation loop."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from . import autodiff as ad
from . import dims
from .data import Dataset, Sample
from .model import DimINOModel

METRIC_KINDS = ("rel-l2", "rel-h1", "rel-l1")


class NaNLoss(Exception):
    def __init__(self, epoch, step):
        super().__init__(f"loss became non-finite at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


class MissingSplit(Exception):
    pass


def _spectral_gradients(arr: np.ndarray, extent) -> List[np.ndarray]:
    """d(arr)/dx_a per spatial axis via the Fourier derivative.

    The Nyquist mode is zeroed so differentiation stays skew-symmetric.
    """
    grads = []
    shape = arr.shape
    ah = np.fft.rfftn(arr, axes=tuple(range(arr.ndim)))
    for axis in range(arr.ndim):
        n = shape[axis]
        if axis == arr.ndim - 1:
            k = 2 * np.pi * np.fft.rfftfreq(n, d=extent[axis] / n)
            k[-1] = 0.0
        else:
            k = 2 * np.pi * np.fft.fftfreq(n, d=extent[axis] / n)
            k[n // 2] = 0.0
        kshape = [1] * arr.ndim
        kshape[axis] = len(k)
        d = ah * (1j * k.reshape(kshape))
        grads.append(np.fft.irfftn(d, s=shape, axes=tuple(range(arr.ndim))))
    return grads


def rel_metric(kind: str, pred: np.ndarray, target: np.ndarray,
               extent=None) -> float:
    """Relative error of one field; falls back to the absolute norm when the
    target vanishes."""
    if pred.shape != target.shape:
        raise ad.ShapeMismatch(f"{pred.shape} vs {target.shape}")
    if extent is None:
        extent = (1.0,) * pred.ndim
    e = pred - target
    if kind == "rel-l2":
        num, den = np.linalg.norm(e.ravel()), np.linalg.norm(target.ravel())
    elif kind == "rel-l1":
        num, den = np.abs(e).sum(), np.abs(target).sum()
    elif kind == "rel-h1":
        ge = _spectral_gradients(e, extent)
        gt = _spectral_gradients(target, extent)
        num = math.sqrt(np.sum(e**2) + sum(np.sum(g**2) for g in ge))
        den = math.sqrt(np.sum(target**2) + sum(np.sum(g**2) for g in gt))
    else:
        raise ValueError(f"unknown metric kind {kind!r}")
    return float(num) if den == 0 else float(num / den)


def build_loss(kind: str, out: ad.Tensor, target: np.ndarray, rank: int,
               extent=None) -> ad.Tensor:
    """Differentiable batch loss: mean over samples of the relative norm."""
    tape = out.tape
    b = target.shape[0]
    spatial_axes = tuple(range(1, 1 + rank))
    reduce_axes = spatial_axes + (1 + rank,)
    if extent is None:
        extent = (1.0,) * rank
    e = ad.sub(out, tape.leaf(target.astype(out.data.dtype)))
    num = ad.reduce_sum(ad.power(e, 2), axes=reduce_axes)
    den = np.sum(target**2, axis=reduce_axes)
    if kind == "h1":
        eh = ad.rfftn(e, spatial_axes)
        th = np.fft.rfftn(target, axes=spatial_axes)
        spatial = target.shape[1:1 + rank]
        for axis_i, axis in enumerate(spatial_axes):
            n = spatial[axis_i]
            if axis == spatial_axes[-1]:
                k = 2 * np.pi * np.fft.rfftfreq(n, d=extent[axis_i] / n)
                k[-1] = 0.0
            else:
                k = 2 * np.pi * np.fft.fftfreq(n, d=extent[axis_i] / n)
                k[n // 2] = 0.0
            kshape = [1] * target.ndim
            kshape[axis] = len(k)
            ik = (1j * k.reshape(kshape)).astype(np.complex128)
            de = ad.irfftn(ad.const_mul(eh, ik), spatial_axes, spatial)
            dt = np.fft.irfftn(th * ik, s=spatial, axes=spatial_axes)
            num = ad.add(num, ad.reduce_sum(ad.power(de, 2), axes=reduce_axes))
            den = den + np.sum(dt**2, axis=reduce_axes)
    elif kind != "l2":
        raise ValueError(f"unknown loss kind {kind!r}")
    inv_den = (1.0 / np.maximum(den, 1e-30)).astype(np.float64)
    ratio = ad.const_mul(num, inv_den)
    return ad.smul(ad.reduce_sum(ad.sqrt(ratio)), 1.0 / b)


def adam_step(params: List[np.ndarray], grads: List[np.ndarray], state: dict,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> Tuple[list, dict]:
    """One Adam update with bias correction; arrays are updated in place."""
    if not state:
        state["step"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.abs(g) ** 2
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)
    return params, state


@dataclass
class TrainConfig:
    loss: str = "h1"
    epochs: int = 200
    batch_size: int = 16
    lr: float = 2e-3
    seed: int = 0
    precision: str = "f64"
    scale_mode: str = "per-sample"
    warmup_epochs: int = 5
    schedule: str = "cosine"
    patience: int = 30
    valid_frac: float = 0.2

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    if cfg.schedule != "cosine" or cfg.epochs <= cfg.warmup_epochs:
        return cfg.lr
    frac = (epoch - cfg.warmup_epochs) / max(cfg.epochs - cfg.warmup_epochs, 1)
    return cfg.lr * 0.5 * (1 + math.cos(math.pi * min(frac, 1.0)))


def _target_array(samples, target_fields):
    return np.stack(
        [np.stack([s.targets[n] for n in target_fields], axis=-1) for s in samples]
    )


def train(model: DimINOModel, dataset: Dataset, cfg: TrainConfig
          ) -> Tuple[DimINOModel, List[dict]]:
    """Train with Adam; retains the best-valid checkpoint.

    Fully deterministic for a fixed (cfg.seed, single-thread BLAS).
    """
    samples = dataset.split("train")
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(samples))
    n_valid = max(1, int(round(cfg.valid_frac * len(samples))))
    valid = [samples[i] for i in perm[:n_valid]]
    train_samples = [samples[i] for i in perm[n_valid:]]
    if not train_samples:
        raise ValueError("dataset too small to split")

    model.config.scale_mode = cfg.scale_mode
    if cfg.scale_mode == "per-dataset":
        model.dataset_field_scales = dims.dataset_scales(train_samples)

    names = list(model.params)
    state: dict = {}
    history: List[dict] = []
    best = {"rel-l2": math.inf, "params": None, "epoch": -1}
    rank = model.config.rank
    extent = dataset.grid.extent

    for epoch in range(cfg.epochs):
        lr = _lr_at(cfg, epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_samples))
        losses = []
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [train_samples[i] for i in order[start:start + cfg.batch_size]]
            result = model.forward(batch, train=True)
            target = _target_array(batch, model.config.target_fields)
            loss = build_loss(cfg.loss, result.output, target, rank, extent)
            if not np.isfinite(loss.data):
                raise NaNLoss(epoch, step)
            if lr > 0:
                result.tape.backward(loss)
                grads = [result.leaves[n].grad for n in names]
                adam_step([model.params[n] for n in names], grads, state, lr)
            losses.append(float(loss.data))
        metrics = evaluate_samples(model, valid, extent)
        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)),
            **{f"valid_{k}": metrics[k] for k in METRIC_KINDS},
        }
        history.append(record)
        if metrics["rel-l2"] < best["rel-l2"]:
            best = {
                "rel-l2": metrics["rel-l2"],
                "params": {k: v.copy() for k, v in model.params.items()},
                "epoch": epoch,
            }
        if cfg.patience and epoch - best["epoch"] >= cfg.patience:
            break
    if best["params"] is not None:
        model.params = best["params"]
    return model, history


def evaluate_samples(model: DimINOModel, samples, extent,
                     batch_size: int = 32) -> Dict[str, float]:
    """Mean per-sample, per-target-field metrics."""
    sums = {k: 0.0 for k in METRIC_KINDS}
    count = 0
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        pred = model.predict(batch)
        for i, s in enumerate(batch):
            for j, name in enumerate(model.config.target_fields):
                for k in METRIC_KINDS:
                    sums[k] += rel_metric(k, pred[i, ..., j], s.targets[name], extent)
                count += 1
    return {k: sums[k] / max(count, 1) for k in METRIC_KINDS}


def evaluate(model: DimINOModel, dataset: Dataset, split: str,
             baseline: Dict[str, float] = None) -> Dict[str, float]:
    """Metric table for a split; adds gain columns when a baseline is given."""
    try:
        samples = dataset.split(split)
    except KeyError as exc:
        raise MissingSplit(str(exc)) from exc
    table = evaluate_samples(model, samples, dataset.grid.extent)
    table["n"] = len(samples)
    if baseline:
        for k in METRIC_KINDS:
            if baseline.get(k):
                table[f"{k}-gain"] = gain(baseline[k], table[k])
    return table


def grad_check_model(model: DimINOModel, samples, loss_kind: str = "l2",
                     step: float = 1e-5, n_sample: int = 4, seed: int = 0) -> float:
    """Finite-difference check of the full forward/backward pipeline."""
    names = list(model.params)
    target = _target_array(samples, model.config.target_fields)
    rank = model.config.rank

    def f(*leaves):
        ld = dict(zip(names, leaves))
        result = model.forward(samples, tape=leaves[0].tape, leaves=ld)
        return build_loss(loss_kind, result.output, target, rank)

    return ad.grad_check(
        f, [model.params[n] for n in names], step=step, n_sample=n_sample, seed=seed
    )


def gain(base: float, score: float) -> float:
    """Relative improvement over a baseline score."""
    return (base - score) / base


def format_metric_table(rows: Dict[str, Dict[str, float]]) -> str:
    """Rows: model name -> metric dict.  Values reported in units of 1e-2."""
    cols = list(METRIC_KINDS) + [f"{k}-gain" for k in METRIC_KINDS]
    header = f"{'model':<24}" + "".join(f"{c:>14}" for c in cols)
    lines = [header]
    for name, table in rows.items():
        cells = []
        for c in cols:
            v = table.get(c)
            if v is None:
                cells.append(f"{'-':>14}")
            elif c.endswith("gain"):
                cells.append(f"{100 * v:>13.1f}%")
            else:
                cells.append(f"{100 * v:>14.3f}")
        lines.append(f"{name:<24}" + "".join(cells))
    return "\n".join(lines)


def history_json(history: List[dict]) -> str:
    """Line-delimited history records."""
    return "\n".join(json.dumps(rec, sort_keys=True) for rec in history) + "\n"
