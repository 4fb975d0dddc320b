"""Loss assembly, balancing, normalization, the optimizer loop, evaluation.

The network always sees z-scored inputs and emits z-scored fields; the
physics term is evaluated on denormalized predictions against the physical
temperature, because the equilibrium/constitutive relations only hold in
physical units.  Two balancing modes:

    fixed        Loss = sum_k w_k L_k (+ w_pde L_pde)
    uncertainty  Loss = sum_k [exp(-s_k)/2 L_k + s_k] (+ pde term alike)

with the s_k learnable log-variances, initialized to 0.  Training is
deterministic per (config, seed): model init, batch order, and reduction
order are all fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import MaterialParams, NodeClassField
from .solver import FIELD_NAMES, FieldSample, LABEL_NAMES
from . import residual
from .residual import ResidualScales
from .model import TASK_FIELDS, ModelConfig, build_model
from .torchops import TorchOps


class TrainingError(RuntimeError):
    pass


class DegenerateDataError(ValueError):
    """A field is constant over the training set; z-scoring is undefined."""


@dataclass(frozen=True)
class NormStats:
    """Per-field mean/std over hole-excluded pixels of the training set."""

    mean: dict[str, float]
    std: dict[str, float]

    def __post_init__(self):
        for name in FIELD_NAMES:
            if name not in self.mean or name not in self.std:
                raise ValueError(f"missing stats for field {name}")
            if not self.std[name] > 0:
                raise DegenerateDataError(f"field {name} has non-positive std")

    @classmethod
    def fit(cls, samples: list[FieldSample], classes: NodeClassField) -> "NormStats":
        if not samples:
            raise ValueError("cannot fit stats on an empty training set")
        active = classes.active
        mean, std = {}, {}
        for name in FIELD_NAMES:
            pixels = np.concatenate([s.field(name)[active] for s in samples])
            mean[name] = float(pixels.mean())
            std[name] = float(pixels.std())
            if std[name] == 0.0:
                raise DegenerateDataError(f"field {name} is constant over the training set")
        return cls(mean=mean, std=std)

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(mean={n: 0.0 for n in FIELD_NAMES},
                   std={n: 1.0 for n in FIELD_NAMES})

    def normalize(self, name: str, arr):
        return (arr - self.mean[name]) / self.std[name]

    def denormalize(self, name: str, arr):
        return arr * self.std[name] + self.mean[name]

    def to_dict(self) -> dict:
        return {"mean": dict(self.mean), "std": dict(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(mean={k: float(v) for k, v in d["mean"].items()},
                   std={k: float(v) for k, v in d["std"].items()})


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    optimizer: str = "adadelta"      # or "adam"
    learning_rate: float | None = None  # optimizer default when None
    physics: bool = False
    balance: str = "fixed"           # or "uncertainty"
    fixed_weights: tuple[float, ...] | None = None  # K task weights + pde weight
    levels: int = 3
    base_channels: int = 16
    seed: int = 0
    deterministic: bool = True
    max_steps: int | None = None     # optional cap across epochs

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.optimizer not in ("adadelta", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.balance not in ("fixed", "uncertainty"):
            raise ValueError(f"unknown balance mode {self.balance!r}")
        if self.fixed_weights is not None and any(w < 0 for w in self.fixed_weights):
            raise ValueError("fixed weights must be nonnegative")


@dataclass
class Metrics:
    """Per-field MAE and safeguarded MRE (percent) with across-sample
    spreads; the raw paper-form MRE (denominator |prediction|, no floor)
    is recorded alongside."""

    mae: dict[str, float]
    mae_std: dict[str, float]
    mre_pct: dict[str, float]
    mre_pct_std: dict[str, float]
    mre_raw_pct: dict[str, float]

    def to_dict(self) -> dict:
        return {"mae": self.mae, "mae_std": self.mae_std,
                "mre_pct": self.mre_pct, "mre_pct_std": self.mre_pct_std,
                "mre_raw_pct": self.mre_raw_pct}


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list[dict]
    stats: NormStats
    config: TrainConfig


def data_loss(pred: torch.Tensor, label: torch.Tensor,
              active_mask: torch.Tensor) -> torch.Tensor:
    """MSE over batch, channels, and hole-excluded pixels."""
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(label.shape)}")
    diff2 = (pred - label) ** 2 * active_mask
    n = active_mask.sum() * (pred.numel() / pred.shape[-2:].numel())
    return diff2.sum() / n


def total_loss_fixed(task_losses, pde_loss_value, weights) -> torch.Tensor:
    if len(weights) != len(task_losses) + 1:
        raise ValueError("need one weight per task plus one for the pde term")
    if any(w < 0 for w in weights):
        raise ValueError("weights must be nonnegative")
    total = sum(w * l for w, l in zip(weights[:-1], task_losses))
    if pde_loss_value is not None:
        total = total + weights[-1] * pde_loss_value
    return total


def total_loss_uncertainty(task_losses, pde_loss_value, s: torch.Tensor) -> torch.Tensor:
    """Homoscedastic weighting with learnable log-variances s; the pde term
    uses the final entry of s when present."""
    expected = len(task_losses) + (0 if pde_loss_value is None else 1)
    if s.numel() != expected:
        raise ValueError(f"need {expected} log-variances, got {s.numel()}")
    total = 0.0
    for k, loss in enumerate(task_losses):
        total = total + torch.exp(-s[k]) / 2.0 * loss + s[k]
    if pde_loss_value is not None:
        total = total + torch.exp(-s[-1]) / 2.0 * pde_loss_value + s[-1]
    return total


def default_fixed_weights(n_tasks: int, physics: bool) -> tuple[float, ...]:
    return tuple([1.0 / n_tasks] * n_tasks) + ((1.0,) if physics else (0.0,))


def _stack_fields(samples: list[FieldSample], names) -> torch.Tensor:
    return torch.from_numpy(np.stack([
        np.stack([s.field(n) for n in names]) for s in samples]))


def _make_optimizer(cfg: TrainConfig, params):
    if cfg.optimizer == "adadelta":
        lr = 1.0 if cfg.learning_rate is None else cfg.learning_rate
        return torch.optim.Adadelta(params, lr=lr, rho=0.9, eps=1e-6)
    lr = 1e-3 if cfg.learning_rate is None else cfg.learning_rate
    return torch.optim.Adam(params, lr=lr)


class _TaskSpec:
    """Field grouping + label channel indices of one trained network."""

    def __init__(self, groups: tuple[tuple[str, ...], ...]):
        self.groups = groups
        self.channels = tuple(tuple(LABEL_NAMES.index(n) for n in g) for g in groups)
        self.n_tasks = len(groups)


def _physics_loss(fields_norm: dict[str, torch.Tensor], t_phys: torch.Tensor,
                  stats: NormStats, tops: TorchOps, mat: MaterialParams,
                  scales: ResidualScales) -> torch.Tensor:
    phys = {n: stats.denormalize(n, fields_norm[n]) for n in LABEL_NAMES}
    bundle = residual.residual_fields(
        tops, mat, phys["ux"], phys["uy"], phys["sxx"], phys["syy"],
        phys["sxy"], t_phys)
    return residual.scaled_loss(tops, bundle, scales)


def _run_training(net, spec: _TaskSpec, t_norm, labels_norm, t_phys,
                  stats: NormStats, tops: TorchOps, mat: MaterialParams,
                  scales: ResidualScales | None, cfg: TrainConfig,
                  val_eval, seed: int) -> list[dict]:
    """Optimizer loop shared by the multi-task net and each STL net."""
    n = t_norm.shape[0]
    loss_params = []
    s = None
    if cfg.balance == "uncertainty":
        s = torch.zeros(spec.n_tasks + (1 if cfg.physics else 0),
                        dtype=torch.float64, requires_grad=True)
        loss_params = [s]
    weights = cfg.fixed_weights or default_fixed_weights(spec.n_tasks, cfg.physics)
    optimizer = _make_optimizer(cfg, list(net.parameters()) + loss_params)
    order_gen = torch.Generator().manual_seed(seed)

    history = []
    steps_done = 0
    for epoch in range(cfg.epochs):
        net.train()
        perm = torch.randperm(n, generator=order_gen)
        sums = {f"data_task{k + 1}": 0.0 for k in range(spec.n_tasks)}
        sums["total"] = 0.0
        if cfg.physics:
            sums["pde"] = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            if cfg.max_steps is not None and steps_done >= cfg.max_steps:
                break
            idx = perm[start:start + cfg.batch_size]
            x = t_norm[idx]
            y = labels_norm[idx]
            outs = net(x)
            if not isinstance(outs, tuple):
                outs = (outs,)
            task_losses = [data_loss(out, y[:, chans], tops.active_mask)
                           for out, chans in zip(outs, spec.channels)]
            pde_val = None
            if cfg.physics:
                fields_norm = {}
                for out, group in zip(outs, spec.groups):
                    for c, name in enumerate(group):
                        fields_norm[name] = out[:, c]
                pde_val = _physics_loss(fields_norm, t_phys[idx, 0],
                                        stats, tops, mat, scales)
            if cfg.balance == "uncertainty":
                total = total_loss_uncertainty(task_losses, pde_val, s)
            else:
                total = total_loss_fixed(task_losses, pde_val, weights)
            if not torch.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch + 1}, step {steps_done + 1}")
            optimizer.zero_grad()
            total.backward()
            optimizer.step()

            for k, l in enumerate(task_losses):
                sums[f"data_task{k + 1}"] += float(l.detach())
            if cfg.physics:
                sums["pde"] += float(pde_val.detach())
            sums["total"] += float(total.detach())
            n_batches += 1
            steps_done += 1

        record = {"epoch": epoch + 1, "steps": steps_done}
        record.update({k: v / max(n_batches, 1) for k, v in sums.items()})
        if s is not None:
            record.update({f"s{k + 1}": float(sv) for k, sv in enumerate(s.detach())})
        if val_eval is not None:
            record.update(val_eval(net))
        history.append(record)
        if cfg.max_steps is not None and steps_done >= cfg.max_steps:
            break
    return history


def train(train_set: list[FieldSample], val_set: list[FieldSample], kind: str,
          cfg: TrainConfig, classes: NodeClassField, mat: MaterialParams,
          stats: NormStats | None = None) -> TrainResult:
    """Train an mta-unet or the five-model unet-stl baseline.

    Returns the trained module (for unet-stl an ensemble holding the five
    nets), the per-epoch history, and the normalization stats, which are
    fitted from train_set only.
    """
    if kind not in ("mta-unet", "unet-stl"):
        raise ValueError(f"unknown model kind {kind!r}")
    if kind == "unet-stl" and cfg.physics:
        raise ValueError("physics residuals couple fields across tasks; "
                         "they require the multi-task model")
    if cfg.deterministic:
        torch.set_num_threads(1)

    if stats is None:
        stats = NormStats.fit(train_set, classes)
    grid = train_set[0].grid
    tops = TorchOps(classes)
    scales = None
    if cfg.physics:
        t_char = max(float(np.abs(s.T).max()) for s in train_set)
        scales = ResidualScales.for_material(mat, t_char=t_char, h=grid.h)

    t_phys = _stack_fields(train_set, ("T",))
    t_norm = stats.normalize("T", t_phys)
    labels_norm = torch.stack([
        stats.normalize(n, _stack_fields(train_set, (n,))[:, 0])
        for n in LABEL_NAMES], dim=1)
    val_t = stats.normalize("T", _stack_fields(val_set, ("T",))) if val_set else None

    def make_val_eval(predict):
        if not val_set:
            return None

        def val_eval(net):
            net.eval()
            with torch.no_grad():
                metrics = _metrics_from_predictions(predict(net, val_t), val_set,
                                                    classes)
            return {f"val_mae_{n}": metrics.mae[n] for n in metrics.mae} | \
                   {f"val_mre_{n}": metrics.mre_pct[n] for n in metrics.mre_pct}
        return val_eval

    model_cfg = ModelConfig(levels=cfg.levels, base_channels=cfg.base_channels,
                            seed=cfg.seed)
    if kind == "mta-unet":
        net = build_model("mta-unet", model_cfg)
        spec = _TaskSpec(TASK_FIELDS)
        predict = _denorm_predict(stats)
        history = _run_training(net, spec, t_norm, labels_norm, t_phys, stats,
                                tops, mat, scales, cfg, make_val_eval(predict),
                                cfg.seed)
        return TrainResult(model=net, history=history, stats=stats, config=cfg)

    ensemble = build_model("unet-stl", model_cfg)
    history = []
    for k, name in enumerate(LABEL_NAMES):
        net = ensemble.nets[name]
        spec = _TaskSpec(((name,),))
        predict = _denorm_predict(stats)
        sub_history = _run_training(net, spec, t_norm, labels_norm, t_phys,
                                    stats, tops, mat, scales, cfg,
                                    make_val_eval(predict), cfg.seed + k)
        for rec in sub_history:
            rec["field"] = name
        history.extend(sub_history)
    return TrainResult(model=ensemble, history=history, stats=stats, config=cfg)


def _denorm_predict(stats: NormStats):
    def predict(net, t_norm):
        fields = net.predict_fields(t_norm)
        return {n: stats.denormalize(n, v).numpy() for n, v in fields.items()}
    return predict


def _metrics_from_predictions(preds: dict[str, np.ndarray],
                              test_set: list[FieldSample],
                              classes: NodeClassField) -> Metrics:
    active = classes.active
    mae, mae_std, mre, mre_std, mre_raw = {}, {}, {}, {}, {}
    for name in preds:
        labels = np.stack([s.field(name) for s in test_set])
        pred = preds[name]
        absdiff = np.abs(labels - pred)[:, active]
        per_sample_mae = absdiff.mean(axis=1)
        mae[name] = float(per_sample_mae.mean())
        mae_std[name] = float(per_sample_mae.std())

        denom_floor = 1e-3 * float(np.abs(labels[:, active]).max())
        denom = np.maximum(np.abs(pred)[:, active], denom_floor)
        per_sample_mre = (absdiff / denom).mean(axis=1)
        mre[name] = float(per_sample_mre.mean() * 100.0)
        mre_std[name] = float(per_sample_mre.std() * 100.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            raw = absdiff / np.abs(pred)[:, active]
        mre_raw[name] = float(raw.mean() * 100.0)
    return Metrics(mae=mae, mae_std=mae_std, mre_pct=mre,
                   mre_pct_std=mre_std, mre_raw_pct=mre_raw)


def evaluate(net: torch.nn.Module, test_set: list[FieldSample],
             stats: NormStats, classes: NodeClassField) -> Metrics:
    """Physical-scale MAE / safeguarded MRE over the test set."""
    if not test_set:
        raise ValueError("test set is empty")
    t_norm = stats.normalize("T", _stack_fields(test_set, ("T",)))
    net.eval()
    with torch.no_grad():
        preds = _denorm_predict(stats)(net, t_norm)
    return _metrics_from_predictions(preds, test_set, classes)


def history_lines(history: list[dict]) -> list[str]:
    """One key=value record per epoch, stable key order."""
    lines = []
    for rec in history:
        parts = []
        for key, val in rec.items():
            if isinstance(val, float):
                parts.append(f"{key}={val:.10e}")
            else:
                parts.append(f"{key}={val}")
        lines.append(" ".join(parts))
    return lines
