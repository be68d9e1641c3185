"""The forward gob regressor: (machine state, deadpoint deltas) -> (dW, dL).

Wraps the hand-differentiated MLP with feature/target standardization, an
AdamW training loop with early stopping on validation MAE, input-gradient
access for the inversion engine, the regression metric suite, persistence,
and a seeded random hyperparameter search.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn import MLP, AdamW, NetworkSpec
from .pipeline import (
    BinSpec,
    DifferentialSample,
    class_edges,
    class_index,
    samples_to_arrays,
)

MODEL_FORMAT_VERSION = 1

#: Column order of the model's feature vector.
FEATURE_NAMES = (
    "temperature_c",
    "master_speed",
    "tube_rotation",
    "phase_deg",
    "dsp_mm",
    "dlp_mm",
    "dup_mm",
)
DELTA_SLICE = slice(4, 7)
TARGET_NAMES = ("dw_g", "dl_mm")


@dataclass
class TrainConfig:
    learning_rate: float = 3e-3
    weight_decay: float = 1e-2
    batch_size: int = 256
    max_epochs: int = 300
    patience: int = 20
    seed: int = 0

    def validate(self) -> None:
        if min(self.learning_rate, self.weight_decay + 1e-30, self.batch_size,
               self.max_epochs + 1, self.patience) <= 0:
            raise ValueError("training configuration values must be positive")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(
            learning_rate=float(d["learning_rate"]),
            weight_decay=float(d["weight_decay"]),
            batch_size=int(d["batch_size"]),
            max_epochs=int(d["max_epochs"]),
            patience=int(d["patience"]),
            seed=int(d["seed"]),
        )


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochMetrics:
    epoch: int
    train_mae_weight: float
    train_mae_length: float
    val_mae_weight: float
    val_mae_length: float


@dataclass
class Normalization:
    """Frozen z-score statistics, fitted on the training split only."""

    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    y_scale: np.ndarray

    @staticmethod
    def fit(x: np.ndarray, y: np.ndarray) -> "Normalization":
        def scale_of(a):
            s = a.std(axis=0)
            return np.where(s < 1e-12, 1.0, s)

        return Normalization(
            x_mean=x.mean(axis=0),
            x_scale=scale_of(x),
            y_mean=y.mean(axis=0),
            y_scale=scale_of(y),
        )

    def norm_x(self, x: np.ndarray) -> np.ndarray:
        return (x - self.x_mean) / self.x_scale

    def norm_y(self, y: np.ndarray) -> np.ndarray:
        return (y - self.y_mean) / self.y_scale

    def denorm_y(self, y: np.ndarray) -> np.ndarray:
        return y * self.y_scale + self.y_mean


class TrainedModel:
    """Immutable-after-training regressor with physical-unit interfaces."""

    def __init__(self, net: MLP, normalization: Normalization,
                 history: list[EpochMetrics] | None = None,
                 train_config: TrainConfig | None = None):
        self.net = net
        self.normalization = normalization
        self.history = history or []
        self.train_config = train_config

    @property
    def spec(self) -> NetworkSpec:
        return self.net.spec

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Physical-unit predictions; accepts one feature vector or a batch."""
        features = np.asarray(features, dtype=float)
        single = features.ndim == 1
        x = np.atleast_2d(features)
        if x.shape[1] != self.net.spec.input_dim:
            raise ValueError(
                f"expected {self.net.spec.input_dim} features, got {x.shape[1]}"
            )
        y = self.normalization.denorm_y(self.net.predict(self.normalization.norm_x(x)))
        return y[0] if single else y

    def input_gradient(
        self,
        features: np.ndarray,
        targets: np.ndarray,
        target_scales: Sequence[float] = (1.0, 1.0),
        normalized: bool = False,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Gradient of sum_t ((pred_t - target_t)/scale_t)^2 w.r.t. the deltas.

        Targets and scales are in physical units. Returns (predictions,
        gradients) where gradients cover the three deadpoint delta inputs,
        per row; ``normalized=True`` leaves them in normalized input units.
        """
        features = np.asarray(features, dtype=float)
        single = features.ndim == 1
        x = np.atleast_2d(features)
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        xn = self.normalization.norm_x(x)
        yn, cache = self.net.forward(xn, training=False)
        y = self.normalization.denorm_y(yn)
        scales = np.asarray(target_scales, dtype=float)
        # d/dy_n of sum ((y - t)/s)^2 with y = y_n * y_scale + y_mean
        grad_yn = 2.0 * (y - targets) / scales**2 * self.normalization.y_scale
        _, grad_xn = self.net.backward(cache, grad_yn)
        grad = grad_xn if normalized else grad_xn / self.normalization.x_scale
        grad = grad[:, DELTA_SLICE]
        return (y[0], grad[0]) if single else (y, grad)


def build_network(spec: NetworkSpec, seed: int = 0) -> MLP:
    return MLP(spec, seed=seed)


def _mae_per_target(model: MLP, norm: Normalization, x: np.ndarray, y: np.ndarray,
                    batch: int = 8192) -> np.ndarray:
    preds = []
    xn = norm.norm_x(x)
    for i in range(0, len(xn), batch):
        preds.append(model.predict(xn[i : i + batch]))
    y_hat = norm.denorm_y(np.vstack(preds))
    return np.abs(y_hat - y).mean(axis=0)


def train(
    net: MLP,
    train_samples: Sequence[DifferentialSample],
    val_samples: Sequence[DifferentialSample],
    config: TrainConfig | None = None,
) -> TrainedModel:
    """Fit with AdamW on MAE loss; return the best-validation snapshot.

    The loss is the mean absolute error summed over the two (normalized)
    targets. Dropout and batch statistics are active during training only.
    Fully reproducible from (data, config, seed).
    """
    config = config or TrainConfig()
    config.validate()
    if not train_samples or not val_samples:
        raise ValueError("train and validation sets must be non-empty")
    x_train, y_train = samples_to_arrays(train_samples)
    x_val, y_val = samples_to_arrays(val_samples)

    norm = Normalization.fit(x_train, y_train)
    xn, yn = norm.norm_x(x_train), norm.norm_y(y_train)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7A1]))
    optimizer = AdamW(net, lr=config.learning_rate, weight_decay=config.weight_decay)

    n = len(xn)
    history: list[EpochMetrics] = []
    best_state = net.copy_state()
    best_val = float("inf")
    best_age = 0
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if net.use_bn and len(idx) < 2:
                continue  # batch statistics are undefined on a single row
            xb, yb = xn[idx], yn[idx]
            y_hat, cache = net.forward(xb, training=True, rng=rng)
            residual = y_hat - yb
            loss = np.abs(residual).sum(axis=1).mean()
            # Targets are standardized, so a sane loss is O(1); far beyond
            # that the run has blown up even if no NaN appeared yet.
            if not np.isfinite(loss) or loss > 1e8:
                raise TrainingDiverged(
                    f"training loss diverged at epoch {epoch} (loss {loss:.3g}); "
                    f"lower the learning rate (currently {config.learning_rate:g})"
                )
            grad_y = np.sign(residual) / len(idx)
            grads, _ = net.backward(cache, grad_y)
            optimizer.step(grads)

        train_mae = _mae_per_target(net, norm, x_train, y_train)
        val_mae = _mae_per_target(net, norm, x_val, y_val)
        history.append(
            EpochMetrics(epoch, float(train_mae[0]), float(train_mae[1]),
                         float(val_mae[0]), float(val_mae[1]))
        )
        score = float(val_mae.sum())
        if score < best_val - 1e-12:
            best_val = score
            best_state = net.copy_state()
            best_age = 0
        else:
            best_age += 1
            if best_age > config.patience:
                break

    net.load_state(best_state)
    return TrainedModel(net, norm, history, config)


# ---------------------------------------------------------------------------
# Metrics (regression error suite)


@dataclass
class TargetMetrics:
    mae: float
    rmse: float
    r2: float | None
    medae: float
    evs: float | None

    def to_dict(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "r2": self.r2,
                "medae": self.medae, "evs": self.evs}


@dataclass
class ClassMetrics:
    class_low: float
    class_high: float
    count: int
    mae: float


@dataclass
class MetricReport:
    weight: TargetMetrics
    length: TargetMetrics
    n_samples: int
    weight_classes: list[ClassMetrics] = field(default_factory=list)
    length_classes: list[ClassMetrics] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "weight": self.weight.to_dict(),
            "length": self.length.to_dict(),
            "weight_classes": [vars(c) for c in self.weight_classes],
            "length_classes": [vars(c) for c in self.length_classes],
        }


def _target_metrics(y: np.ndarray, y_hat: np.ndarray) -> TargetMetrics:
    err = y_hat - y
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err**2).mean()))
    medae = float(np.median(np.abs(err)))
    if len(y) < 2 or np.var(y) == 0:
        r2 = evs = None
    else:
        r2 = float(1.0 - (err**2).sum() / ((y - y.mean()) ** 2).sum())
        evs = float(1.0 - np.var(err) / np.var(y))
    return TargetMetrics(mae, rmse, r2, medae, evs)


def _class_breakdown(ref: np.ndarray, abs_err: np.ndarray, ratio: float) -> list[ClassMetrics]:
    classes: dict[int, list[float]] = {}
    for value, err in zip(ref, abs_err):
        classes.setdefault(class_index(float(value), ratio), []).append(float(err))
    out = []
    for idx in sorted(classes):
        lo, hi = class_edges(idx, ratio)
        errs = classes[idx]
        out.append(ClassMetrics(lo, hi, len(errs), float(np.mean(errs))))
    return out


def evaluate(
    model: TrainedModel,
    samples: Sequence[DifferentialSample],
    bins: BinSpec | None = None,
) -> MetricReport:
    """MAE / RMSE / R^2 / MedAE / EVS per target, plus per-class MAE.

    Classes are the geometric weight/length bins of the reference section's
    absolute measurements; R^2 and EVS are reported as absent when undefined
    (single sample or constant targets).
    """
    if not samples:
        raise ValueError("dataset must be non-empty")
    bins = bins or BinSpec()
    x, y = samples_to_arrays(samples)
    y_hat = model.predict(x)
    ref_w = np.array([s.ref_w_g for s in samples])
    ref_l = np.array([s.ref_l_mm for s in samples])
    return MetricReport(
        weight=_target_metrics(y[:, 0], y_hat[:, 0]),
        length=_target_metrics(y[:, 1], y_hat[:, 1]),
        n_samples=len(samples),
        weight_classes=_class_breakdown(ref_w, np.abs(y_hat[:, 0] - y[:, 0]), bins.weight_class),
        length_classes=_class_breakdown(ref_l, np.abs(y_hat[:, 1] - y[:, 1]), bins.length_class),
    )


# ---------------------------------------------------------------------------
# Persistence


def save_model(model: TrainedModel, path: str | Path) -> None:
    net = model.net
    doc = {
        "version": MODEL_FORMAT_VERSION,
        "spec": net.spec.to_dict(),
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "batch_norm": (
            {
                "gamma": net.gamma.tolist(),
                "beta": net.beta.tolist(),
                "running_mean": net.running_mean.tolist(),
                "running_var": net.running_var.tolist(),
            }
            if net.use_bn
            else None
        ),
        "normalization": {
            "x_mean": model.normalization.x_mean.tolist(),
            "x_scale": model.normalization.x_scale.tolist(),
            "y_mean": model.normalization.y_mean.tolist(),
            "y_scale": model.normalization.y_scale.tolist(),
        },
        "feature_names": list(FEATURE_NAMES),
        "target_names": list(TARGET_NAMES),
        "train_config": model.train_config.to_dict() if model.train_config else None,
        "history": [vars(m) for m in model.history],
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_model(path: str | Path) -> TrainedModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version: {doc.get('version')}")
    net = MLP(NetworkSpec.from_dict(doc["spec"]))
    net.weights = [np.array(w) for w in doc["weights"]]
    net.biases = [np.array(b) for b in doc["biases"]]
    if doc["batch_norm"] is not None:
        bn = doc["batch_norm"]
        net.gamma = np.array(bn["gamma"])
        net.beta = np.array(bn["beta"])
        net.running_mean = np.array(bn["running_mean"])
        net.running_var = np.array(bn["running_var"])
    norm = Normalization(
        x_mean=np.array(doc["normalization"]["x_mean"]),
        x_scale=np.array(doc["normalization"]["x_scale"]),
        y_mean=np.array(doc["normalization"]["y_mean"]),
        y_scale=np.array(doc["normalization"]["y_scale"]),
    )
    history = [EpochMetrics(**m) for m in doc.get("history", [])]
    config = TrainConfig.from_dict(doc["train_config"]) if doc.get("train_config") else None
    return TrainedModel(net, norm, history, config)


# ---------------------------------------------------------------------------
# Hyperparameter search (seeded random search)


@dataclass
class SearchSpace:
    learning_rate: tuple[float, float] = (3e-4, 1e-2)  # log-uniform
    weight_decay: tuple[float, float] = (1e-4, 3e-2)  # log-uniform
    dropout: tuple[float, ...] = (0.0, 0.05, 0.1, 0.2)
    batch_size: tuple[int, ...] = (128, 256, 512)


@dataclass
class Trial:
    index: int
    config: TrainConfig
    dropout: float
    val_mae_weight: float
    val_mae_length: float

    @property
    def score(self) -> float:
        return self.val_mae_weight + self.val_mae_length


def hyper_search(
    train_samples: Sequence[DifferentialSample],
    val_samples: Sequence[DifferentialSample],
    spec: NetworkSpec,
    budget: int,
    seed: int = 0,
    space: SearchSpace | None = None,
    base_config: TrainConfig | None = None,
) -> tuple[Trial, list[Trial]]:
    """Random search over (lr, weight decay, dropout, batch size).

    Trial 0 always evaluates the default configuration, so the winner can
    never be worse than it; every trial is fully seeded and the sampled
    stream is a prefix, so growing the budget only extends the leaderboard.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    space = space or SearchSpace()
    base_config = base_config or TrainConfig()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EA]))
    trials: list[Trial] = []
    for index in range(budget):
        if index == 0:
            config = replace(base_config, seed=seed)
            dropout = spec.dropout_rate
        else:
            lr = float(np.exp(rng.uniform(*np.log(space.learning_rate))))
            wd = float(np.exp(rng.uniform(*np.log(space.weight_decay))))
            dropout = float(rng.choice(space.dropout))
            batch = int(rng.choice(space.batch_size))
            config = replace(
                base_config, learning_rate=lr, weight_decay=wd, batch_size=batch, seed=seed
            )
        trial_spec = replace_spec_dropout(spec, dropout)
        net = build_network(trial_spec, seed=seed + index)
        model = train(net, train_samples, val_samples, config)
        last = min(model.history, key=lambda m: m.val_mae_weight + m.val_mae_length)
        trials.append(
            Trial(index, config, dropout, last.val_mae_weight, last.val_mae_length)
        )
    leaderboard = sorted(trials, key=lambda t: (t.score, t.index))
    return leaderboard[0], leaderboard


def replace_spec_dropout(spec: NetworkSpec, dropout: float) -> NetworkSpec:
    return NetworkSpec(
        input_dim=spec.input_dim,
        hidden=spec.hidden,
        batch_norm_after_first_hidden=spec.batch_norm_after_first_hidden,
        dropout_rate=dropout,
        output_dim=spec.output_dim,
    )
