"""Optimization loop: AdamW, plateau LR schedule, early stopping,
5-fold cross-validated training, grid search, metrics, ridge baseline.

Training is deterministic: every random choice (shuffles, dropout,
parameter init) flows from the config seed through named stream
derivation, so a (seed, config, data) triple fully determines every
reported number.  Folds and grid cells are independent jobs with
isolated derived seeds and may run in parallel; results are merged in
job order, so thread count never changes the output.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import scipy.linalg

from . import model as model_mod
from . import pipeline
from .embed_store import EmbeddingMatrix
from .errors import DataError, NumericalError
from .model import ModelConfig, ModelParams, loss_forward
from .ndmath import Mode
from .pipeline import PolymerRecord, SplitPlan, Standardizer, ZeroVarianceError
from .rng import Stream, derive_key


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    hidden: int = 512
    rank: int = 8
    alpha: float = 16.0
    lr: float = 1e-4
    weight_decay: float = 1e-5
    dropout: float = 0.0
    loss_kind: str = "mse"
    huber_delta: float = 1.0
    max_epochs: int = 500
    patience_early: int = 20
    patience_lr: int = 10
    lr_factor: float = 0.5
    min_lr: float = 1e-6
    min_delta: float = 1e-5
    seed: int = 42

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1:
            raise DataError("batch_size and max_epochs must be positive")
        if not 0.0 < self.lr_factor < 1.0:
            raise DataError("lr_factor must be in (0, 1)")
        if self.loss_kind not in model_mod.LOSS_KINDS:
            raise DataError(f"unknown loss kind {self.loss_kind!r}")

    def sort_key(self) -> tuple:
        """Lexicographic order over declared fields, used for tie-breaks."""
        return tuple(getattr(self, f) for f in self.__dataclass_fields__)


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One decoupled-weight-decay Adam update, in place:
    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)."""
    state.t += 1
    bias1 = 1.0 - beta1**state.t
    bias2 = 1.0 - beta2**state.t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise DataError(f"gradient shape {g.shape} != param shape {theta.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + eps)
        theta -= lr * (update + weight_decay * theta)


# ---------------------------------------------------------------------------
# Schedules


class PlateauScheduler:
    """Multiply lr by `factor` after `patience` epochs without an
    improvement greater than `min_delta`; never below `min_lr`."""

    def __init__(self, lr: float, factor: float, patience: int, min_lr: float, min_delta: float):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.min_delta = min_delta
        self.best = math.inf
        self.bad_epochs = 0

    def update(self, val_loss: float) -> float:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.min_lr, self.lr * self.factor)
                self.bad_epochs = 0
        return self.lr


class EarlyStopper:
    """Stop after `patience` epochs without an improvement greater than
    `min_delta`.  Tracks the strict argmin epoch (1-based, first
    occurrence) independently of the patience threshold."""

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_strict = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0
        self.epoch = 0

    def update(self, val_loss: float) -> bool:
        """Record one epoch's validation loss; True means stop now."""
        self.epoch += 1
        if val_loss < self.best_strict:
            self.best_strict = val_loss
            self.best_epoch = self.epoch
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


# ---------------------------------------------------------------------------
# Metrics


def r2(y: np.ndarray, y_hat: np.ndarray) -> float:
    """Coefficient of determination, 1 - SS_res / SS_tot."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.size < 2:
        raise DataError(f"r2 needs two equal-length arrays of size >= 2, got {y.shape}")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ZeroVarianceError("r2 undefined for constant targets")
    return 1.0 - float(np.sum((y - y_hat) ** 2)) / ss_tot


def mae(y: np.ndarray, y_hat: np.ndarray) -> float:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.size < 1:
        raise DataError("mae needs two equal-length nonempty arrays")
    return float(np.mean(np.abs(y - y_hat)))


# ---------------------------------------------------------------------------
# Ridge baseline


def ridge_fit(X: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """w = (X^T X + lam I)^-1 X^T y via a symmetric positive-definite solve."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if lam < 0:
        raise DataError("ridge penalty must be nonnegative")
    gram = X.T @ X + lam * np.eye(X.shape[1])
    try:
        return scipy.linalg.solve(gram, X.T @ y, assume_a="pos")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise NumericalError(f"ridge system is singular (lam={lam:g}): {exc}") from exc


def ridge_predict(X: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.asarray(X, dtype=np.float64) @ w


# ---------------------------------------------------------------------------
# Reports


@dataclass
class FoldReport:
    fold: int
    best_val_loss: float
    best_epoch: int
    r2: float
    mae: float
    mae_original: float
    checkpoint_path: str | None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunReport:
    property: str
    config: TrainConfig
    folds: list[FoldReport]
    r2_mean: float
    r2_std: float
    mae_mean: float
    mae_std: float
    mae_original_mean: float
    mae_original_std: float

    def to_dict(self) -> dict:
        return {
            "property": self.property,
            "config": asdict(self.config),
            "folds": [f.to_dict() for f in self.folds],
            "r2_mean": self.r2_mean,
            "r2_std": self.r2_std,
            "mae_mean": self.mae_mean,
            "mae_std": self.mae_std,
            "mae_original_mean": self.mae_original_mean,
            "mae_original_std": self.mae_original_std,
        }


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def _aggregate(prop: str, config: TrainConfig, folds: list[FoldReport]) -> RunReport:
    r2_m, r2_s = _mean_std([f.r2 for f in folds])
    mae_m, mae_s = _mean_std([f.mae for f in folds])
    mo_m, mo_s = _mean_std([f.mae_original for f in folds])
    return RunReport(prop, config, folds, r2_m, r2_s, mae_m, mae_s, mo_m, mo_s)


# ---------------------------------------------------------------------------
# Cross-validated training


class _PropertyData:
    """Targets in training (transformed) space plus aligned embedding rows."""

    def __init__(
        self,
        records: list[PolymerRecord],
        llm: EmbeddingMatrix,
        uni: EmbeddingMatrix,
        prop: str,
    ):
        subset = pipeline.records_with_property(records, prop)
        if len(subset) < 2 * pipeline.N_FOLDS:
            raise DataError(
                f"property {prop!r} has {len(subset)} labeled records; "
                f"at least {2 * pipeline.N_FOLDS} are required"
            )
        missing = [r.id for r in subset if r.id not in llm or r.id not in uni]
        if missing:
            raise DataError(f"embeddings missing for ids: {missing[:3]} ...")
        self.prop = prop
        self.ids = [r.id for r in subset]
        self.targets = {
            r.id: pipeline.transform_target(r.values[prop], prop) for r in subset
        }
        self.llm = llm
        self.uni = uni

    def tensors(self, ids: list[str]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x_llm = np.stack([self.llm.row(i) for i in ids]).astype(np.float64)
        x_uni = np.stack([self.uni.row(i) for i in ids]).astype(np.float64)
        y = np.array([self.targets[i] for i in ids])
        return x_llm, x_uni, y


def _batches(n: int, batch_size: int, stream: Stream) -> list[np.ndarray]:
    """Shuffled index batches; a trailing singleton is folded into the
    previous batch so train-mode batch norm always sees >= 2 rows."""
    order = list(range(n))
    stream.shuffle(order)
    batches = [np.array(order[i : i + batch_size]) for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def _train_one_fold(
    data: _PropertyData,
    plan: SplitPlan,
    fold: int,
    config: TrainConfig,
    checkpoint_dir: Path | None,
) -> FoldReport:
    train_ids = [pid for f in range(pipeline.N_FOLDS) if f != fold for pid in plan.folds[f]]
    val_ids = plan.folds[fold]
    fold_seed = derive_key(config.seed, "fold", fold)

    scaler = Standardizer.fit(data.targets[i] for i in train_ids)
    x_llm, x_uni, y_raw = data.tensors(train_ids)
    y = np.array([scaler.apply(v) for v in y_raw])
    vx_llm, vx_uni, vy_raw = data.tensors(val_ids)
    vy = np.array([scaler.apply(v) for v in vy_raw])

    mconfig = ModelConfig(
        llm_dim=data.llm.meta.dim,
        uni_dim=data.uni.meta.dim,
        hidden=config.hidden,
        rank=config.rank,
        alpha=config.alpha,
        dropout=config.dropout,
    )
    params = model_mod.init_model(mconfig, fold_seed)
    opt_state = AdamWState()
    scheduler = PlateauScheduler(
        config.lr, config.lr_factor, config.patience_lr, config.min_lr, config.min_delta
    )
    stopper = EarlyStopper(config.patience_early, config.min_delta)
    shuffle_stream = Stream(derive_key(fold_seed, "shuffle"))

    best_params = params.clone()
    best_val = math.inf
    lr = config.lr
    for epoch in range(1, config.max_epochs + 1):
        for bi, batch in enumerate(_batches(len(train_ids), config.batch_size, shuffle_stream)):
            dropout_stream = Stream(derive_key(fold_seed, "dropout", epoch, bi))
            _, grads = model_mod.loss_and_grads(
                params,
                x_llm[batch],
                x_uni[batch],
                y[batch],
                config.loss_kind,
                config.huber_delta,
                Mode.TRAIN,
                dropout_stream,
            )
            adamw_step(params.trainable(), grads, opt_state, lr, config.weight_decay)

        val_pred = model_mod.predict(params, vx_llm, vx_uni)
        val_loss, _ = loss_forward(val_pred, vy, config.loss_kind, config.huber_delta)
        if val_loss < best_val:
            best_val = val_loss
            best_params = params.clone()
        lr = scheduler.update(val_loss)
        if stopper.update(val_loss):
            break

    tx_llm, tx_uni, ty = data.tensors(plan.test_ids)
    pred_z = model_mod.predict(best_params, tx_llm, tx_uni)
    pred_t = np.array([scaler.invert(z) for z in pred_z])
    fold_r2 = r2(ty, pred_t)
    fold_mae = mae(ty, pred_t)
    orig_y = np.array([pipeline.inverse_transform(v, data.prop) for v in ty])
    orig_pred = np.array([pipeline.inverse_transform(v, data.prop) for v in pred_t])
    fold_mae_orig = mae(orig_y, orig_pred)

    path = None
    if checkpoint_dir is not None:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
        path = str(checkpoint_dir / f"{data.prop}_fold{fold}.plym")
        model_mod.save_checkpoint(
            best_params,
            {
                "property": data.prop,
                "fold": fold,
                "epoch": stopper.best_epoch,
                "val_loss": best_val,
                "seed": config.seed,
                "loss_kind": config.loss_kind,
                "target_mean": scaler.mean,
                "target_std": scaler.std,
            },
            path,
        )
    return FoldReport(fold, best_val, stopper.best_epoch, fold_r2, fold_mae, fold_mae_orig, path)


def train_cv(
    records: list[PolymerRecord],
    llm: EmbeddingMatrix,
    uni: EmbeddingMatrix,
    prop: str,
    config: TrainConfig,
    checkpoint_dir: str | Path | None = None,
    threads: int = 1,
) -> RunReport:
    """Train with 5-fold cross-validation and evaluate each fold's best
    checkpoint (argmin validation loss) on the held-out 15% test set."""
    data = _PropertyData(records, llm, uni, prop)
    plan = pipeline.make_split(data.ids, config.seed)
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None

    def job(fold: int) -> FoldReport:
        return _train_one_fold(data, plan, fold, config, ckpt)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            folds = list(pool.map(job, range(pipeline.N_FOLDS)))
    else:
        folds = [job(f) for f in range(pipeline.N_FOLDS)]
    return _aggregate(prop, config, folds)


def grid_search(
    records: list[PolymerRecord],
    llm: EmbeddingMatrix,
    uni: EmbeddingMatrix,
    prop: str,
    configs: list[TrainConfig],
    checkpoint_dir: str | Path | None = None,
    threads: int = 1,
) -> tuple[TrainConfig, list[RunReport]]:
    """Evaluate candidate configs; pick the lowest mean validation loss
    across folds, breaking ties by lexicographic config order."""
    if not configs:
        raise DataError("grid search needs at least one config")
    cells = [
        replace(cfg, seed=derive_key(cfg.seed, "grid-cell", idx))
        for idx, cfg in enumerate(configs)
    ]

    def job(idx: int) -> RunReport:
        cell_dir = None
        if checkpoint_dir is not None:
            cell_dir = Path(checkpoint_dir) / f"cell{idx}"
        return train_cv(records, llm, uni, prop, cells[idx], cell_dir, threads=1)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(job, range(len(cells))))
    else:
        reports = [job(i) for i in range(len(cells))]

    def selection_key(i: int) -> tuple:
        mean_val = float(np.mean([f.best_val_loss for f in reports[i].folds]))
        return (mean_val, configs[i].sort_key())

    best_idx = min(range(len(cells)), key=selection_key)
    return configs[best_idx], reports


# Endpoints of the published finetuning ranges; the Cartesian product
# is the reference hyperparameter grid (128 cells).
REFERENCE_GRID_AXES: dict[str, list] = {
    "batch_size": [8, 64],
    "hidden": [512, 4096],
    "rank": [4, 32],
    "alpha": [4.0, 128.0],
    "lr": [5e-5, 1e-4],
    "weight_decay": [1e-5, 1e-3],
    "dropout": [0.0, 0.5],
}


def reference_grid(base: TrainConfig | None = None) -> list[TrainConfig]:
    return expand_grid(REFERENCE_GRID_AXES, base)


def expand_grid(axes: dict[str, list], base: TrainConfig | None = None) -> list[TrainConfig]:
    """Cartesian product of per-field value lists over a base config."""
    base = base or TrainConfig()
    names = list(axes)
    for name in names:
        if name not in TrainConfig.__dataclass_fields__:
            raise DataError(f"unknown grid field {name!r}")
    configs: list[TrainConfig] = []

    def rec(i: int, acc: dict):
        if i == len(names):
            configs.append(replace(base, **acc))
            return
        for value in axes[names[i]]:
            acc[names[i]] = value
            rec(i + 1, acc)
            del acc[names[i]]

    rec(0, {})
    return configs


# ---------------------------------------------------------------------------
# Ridge baseline over the same split


@dataclass
class RidgeReport:
    property: str
    lam: float
    seed: int
    fold_r2: list[float]
    fold_mae: list[float]
    r2_mean: float
    r2_std: float
    mae_mean: float
    mae_std: float

    def to_dict(self) -> dict:
        return asdict(self)


def ridge_cv(
    records: list[PolymerRecord],
    llm: EmbeddingMatrix,
    uni: EmbeddingMatrix,
    prop: str,
    seed: int,
    lam: float = 1.0,
) -> RidgeReport:
    """Closed-form ridge on concatenated embeddings (plus a constant
    column), using the same split plan and standardization as train_cv."""
    data = _PropertyData(records, llm, uni, prop)
    plan = pipeline.make_split(data.ids, seed)

    def design(ids: list[str]) -> tuple[np.ndarray, np.ndarray]:
        x_llm, x_uni, y = data.tensors(ids)
        X = np.concatenate([x_llm, x_uni, np.ones((len(ids), 1))], axis=1)
        return X, y

    tX, ty = design(plan.test_ids)
    fold_r2: list[float] = []
    fold_mae: list[float] = []
    for fold in range(pipeline.N_FOLDS):
        train_ids = [p for f in range(pipeline.N_FOLDS) if f != fold for p in plan.folds[f]]
        X, y = design(train_ids)
        scaler = Standardizer.fit(y)
        w = ridge_fit(X, np.array([scaler.apply(v) for v in y]), lam)
        pred = np.array([scaler.invert(z) for z in ridge_predict(tX, w)])
        fold_r2.append(r2(ty, pred))
        fold_mae.append(mae(ty, pred))
    r2_m, r2_s = _mean_std(fold_r2)
    mae_m, mae_s = _mean_std(fold_mae)
    return RidgeReport(prop, lam, seed, fold_r2, fold_mae, r2_m, r2_s, mae_m, mae_s)


# ---------------------------------------------------------------------------
# Checkpoint evaluation / prediction


def evaluate_checkpoint(
    params: ModelParams,
    meta: dict,
    records: list[PolymerRecord],
    llm: EmbeddingMatrix,
    uni: EmbeddingMatrix,
) -> dict:
    """Metrics for a saved checkpoint on every labeled record supplied."""
    prop = meta["property"]
    data = _PropertyData(records, llm, uni, prop)
    x_llm, x_uni, y = data.tensors(data.ids)
    scaler = Standardizer(meta["target_mean"], meta["target_std"])
    pred = np.array([scaler.invert(z) for z in model_mod.predict(params, x_llm, x_uni)])
    orig_y = np.array([pipeline.inverse_transform(v, prop) for v in y])
    orig_pred = np.array([pipeline.inverse_transform(v, prop) for v in pred])
    return {
        "property": prop,
        "n": len(data.ids),
        "r2": r2(y, pred),
        "mae": mae(y, pred),
        "mae_original": mae(orig_y, orig_pred),
    }


def predict_checkpoint(
    params: ModelParams,
    meta: dict,
    ids: list[str],
    llm: EmbeddingMatrix,
    uni: EmbeddingMatrix,
) -> list[dict]:
    """Per-id predictions in training space and original units."""
    prop = meta["property"]
    scaler = Standardizer(meta["target_mean"], meta["target_std"])
    x_llm = np.stack([llm.row(i) for i in ids]).astype(np.float64)
    x_uni = np.stack([uni.row(i) for i in ids]).astype(np.float64)
    preds = model_mod.predict(params, x_llm, x_uni)
    out = []
    for pid, z in zip(ids, preds):
        value = scaler.invert(float(z))
        out.append(
            {
                "id": pid,
                "property": prop,
                "prediction": value,
                "prediction_original": pipeline.inverse_transform(value, prop),
            }
        )
    return out
