"""Focal-loss training, leave-one-environment-out evaluation and test-time augmentation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from .augment import AugmentPolicy, augment_sample, inject_noise, time_shift
from .model import FALL, FallDetector, ModelConfig, Probabilities, save_checkpoint, to_batch
from .preprocess import CsiTensor, DatasetIndex, Stage, standardize_array

log = logging.getLogger(__name__)

PT_FLOOR = 1e-12


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(5e-4, gt=0)
    min_lr: float = Field(1e-6, ge=0)
    epochs: int = Field(50, ge=0)
    batch_size: int = Field(16, ge=1)
    focal_gamma: float = Field(2.0, ge=0)
    focal_alpha: float = Field(3.0, gt=0)
    alpha_mode: Literal["fall", "symmetric"] = "fall"
    seed: int = 0
    augment: AugmentPolicy = AugmentPolicy()
    tta: bool = False
    tta_k: int = Field(5, ge=1)


class ConfigurationError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


# --- loss -----------------------------------------------------------------------

def _alpha_t(is_fall: bool, alpha: float, mode: str = "fall") -> float:
    return alpha if (is_fall or mode == "symmetric") else 1.0


def focal_loss(probs, label, gamma: float = 2.0, alpha: float = 3.0, alpha_mode: str = "fall") -> float:
    """Scalar focal loss for one prediction.

    ``probs`` is a :class:`Probabilities` or a (p_nonfall, p_fall) pair;
    ``label`` is "fall"/"nonfall" or the class index.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if isinstance(probs, Probabilities):
        p_fall, p_nonfall = probs.p_fall, probs.p_nonfall
    else:
        p_nonfall, p_fall = float(probs[0]), float(probs[1])
    is_fall = label == "fall" or (not isinstance(label, str) and int(label) == FALL)
    p_t = max(p_fall if is_fall else p_nonfall, PT_FLOOR)
    return -_alpha_t(is_fall, alpha, alpha_mode) * (1.0 - p_t) ** gamma * math.log(p_t)


def focal_loss_logits(logits: torch.Tensor, targets: torch.Tensor, gamma: float = 2.0, alpha: float = 3.0,
                      alpha_mode: str = "fall", reduction: str = "mean") -> torch.Tensor:
    """Batched focal loss on two-class logits; ``targets`` holds class indices (fall = 1)."""
    logp = F.log_softmax(logits, dim=-1).gather(1, targets.view(-1, 1)).squeeze(1)
    logp = logp.clamp(min=math.log(PT_FLOOR))
    p_t = logp.exp()
    alpha_t = torch.ones_like(p_t)
    if alpha_mode == "symmetric":
        alpha_t = alpha_t * alpha
    else:
        alpha_t = torch.where(targets == FALL, torch.full_like(p_t, alpha), alpha_t)
    loss = -alpha_t * (1 - p_t).pow(gamma) * logp
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    return loss


def cosine_lr(epoch: int, epochs: int, lr: float, min_lr: float) -> float:
    """Cosine decay from ``lr`` at epoch 0 to ``min_lr`` at the last epoch."""
    if epochs <= 1:
        return lr
    return min_lr + 0.5 * (lr - min_lr) * (1 + math.cos(math.pi * epoch / (epochs - 1)))


# --- splits -----------------------------------------------------------------------

@dataclass
class Fold:
    environment_id: str
    train_ids: list[str]
    test_ids: list[str]


def loeo_folds(index: DatasetIndex) -> list[Fold]:
    envs = index.env_ids()
    if len(envs) < 2:
        raise ConfigurationError(f"leave-one-environment-out needs >= 2 environments, got {envs}")
    folds = []
    for env in envs:
        test = [s.sample_id for s in index.samples if s.environment_id == env]
        train = [s.sample_id for s in index.samples if s.environment_id != env]
        folds.append(Fold(env, train, test))
    return folds


def random_split(index: DatasetIndex, test_fraction: float = 0.2, seed: int = 0) -> Fold:
    ids = [s.sample_id for s in index.samples]
    order = np.random.default_rng(seed).permutation(len(ids))
    n_test = int(round(test_fraction * len(ids)))
    test = sorted(ids[i] for i in order[:n_test])
    train = sorted(ids[i] for i in order[n_test:])
    return Fold("random", train, test)


# --- metrics ----------------------------------------------------------------------

@dataclass
class Metrics:
    """Fall is the positive class. ``confusion`` rows are true (nonfall, fall), columns predicted."""

    confusion: list[list[int]]
    accuracy: float
    precision: float | None
    recall: float | None

    @classmethod
    def from_confusion(cls, confusion) -> "Metrics":
        (tn, fp), (fn, tp) = confusion
        n = tn + fp + fn + tp
        acc = (tp + tn) / n if n else 0.0
        prec = tp / (tp + fp) if tp + fp else None
        rec = tp / (tp + fn) if tp + fn else None
        return cls([[int(tn), int(fp)], [int(fn), int(tp)]], acc, prec, rec)

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "Metrics":
        cm = [[0, 0], [0, 0]]
        for t, p in zip(y_true, y_pred):
            cm[int(t)][int(p)] += 1
        return cls.from_confusion(cm)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["precision_defined"] = self.precision is not None
        d["recall_defined"] = self.recall is not None
        return d


# --- training ---------------------------------------------------------------------

@dataclass
class TrainResult:
    model: FallDetector
    loss_log: list[dict] = field(default_factory=list)


def init_model(cfg: ModelConfig, seed: int) -> FallDetector:
    torch.manual_seed(seed)
    return FallDetector(cfg)


def load_arrays(index: DatasetIndex, ids) -> tuple[np.ndarray, np.ndarray]:
    by_id = index.by_id()
    xs = np.stack([index.load(i).data for i in ids])
    ys = np.array([FALL if by_id[i].label == "fall" else 1 - FALL for i in ids], dtype=np.int64)
    return xs, ys


def _augmented_batch(xs, idx, policy: AugmentPolicy, seed: int, epoch: int) -> torch.Tensor:
    out = []
    for i in idx:
        # independent stream per (seed, epoch, sample) so workers can be split freely
        rng = np.random.default_rng([policy.rng_seed, seed, epoch, int(i)])
        t = augment_sample(CsiTensor(xs[i], Stage.instance_normalized), policy, rng)
        out.append(t.data)
    return torch.from_numpy(standardize_array(np.stack(out)))


def train_model(config: TrainConfig, train_ids, index: DatasetIndex, model_cfg: ModelConfig | None = None,
                checkpoint_path=None, model: FallDetector | None = None) -> TrainResult:
    """Minibatch Adam on the focal loss with a per-epoch cosine learning rate."""
    model_cfg = model_cfg or ModelConfig()
    train_ids = list(train_ids)
    if not train_ids:
        raise ConfigurationError("empty training set")
    xs, ys = load_arrays(index, train_ids)
    if len(set(ys.tolist())) < 2:
        raise ConfigurationError("training set must contain both fall and nonfall samples")
    model = model or init_model(model_cfg, config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    order_rng = np.random.default_rng(config.seed)
    history = []
    targets = torch.from_numpy(ys)
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr, config.min_lr)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        order = order_rng.permutation(len(train_ids))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = _augmented_batch(xs, idx, config.augment, config.seed, epoch)
            loss = focal_loss_logits(model(xb), targets[idx], config.focal_gamma, config.focal_alpha,
                                     config.alpha_mode)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss.item()} at epoch {epoch}, batch starting {start}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        row = {"epoch": epoch, "lr": lr, "train_loss": total / count}
        log.info("epoch %d lr %.3g loss %.5f", epoch, lr, row["train_loss"])
        history.append(row)
    model.eval()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, {"train_config": config.model_dump(mode="json")})
    return TrainResult(model, history)


def write_loss_log(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "lr", "train_loss"])
        w.writeheader()
        for row in history:
            w.writerow({"epoch": row["epoch"], "lr": repr(row["lr"]), "train_loss": repr(row["train_loss"])})


# --- inference --------------------------------------------------------------------

def _proba(model: FallDetector, batch: np.ndarray) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        return F.softmax(model(to_batch(standardize_array(batch))), dim=-1).numpy()


def tta_versions(x: CsiTensor, k: int, rng: np.random.Generator, sigma: float = 0.01,
                 max_shift: int = 10) -> list[np.ndarray]:
    """Identity plus k-1 light perturbations alternating noise and time shift."""
    if k < 1:
        raise ValueError("k must be >= 1")
    out = [x.data]
    for j in range(1, k):
        if j % 2 == 1:
            out.append(inject_noise(x, sigma, rng).data)
        else:
            delta = int(rng.choice([d for d in range(-max_shift, max_shift + 1) if d]))
            out.append(time_shift(x, delta).data)
    return out


def tta_predict(model: FallDetector, x: CsiTensor, k: int = 5, rng: np.random.Generator | None = None) -> Probabilities:
    """Average class probabilities over ``k`` versions of an instance-normalized tensor."""
    if x.stage != Stage.instance_normalized:
        raise ValueError(f"tta_predict expects an instance-normalized tensor, got {x.stage.value}")
    rng = rng if rng is not None else np.random.default_rng(0)
    p = _proba(model, np.stack(tta_versions(x, k, rng))).astype(np.float64).mean(axis=0)
    return Probabilities(float(p[FALL]), float(p[1 - FALL]))


def predict_ids(model: FallDetector, ids, index: DatasetIndex, tta: bool = False, k: int = 5, seed: int = 0,
                batch_size: int = 32) -> np.ndarray:
    """p_fall per sample id."""
    xs, _ = load_arrays(index, ids)
    if tta:
        out = []
        for i in range(len(ids)):
            rng = np.random.default_rng([seed, i])
            out.append(tta_predict(model, CsiTensor(xs[i], Stage.instance_normalized), k, rng).p_fall)
        return np.array(out)
    return np.concatenate([_proba(model, xs[s:s + batch_size])[:, FALL] for s in range(0, len(xs), batch_size)])


def evaluate(model: FallDetector, test_ids, index: DatasetIndex, tta: bool = False, k: int = 5,
             seed: int = 0) -> Metrics:
    test_ids = list(test_ids)
    if not test_ids:
        raise ConfigurationError("empty test set")
    p_fall = predict_ids(model, test_ids, index, tta, k, seed)
    by_id = index.by_id()
    y_true = [FALL if by_id[i].label == "fall" else 1 - FALL for i in test_ids]
    # argmax over two classes; ties go to nonfall
    y_pred = [FALL if p > 0.5 else 1 - FALL for p in p_fall]
    return Metrics.from_predictions(y_true, y_pred)


def run_loeo(index: DatasetIndex, config: TrainConfig, model_cfg: ModelConfig, run_dir=None,
             folds: list[Fold] | None = None) -> dict:
    """Train/evaluate one model per held-out environment; writes artifacts when ``run_dir`` is given."""
    folds = folds or loeo_folds(index)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    fold_rows = []
    for fold in folds:
        ckpt = run_dir / f"checkpoint_{fold.environment_id}.ckpt" if run_dir else None
        result = train_model(config, fold.train_ids, index, model_cfg, ckpt)
        if run_dir is not None:
            write_loss_log(run_dir / f"loss_log_{fold.environment_id}.csv", result.loss_log)
        metrics = evaluate(result.model, fold.test_ids, index, config.tta, config.tta_k, config.seed)
        env_meta = (index.environments or {}).get(fold.environment_id, {})
        fold_rows.append({
            "environment_id": fold.environment_id,
            "nlos": bool(env_meta.get("nlos", False)),
            "n_train": len(fold.train_ids),
            "n_test": len(fold.test_ids),
            "final_train_loss": result.loss_log[-1]["train_loss"] if result.loss_log else None,
            "metrics": metrics.to_dict(),
        })
        log.info("fold %s: acc %.4f", fold.environment_id, metrics.accuracy)
    accs = [r["metrics"]["accuracy"] for r in fold_rows]
    total = np.sum([r["metrics"]["confusion"] for r in fold_rows], axis=0).tolist()
    report = {
        "folds": fold_rows,
        "aggregate": {
            "mean_accuracy": float(np.mean(accs)),
            "pooled": Metrics.from_confusion(total).to_dict(),
        },
    }
    if run_dir is not None:
        (run_dir / "metrics.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return report
