"""Compound loss, BERT-style input masking, AdamW and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data import WindowBatch
from .errors import ConfigError, DivergenceError
from .metrics import EpochTimer
from .model import NilmModel, forward
from .numerics import RngStream, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    lam: float = 1.0
    p_max: float = 1.0
    on_threshold: float = 0.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if not self.p_max > self.on_threshold >= 0:
            raise ConfigError(f"need p_max > on_threshold >= 0, got {self.p_max}, {self.on_threshold}")

    @property
    def on_level(self) -> float:
        return self.on_threshold / self.p_max


@dataclass(frozen=True)
class MaskingConfig:
    ratio: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError(f"masking ratio must lie in [0, 1], got {self.ratio}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    patience: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")


# ---------------------------------------------------------------- loss


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _masked_softmax(logits, w):
    shifted = np.where(w, logits, -np.inf)
    top = shifted.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(w, np.exp(np.where(w, logits - top, 0.0)), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    p = e / np.where(total > 0, total, 1.0)
    log_p = np.where(w, logits - top - np.log(np.where(total > 0, total, 1.0)), 0.0)
    return p, log_p


def loss_terms(target, pred, state_label, state_score, cfg: LossConfig, weights=None):
    """Per-term values of the compound loss plus gradients w.r.t. pred and score.

    Arrays are ``[T]`` or ``[B, T]``; each window contributes its own
    normalised loss and windows are averaged.  ``weights`` (0/1) restricts
    every term to the selected positions, ``T`` becoming the selected count.
    """
    target = np.atleast_2d(np.asarray(target, dtype=float))
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    label = np.atleast_2d(np.asarray(state_label, dtype=float))
    score = np.atleast_2d(np.asarray(state_score, dtype=float))
    w = np.ones_like(pred, dtype=bool) if weights is None else np.atleast_2d(np.asarray(weights, dtype=bool))
    counts = w.sum(axis=-1, keepdims=True).astype(float)
    live = counts[:, 0] > 0
    n_live = int(live.sum())
    if n_live == 0:
        zeros = np.zeros_like(pred)
        return {"mse": 0.0, "state": 0.0, "kl": 0.0, "l1": 0.0}, zeros, zeros
    inv_n = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0) / n_live
    wf = w.astype(float)

    diff = pred - target
    mse = (wf * diff**2 * inv_n).sum()
    g_pred = 2.0 * wf * diff * inv_n

    margin = -label * score
    state = (wf * _softplus(margin) * inv_n).sum()
    g_score = wf * (-label) * _sigmoid(margin) * inv_n

    p, log_p = _masked_softmax(target / cfg.tau, w)
    q, log_q = _masked_softmax(pred / cfg.tau, w)
    kl_rows = (p * (log_p - log_q)).sum(axis=-1)
    kl = kl_rows[live].sum() / n_live
    g_pred = g_pred + np.where(live[:, None], (q - p) / cfg.tau, 0.0) / n_live

    hard = np.where(score >= 0.0, 1.0, -1.0)
    in_o = (label > 0) | (hard != label)
    sel = wf * in_o
    l1 = cfg.lam * (sel * np.abs(diff) * inv_n).sum()
    g_pred = g_pred + cfg.lam * sel * np.sign(diff) * inv_n

    return {"mse": float(mse), "state": float(state), "kl": float(kl), "l1": float(l1)}, g_pred, g_score


def compound_loss(
    target,
    pred: Tensor,
    state_label,
    state_score: Tensor,
    cfg: LossConfig,
    weights=None,
) -> Tensor:
    """MSE + state log-loss + temperature-scaled KL + lambda-weighted L1 over O.

    ``target`` is ground-truth normalised power, ``pred`` the prediction,
    ``state_label`` the {-1,+1} labels and ``state_score`` the soft state score
    whose sign is the predicted state.  O holds positions labelled on or whose
    predicted state is wrong.
    """
    terms, g_pred, g_score = loss_terms(target, pred.data, state_label, state_score.data, cfg, weights)
    value = sum(terms.values())
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss {terms}")
    g_pred = g_pred.reshape(pred.shape)
    g_score = g_score.reshape(state_score.shape)
    return nx._make(np.array(value), "compound_loss", (pred, state_score), lambda g: (g * g_pred, g * g_score))


# ---------------------------------------------------------------- masking


def apply_mask(inputs: np.ndarray, cfg: MaskingConfig, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Select each position independently with probability ``cfg.ratio``.

    Returns ``(masked_inputs, mask)``; selected raw values are zeroed so the
    convolution cannot read them, and the model swaps in its mask token.
    """
    inputs = np.asarray(inputs, dtype=float)
    if cfg.ratio == 0.0:
        mask = np.zeros(inputs.shape, dtype=bool)
    elif cfg.ratio == 1.0:
        mask = np.ones(inputs.shape, dtype=bool)
    else:
        mask = rng.uniform(inputs.shape) < cfg.ratio
    return np.where(mask, 0.0, inputs), mask


# ---------------------------------------------------------------- AdamW


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p.data
        p.data -= state.lr * update
        if not np.all(np.isfinite(p.data)):
            raise DivergenceError(f"parameter {name} became non-finite at step {state.t}")


# ---------------------------------------------------------------- fit


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_loss: float
    seconds: float


@dataclass
class FitResult:
    model: NilmModel
    history: list[EpochRecord]
    best_epoch: int
    optimizer: OptimizerState
    initial_loss: float = float("nan")
    final_loss: float = float("nan")


def evaluate_loss(model: NilmModel, batch: WindowBatch, loss_cfg: LossConfig, batch_size: int = 64) -> float:
    """Eval-mode compound loss over all positions, averaged over windows."""
    if len(batch) == 0:
        return float("nan")
    total = 0.0
    with nx.no_grad():
        for start in range(0, len(batch), batch_size):
            sl = slice(start, start + batch_size)
            pred, score = forward(Tensor(batch.inputs[sl]), model, on_level=loss_cfg.on_level)
            terms, _, _ = loss_terms(batch.targets[sl], pred.data, batch.states[sl], score.data, loss_cfg)
            total += sum(terms.values()) * len(batch.inputs[sl])
    return total / len(batch)


def fit(
    model: NilmModel,
    train: WindowBatch,
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    mask_cfg: MaskingConfig,
    val: WindowBatch | None = None,
    on_epoch=None,
) -> FitResult:
    """Masked training with AdamW; returns the parameters of the best epoch.

    Loss is taken over the masked positions of each window (all positions
    when the ratio is 0).  The best epoch is chosen by validation loss when a
    non-empty ``val`` is given, otherwise by training loss.  ``initial_loss``
    and ``final_loss`` are eval-mode losses on ``train`` before the first step
    and after restoring the best parameters.
    """
    if len(train) == 0:
        raise ConfigError("training set is empty")
    rng = RngStream(cfg.seed)
    params = model.parameters()
    opt = OptimizerState(
        lr=cfg.lr, beta1=cfg.betas[0], beta2=cfg.betas[1], eps=cfg.eps, weight_decay=cfg.weight_decay
    )
    timer = EpochTimer()
    history: list[EpochRecord] = []
    best = (math.inf, 0, model.state_dict())
    stale = 0
    initial_loss = evaluate_loss(model, train, loss_cfg)
    for epoch in range(1, cfg.epochs + 1):
        timer.begin()
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[start : start + cfg.batch_size])
            inputs, mask = apply_mask(train.inputs[idx], mask_cfg, rng)
            weights = mask if mask_cfg.ratio > 0 else None
            if weights is not None and not weights.any():
                continue
            for p in params.values():
                p.zero_grad()
            pred, score = forward(
                Tensor(inputs), model, rng, training=True, mask=mask, on_level=loss_cfg.on_level, clamp=False
            )
            loss = compound_loss(train.targets[idx], pred, train.states[idx], score, loss_cfg, weights)
            nx.backward(loss)
            adamw_step(params, {n: p.grad for n, p in params.items() if p.grad is not None}, opt)
            losses.append(float(loss.data))
        train_loss = float(np.mean(losses)) if losses else float("nan")
        val_loss = evaluate_loss(model, val, loss_cfg) if val is not None and len(val) else float("nan")
        seconds = timer.end()
        if not math.isfinite(train_loss):
            raise DivergenceError(f"epoch {epoch}: training loss is {train_loss}")
        if val is not None and len(val) and not math.isfinite(val_loss):
            raise DivergenceError(f"epoch {epoch}: validation loss is {val_loss}")
        record = EpochRecord(epoch, train_loss, val_loss, seconds)
        history.append(record)
        log.debug("epoch %d loss %.6f val %.6f (%.2fs)", epoch, train_loss, val_loss, seconds)
        if on_epoch is not None:
            on_epoch(record)
        score_now = val_loss if math.isfinite(val_loss) else train_loss
        if score_now < best[0]:
            best = (score_now, epoch, model.state_dict())
            stale = 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                break
    model.load_state_dict(best[2])
    return FitResult(
        model=model,
        history=history,
        best_epoch=best[1],
        optimizer=opt,
        initial_loss=initial_loss,
        final_loss=evaluate_loss(model, train, loss_cfg),
    )
