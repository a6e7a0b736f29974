"""
Training procedures: clean, adversarial, CNI-I+W, TRADES-style and EPGD adversarial fine-tuning.

Every random choice of a run is derived from (seed, purpose, step), so a run is exactly
reproducible from its config, and modes that coincide mathematically (w=0 and clean training,
q=1 CNI-I+W without Gaussian noise and w=1 adversarial training) follow bit-identical parameter
trajectories.
"""
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .attacks import AttackConfig, AttackFamily, attack_draw, project, run_white_box
from .engine import SGD, Gradients, Model, loss_and_gradients, soft_cross_entropy, softmax
from .exceptions import ConfigurationError
from .logging import Logger
from .noise import NoiseDraw
from .smoothing import SmoothingConfig, smooth_predict_batch

if TYPE_CHECKING:
    from .data import Dataset

# purposes for derived seeds
_TRAIN_NOISE, _ATTACK, _BERNOULLI, _INPUT_NOISE, _SHUFFLE = range(5)


class TrainMode(str, Enum):
    CLEAN = "clean"
    ADVERSARIAL = "adversarial"
    CNI_IW = "cni_iw"
    TRADES = "trades"
    EPGD_ADV = "epgd_adv"


class Selection(str, Enum):
    BEST = "best"
    DIVERGED = "diverged"


@dataclass
class TrainConfig:
    mode: TrainMode = TrainMode.CLEAN
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: List[float] = field(default_factory=lambda: [0.5, 0.75])
    lr_gamma: float = 0.1
    w: float = 0.5
    q: float = 0.5
    sigma_train: float = 0.0
    trades_beta: float = 6.0
    selection: Selection = Selection.BEST
    val_attack: bool = True
    seed: int = 0
    attack: AttackConfig = field(default_factory=AttackConfig)

    def __post_init__(self):
        self.mode = TrainMode(self.mode)
        self.selection = Selection(self.selection)
        if not 0.0 <= self.w <= 1.0:
            raise ConfigurationError(f"train.w must lie in [0, 1], got {self.w}")
        if not 0.0 <= self.q <= 1.0:
            raise ConfigurationError(f"train.q must lie in [0, 1], got {self.q}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("train.epochs must be >= 0 and train.batch_size >= 1")
        if self.lr < 0 or self.sigma_train < 0 or self.trades_beta < 0:
            raise ConfigurationError(
                "train.lr, train.sigma_train and train.trades_beta must be >= 0"
            )
        if self.seed < 0:
            raise ConfigurationError(f"train.seed must be non-negative, got {self.seed}")
        if self.mode is not TrainMode.CLEAN and self.attack.family is AttackFamily.NES:
            raise ConfigurationError(
                f"train.attack.family must be white-box for mode {self.mode.value}"
            )


@dataclass
class StepResult:
    loss: float
    clean_loss: Optional[float] = None
    adv_loss: Optional[float] = None
    adversarial_fraction: float = 0.0


@dataclass
class TrainLog:
    rows: List[Dict[str, float]] = field(default_factory=list)

    def column(self, name: str) -> List[float]:
        return [row[name] for row in self.rows]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)


def derived_seed(seed: int, purpose: int, step: int = 0) -> int:
    return int(np.random.SeedSequence([seed, purpose, step]).generate_state(1)[0])


def train_draw(cfg: TrainConfig, step: int) -> NoiseDraw:
    """Layer noise of one training step, shared by its clean and adversarial forwards."""
    return NoiseDraw(derived_seed(cfg.seed, _TRAIN_NOISE), step)


def step_attack(cfg: TrainConfig, step: int) -> AttackConfig:
    """Attack used at a training step; epgd_adv mode always runs EPGD."""
    attack = replace(cfg.attack, seed=derived_seed(cfg.seed, _ATTACK, step))
    if cfg.mode is TrainMode.EPGD_ADV:
        attack = replace(attack, family=AttackFamily.EPGD)
    return attack


def bernoulli_mask(cfg: TrainConfig, step: int, size: int) -> np.ndarray:
    """B ~ Ber(q) per example: which examples receive the adversarial perturbation."""
    rng = np.random.default_rng(derived_seed(cfg.seed, _BERNOULLI, step))
    return rng.random(size) < cfg.q


def _combine(a: Gradients, b: Gradients, wa: float, wb: float) -> Gradients:
    params = [wa * p + wb * q for p, q in zip(a.params, b.params)]
    keys = {*a.alphas, *b.alphas}
    alphas = {k: wa * a.alphas.get(k, 0.0) + wb * b.alphas.get(k, 0.0) for k in keys}
    return Gradients(wa * a.inputs, params, alphas)


def apply_gradients(model: Model, optimizer: SGD, grads: Gradients):
    """Update weights and learnable noise scales; scales are clamped at 0."""
    params = model.parameters()
    learnable = [i for i in model.noisy_layers() if model.noise[i].learnable]
    values = params + [np.array(model.noise[i].alpha) for i in learnable]
    gradients = grads.params + [np.array(grads.alphas.get(i, 0.0)) for i in learnable]
    mask = [True] * len(params) + [False] * len(learnable)
    updated = optimizer.step(values, gradients, mask)
    model.set_parameters(updated[: len(params)])
    for index, value in zip(learnable, updated[len(params) :]):
        model.noise[index].alpha = max(0.0, float(value))


def clean_step(model, batch, labels, cfg: TrainConfig, optimizer: SGD, step: int = 0) -> StepResult:
    loss, grads = loss_and_gradients(model, batch, labels, train_draw(cfg, step))
    apply_gradients(model, optimizer, grads)
    return StepResult(loss, clean_loss=loss)


def adversarial_training_step(
    model, batch, labels, cfg: TrainConfig, optimizer: SGD, step: int = 0
) -> StepResult:
    """(1 - w) CE(f(x), y) + w CE(f(x_adv), y) with x_adv crafted against the current model."""
    if cfg.w == 0:
        return clean_step(model, batch, labels, cfg, optimizer, step)
    draw = train_draw(cfg, step)
    x_adv = run_white_box(model, batch, labels, step_attack(cfg, step))
    clean_loss, clean_grads = loss_and_gradients(model, batch, labels, draw)
    adv_loss, adv_grads = loss_and_gradients(model, x_adv, labels, draw)
    if cfg.w == 1:
        grads = adv_grads
    else:
        grads = _combine(clean_grads, adv_grads, 1.0 - cfg.w, cfg.w)
    apply_gradients(model, optimizer, grads)
    loss = (1.0 - cfg.w) * clean_loss + cfg.w * adv_loss
    return StepResult(loss, clean_loss, adv_loss, 1.0)


def cni_iw_step(
    model, batch, labels, cfg: TrainConfig, optimizer: SGD, step: int = 0
) -> StepResult:
    """Train on x + N(0, sigma^2 I) + B * delta with B ~ Ber(q) per example."""
    batch = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels)
    mask = bernoulli_mask(cfg, step, len(batch))
    inputs = batch
    if mask.any():
        inputs = batch.copy()
        inputs[mask] = run_white_box(model, batch[mask], labels[mask], step_attack(cfg, step))
    if cfg.sigma_train > 0:
        noise = NoiseDraw(derived_seed(cfg.seed, _INPUT_NOISE), step).standard_normal(inputs.shape)
        inputs = inputs + cfg.sigma_train * noise
    loss, grads = loss_and_gradients(model, inputs, labels, train_draw(cfg, step))
    apply_gradients(model, optimizer, grads)
    return StepResult(loss, adversarial_fraction=float(mask.mean()) if len(mask) else 0.0)


def trades_perturbation(
    model: Model, batch, targets: np.ndarray, attack: AttackConfig
) -> np.ndarray:
    """
    Maximise CE(f(x_adv), targets) inside the epsilon-ball.

    Starts from x + 0.001 * N(0, I) since the divergence has zero gradient at x itself.
    """
    x = model.check_batch(batch)
    eps, domain = attack.epsilon, model.input_domain
    rng = np.random.default_rng(attack.seed)
    x_adv = project(x, x + 0.001 * rng.standard_normal(x.shape), eps, domain)
    for t in range(attack.k):
        logits, tape = model.forward_with_tape(x_adv, attack_draw(attack.seed, t))
        grad = model.backward(tape, softmax(logits) - targets).inputs
        x_adv = project(x, x_adv + attack.alpha * np.sign(grad), eps, domain)
    return x_adv


def trades_step(
    model, batch, labels, cfg: TrainConfig, optimizer: SGD, step: int = 0
) -> StepResult:
    """CE(f(x), y) + beta * CE(f(x_adv), stop_gradient(softmax f(x))), beta = 1 / lambda."""
    if cfg.trades_beta == 0:
        return clean_step(model, batch, labels, cfg, optimizer, step)
    draw = train_draw(cfg, step)
    clean_loss, clean_grads = loss_and_gradients(model, batch, labels, draw)
    targets = softmax(model.forward(batch, draw))
    x_adv = trades_perturbation(model, batch, targets, step_attack(cfg, step))
    logits_adv, tape = model.forward_with_tape(x_adv, draw)
    robust_loss = float(soft_cross_entropy(logits_adv, targets).mean())
    robust_grads = model.backward(tape, (softmax(logits_adv) - targets) / len(targets))
    apply_gradients(model, optimizer, _combine(clean_grads, robust_grads, 1.0, cfg.trades_beta))
    return StepResult(clean_loss + cfg.trades_beta * robust_loss, clean_loss, robust_loss, 1.0)


STEPS = {
    TrainMode.CLEAN: clean_step,
    TrainMode.ADVERSARIAL: adversarial_training_step,
    TrainMode.CNI_IW: cni_iw_step,
    TrainMode.TRADES: trades_step,
    TrainMode.EPGD_ADV: adversarial_training_step,
}


def predict_labels(model: Model, batch: np.ndarray, seed: int = 0) -> np.ndarray:
    """Base-model predictions, layer noise drawn from stream (seed, 1)."""
    return smooth_predict_batch(model, batch, SmoothingConfig(samples=1, base_seed=seed))[0]


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    """Percentage of correct predictions."""
    if len(labels) == 0:
        return 0.0
    return 100.0 * float(np.mean(np.asarray(predictions) == np.asarray(labels)))


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: lr * gamma^(milestones passed); epoch is 1-based."""
    passed = sum(1 for m in cfg.lr_milestones if epoch - 1 >= m * cfg.epochs)
    return cfg.lr * cfg.lr_gamma**passed


class Trainer:
    """Runs training epochs, validation and checkpoint selection."""

    def __init__(self, logger: Optional[Logger] = None):
        self.logger = logger

    def _info(self, message: str):
        if self.logger:
            self.logger.info(message)

    def finetune(
        self,
        model: Model,
        dataset: "Dataset",
        cfg: TrainConfig,
        mode: Optional[TrainMode] = None,
    ) -> Tuple[Model, TrainLog]:
        """
        Train a copy of model and return the selected epoch's checkpoint with the log.

        Selection 'best' keeps the epoch with the highest clean validation accuracy,
        'diverged' the lowest; ties keep the earlier epoch.
        """
        cfg = replace(cfg, mode=TrainMode(mode)) if mode is not None else cfg
        model = model.copy()
        log = TrainLog()
        if cfg.epochs == 0:
            return model, log
        train, val = dataset.train, dataset.val
        if len(train.y) == 0:
            raise ConfigurationError("dataset has no training examples")
        if len(val.y) == 0:
            raise ConfigurationError("dataset.val_fraction leaves an empty validation split")

        step_fn = STEPS[cfg.mode]
        optimizer = SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
        shuffle = np.random.default_rng(derived_seed(cfg.seed, _SHUFFLE))
        self._info(f"Training {cfg.mode.value} for {cfg.epochs} epochs on {len(train.y)} examples")

        selected, selected_score, step = None, None, 0
        for epoch in range(1, cfg.epochs + 1):
            optimizer.lr = learning_rate(cfg, epoch)
            order = shuffle.permutation(len(train.y))
            total = 0.0
            for start in range(0, len(order), cfg.batch_size):
                index = order[start : start + cfg.batch_size]
                result = step_fn(model, train.x[index], train.y[index], cfg, optimizer, step)
                total += result.loss * len(index)
                step += 1

            clean_acc = accuracy(predict_labels(model, val.x, cfg.seed), val.y)
            adv_acc = float("nan")
            if cfg.val_attack and cfg.attack.family is not AttackFamily.NES:
                x_adv = run_white_box(model, val.x, val.y, replace(cfg.attack, seed=cfg.seed))
                adv_acc = accuracy(predict_labels(model, x_adv, cfg.seed), val.y)
            row = {
                "epoch": epoch,
                "train_loss": total / len(train.y),
                "clean_val_acc": clean_acc,
                "adv_val_acc": adv_acc,
                "lr": optimizer.lr,
            }
            for index in model.noisy_layers():
                row[f"alpha_{index}"] = model.noise[index].alpha
            log.rows.append(row)
            if self.logger:
                self.logger.log_epoch(row)

            if cfg.selection is Selection.BEST:
                better = selected_score is None or clean_acc > selected_score
            else:
                better = selected_score is None or clean_acc < selected_score
            if better:
                selected, selected_score = model.copy(), clean_acc
        self._info(f"Selected checkpoint with clean validation accuracy {selected_score:.2f}")
        return selected, log
