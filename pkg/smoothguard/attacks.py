"""
White-box and black-box l-infinity attacks.

White-box families differentiate the base model's loss: FGSM and PGD through a single noisy
forward, EPGD through the average of per-sample softmax outputs and SmoothAdv-PGD through the
softmax of averaged logits. Iteration t of every family draws layer noise from attack stream
(seed, t), and sample j of a smoothed step from attack stream (seed, t * M_b + j). Attack streams
are disjoint from the smoothing streams the defender votes with.

Black-box attacks only see oracles (callables from inputs to probabilities or labels).
"""
import dataclasses
import typing
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Tuple

import numpy as np

from .engine import Model, grad_input
from .exceptions import ConfigurationError, InputError
from .noise import NoiseDraw, NoiseStream
from .smoothing import smooth_logit_gradient, smooth_soft_gradient
from .values import coerce, render

ProbabilityOracle = Callable[[np.ndarray], np.ndarray]
LabelOracle = Callable[[np.ndarray], np.ndarray]


class AttackFamily(str, Enum):
    FGSM = "fgsm"
    PGD = "pgd"
    EPGD = "epgd"
    SMOOTHADV = "smoothadv"
    NES = "nes"


WHITE_BOX = (AttackFamily.FGSM, AttackFamily.PGD, AttackFamily.EPGD, AttackFamily.SMOOTHADV)
SMOOTHED_FAMILIES = (AttackFamily.EPGD, AttackFamily.SMOOTHADV)

# attack spec string keys -> AttackConfig fields
SPEC_KEYS = {
    "family": "family",
    "eps": "epsilon",
    "epsilon": "epsilon",
    "alpha": "step_alpha",
    "step_alpha": "step_alpha",
    "k": "k",
    "mb": "backward_samples",
    "m_b": "backward_samples",
    "backward_samples": "backward_samples",
    "sigma": "sigma_attack",
    "sigma_attack": "sigma_attack",
    "random_start": "random_start",
    "population": "nes_population",
    "nes_population": "nes_population",
    "nes_sigma": "nes_sigma",
    "max_queries": "max_queries",
    "norm": "norm",
    "seed": "seed",
}


@dataclass(frozen=True)
class AttackConfig:
    """
    Attack parameters. A step_alpha of 0 selects the default step: epsilon for FGSM,
    2.5 * epsilon / k for iterative families.
    """

    family: AttackFamily = AttackFamily.PGD
    epsilon: float = 8 / 255
    step_alpha: float = 0.0
    k: int = 7
    backward_samples: int = 8
    sigma_attack: float = 0.0
    random_start: bool = False
    nes_population: int = 20
    nes_sigma: float = 0.001
    max_queries: int = 10000
    norm: str = "linf"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", AttackFamily(self.family))
        if self.epsilon < 0:
            raise ConfigurationError(f"attack.epsilon must be non-negative, got {self.epsilon}")
        if self.k < 1:
            raise ConfigurationError(f"attack.k must be at least 1, got {self.k}")
        if self.backward_samples < 1:
            raise ConfigurationError(
                f"attack.backward_samples must be at least 1, got {self.backward_samples}"
            )
        if self.step_alpha < 0 or self.sigma_attack < 0:
            raise ConfigurationError(
                "attack.step_alpha and attack.sigma_attack must be non-negative"
            )
        if self.nes_population < 2 or self.nes_population % 2:
            raise ConfigurationError(
                f"attack.nes_population must be even and at least 2, got {self.nes_population}"
            )
        if self.nes_sigma <= 0:
            raise ConfigurationError(f"attack.nes_sigma must be positive, got {self.nes_sigma}")
        if self.norm != "linf":
            raise ConfigurationError(f"only the linf norm is supported, got {self.norm!r}")
        if self.seed < 0:
            raise ConfigurationError(f"attack.seed must be non-negative, got {self.seed}")

    @property
    def alpha(self) -> float:
        if self.step_alpha > 0:
            return self.step_alpha
        if self.family is AttackFamily.FGSM:
            return self.epsilon
        return 2.5 * self.epsilon / self.k

    @property
    def grad_budget(self) -> int:
        """Gradient evaluations per attack: k for PGD, k * M_b for smoothed families."""
        if self.family is AttackFamily.FGSM:
            return 1
        if self.family in SMOOTHED_FAMILIES:
            return self.k * self.backward_samples
        return self.k

    @classmethod
    def from_spec(cls, text: str, base: "AttackConfig" = None) -> "AttackConfig":
        """Parse 'family:pgd,eps:0.031,k:7,alpha:0.011' on top of base (defaults if omitted)."""
        hints = typing.get_type_hints(cls)
        updates = {}
        for item in filter(None, (part.strip() for part in text.split(","))):
            if ":" not in item:
                raise ConfigurationError(f"attack spec item {item!r} is not key:value")
            key, value = (s.strip() for s in item.split(":", 1))
            field_name = SPEC_KEYS.get(key.lower())
            if field_name is None:
                raise ConfigurationError(f"unknown attack spec key {key!r}")
            updates[field_name] = coerce(value, hints[field_name], f"attack.{field_name}")
        return replace(base or cls(), **updates)

    def to_spec(self) -> str:
        parts = [
            f"family:{self.family.value}",
            f"eps:{self.epsilon:.6g}",
            f"k:{self.k}",
            f"alpha:{self.alpha:.6g}",
        ]
        if self.family in SMOOTHED_FAMILIES:
            parts += [f"mb:{self.backward_samples}", f"sigma:{self.sigma_attack:.6g}"]
        if self.family is AttackFamily.NES:
            parts += [f"population:{self.nes_population}", f"nes_sigma:{self.nes_sigma:.6g}"]
        parts.append(f"random_start:{render(self.random_start)}")
        return ",".join(parts)

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}


def _prepare(model: Model, x, y) -> Tuple[np.ndarray, np.ndarray]:
    x = model.check_batch(x)
    model.check_domain(x)
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (len(x),):
        raise InputError(f"expected {len(x)} labels, got shape {y.shape}")
    return x, y


def project(x: np.ndarray, x_adv: np.ndarray, epsilon: float, domain) -> np.ndarray:
    """Project onto the l-infinity epsilon-ball around x intersected with the input domain."""
    return np.clip(np.clip(x_adv, x - epsilon, x + epsilon), domain[0], domain[1])


def attack_draw(seed: int, iteration: int) -> NoiseDraw:
    return NoiseDraw(seed, iteration, stream=NoiseStream.ATTACK)


def _gradient_fn(model: Model, y: np.ndarray, cfg: AttackConfig):
    if cfg.family in (AttackFamily.FGSM, AttackFamily.PGD):
        return lambda x_adv, t: grad_input(model, x_adv, y, attack_draw(cfg.seed, t))
    if cfg.family is AttackFamily.EPGD:
        return lambda x_adv, t: smooth_soft_gradient(
            model, x_adv, y, cfg.backward_samples, cfg.sigma_attack, attack_draw(cfg.seed, t)
        )[1]
    if cfg.family is AttackFamily.SMOOTHADV:
        return lambda x_adv, t: smooth_logit_gradient(
            model, x_adv, y, cfg.backward_samples, cfg.sigma_attack, attack_draw(cfg.seed, t)
        )[1]
    raise ConfigurationError(f"{cfg.family.value} is not a white-box attack")


def _iterate(model: Model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    gradient = _gradient_fn(model, y, cfg)
    eps, domain = cfg.epsilon, model.input_domain
    x_adv = x.copy()
    if cfg.random_start:
        rng = np.random.default_rng(cfg.seed)
        x_adv = project(x, x + rng.uniform(-eps, eps, size=x.shape), eps, domain)
    for t in range(cfg.k):
        x_adv = project(x, x_adv + cfg.alpha * np.sign(gradient(x_adv, t)), eps, domain)
    return x_adv


def fgsm(model: Model, x, y, cfg: AttackConfig) -> np.ndarray:
    """x_adv = clip(x + epsilon * sign(grad_x L))."""
    x, y = _prepare(model, x, y)
    grad = grad_input(model, x, y, attack_draw(cfg.seed, 0))
    return project(x, x + cfg.epsilon * np.sign(grad), cfg.epsilon, model.input_domain)


def pgd(model: Model, x, y, cfg: AttackConfig) -> np.ndarray:
    """k sign-gradient steps of size alpha, each followed by projection."""
    x, y = _prepare(model, x, y)
    return _iterate(model, x, y, replace(cfg, family=AttackFamily.PGD))


def epgd(model: Model, x, y, cfg: AttackConfig) -> np.ndarray:
    """PGD whose gradient flows through the mean of M_b per-sample softmax outputs."""
    x, y = _prepare(model, x, y)
    return _iterate(model, x, y, replace(cfg, family=AttackFamily.EPGD))


def smoothadv_pgd(model: Model, x, y, cfg: AttackConfig) -> np.ndarray:
    """PGD whose gradient flows through the softmax of M_b averaged logits."""
    x, y = _prepare(model, x, y)
    return _iterate(model, x, y, replace(cfg, family=AttackFamily.SMOOTHADV))


def run_white_box(model: Model, x, y, cfg: AttackConfig) -> np.ndarray:
    if cfg.family is AttackFamily.FGSM:
        return fgsm(model, x, y, cfg)
    if cfg.family is AttackFamily.PGD:
        return pgd(model, x, y, cfg)
    if cfg.family is AttackFamily.EPGD:
        return epgd(model, x, y, cfg)
    if cfg.family is AttackFamily.SMOOTHADV:
        return smoothadv_pgd(model, x, y, cfg)
    raise ConfigurationError(f"{cfg.family.value} is not a white-box attack")


def transfer_attack(
    source_model: Model, target_predict: LabelOracle, x, y, cfg: AttackConfig
) -> Tuple[np.ndarray, np.ndarray]:
    """Craft x_adv on the source model only and query the target's labels once."""
    x_adv = run_white_box(source_model, x, y, cfg)
    predictions = np.asarray(target_predict(x_adv))
    return x_adv, predictions == np.asarray(y)


@dataclass
class NESResult:
    adversarial: np.ndarray
    queries: int
    budget_exhausted: bool


def nes_gradient(
    loss_fn: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    population: int,
    sigma: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Antithetic NES estimate (1 / (P sigma)) sum_j L(x + sigma u_j) u_j over P/2 pairs {u, -u}.

    loss_fn maps a batch to per-example losses.
    """
    if population < 2 or population % 2:
        raise ConfigurationError(f"NES population must be even and at least 2, got {population}")
    estimate = np.zeros_like(x)
    broadcast = (-1,) + (1,) * (x.ndim - 1)
    for _ in range(population // 2):
        u = rng.standard_normal(x.shape)
        diff = np.asarray(loss_fn(x + sigma * u)) - np.asarray(loss_fn(x - sigma * u))
        estimate += diff.reshape(broadcast) * u
    return estimate / (population * sigma)


def nes_blackbox(
    predict_probs: ProbabilityOracle, x, y, cfg: AttackConfig, domain=(0.0, 1.0)
) -> NESResult:
    """
    Score-based attack: sign steps along the NES gradient estimate of -log p_y.

    Every oracle call on a batch counts as one query. When the next iteration would exceed
    max_queries the attack stops early and flags it; the highest-loss iterate seen so far is
    returned in either case.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    rows = np.arange(len(y))
    low, high = domain

    def loss(batch):
        probs = np.asarray(predict_probs(np.clip(batch, low, high)))
        return -np.log(np.maximum(probs[rows, y], 1e-12))

    rng = np.random.default_rng(cfg.seed)
    x_adv = x.copy()
    best, best_loss = x.copy(), loss(x)
    queries, exhausted = 1, False
    for _ in range(cfg.k):
        if queries + cfg.nes_population + 1 > cfg.max_queries:
            exhausted = True
            break
        grad = nes_gradient(loss, x_adv, cfg.nes_population, cfg.nes_sigma, rng)
        x_adv = project(x, x_adv + cfg.alpha * np.sign(grad), cfg.epsilon, domain)
        current = loss(x_adv)
        queries += cfg.nes_population + 1
        improved = current > best_loss
        best[improved] = x_adv[improved]
        best_loss = np.where(improved, current, best_loss)
    return NESResult(best, queries, exhausted)


def random_perturbation(x, epsilon: float, seed: int, domain=(0.0, 1.0)) -> np.ndarray:
    """Uniformly random corner of the epsilon-ball; the no-information baseline attack."""
    x = np.asarray(x, dtype=np.float64)
    signs = np.random.default_rng(seed).choice([-1.0, 1.0], size=x.shape)
    return project(x, x + epsilon * signs, epsilon, domain)
