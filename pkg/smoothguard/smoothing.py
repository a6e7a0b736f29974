"""
Smoothed inference over Monte Carlo noise samples.

Sample i (1-based) of a smoothing run always uses the noise stream (base_seed, i), so the sample
set at M is a prefix of the sample set at any M' > M. All reductions over samples are correctly
rounded sums, which makes aggregates independent of sample order and thread count.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Tuple

import numpy as np
import pandas as pd

from .engine import Model, exact_sum, one_hot, softmax
from .exceptions import ConfigurationError, InputError
from .noise import NoiseDraw, NoiseStream


class Voting(str, Enum):
    PREDICTION = "prediction"
    WEIGHTED_EXP = "weighted_exp"
    WEIGHTED_TOP_C = "weighted_top_c"
    SOFT = "soft"


@dataclass(frozen=True)
class SmoothingConfig:
    samples: int = 1
    sigma: float = 0.0
    voting: Voting = Voting.PREDICTION
    top_c: float = 0.0
    base_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "voting", Voting(self.voting))
        if self.samples < 1:
            raise ConfigurationError(f"smoothing needs at least one sample, got {self.samples}")
        if self.sigma < 0:
            raise ConfigurationError(f"smoothing sigma must be non-negative, got {self.sigma}")
        if self.voting is Voting.WEIGHTED_TOP_C and not 0.0 <= self.top_c <= 1.0:
            raise ConfigurationError(f"top_c must lie in [0, 1], got {self.top_c}")

    @property
    def scheme(self) -> str:
        if self.voting is Voting.WEIGHTED_TOP_C:
            return f"{self.voting.value}(C={self.top_c:g})"
        return self.voting.value


@dataclass
class VoteTally:
    per_sample_probs: np.ndarray
    per_sample_ranks: np.ndarray
    aggregate: np.ndarray
    winner: int

    def to_frame(self) -> pd.DataFrame:
        samples, classes = self.per_sample_probs.shape
        return pd.DataFrame(
            {
                "sample_index": np.repeat(np.arange(1, samples + 1), classes),
                "class": np.tile(np.arange(classes), samples),
                "probability": self.per_sample_probs.ravel(),
                "rank": self.per_sample_ranks.ravel(),
            }
        )


def sample_probabilities(
    model: Model,
    batch: np.ndarray,
    samples: int,
    sigma: float,
    base_seed: int,
    threads: int = 1,
    stream: NoiseStream = NoiseStream.SMOOTHING,
    offset: int = 0,
) -> np.ndarray:
    """
    Per-sample class probabilities, shape (samples, batch, classes).

    Samples offset + 1 .. offset + samples of the given stream family are drawn.
    """
    if samples < 1:
        raise ConfigurationError(f"smoothing needs at least one sample, got {samples}")

    def evaluate(index: int) -> np.ndarray:
        draw = NoiseDraw(base_seed, index, stream=stream)
        return softmax(model.forward(batch, draw, sigma_input=sigma))

    indices = range(offset + 1, offset + samples + 1)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            probs = list(pool.map(evaluate, indices))
    else:
        probs = [evaluate(i) for i in indices]
    return np.stack(probs)


def rank_classes(probs: np.ndarray) -> np.ndarray:
    """Rank 1 for the most probable class; ties go to the lower class index."""
    probs = np.asarray(probs)
    order = np.argsort(-probs, axis=-1, kind="stable")
    ranks = np.empty(order.shape, dtype=np.int64)
    positions = np.broadcast_to(np.arange(1, probs.shape[-1] + 1), order.shape)
    np.put_along_axis(ranks, order, positions, axis=-1)
    return ranks


def vote_prediction(probs: np.ndarray) -> np.ndarray:
    """Count of samples whose argmax is each class; probs has the sample axis first."""
    probs = np.asarray(probs)
    winners = probs.argmax(axis=-1)
    return (winners[..., None] == np.arange(probs.shape[-1])).sum(axis=0).astype(np.float64)


def vote_weighted(probs: np.ndarray, scheme: Voting, top_c: float = 0.0) -> np.ndarray:
    ranks = rank_classes(probs)
    if scheme is Voting.WEIGHTED_EXP:
        weights = np.power(2.0, 1 - ranks)
    elif scheme is Voting.WEIGHTED_TOP_C:
        weights = np.where(ranks == 1, 1.0, np.where(ranks == 2, top_c, 0.0))
    else:
        raise ConfigurationError(f"{scheme} is not a weighted voting scheme")
    return exact_sum(weights, axis=0)


def vote_soft(probs: np.ndarray) -> np.ndarray:
    return exact_sum(probs, axis=0)


def aggregate_votes(probs: np.ndarray, cfg: SmoothingConfig) -> np.ndarray:
    if cfg.voting is Voting.PREDICTION:
        return vote_prediction(probs)
    if cfg.voting is Voting.SOFT:
        return vote_soft(probs)
    return vote_weighted(probs, cfg.voting, cfg.top_c)


def winners(aggregate: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, i.e. the lowest class index on ties
    return np.asarray(aggregate).argmax(axis=-1)


def smooth_predict(
    model: Model, x: np.ndarray, cfg: SmoothingConfig, threads: int = 1
) -> Tuple[int, VoteTally]:
    """Smoothed prediction for a single input, with the full tally."""
    batch = model.check_batch(np.asarray(x, dtype=np.float64)[None])
    model.check_domain(batch)
    probs = sample_probabilities(model, batch, cfg.samples, cfg.sigma, cfg.base_seed, threads)[:, 0]
    aggregate = aggregate_votes(probs, cfg)
    winner = int(winners(aggregate))
    return winner, VoteTally(probs, rank_classes(probs), aggregate, winner)


def smooth_predict_batch(
    model: Model, batch: np.ndarray, cfg: SmoothingConfig, threads: int = 1
) -> Tuple[np.ndarray, np.ndarray]:
    """Winners (N,) and aggregates (N, classes) for a batch."""
    batch = model.check_batch(batch)
    model.check_domain(batch)
    probs = sample_probabilities(model, batch, cfg.samples, cfg.sigma, cfg.base_seed, threads)
    aggregate = aggregate_votes(probs, cfg)
    return winners(aggregate), aggregate


class SmoothedOracle:
    """
    Soft-vote class probabilities of a smoothed classifier; the query surface a black-box
    attacker sees.

    Query q draws samples q * M + 1 .. (q + 1) * M from the query streams of the seed, so every
    call sees fresh noise and none of it is shared with smoothed evaluation.
    """

    def __init__(self, model: Model, cfg: SmoothingConfig, seed: int, threads: int = 1):
        self.model = model
        self.cfg = cfg
        self.seed = seed
        self.threads = threads
        self.queries = 0

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        batch = self.model.check_batch(batch)
        self.model.check_domain(batch)
        samples = self.cfg.samples
        probs = sample_probabilities(
            self.model,
            batch,
            samples,
            self.cfg.sigma,
            self.seed,
            self.threads,
            stream=NoiseStream.QUERY,
            offset=self.queries * samples,
        )
        self.queries += 1
        return vote_soft(probs) / samples


def sample_draw(draw: NoiseDraw, samples: int, index: int) -> NoiseDraw:
    """Stream of the index-th sample inside a smoothed forward; one sample keeps the draw itself."""
    return draw.for_sample(draw.sample * samples + index)


def _sample_logits(model, batch, samples, sigma, draw):
    if samples < 1:
        raise ConfigurationError(f"smoothing needs at least one sample, got {samples}")
    return [
        model.forward_with_tape(batch, sample_draw(draw, samples, j), sigma_input=sigma)
        for j in range(samples)
    ]


def _sum_samples(values):
    return values[0] if len(values) == 1 else exact_sum(np.stack(values), axis=0)


def smooth_soft_forward(
    model: Model, batch: np.ndarray, samples: int, sigma: float, draw: NoiseDraw
) -> np.ndarray:
    """(1/M) sum_i softmax(f(x + eta_i)): softmax first, then average."""
    probs = [softmax(logits) for logits, _ in _sample_logits(model, batch, samples, sigma, draw)]
    return _sum_samples(probs) / samples


def smooth_logit_forward(
    model: Model, batch: np.ndarray, samples: int, sigma: float, draw: NoiseDraw
) -> np.ndarray:
    """softmax((1/M) sum_i f(x + eta_i)): average first, then softmax."""
    logits = [z for z, _ in _sample_logits(model, batch, samples, sigma, draw)]
    return softmax(_sum_samples(logits) / samples)


def _labels(labels, batch_size, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch_size,) or (
        labels.size and (labels.min() < 0 or labels.max() >= num_classes)
    ):
        raise InputError(f"labels must be {batch_size} class indices in [0, {num_classes})")
    return labels


def smooth_soft_gradient(
    model: Model, batch: np.ndarray, labels, samples: int, sigma: float, draw: NoiseDraw
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-example loss -log(pbar_y) of the soft-smoothed output and its input gradient.

    d loss / d z_i = p_iy / (M pbar_y) * (p_i - e_y) for sample logits z_i.
    """
    runs = _sample_logits(model, batch, samples, sigma, draw)
    probs = [softmax(logits) for logits, _ in runs]
    mean = _sum_samples(probs) / samples
    labels = _labels(labels, len(mean), model.num_classes)
    rows = np.arange(len(labels))
    target = one_hot(labels, model.num_classes)
    mean_y = mean[rows, labels]
    grads = []
    for (_, tape), p in zip(runs, probs):
        weight = np.divide(
            p[rows, labels],
            samples * mean_y,
            out=np.full(len(labels), 1.0 / samples),
            where=mean_y > 0,
        )
        grads.append(model.backward(tape, weight[:, None] * (p - target)).inputs)
    losses = -np.log(np.maximum(mean_y, np.finfo(np.float64).tiny))
    return losses, _sum_samples(grads)


def smooth_logit_gradient(
    model: Model, batch: np.ndarray, labels, samples: int, sigma: float, draw: NoiseDraw
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-example CE of softmax(mean logits) and its input gradient."""
    runs = _sample_logits(model, batch, samples, sigma, draw)
    mean_logits = _sum_samples([z for z, _ in runs]) / samples
    labels = _labels(labels, len(mean_logits), model.num_classes)
    probs = softmax(mean_logits)
    grad_logits = (probs - one_hot(labels, model.num_classes)) / samples
    grads = [model.backward(tape, grad_logits).inputs for _, tape in runs]
    rows = np.arange(len(labels))
    losses = -np.log(np.maximum(probs[rows, labels], np.finfo(np.float64).tiny))
    return losses, _sum_samples(grads)
