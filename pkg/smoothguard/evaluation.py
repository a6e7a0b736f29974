"""
Evaluation harness: accuracy under attack and smoothing, the experiment sweeps and the
noisy-SVM objective check.

Attacks always target the base model (or a surrogate) and the smoothed classifier is then
evaluated on the crafted inputs. For every seed s, smoothing votes with the smoothing streams of
base_seed s while the attack draws from the attack and query streams of seed s, so the attacker
never sees the noise realisations the defender votes with. Rows that share a seed share both.
"""
import time
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import norm
from sklearn.datasets import make_blobs
from sklearn.svm import LinearSVC

from .attacks import (
    AttackConfig,
    AttackFamily,
    nes_blackbox,
    random_perturbation,
    run_white_box,
    transfer_attack,
)
from .data import Split, blob_centers
from .engine import Model
from .exceptions import ConfigurationError
from .logging import Logger
from .report import EvalReport, ReportRow
from .smoothing import (
    SmoothedOracle,
    SmoothingConfig,
    VoteTally,
    Voting,
    aggregate_votes,
    sample_probabilities,
    smooth_predict,
    smooth_predict_batch,
    winners,
)
from .training import accuracy


class Threat(str, Enum):
    DIRECT = "direct"
    TRANSFER = "transfer"
    RANDOM = "random"


@dataclass
class SVMResult:
    noiseless_objective: float
    noisy_objective: float
    noise_term_mean: float
    half_width: float
    clipped_noisy_objective: float
    separable: bool
    w_l1: float
    w_l2: float

    @property
    def within_half_width(self) -> bool:
        return abs(self.noisy_objective - self.noiseless_objective) <= self.half_width


@dataclass
class SVMReport:
    results: List[SVMResult]
    trials: int
    sigma: float
    epsilon: float
    z: float = 3.0

    @property
    def coverage(self) -> float:
        """Fraction of repetitions whose Monte Carlo mean lies within the half-width."""
        return float(np.mean([r.within_half_width for r in self.results]))

    @property
    def expected_coverage(self) -> float:
        """Two-sided normal coverage of a z-wide interval, e.g. 0.9973 for z=3."""
        return float(2 * norm.cdf(self.z) - 1)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for index, r in enumerate(self.results):
            rows.append(
                {
                    "repetition": index,
                    "sigma": self.sigma,
                    "epsilon": self.epsilon,
                    "trials": self.trials,
                    "noiseless_objective": r.noiseless_objective,
                    "noisy_objective": r.noisy_objective,
                    "noise_term_mean": r.noise_term_mean,
                    "half_width": r.half_width,
                    "within_half_width": r.within_half_width,
                    "clipped_noisy_objective": r.clipped_noisy_objective,
                    "separable": r.separable,
                    "w_l1": r.w_l1,
                    "w_l2": r.w_l2,
                }
            )
        return pd.DataFrame(rows)


def fit_linear_svm(x: np.ndarray, y: np.ndarray, seed: int = 0):
    """Hinge-loss linear SVM; returns (w, b) for labels in {-1, +1}."""
    svm = LinearSVC(C=1.0, loss="hinge", dual=True, max_iter=100000, random_state=seed)
    svm.fit(x, y)
    return svm.coef_[0].astype(np.float64), float(svm.intercept_[0])


def svm_noise_experiment(
    dim: int,
    n: int,
    sigma: float,
    trials: int,
    seed: int = 0,
    epsilon: float = 0.05,
    z: float = 3.0,
    separation: float = 8.0,
    repetitions: int = 1,
    logger: Optional[Logger] = None,
) -> SVMReport:
    """
    Compare the l-infinity adversarial hinge objective with and without zero-mean input noise.

    The adversarial objective of example i splits into hinge_i + epsilon * |w|_1 - y_i w.eta_i,
    so the noisy objective averaged over trials must match the noiseless one up to Monte Carlo
    error. Each repetition redraws the noise; the SVM is fit once.
    """
    if trials < 1000:
        raise ConfigurationError(f"svm.trials must be at least 1000, got {trials}")
    if sigma < 0:
        raise ConfigurationError(f"svm.sigma must be non-negative, got {sigma}")
    centers = blob_centers(2, dim, separation)
    x, labels = make_blobs(n_samples=n, centers=centers, cluster_std=1.0, random_state=seed)
    y = np.where(labels == 1, 1.0, -1.0)
    w, b = fit_linear_svm(x, y, seed)
    margins = y * (x @ w + b)
    separable = bool(np.all(margins > 0))
    if not separable and logger:
        logger.warning("SVM training data is not linearly separable; continuing")

    regulariser = epsilon * float(np.abs(w).sum())
    base = np.maximum(0.0, 1.0 - margins) + regulariser
    noiseless = float(base.mean())
    chunk = max(1, (1 << 20) // (n * dim))

    results = []
    for repetition in range(repetitions):
        rng = np.random.default_rng([seed, repetition])
        noise_terms, clipped = [], []
        for start in range(0, trials, chunk):
            size = min(chunk, trials - start)
            shape = (size, n, dim)
            eta = sigma * rng.standard_normal(shape) if sigma > 0 else np.zeros(shape)
            shift = -y * (eta @ w)
            noise_terms.append(shift.mean(axis=1))
            clipped.append(np.maximum(0.0, 1.0 - margins + regulariser + shift).mean(axis=1))
        noise_terms = np.concatenate(noise_terms)
        noise_mean = float(noise_terms.mean())
        results.append(
            SVMResult(
                noiseless_objective=noiseless,
                noisy_objective=noiseless + noise_mean,
                noise_term_mean=noise_mean,
                half_width=z * float(noise_terms.std(ddof=1)) / np.sqrt(trials),
                clipped_noisy_objective=float(np.concatenate(clipped).mean()),
                separable=separable,
                w_l1=float(np.abs(w).sum()),
                w_l2=float(np.linalg.norm(w)),
            )
        )
    return SVMReport(results, trials, sigma, epsilon, z)


class Evaluator:
    """Runs evaluations and sweeps, collecting per-seed accuracies into reports."""

    def __init__(self, logger: Optional[Logger] = None, threads: int = 1):
        self.logger = logger
        self.threads = threads

    def _info(self, message: str):
        if self.logger:
            self.logger.info(message)

    def craft(
        self,
        model: Model,
        split: Split,
        attack: AttackConfig,
        smoothing: SmoothingConfig,
        threat: Threat = Threat.DIRECT,
        source_model: Optional[Model] = None,
    ) -> np.ndarray:
        """Adversarial inputs for one seed (taken from attack.seed)."""
        if threat is Threat.RANDOM:
            return random_perturbation(split.x, attack.epsilon, attack.seed, model.input_domain)
        if threat is Threat.TRANSFER:
            if source_model is None:
                raise ConfigurationError("run.source_checkpoint is required for transfer attacks")
            x_adv, _ = transfer_attack(
                source_model,
                lambda batch: smooth_predict_batch(model, batch, smoothing, self.threads)[0],
                split.x,
                split.y,
                attack,
            )
            return x_adv
        if attack.family is AttackFamily.NES:
            oracle = SmoothedOracle(model, smoothing, attack.seed, self.threads)
            result = nes_blackbox(
                oracle,
                split.x,
                split.y,
                attack,
                model.input_domain,
            )
            if result.budget_exhausted:
                self._info(f"NES stopped early after {result.queries} queries")
            return result.adversarial
        return run_white_box(model, split.x, split.y, attack)

    def evaluate(
        self,
        model: Model,
        split: Split,
        attack: Optional[AttackConfig] = None,
        smoothing: Optional[SmoothingConfig] = None,
        seeds: Sequence[int] = (0,),
        model_id: str = "model",
        threat: Threat = Threat.DIRECT,
        source_model: Optional[Model] = None,
    ) -> ReportRow:
        """
        Clean and adversarial accuracy of the smoothed classifier, one value per seed.

        Without smoothing the base model is evaluated (one sample, sigma 0, layer noise on).
        Without an attack the adversarial accuracy repeats the clean one.
        """
        smoothing = smoothing or SmoothingConfig()
        threat = Threat(threat)
        row = ReportRow(
            model_id, smoothing.scheme, smoothing.samples, smoothing.sigma, attack, threat.value
        )
        for seed in seeds:
            cfg = replace(smoothing, base_seed=seed)
            clean = accuracy(smooth_predict_batch(model, split.x, cfg, self.threads)[0], split.y)
            adv = clean
            if attack is not None:
                seeded = replace(attack, seed=seed)
                x_adv = self.craft(model, split, seeded, cfg, threat, source_model)
                adv = accuracy(smooth_predict_batch(model, x_adv, cfg, self.threads)[0], split.y)
            row.clean_per_seed.append(clean)
            row.adv_per_seed.append(adv)
            row.seeds.append(seed)
        self._info(
            f"{model_id} {row.scheme} M={smoothing.samples} sigma={smoothing.sigma:g}: "
            f"clean={np.mean(row.clean_per_seed):.2f} adv={np.mean(row.adv_per_seed):.2f}"
        )
        return row

    def tally(self, model: Model, x: np.ndarray, smoothing: SmoothingConfig) -> VoteTally:
        return smooth_predict(model, x, smoothing, self.threads)[1]

    def sweep_sigma_M(
        self,
        model: Model,
        split: Split,
        sigmas: Sequence[float],
        samples: Sequence[int],
        attack: Optional[AttackConfig],
        seeds: Sequence[int],
        voting: Voting = Voting.PREDICTION,
        top_c: float = 0.0,
        model_id: str = "model",
    ) -> EvalReport:
        """
        Cross product of sigma and M with paired sampling.

        For each (seed, sigma) the largest M is sampled once and every smaller M reads a prefix,
        so the sample set at M is contained in the one at any larger M.
        """
        if not sigmas or not samples:
            raise ConfigurationError("sweep.sigmas and sweep.samples must not be empty")
        started = time.perf_counter()
        max_samples = max(samples)
        rows: Dict[tuple, ReportRow] = {}
        for sigma in sigmas:
            for m in samples:
                cfg = SmoothingConfig(m, sigma, voting, top_c)
                rows[(sigma, m)] = ReportRow(model_id, cfg.scheme, m, sigma, attack)

        model.check_domain(model.check_batch(split.x))
        for seed in seeds:
            x_adv = split.x
            if attack is not None:
                base = SmoothingConfig(base_seed=seed)
                x_adv = self.craft(model, split, replace(attack, seed=seed), base)
            for sigma in sigmas:
                clean = sample_probabilities(model, split.x, max_samples, sigma, seed, self.threads)
                adv = clean
                if attack is not None:
                    adv = sample_probabilities(model, x_adv, max_samples, sigma, seed, self.threads)
                for m in samples:
                    cfg = SmoothingConfig(m, sigma, voting, top_c, seed)
                    row = rows[(sigma, m)]
                    clean_votes = winners(aggregate_votes(clean[:m], cfg))
                    adv_votes = winners(aggregate_votes(adv[:m], cfg))
                    row.clean_per_seed.append(accuracy(clean_votes, split.y))
                    row.adv_per_seed.append(accuracy(adv_votes, split.y))
                    row.seeds.append(seed)
            self._info(f"sigma/M sweep finished seed {seed}")
        return EvalReport(list(rows.values()), time.perf_counter() - started)

    def sweep_kM(
        self,
        model: Model,
        split: Split,
        attack: AttackConfig,
        families: Sequence[AttackFamily],
        iterations: Sequence[int],
        backward_samples: Sequence[int],
        smoothing: SmoothingConfig,
        seeds: Sequence[int],
        model_id: str = "model",
    ) -> EvalReport:
        """One row per (family, k, M_b); PGD and FGSM take a single backward sample."""
        started = time.perf_counter()
        report = EvalReport()
        seen = set()
        for family in families:
            family = AttackFamily(family)
            if family is AttackFamily.NES:
                raise ConfigurationError("sweep.km_families takes white-box families only")
            for k in iterations:
                averaged = family in (AttackFamily.EPGD, AttackFamily.SMOOTHADV)
                mbs = backward_samples if averaged else [1]
                for mb in mbs:
                    if (family, k, mb) in seen:
                        continue
                    seen.add((family, k, mb))
                    cfg = replace(attack, family=family, k=k, backward_samples=mb)
                    report.rows.append(self.evaluate(model, split, cfg, smoothing, seeds, model_id))
        report.wall_time = time.perf_counter() - started
        return report

    def sweep_epsilon(
        self,
        model: Model,
        split: Split,
        attack: AttackConfig,
        epsilons: Sequence[float],
        smoothing: SmoothingConfig,
        seeds: Sequence[int],
        model_id: str = "model",
    ) -> EvalReport:
        if not epsilons:
            raise ConfigurationError("sweep.epsilons must not be empty")
        started = time.perf_counter()
        rows = [
            self.evaluate(model, split, replace(attack, epsilon=eps), smoothing, seeds, model_id)
            for eps in epsilons
        ]
        return EvalReport(rows, time.perf_counter() - started)
