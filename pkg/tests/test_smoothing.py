import numpy as np
import pytest
from scipy.stats import norm

from smoothguard.engine import Dense, Model, per_example_cross_entropy, softmax
from smoothguard.exceptions import ConfigurationError
from smoothguard.models import Architecture, ModelSpec, NoisePlacement, build_model
from smoothguard.noise import NoiseDraw, NoiseStream
from smoothguard.smoothing import (
    SmoothedOracle,
    SmoothingConfig,
    Voting,
    aggregate_votes,
    rank_classes,
    sample_probabilities,
    smooth_logit_forward,
    smooth_logit_gradient,
    smooth_predict,
    smooth_predict_batch,
    smooth_soft_forward,
    smooth_soft_gradient,
    vote_prediction,
    vote_soft,
    vote_weighted,
    winners,
)

MIXED_PROBS = np.array(
    [
        [0.6, 0.3, 0.1],
        [0.2, 0.5, 0.3],
        [0.1, 0.2, 0.7],
        [0.4, 0.35, 0.25],
    ]
)


@pytest.fixture
def noisy_mlp():
    """MLP with learnable weight noise."""
    spec = ModelSpec(arch=Architecture.MLP, hidden=8, noise_target=NoisePlacement.WEIGHT)
    return build_model(spec, (4,), 3, seed=3)


@pytest.fixture
def threshold_model():
    """1-D classifier predicting class 1 iff x > 0.5."""
    return Model([Dense(1, 2, weight=[[0.0, 1.0]], bias=[0.0, -0.5])], (1,))


def _config(voting, samples=1, sigma=0.0, seed=0):
    top_c = 0.5 if voting is Voting.WEIGHTED_TOP_C else 0.0
    return SmoothingConfig(samples, sigma, voting, top_c, seed)


@pytest.mark.parametrize("voting", list(Voting))
def test_single_sample_without_noise_is_base_argmax(noisy_mlp, voting):
    """M=1, sigma=0 reproduces the base prediction under the sample-1 layer noise."""
    x = np.random.default_rng(0).uniform(size=(10, 4))
    predicted, _ = smooth_predict_batch(noisy_mlp, x, _config(voting, seed=4))
    base = noisy_mlp.forward(x, NoiseDraw(4, 1)).argmax(axis=1)
    np.testing.assert_array_equal(predicted, base)


def test_prediction_majority():
    """Per-sample argmaxes [A, A, B] give aggregate (2, 1) and winner A."""
    probs = np.array([[0.9, 0.1], [0.6, 0.4], [0.2, 0.8]])
    aggregate = vote_prediction(probs)
    np.testing.assert_array_equal(aggregate, [2.0, 1.0])
    assert winners(aggregate) == 0


def test_prediction_ignores_confidence():
    """Only the argmax of each sample counts."""
    np.testing.assert_array_equal(
        vote_prediction(np.array([[0.51, 0.49]])), vote_prediction(np.array([[0.99, 0.01]]))
    )


def test_prediction_hand_count():
    """A 5-sample tally matches a hand count and sums to M."""
    probs = np.array(
        [[0.1, 0.7, 0.2], [0.5, 0.3, 0.2], [0.2, 0.3, 0.5], [0.1, 0.6, 0.3], [0.3, 0.4, 0.3]]
    )
    aggregate = vote_prediction(probs)
    np.testing.assert_array_equal(aggregate, [1.0, 3.0, 1.0])
    assert aggregate.sum() == 5


def test_weighted_exp_single_sample():
    """Ranks (1, 2, 3) weigh (1, 0.5, 0.25)."""
    aggregate = vote_weighted(np.array([[0.5, 0.3, 0.2]]), Voting.WEIGHTED_EXP)
    np.testing.assert_array_equal(aggregate, [1.0, 0.5, 0.25])


def test_weighted_mixed_ranks_by_hand():
    """Four samples with mixed ranks under both weighted schemes."""
    np.testing.assert_array_equal(vote_weighted(MIXED_PROBS, Voting.WEIGHTED_EXP), [2.5, 2.5, 2.0])
    assert winners(vote_weighted(MIXED_PROBS, Voting.WEIGHTED_EXP)) == 0
    top_c = vote_weighted(MIXED_PROBS, Voting.WEIGHTED_TOP_C, 0.5)
    np.testing.assert_array_equal(top_c, [2.0, 2.5, 1.5])
    assert winners(top_c) == 1


def test_top_c_zero_is_prediction_voting():
    """WeightedTopC with C=0 equals prediction voting."""
    probs = softmax(np.random.default_rng(1).normal(size=(7, 5, 4)))
    top_c = vote_weighted(probs, Voting.WEIGHTED_TOP_C, 0.0)
    np.testing.assert_array_equal(top_c, vote_prediction(probs))
    np.testing.assert_array_equal(winners(top_c), winners(vote_prediction(probs)))


def test_soft_voting_diverges_from_prediction():
    """Soft voting picks class 1 where prediction voting ties."""
    probs = np.array([[0.6, 0.4], [0.1, 0.9]])
    np.testing.assert_allclose(vote_soft(probs), [0.7, 1.3], atol=1e-15)
    assert winners(vote_soft(probs)) == 1
    np.testing.assert_array_equal(vote_prediction(probs), [1.0, 1.0])
    assert winners(vote_prediction(probs)) == 0


def test_rank_rows_are_permutations():
    """Every rank row is a permutation of 1..C, ties to the lower class."""
    ranks = rank_classes(np.array([[0.2, 0.5, 0.3], [0.4, 0.4, 0.2]]))
    np.testing.assert_array_equal(ranks, [[3, 1, 2], [1, 2, 3]])


def test_threshold_classifier_matches_gaussian_cdf(threshold_model):
    """Vote fraction for class 1 at x=0, t=0.5, sigma=1 is Phi(-0.5)."""
    samples = 10**4
    cfg = SmoothingConfig(samples, 1.0, Voting.PREDICTION)
    winner, tally = smooth_predict(threshold_model, [0.0], cfg)
    p = norm.cdf(-0.5)
    fraction = tally.aggregate[1] / samples
    assert abs(fraction - p) < 4 * np.sqrt(p * (1 - p) / samples)
    assert winner == 0


@pytest.mark.slow
def test_threshold_oracle_across_trials(threshold_model):
    """The Gaussian-CDF oracle holds in at least 97 of 100 independent trials."""
    samples = 10**4
    p = norm.cdf(-0.5)
    bound = 4 * np.sqrt(p * (1 - p) / samples)
    x = np.zeros((1, 1))
    hits = 0
    for trial in range(100):
        probs = sample_probabilities(threshold_model, x, samples, 1.0, base_seed=trial)
        hits += abs(vote_prediction(probs[:, 0])[1] / samples - p) < bound
    assert hits >= 97


def test_tally_frame(noisy_mlp):
    """The tally frame has one row per (sample, class)."""
    cfg = SmoothingConfig(5, 0.2, Voting.SOFT, base_seed=1)
    _, tally = smooth_predict(noisy_mlp, np.full(4, 0.5), cfg)
    frame = tally.to_frame()
    assert list(frame.columns) == ["sample_index", "class", "probability", "rank"]
    assert len(frame) == 15
    assert frame["sample_index"].min() == 1
    assert tally.winner == int(np.argmax(tally.aggregate))


def test_sample_sets_are_prefixes(noisy_mlp):
    """The samples at M are the first M samples at any larger M."""
    x = np.random.default_rng(2).uniform(size=(3, 4))
    small = sample_probabilities(noisy_mlp, x, 4, 0.25, base_seed=9)
    large = sample_probabilities(noisy_mlp, x, 16, 0.25, base_seed=9)
    np.testing.assert_array_equal(small, large[:4])


@pytest.mark.parametrize("voting", list(Voting))
def test_thread_count_does_not_change_results(noisy_mlp, voting):
    """Aggregates are identical for one and four worker threads."""
    x = np.random.default_rng(3).uniform(size=(6, 4))
    cfg = _config(voting, samples=12, sigma=0.3, seed=5)
    _, single = smooth_predict_batch(noisy_mlp, x, cfg, threads=1)
    _, pooled = smooth_predict_batch(noisy_mlp, x, cfg, threads=4)
    np.testing.assert_array_equal(single, pooled)


def test_aggregate_invariant_to_sample_order():
    """Summed votes do not depend on sample order."""
    probs = softmax(np.random.default_rng(4).normal(size=(9, 2, 3)))
    cfg = SmoothingConfig(9, 0.0, Voting.SOFT)
    np.testing.assert_array_equal(aggregate_votes(probs, cfg), aggregate_votes(probs[::-1], cfg))


def test_invalid_configs():
    """M=0, negative sigma and C outside [0, 1] are configuration errors."""
    with pytest.raises(ConfigurationError):
        SmoothingConfig(samples=0)
    with pytest.raises(ConfigurationError):
        SmoothingConfig(samples=1, sigma=-0.1)
    with pytest.raises(ConfigurationError):
        SmoothingConfig(samples=1, voting=Voting.WEIGHTED_TOP_C, top_c=1.5)


def test_soft_and_logit_forwards_collapse_for_one_sample(noisy_mlp):
    """With one sample both smoothed forwards equal softmax of the noisy logits."""
    x = np.random.default_rng(5).uniform(size=(3, 4))
    draw = NoiseDraw(6, 2)
    expected = softmax(noisy_mlp.forward(x, draw))
    np.testing.assert_array_equal(smooth_soft_forward(noisy_mlp, x, 1, 0.0, draw), expected)
    np.testing.assert_array_equal(smooth_logit_forward(noisy_mlp, x, 1, 0.0, draw), expected)


@pytest.mark.parametrize("soft", [True, False])
def test_smoothed_gradients_match_finite_differences(soft):
    """Input gradients of both smoothed losses agree with central differences."""
    rng = np.random.default_rng(7)
    model = Model(
        [
            Dense(3, 4, weight=rng.normal(size=(3, 4)), bias=rng.normal(size=4)),
            Dense(4, 3, weight=rng.normal(size=(4, 3)), bias=rng.normal(size=3)),
        ],
        (3,),
    )
    x = rng.uniform(0.2, 0.8, size=(2, 3))
    y = np.array([0, 2])
    draw = NoiseDraw(8, 1)
    forward = smooth_soft_forward if soft else smooth_logit_forward
    gradient = smooth_soft_gradient if soft else smooth_logit_gradient
    losses, analytic = gradient(model, x, y, 6, 0.3, draw)

    def total(batch):
        probs = forward(model, batch, 6, 0.3, draw)
        return -np.log(probs[np.arange(2), y]).sum()

    np.testing.assert_allclose(losses.sum(), total(x), rtol=1e-12)
    h = 1e-5
    for index in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[index] += h
        minus[index] -= h
        numeric = (total(plus) - total(minus)) / (2 * h)
        assert np.isclose(analytic[index], numeric, rtol=1e-4, atol=1e-8)


def test_smoothed_loss_with_one_sample_is_cross_entropy(noisy_mlp):
    """The soft-smoothed loss reduces to cross-entropy for one noiseless sample."""
    x = np.random.default_rng(9).uniform(size=(4, 4))
    y = np.array([0, 1, 2, 1])
    draw = NoiseDraw(3, 1)
    losses, _ = smooth_soft_gradient(noisy_mlp, x, y, 1, 0.0, draw)
    expected = per_example_cross_entropy(noisy_mlp.forward(x, draw), y)
    np.testing.assert_allclose(losses, expected, rtol=1e-10)


@pytest.mark.parametrize("samples", [1, 2, 5, 16])
def test_forwards_collapse_without_noise(samples):
    """With sigma=0 and no layer noise both smoothed forwards equal softmax(f(x)) for any M."""
    rng = np.random.default_rng(10)
    model = Model(
        [
            Dense(3, 4, weight=rng.normal(size=(3, 4)), bias=rng.normal(size=4)),
            Dense(4, 3, weight=rng.normal(size=(4, 3)), bias=rng.normal(size=3)),
        ],
        (3,),
    )
    x = rng.uniform(size=(5, 3))
    draw = NoiseDraw(2, 1)
    expected = softmax(model.forward(x))
    soft = smooth_soft_forward(model, x, samples, 0.0, draw)
    logit = smooth_logit_forward(model, x, samples, 0.0, draw)
    np.testing.assert_allclose(soft, expected, rtol=1e-14, atol=1e-16)
    np.testing.assert_allclose(logit, expected, rtol=1e-14, atol=1e-16)
    np.testing.assert_allclose(soft.sum(axis=1), 1.0, atol=1e-12)


def test_oracle_draws_fresh_noise_per_query(noisy_mlp):
    """Repeated identical queries see new noise, and a new oracle replays the same sequence."""
    x = np.random.default_rng(11).uniform(size=(6, 4))
    cfg = SmoothingConfig(samples=4, sigma=0.3)
    oracle = SmoothedOracle(noisy_mlp, cfg, seed=2)
    first, second = oracle(x), oracle(x)
    assert oracle.queries == 2
    assert not np.allclose(first, second)
    np.testing.assert_allclose(first.sum(axis=1), 1.0, atol=1e-12)
    replay = SmoothedOracle(noisy_mlp, cfg, seed=2)
    np.testing.assert_array_equal(replay(x), first)
    np.testing.assert_array_equal(replay(x), second)


def test_oracle_noise_differs_from_evaluation(noisy_mlp):
    """The oracle's samples are not the ones smoothed evaluation votes with at the same seed."""
    x = np.random.default_rng(12).uniform(size=(6, 4))
    evaluated = sample_probabilities(noisy_mlp, x, 4, 0.3, 2)
    queried = sample_probabilities(noisy_mlp, x, 4, 0.3, 2, stream=NoiseStream.QUERY)
    assert not any(np.array_equal(q, e) for q in queried for e in evaluated)
    cfg = SmoothingConfig(samples=4, sigma=0.3, voting=Voting.SOFT, base_seed=2)
    _, aggregate = smooth_predict_batch(noisy_mlp, x, cfg)
    assert not np.allclose(SmoothedOracle(noisy_mlp, cfg, seed=2)(x), aggregate / 4)
