"""Generator and distribution checks against frozen reference values.

The raw generator is pinned to published SplitMix64 outputs so any change to
the stream is caught; distribution shapes are checked against closed-form
moments, never against the sampler itself.
"""

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpsim.distributions import DistributionSpec, Sampler, SplitMix64
from dpsim.errors import InvalidParams

# Published reference outputs for the documented generator.
SPLITMIX64_SEED0 = (0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F)
SPLITMIX64_SEED1 = (0x910A2DEC89025CC1, 0xBEEB8DA1658EEC67, 0xF893A2EEFB32555E)


def test_generator_reference_vectors():
    g = SplitMix64(0)
    assert tuple(g.next_u64() for _ in range(3)) == SPLITMIX64_SEED0
    g = SplitMix64(1)
    assert tuple(g.next_u64() for _ in range(3)) == SPLITMIX64_SEED1


def test_generator_seed_mask():
    # seeds are taken mod 2**64
    assert SplitMix64(2**64).next_u64() == SPLITMIX64_SEED0[0]


def test_uniform01_open_interval():
    g = SplitMix64(7)
    vals = [g.next_unit() for _ in range(10_000)]
    assert all(0.0 < v < 1.0 for v in vals)


@given(st.integers(min_value=0, max_value=2**64 - 1))
@settings(max_examples=200)
def test_uniform01_bounds_property(seed):
    v = SplitMix64(seed).next_unit()
    assert 0.0 < v < 1.0


def mean_sd(vals):
    n = len(vals)
    m = math.fsum(vals) / n
    var = math.fsum((v - m) ** 2 for v in vals) / (n - 1)
    return m, math.sqrt(var)


N_DRAWS = 1_000_000


@pytest.fixture(scope="module")
def draws():
    def make(kind, seed=1, **params):
        s = Sampler(DistributionSpec(kind, params, seed))
        return [s.draw() for _ in range(N_DRAWS)]

    return make


def test_uniform_moments(draws):
    vals = draws("uniform", lo=2.0, hi=5.0)
    # mean (lo+hi)/2, var (hi-lo)^2/12
    se = math.sqrt(0.75 / N_DRAWS)
    m, _ = mean_sd(vals)
    assert abs(m - 3.5) <= 3 * se
    assert all(2.0 <= v < 5.0 for v in vals)


def test_normal_moments(draws):
    vals = draws("normal", mu=10.0, sigma=2.0)
    m, sd = mean_sd(vals)
    assert abs(m - 10.0) <= 3 * (2.0 / math.sqrt(N_DRAWS))
    # SE of the sample SD for a normal is sigma/sqrt(2(n-1))
    assert abs(sd - 2.0) <= 3 * (2.0 / math.sqrt(2 * (N_DRAWS - 1)))


def test_beta_moments(draws):
    vals = draws("beta", alpha=2.0, beta=4.0)
    a, b = 2.0, 4.0
    mean = a / (a + b)
    var = a * b / ((a + b) ** 2 * (a + b + 1))
    m, _ = mean_sd(vals)
    assert abs(m - mean) <= 3 * math.sqrt(var / N_DRAWS)
    assert abs(m - (1.0 / 3.0)) <= 0.002
    assert all(0.0 < v < 1.0 for v in vals)


def test_weibull_moments(draws):
    shape, scale = 1.5, 2.0
    vals = draws("weibull", shape=shape, scale=scale)
    mean = scale * math.gamma(1 + 1 / shape)
    var = scale**2 * (math.gamma(1 + 2 / shape) - math.gamma(1 + 1 / shape) ** 2)
    m, _ = mean_sd(vals)
    assert abs(m - mean) <= 3 * math.sqrt(var / N_DRAWS)
    assert all(v > 0 for v in vals)


def test_powerlaw_tail_moments(draws):
    # x = beta * u**(-1/alpha); with alpha=0.5 the mean diverges, but
    # ln(x/beta) is Exponential(alpha): mean 1/alpha, sd 1/alpha.
    alpha, beta = 0.5, 1.0
    vals = draws("powerlaw", alpha=alpha, beta=beta)
    assert min(vals) >= beta
    logs = [math.log(v / beta) for v in vals]
    m, sd = mean_sd(logs)
    assert abs(m - 1 / alpha) <= 3 * (1 / alpha) / math.sqrt(N_DRAWS)
    assert abs(sd - 1 / alpha) <= 3 * (1 / alpha) / math.sqrt(2 * (N_DRAWS - 1))
    med = sorted(vals)[N_DRAWS // 2]
    # density at the median is alpha*beta^alpha*med^-(alpha+1)
    f_med = alpha * beta**alpha * (beta * 2 ** (1 / alpha)) ** -(alpha + 1)
    assert abs(med - beta * 2 ** (1 / alpha)) <= 3 / (2 * f_med * math.sqrt(N_DRAWS))


def test_determinism_same_seed():
    spec = DistributionSpec("beta", {"alpha": 2.0, "beta": 4.0}, seed=99)
    s1, s2 = Sampler(spec), Sampler(spec)
    assert [s1.draw() for _ in range(100)] == [s2.draw() for _ in range(100)]


def test_seed_isolation_first_draw():
    # distinct seeds must diverge at the very first draw
    g = SplitMix64(2024)
    pairs = set()
    while len(pairs) < 1000:
        a = g.next_u64()
        b = g.next_u64()
        if a != b:
            pairs.add((a, b))
    spec = {"alpha": 2.0, "beta": 4.0}
    for a, b in pairs:
        sa = Sampler(DistributionSpec("beta", spec, seed=a))
        sb = Sampler(DistributionSpec("beta", spec, seed=b))
        assert sa.draw() != sb.draw()


def test_rank_mapping_uniform():
    s = Sampler(DistributionSpec("uniform", {"lo": 0.0, "hi": 1.0}, seed=5))
    ranks = [s.draw_rank(10) for _ in range(20_000)]
    assert set(ranks) <= set(range(10))
    counts = [ranks.count(i) for i in range(10)]
    assert all(abs(c - 2000) < 5 * math.sqrt(2000) for c in counts)


def test_rank_mapping_beta_favors_low_ranks():
    s = Sampler(DistributionSpec("beta", {"alpha": 2.0, "beta": 4.0}, seed=5))
    ranks = [s.draw_rank(1000) for _ in range(50_000)]
    assert abs(sum(ranks) / len(ranks) / 1000 - 1 / 3) < 0.01


def test_rank_mapping_unbounded_kinds_stay_in_range():
    for kind, params in [
        ("normal", {"mu": 0.0, "sigma": 1.0}),
        ("weibull", {"shape": 1.5, "scale": 2.0}),
        ("powerlaw", {"alpha": 0.5, "beta": 1.0}),
    ]:
        s = Sampler(DistributionSpec(kind, params, seed=11))
        ranks = [s.draw_rank(97) for _ in range(5000)]
        assert set(ranks) <= set(range(97))


def test_key_mapping_covers_space():
    s = Sampler(DistributionSpec("uniform", {"lo": 0.0, "hi": 1.0}, seed=3))
    keys = [s.draw_key(16) for _ in range(10_000)]
    assert all(0 <= k < 2**16 for k in keys)
    assert max(keys) > 2**15 and min(keys) < 2**15


@pytest.mark.parametrize(
    "kind,params",
    [
        ("uniform", {"lo": 2.0, "hi": 1.0}),
        ("normal", {"mu": 0.0, "sigma": 0.0}),
        ("normal", {"mu": 0.0, "sigma": -1.0}),
        ("beta", {"alpha": -1.0, "beta": 4.0}),
        ("beta", {"alpha": 2.0, "beta": 0.0}),
        ("weibull", {"shape": 0.0, "scale": 1.0}),
        ("weibull", {"shape": 1.0, "scale": -2.0}),
        ("powerlaw", {"alpha": 0.0, "beta": 1.0}),
        ("powerlaw", {"alpha": 0.5, "beta": 0.0}),
        ("triangular", {"lo": 0.0, "hi": 1.0}),
    ],
)
def test_invalid_params_rejected(kind, params):
    with pytest.raises(InvalidParams):
        DistributionSpec(kind, params, seed=1).validate()


def test_degenerate_uniform_is_constant():
    s = Sampler(DistributionSpec("uniform", {"lo": 5.0, "hi": 5.0}, seed=9))
    assert all(s.draw() == 5.0 for _ in range(100))
    assert s.draw_rank(7) == 0
