"""Seeded random streams and workload distributions.

Every random decision in the simulator flows through one generator so runs
are reproducible from a single integer seed, and so other implementations can
replay identical streams.  The full recipe:

Generator
    SplitMix64.  64-bit state, seeded with the user seed mod 2**64.  Each step
    adds 0x9E3779B97F4A7C15 to the state, then mixes the state z through
    ``z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9``,
    ``z = (z ^ (z >> 27)) * 0x94D049BB133111EB``, ``z = z ^ (z >> 31)``
    (all mod 2**64) to produce the output word.

Unit interval
    ``u = ((word >> 11) + 0.5) * 2**-53`` which lies strictly inside (0, 1).

Distributions (in draw order, one or more unit draws each):
    uniform(lo, hi)      lo + u * (hi - lo)
    normal(mu, sigma)    Box-Muller: r = sqrt(-2 ln u1); returns
                         mu + sigma * r * cos(2 pi u2) and caches the sin
                         variant for the next call on the same sampler.
    beta(alpha, beta)    g1 / (g1 + g2) from two gamma draws (below).
    weibull(shape,scale) scale * (-ln u) ** (1 / shape)
    powerlaw(alpha,beta) beta * u ** (-1 / alpha)   (Pareto tail, x >= beta)

Gamma draws use Marsaglia-Tsang: for a >= 1, d = a - 1/3, c = 1/(3 sqrt(d)),
repeat {x = normal draw; v = (1 + c x)^3; accept d*v when v > 0 and
ln(u) < x^2/2 + d - d v + d ln v}; for a < 1 draw gamma(a + 1) and multiply
by u ** (1/a).  The rejection loops consume the same stream, so identical
seeds replay identical draw sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import InvalidParams

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

KINDS = ("uniform", "normal", "beta", "weibull", "powerlaw")

_REQUIRED = {
    "uniform": ("lo", "hi"),
    "normal": ("mu", "sigma"),
    "beta": ("alpha", "beta"),
    "weibull": ("shape", "scale"),
    "powerlaw": ("alpha", "beta"),
}


class SplitMix64:
    """The documented base generator; 64-bit state, one output per step."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = s = (self.state + _GOLDEN) & _MASK
        z = ((s ^ (s >> 30)) * _MIX1) & _MASK
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK
        return z ^ (z >> 31)

    def next_unit(self) -> float:
        # strictly inside (0, 1) so logs and inverse power transforms are safe
        return ((self.next_u64() >> 11) + 0.5) * 2.0**-53

    def next_below(self, n: int) -> int:
        """Integer in [0, n) by scaling a unit draw (n up to 2**53)."""
        v = int(self.next_unit() * n)
        return n - 1 if v >= n else v


@dataclass(frozen=True)
class DistributionSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def validate(self) -> "DistributionSpec":
        if self.kind not in _REQUIRED:
            raise InvalidParams(f"unknown distribution kind {self.kind!r}")
        missing = [k for k in _REQUIRED[self.kind] if k not in self.params]
        if missing:
            raise InvalidParams(f"{self.kind}: missing parameters {missing}")
        p = self.params
        if self.kind == "uniform" and not p["lo"] <= p["hi"]:
            raise InvalidParams("uniform: requires lo <= hi")
        if self.kind == "normal" and not p["sigma"] > 0:
            raise InvalidParams("normal: requires sigma > 0")
        if self.kind == "beta" and not (p["alpha"] > 0 and p["beta"] > 0):
            raise InvalidParams("beta: requires alpha > 0 and beta > 0")
        if self.kind == "weibull" and not (p["shape"] > 0 and p["scale"] > 0):
            raise InvalidParams("weibull: requires shape > 0 and scale > 0")
        if self.kind == "powerlaw" and not (p["alpha"] > 0 and p["beta"] > 0):
            raise InvalidParams("powerlaw: requires alpha > 0 and beta > 0")
        return self


class Sampler:
    """Draws values, node ranks, and keys from one seeded distribution."""

    def __init__(self, spec: DistributionSpec):
        spec.validate()
        self.spec = spec
        self.rng = SplitMix64(spec.seed)
        self._spare_normal: float | None = None
        self._draw = getattr(self, "_draw_" + spec.kind)

    def draw(self) -> float:
        return self._draw()

    def _draw_uniform(self) -> float:
        p = self.spec.params
        return p["lo"] + self.rng.next_unit() * (p["hi"] - p["lo"])

    def _std_normal(self) -> float:
        if self._spare_normal is not None:
            z, self._spare_normal = self._spare_normal, None
            return z
        u1 = self.rng.next_unit()
        u2 = self.rng.next_unit()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare_normal = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def _draw_normal(self) -> float:
        p = self.spec.params
        return p["mu"] + p["sigma"] * self._std_normal()

    def _std_gamma(self, a: float) -> float:
        if a < 1.0:
            return self._std_gamma(a + 1.0) * self.rng.next_unit() ** (1.0 / a)
        d = a - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self._std_normal()
            t = 1.0 + c * x
            if t <= 0.0:
                continue
            v = t * t * t
            u = self.rng.next_unit()
            if math.log(u) < 0.5 * x * x + d - d * v + d * math.log(v):
                return d * v

    def _draw_beta(self) -> float:
        p = self.spec.params
        g1 = self._std_gamma(p["alpha"])
        g2 = self._std_gamma(p["beta"])
        return g1 / (g1 + g2)

    def _draw_weibull(self) -> float:
        p = self.spec.params
        return p["scale"] * (-math.log(self.rng.next_unit())) ** (1.0 / p["shape"])

    def _draw_powerlaw(self) -> float:
        p = self.spec.params
        return p["beta"] * self.rng.next_unit() ** (-1.0 / p["alpha"])

    def _unit_position(self) -> float:
        """A draw squashed into [0, 1) for rank and key scaling.

        uniform scales linearly over (lo, hi) and beta is already unit-range;
        the unbounded kinds go through their own CDF, which makes their rank
        profile uniform but keeps every kind usable as a selector.
        """
        p = self.spec.params
        kind = self.spec.kind
        x = self._draw()
        if kind == "uniform":
            span = p["hi"] - p["lo"]
            u = (x - p["lo"]) / span if span else 0.0
        elif kind == "beta":
            u = x
        elif kind == "normal":
            u = 0.5 * (1.0 + math.erf((x - p["mu"]) / (p["sigma"] * math.sqrt(2.0))))
        elif kind == "weibull":
            u = 1.0 - math.exp(-((x / p["scale"]) ** p["shape"]))
        else:  # powerlaw
            u = 1.0 - (p["beta"] / x) ** p["alpha"]
        if u < 0.0:
            return 0.0
        if u >= 1.0:
            return math.nextafter(1.0, 0.0)
        return u

    def draw_rank(self, n: int) -> int:
        """Rank in [0, n)."""
        if n <= 0:
            raise InvalidParams("rank domain must be non-empty")
        v = int(self._unit_position() * n)
        return n - 1 if v >= n else v

    def draw_key(self, key_bits: int) -> int:
        """Key in [0, 2**key_bits)."""
        return self.draw_rank(1 << key_bits)
