"""Streaming metric accumulation, summary merging, and run exports.

Metrics are recorded value by value.  Sums use Neumaier-compensated addition
so means stay within 1e-9 relative error of an exact sum.  Histograms are
kept at unit width while every recorded value is an integer; once a real
value arrives the raw values are retained and bucketed into 64 equal-width
bins over the observed range when a summary is taken.  Bucket labels are the
integer value itself for unit-width histograms and the bin's lower edge for
real-valued ones, so the two cases stay distinguishable in exports.

Exports are byte-deterministic: metrics sorted by name, integers via str(),
floats via repr(), JSON with sorted keys.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import SimError


class SchemaMismatch(SimError):
    """Summaries of the same metric disagree on bucketing and cannot merge."""


@dataclass(frozen=True)
class MetricSummary:
    name: str
    count: int
    min: float | int | None
    max: float | int | None
    mean: float | None
    bucket_width: float | int
    histogram: tuple  # ((bucket, frequency), ...) sorted by bucket


class _Acc:
    __slots__ = ("count", "vmin", "vmax", "total", "comp", "buckets", "raw")

    def __init__(self):
        self.count = 0
        self.vmin = None
        self.vmax = None
        self.total = 0.0
        self.comp = 0.0
        self.buckets: dict | None = {}
        self.raw: list | None = None

    def record(self, value):
        self.count += 1
        if self.vmin is None or value < self.vmin:
            self.vmin = value
        if self.vmax is None or value > self.vmax:
            self.vmax = value
        t = self.total + value
        if abs(self.total) >= abs(value):
            self.comp += (self.total - t) + value
        else:
            self.comp += (value - t) + self.total
        self.total = t
        if self.buckets is not None:
            if isinstance(value, int):
                b = self.buckets
                b[value] = b.get(value, 0) + 1
                return
            # first non-integer value: fall back to raw retention
            raw = []
            for v, f in self.buckets.items():
                raw.extend([v] * f)
            self.buckets = None
            self.raw = raw
        self.raw.append(value)

    def summary(self, name: str) -> MetricSummary:
        if self.count == 0:
            return MetricSummary(name, 0, None, None, None, 1, ())
        mean = (self.total + self.comp) / self.count
        if self.buckets is not None:
            hist = tuple(sorted(self.buckets.items()))
            return MetricSummary(name, self.count, self.vmin, self.vmax, mean, 1, hist)
        lo, hi = self.vmin, self.vmax
        if hi == lo:
            return MetricSummary(
                name, self.count, lo, hi, mean, 0.0, ((float(lo), self.count),)
            )
        width = (hi - lo) / 64
        bins: dict[float, int] = {}
        for v in self.raw:
            i = int((v - lo) / width)
            if i > 63:
                i = 63
            edge = lo + i * width
            bins[edge] = bins.get(edge, 0) + 1
        return MetricSummary(
            name, self.count, lo, hi, mean, width, tuple(sorted(bins.items()))
        )


def merge_summaries(a: MetricSummary, b: MetricSummary) -> MetricSummary:
    """Fold two summaries of the same metric; associative and commutative."""
    if a.name != b.name:
        raise SchemaMismatch(f"cannot merge {a.name!r} with {b.name!r}")
    if a.count == 0:
        return b
    if b.count == 0:
        return a
    a_unit = isinstance(a.bucket_width, int)
    b_unit = isinstance(b.bucket_width, int)
    if a_unit != b_unit or (not a_unit and (a.bucket_width != b.bucket_width or a.min != b.min)):
        raise SchemaMismatch(
            f"{a.name}: bucket layouts differ "
            f"({a.bucket_width!r}@{a.min!r} vs {b.bucket_width!r}@{b.min!r})"
        )
    count = a.count + b.count
    if a_unit:
        # unit-width buckets hold exact integer values, so the merged mean
        # can be rebuilt from exact sums instead of recombined floats
        total = sum(v * f for v, f in a.histogram) + sum(v * f for v, f in b.histogram)
        mean = total / count
    else:
        mean = (a.mean * a.count + b.mean * b.count) / count
    hist: dict = dict(a.histogram)
    for bucket, freq in b.histogram:
        hist[bucket] = hist.get(bucket, 0) + freq
    return MetricSummary(
        a.name,
        count,
        min(a.min, b.min),
        max(a.max, b.max),
        mean,
        a.bucket_width,
        tuple(sorted(hist.items())),
    )


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


class MetricRegistry:
    """Named metric accumulators for one run (or one shard of one run)."""

    def __init__(self):
        self._metrics: dict[str, _Acc] = {}

    def record(self, name: str, value) -> None:
        acc = self._metrics.get(name)
        if acc is None:
            acc = self._metrics[name] = _Acc()
        acc.record(value)

    def declare(self, name: str) -> None:
        """Register a metric so it appears in exports even with no samples."""
        self._metrics.setdefault(name, _Acc())

    def summary(self, name: str) -> MetricSummary:
        return self._metrics[name].summary(name)

    def summaries(self) -> list[MetricSummary]:
        return [self._metrics[n].summary(n) for n in sorted(self._metrics)]

    def names(self) -> list[str]:
        return sorted(self._metrics)

    def write_csv(self, main, hist) -> None:
        write_summaries_csv(self.summaries(), main, hist)

    def write_jsonl(self, out) -> None:
        write_summaries_jsonl(self.summaries(), out)


def write_summaries_csv(summaries, main, hist) -> None:
    """Write summaries (any iterable or name-keyed dict) in name order."""
    main.write("metric,count,min,max,mean\n")
    hist.write("metric,bucket,frequency\n")
    for s in _in_name_order(summaries):
        main.write(f"{s.name},{s.count},{_fmt(s.min)},{_fmt(s.max)},{_fmt(s.mean)}\n")
        for bucket, freq in s.histogram:
            hist.write(f"{s.name},{_fmt(bucket)},{freq}\n")


def write_summaries_jsonl(summaries, out) -> None:
    for s in _in_name_order(summaries):
        out.write(summary_to_json(s))
        out.write("\n")


def _in_name_order(summaries):
    if isinstance(summaries, dict):
        summaries = summaries.values()
    return sorted(summaries, key=lambda s: s.name)


def summary_to_json(s: MetricSummary) -> str:
    return json.dumps(
        {
            "metric": s.name,
            "count": s.count,
            "min": s.min,
            "max": s.max,
            "mean": s.mean,
            "bucket_width": s.bucket_width,
            "histogram": [[b, f] for b, f in s.histogram],
        },
        sort_keys=True,
    )


def summary_from_json(line: str) -> MetricSummary:
    rec = json.loads(line)
    return MetricSummary(
        rec["metric"],
        rec["count"],
        rec["min"],
        rec["max"],
        rec["mean"],
        rec["bucket_width"],
        tuple((b, f) for b, f in rec["histogram"]),
    )


def _parse_num(token: str):
    try:
        return int(token)
    except ValueError:
        return float(token)


def read_summaries_jsonl(src) -> dict[str, MetricSummary]:
    out = {}
    for line in src:
        line = line.strip()
        if line:
            s = summary_from_json(line)
            out[s.name] = s
    return out


def read_summaries_csv(main, hist) -> dict[str, MetricSummary]:
    rows = {}
    header = next(main)
    assert header.strip() == "metric,count,min,max,mean"
    for line in main:
        line = line.rstrip("\n")
        if not line:
            continue
        name, count, vmin, vmax, mean = line.split(",")
        rows[name] = {
            "count": int(count),
            "min": _parse_num(vmin) if vmin else None,
            "max": _parse_num(vmax) if vmax else None,
            "mean": _parse_num(mean) if mean else None,
            "hist": [],
        }
    header = next(hist)
    assert header.strip() == "metric,bucket,frequency"
    for line in hist:
        line = line.rstrip("\n")
        if not line:
            continue
        name, bucket, freq = line.split(",")
        rows[name]["hist"].append((_parse_num(bucket), int(freq)))
    out = {}
    for name, r in rows.items():
        hist_t = tuple(sorted(r["hist"]))
        if r["count"] == 0:
            width: float | int = 1
        elif all(isinstance(b, int) for b, _ in hist_t):
            width = 1
        elif r["max"] == r["min"]:
            width = 0.0
        else:
            width = (r["max"] - r["min"]) / 64
        out[name] = MetricSummary(
            name, r["count"], r["min"], r["max"], r["mean"], width, hist_t
        )
    return out
