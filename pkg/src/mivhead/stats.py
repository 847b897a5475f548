"""Accuracy aggregation: means, 95% confidence intervals, paired t-tests.

The reporting protocol mirrors the benchmark convention: dataset mean with a
1.96 * sd / sqrt(n) halfwidth, and a two-sided paired t-test between methods
evaluated on the same tasks, with the higher mean marked when p < 0.01.

The Student-t tail probability is computed from scratch via the regularized
incomplete beta function (continued fraction), so tests can check it against
an independent high-precision reference.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass


class StatsError(ValueError):
    pass


@dataclass
class MethodSeries:
    method: str
    config_hash: str
    task_ids: list[str]
    accuracies: list[float]

    def __post_init__(self):
        if len(self.task_ids) != len(self.accuracies):
            raise StatsError("task_ids and accuracies must align")
        for a in self.accuracies:
            if not (0.0 <= a <= 1.0):
                raise StatsError(f"accuracy {a} outside [0, 1]")

    @classmethod
    def from_rows(cls, rows: list[dict], method: str = "") -> "MethodSeries":
        rows = sorted(rows, key=lambda r: r["task_id"])
        return cls(
            method=method or rows[0]["method"],
            config_hash=rows[0].get("config_hash", ""),
            task_ids=[r["task_id"] for r in rows],
            accuracies=[float(r["accuracy"]) for r in rows],
        )


def _mean_sd(values: list[float]) -> tuple[float, float]:
    """Mean and sample sd (n-1), computed on data shifted by the first value
    so that identical inputs give an exact zero sd."""
    n = len(values)
    v0 = values[0]
    shifted = [v - v0 for v in values]
    sm = sum(shifted) / n
    var = sum((s - sm) ** 2 for s in shifted) / (n - 1)
    return v0 + sm, math.sqrt(var)


def mean_ci95(values: list[float]) -> tuple[float, float]:
    """(mean, halfwidth) with halfwidth = 1.96 * sample sd / sqrt(n)."""
    n = len(values)
    if n < 2:
        raise StatsError("need at least 2 values for a confidence interval")
    mean, sd = _mean_sd(values)
    return mean, 1.96 * sd / math.sqrt(n)


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise StatsError("incomplete beta continued fraction did not converge")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x < 0.0 or x > 1.0:
        raise StatsError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    ln_bt = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
             + a * math.log(x) + b * math.log(1.0 - x))
    bt = math.exp(ln_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, df: int) -> float:
    """Two-sided tail probability P(|T_df| >= |t|)."""
    if df < 1:
        raise StatsError("df must be >= 1")
    if math.isinf(t):
        return 0.0
    return betainc_reg(df / 2.0, 0.5, df / (df + t * t))


def student_t_cdf(t: float, df: int) -> float:
    half_tail = 0.5 * student_t_sf2(t, df)
    return 1.0 - half_tail if t >= 0 else half_tail


@dataclass
class TTestResult:
    t: float
    df: int
    p_two_sided: float
    significant_at_1pct: bool
    mean_diff: float


def paired_ttest(a: MethodSeries, b: MethodSeries,
                 alpha: float = 0.01) -> TTestResult:
    """Two-sided paired t-test on per-task accuracies aligned by task_id."""
    if a.task_ids != b.task_ids:
        raise StatsError("series are not aligned by task_id")
    n = len(a.accuracies)
    if n < 2:
        raise StatsError("need at least 2 paired values")
    d = [x - y for x, y in zip(a.accuracies, b.accuracies)]
    mean, sd = _mean_sd(d)
    if sd == 0.0:
        p = 1.0 if mean == 0.0 else 0.0
        t = 0.0 if mean == 0.0 else math.copysign(math.inf, mean)
    else:
        t = mean / (sd / math.sqrt(n))
        p = student_t_sf2(t, n - 1)
    return TTestResult(t=t, df=n - 1, p_two_sided=p,
                       significant_at_1pct=p < alpha, mean_diff=mean)


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------

def render_report(series: list[MethodSeries],
                  pairings: list[tuple[str, str]] | None = None,
                  bold_threshold: float = 0.01) -> tuple[str, dict]:
    """Text table plus a machine-readable mirror.

    `pairings` lists (label_a, label_b) by series method label; for each pair
    the higher mean is marked **bold** when the paired two-sided p-value is
    below `bold_threshold`.
    """
    if not series:
        raise StatsError("no series to report")
    pairings = pairings or []
    by_label = {s.method: s for s in series}
    bold: set[str] = set()
    tests = []
    for la, lb in pairings:
        if la not in by_label or lb not in by_label:
            raise StatsError(f"pairing refers to unknown series ({la}, {lb})")
        res = paired_ttest(by_label[la], by_label[lb], alpha=bold_threshold)
        winner = None
        if res.significant_at_1pct:
            winner = la if res.mean_diff > 0 else lb
            bold.add(winner)
        tests.append({
            "a": la, "b": lb, "t": res.t, "df": res.df,
            "p_two_sided": res.p_two_sided,
            "significant": res.significant_at_1pct,
            "winner": winner,
        })

    lines = ["method                         accuracy            n"]
    lines.append("-" * 54)
    rows = []
    for s in series:
        mean, hw = mean_ci95(s.accuracies)
        cell = f"{100 * mean:.2f} +/- {100 * hw:.2f}"
        if s.method in bold:
            cell = f"**{cell}**"
        lines.append(f"{s.method:<28}  {cell:<18}  {len(s.accuracies)}")
        rows.append({
            "method": s.method, "config_hash": s.config_hash,
            "mean": mean, "ci95_halfwidth": hw, "n_tasks": len(s.accuracies),
            "bold": s.method in bold,
        })
    if len(series) > 1:
        grand = sum(r["mean"] for r in rows) / len(rows)
        lines.append("-" * 54)
        lines.append(f"{'average':<28}  {100 * grand:.2f}")
    for t in tests:
        mark = f"winner: {t['winner']}" if t["winner"] else "not significant"
        lines.append(
            f"paired t-test {t['a']} vs {t['b']}: t={t['t']:.4f} "
            f"df={t['df']} p={t['p_two_sided']:.6f} ({mark})")
    text = "\n".join(lines) + "\n"
    payload = {
        "series": rows,
        "pairings": tests,
        "bold_threshold": bold_threshold,
    }
    return text, payload


def load_results_rows(path: str) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
