"""Bias correction, regional age gaps, HCS (RBF-kernel MMD) and NDC."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit
from scipy.stats import spearmanr

from .datagen import HC, TEST, TRAIN, CohortManifest, DiseasePrior, disease_tag

MEDIAN_HEURISTIC = "median-heuristic"
LITERAL_MEDIAN = "literal-median"


class MetricError(ValueError):
    pass


def atlas_priors(level: str = "strong") -> dict[str, DiseasePrior]:
    """PD/AD priors over the 48-region Harvard-Oxford cortical atlas.

    ``level`` selects the region set: ``"strong"`` or ``"strong+potential"``.
    The full three-level relevance map is kept on each prior.
    """
    levels = {"strong": {"strong"}, "strong+potential": {"strong", "potential"}}
    if level not in levels:
        raise ValueError(f"unknown relevance level {level!r}")
    table = json.loads(resources.files("reba").joinpath("data/harvard_oxford_priors.json").read_text())
    out = {}
    for disease in ("PD", "AD"):
        relevance = {r["id"]: r[disease] for r in table["regions"]}
        regions = tuple(r for r, v in relevance.items() if v in levels[level])
        out[disease] = DiseasePrior(disease, regions, relevance)
    return out


@dataclass
class BiasModel:
    """Per-region OLS of raw prediction on chronological age: ``pred ~ intercept + slope * age``."""

    intercept: np.ndarray
    slope: np.ndarray

    def to_json(self) -> dict:
        return {"lambda0": [float(v) for v in self.intercept], "lambda1": [float(v) for v in self.slope]}


def fit_bias(raw: np.ndarray, ages: np.ndarray) -> BiasModel:
    """``raw`` is (N, R) (or (N,) for one region) predictions of the HC training split, ``ages`` (N,)."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 1:
        raw = raw[:, None]
    ages = np.asarray(ages, dtype=np.float64)
    if raw.shape[0] != ages.shape[0]:
        raise MetricError("predictions and ages disagree on subject count")
    if len(np.unique(ages)) < 3:
        raise MetricError("bias fit needs at least 3 distinct ages")
    centred = ages - ages.mean()
    slope = centred @ (raw - raw.mean(axis=0)) / (centred @ centred)
    intercept = raw.mean(axis=0) - slope * ages.mean()
    if not np.all(np.isfinite(slope)):
        raise MetricError("non-finite bias slope")
    return BiasModel(intercept, slope)


def apply_bias(raw, age, bias: BiasModel, region: int | None = None):
    """Remove the fitted age trend: ``raw - ((l0 + l1 * age) - age)``.

    ``region`` is 1-based; without it ``raw`` is (..., R) and all regions are
    corrected at once with ``age`` broadcast over the last axis.
    """
    raw = np.asarray(raw, dtype=np.float64)
    age = np.asarray(age, dtype=np.float64)
    if region is not None:
        l0, l1 = bias.intercept[region - 1], bias.slope[region - 1]
        return raw - ((l0 + l1 * age) - age)
    age = age[..., None]
    return raw - ((bias.intercept + bias.slope * age) - age)


def delta_reba(prediction, age):
    return np.asarray(prediction, dtype=np.float64) - np.asarray(age, dtype=np.float64)


def rbf_kernel(a, b, bandwidth: float) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    # scale before squaring so a tiny bandwidth cannot underflow to 0/0
    return np.exp(-0.5 * ((a[:, None] - b[None, :]) / bandwidth) ** 2)


def bandwidth(a, b, rule: str = MEDIAN_HEURISTIC, fallback: float = 1.0) -> float:
    """Kernel width from the pooled sample.

    ``median-heuristic``: median absolute pairwise difference of the union.
    ``literal-median``: median of the pooled values themselves.
    A zero median falls back to ``fallback``; anything still <= 0 is an error.
    """
    pooled = np.concatenate([np.asarray(a, np.float64), np.asarray(b, np.float64)])
    if rule == MEDIAN_HEURISTIC:
        i, j = np.triu_indices(len(pooled), k=1)
        m = float(np.median(np.abs(pooled[i] - pooled[j])))
    elif rule == LITERAL_MEDIAN:
        m = float(np.median(pooled))
    else:
        try:
            m = float(rule)
        except (TypeError, ValueError):
            raise MetricError(f"unknown bandwidth rule {rule!r}") from None
    if m == 0.0:
        m = fallback
    if not m > 0:
        raise MetricError(f"kernel bandwidth must be positive, got {m}")
    return m


def mmd(a, b, rule: str | float = MEDIAN_HEURISTIC, fallback: float = 1.0) -> float:
    """Unbiased squared MMD with an RBF kernel (may be negative)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise MetricError("MMD needs at least two samples on each side")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise MetricError("MMD inputs must be finite")
    m = float(rule) if isinstance(rule, (int, float)) else bandwidth(a, b, rule, fallback)
    if not m > 0:
        raise MetricError(f"kernel bandwidth must be positive, got {m}")
    na, nb = len(a), len(b)
    kaa = rbf_kernel(a, a, m)
    kbb = rbf_kernel(b, b, m)
    kab = rbf_kernel(a, b, m)
    # exactly rounded sums make the estimate independent of argument order
    within_a = (math.fsum(kaa.ravel()) - math.fsum(np.diag(kaa))) / (na * (na - 1))
    within_b = (math.fsum(kbb.ravel()) - math.fsum(np.diag(kbb))) / (nb * (nb - 1))
    return float(within_a + within_b - 2.0 * math.fsum(kab.ravel()) / (na * nb))


def hcs_region(gaps_train, gaps_test, rule=MEDIAN_HEURISTIC, fallback: float = 1.0, clamp: bool = True) -> float:
    """``1 - clamp(MMD, 0, 1)``; with ``clamp=False`` the raw ``1 - MMD`` (diagnostics only)."""
    d = mmd(gaps_train, gaps_test, rule, fallback)
    return 1.0 - float(np.clip(d, 0.0, 1.0) if clamp else d)


def ndc_subject(gaps, regions: Sequence[int]) -> float:
    """Mean logistic of the gaps over a disease's (1-based) prior regions.

    ``gaps`` is the subject's full (R,) gap vector.
    """
    regions = list(regions)
    if not regions:
        raise MetricError("empty disease region set")
    gaps = np.asarray(gaps, dtype=np.float64)
    return float(np.mean(expit(gaps[np.asarray(regions) - 1])))


def ndc_cohort(gaps: np.ndarray, regions: Sequence[int]) -> np.ndarray:
    if not len(regions):
        raise MetricError("empty disease region set")
    return expit(np.asarray(gaps, np.float64)[:, np.asarray(regions) - 1]).mean(axis=1)


def oracle_spearman(pred: np.ndarray, planted: np.ndarray) -> np.ndarray:
    """Per-subject rank correlation across regions; constant rows count as 0."""
    out = np.zeros(len(pred))
    for n, (p, t) in enumerate(zip(pred, planted)):
        if np.ptp(p) == 0 or np.ptp(t) == 0:
            continue
        out[n] = spearmanr(p, t).statistic
    return out


def histograms(gaps_by_cohort: Mapping[str, np.ndarray], width: float = 1.0, lo: float = -25.0, hi: float = 25.0) -> pd.DataFrame:
    edges = np.arange(lo, hi + width / 2, width)
    rows = []
    for cohort, gaps in gaps_by_cohort.items():
        for r in range(gaps.shape[1]):
            counts, _ = np.histogram(gaps[:, r], bins=edges)
            rows += [
                {"region": r + 1, "cohort": cohort, "bin_left": float(e), "count": int(c)}
                for e, c in zip(edges[:-1], counts)
            ]
    return pd.DataFrame(rows, columns=["region", "cohort", "bin_left", "count"])


@dataclass
class MetricConfig:
    bandwidth: str = MEDIAN_HEURISTIC
    bandwidth_fallback: float = 1.0
    clamp: bool = True
    raw: bool = False
    hist_width: float = 1.0
    hist_range: list[float] = field(default_factory=lambda: [-25.0, 25.0])


@dataclass
class MetricsReport:
    hcs_per_region: list[float]
    hcs_overall: float
    ndc_per_subject: pd.DataFrame
    ndc_cohort_mean: dict[str, dict[str, float]]
    ndc_differences: dict[str, float]
    bias: BiasModel
    oracle: dict[str, float]
    histograms: pd.DataFrame
    raw: dict | None = None

    def to_json(self, config_echo: dict | None = None) -> dict:
        out = {
            "hcs": {"per_region": self.hcs_per_region, "overall": self.hcs_overall},
            "ndc": {"cohort_mean": self.ndc_cohort_mean, "differences": self.ndc_differences},
            "bias_correction": self.bias.to_json(),
            "oracle": self.oracle,
        }
        if self.raw is not None:
            out["raw"] = self.raw
        if config_echo is not None:
            out["config"] = config_echo
        return out


def _cohort_label(cohort: str) -> str:
    return cohort.split(":", 1)[1] if cohort.startswith("disease:") else cohort


def cohort_report(
    predictions: pd.DataFrame,
    manifest: CohortManifest,
    priors: Mapping[str, DiseasePrior],
    config: MetricConfig | None = None,
    hc_shift: float = 0.0,
) -> MetricsReport:
    """Evaluate a prediction table covering HC train, HC test and disease cohorts.

    Gaps use bias-corrected predictions; ``config.raw`` adds the uncorrected
    metrics under ``raw``. ``hc_shift`` adds a constant to every HC-test gap
    (drift-detection experiments).
    """
    config = config or MetricConfig()
    corrected, ages, bias = _corrected(predictions, manifest)
    report = _metrics(predictions, corrected, ages, manifest, priors, config, hc_shift)
    report.bias = bias
    if config.raw:
        raw = predictions[_reba_cols(predictions)].to_numpy(np.float64)
        raw_report = _metrics(predictions, raw, ages, manifest, priors, config, hc_shift)
        report.raw = {
            "hcs": {"per_region": raw_report.hcs_per_region, "overall": raw_report.hcs_overall},
            "ndc": {"cohort_mean": raw_report.ndc_cohort_mean, "differences": raw_report.ndc_differences},
            "oracle": raw_report.oracle,
        }
    return report


def _reba_cols(df: pd.DataFrame) -> list[str]:
    cols = [c for c in df.columns if c.startswith("reba_r")]
    return sorted(cols, key=lambda c: int(c[len("reba_r"):]))


def _corrected(predictions: pd.DataFrame, manifest: CohortManifest):
    raw = predictions[_reba_cols(predictions)].to_numpy(np.float64)
    ages = predictions["age"].to_numpy(np.float64)
    train = ((predictions["cohort"] == HC) & (predictions["split"] == TRAIN)).to_numpy()
    if not train.any():
        raise MetricError("missing cohort: HC train predictions are required for the bias fit")
    bias = fit_bias(raw[train], ages[train])
    return apply_bias(raw, ages, bias), ages, bias


def _metrics(predictions, values, ages, manifest, priors, config, hc_shift) -> MetricsReport:
    gaps = delta_reba(values, ages[:, None])
    cohort = predictions["cohort"].to_numpy()
    split = predictions["split"].to_numpy()
    ids = predictions["id"].astype(str).to_numpy()
    hc_train = (cohort == HC) & (split == TRAIN)
    hc_test = (cohort == HC) & (split == TEST)
    if not hc_test.any():
        raise MetricError("missing cohort: HC test predictions are required for HCS")
    gaps_test = gaps[hc_test] + hc_shift
    lo, hi = config.hist_range
    R = gaps.shape[1]
    hcs = [
        hcs_region(gaps[hc_train, r], gaps_test[:, r], config.bandwidth, config.bandwidth_fallback, config.clamp)
        for r in range(R)
    ]

    groups = {"HC": hc_test}
    for name in priors:
        mask = cohort == disease_tag(name)
        if mask.any():
            groups[name] = mask
    ndc_rows = []
    cohort_mean: dict[str, dict[str, float]] = {}
    diffs: dict[str, float] = {}
    for name, prior in sorted(priors.items()):
        regions = list(prior.regions)
        cohort_mean[name] = {}
        for label, mask in groups.items():
            g = gaps_test if label == "HC" else gaps[mask]
            vals = ndc_cohort(g, regions)
            cohort_mean[name][label] = float(vals.mean())
            ndc_rows += [
                {"id": i, "cohort": label, "prior": name, "ndc": float(v)} for i, v in zip(ids[mask], vals)
            ]
        if name in groups:
            for label in groups:
                if label != name:
                    diffs[f"{name.lower()}-{label.lower()}"] = cohort_mean[name][name] - cohort_mean[name][label]

    planted = np.stack([manifest.record(i).planted_regional_age for i in ids])
    rho_test = oracle_spearman(values[hc_test], planted[hc_test])
    oracle = {
        "spearman_hc_test_mean": float(rho_test.mean()),
        "spearman_hc_train_mean": float(oracle_spearman(values[hc_train], planted[hc_train]).mean()),
        "mae_vs_planted_hc_test": float(np.mean(np.abs(values[hc_test] - planted[hc_test]))),
        "region_spread_hc_test_mean": float(values[hc_test].std(axis=1).mean()),
    }
    hist = histograms(
        {"HC-train": gaps[hc_train], "HC-test": gaps_test, **{k: gaps[m] for k, m in groups.items() if k != "HC"}},
        config.hist_width,
        lo,
        hi,
    )
    return MetricsReport(
        hcs_per_region=[float(h) for h in hcs],
        hcs_overall=float(np.mean(hcs)),
        ndc_per_subject=pd.DataFrame(ndc_rows, columns=["id", "cohort", "prior", "ndc"]),
        ndc_cohort_mean=cohort_mean,
        ndc_differences=diffs,
        bias=None,
        oracle=oracle,
        histograms=hist,
    )
