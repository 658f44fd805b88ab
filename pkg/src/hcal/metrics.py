"""Calibration metric suite: top-label, classwise, and canonical estimators.

Conventions shared across the suite:

* top-label confidence is the row max; the predicted class is the argmax
  with lowest-index tie-break (same convention as the mapping families);
* binned metrics default to 15 bins; equal-width bin m covers
  [m/bins, (m+1)/bins) with the last bin closed at 1;
* equal-mass bins are contiguous runs of the stably-sorted confidences, so
  bin sizes differ by at most one and ties keep their input order.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from . import loss as loss_mod
from .loss import kmeans_1d

DEFAULT_BINS = 15


# ---------------------------------------------------------------------------
# shared helpers


def top_label(probs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(confidence, correctness) of the argmax prediction per sample."""
    probs = np.asarray(probs, dtype=np.float64)
    pred = probs.argmax(axis=1)
    return probs.max(axis=1), (pred == np.asarray(labels)).astype(np.float64)


def equal_width_bin_index(values: np.ndarray, bins: int) -> np.ndarray:
    """Bin index for values in [0, 1]; bin m is [m/bins, (m+1)/bins), the
    topmost bin also contains 1."""
    edges = np.arange(bins + 1) / bins
    idx = np.searchsorted(edges, values, side="right") - 1
    return np.clip(idx, 0, bins - 1)


def equal_mass_slices(n: int, bins: int) -> list[slice]:
    """Contiguous index slices with sizes differing by at most one."""
    bounds = (np.arange(bins + 1) * n) // bins
    return [slice(int(bounds[k]), int(bounds[k + 1])) for k in range(bins)]


def _require_nonempty(probs: np.ndarray) -> None:
    if np.asarray(probs).shape[0] == 0:
        raise ValueError("empty input")


@dataclass
class BinStats:
    """Per-bin reliability statistics for the top-label prediction."""

    lower: np.ndarray
    upper: np.ndarray
    counts: np.ndarray
    mean_confidence: np.ndarray  # NaN for empty bins
    accuracy: np.ndarray  # NaN for empty bins
    overall_confidence: float
    overall_accuracy: float

    @property
    def n_bins(self) -> int:
        return self.counts.size

    def to_csv(self, path: str | Path | None = None) -> str:
        """Bin table for external plotting (one row per bin)."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["lower", "upper", "count", "mean_confidence", "accuracy"])
        for m in range(self.n_bins):
            writer.writerow([
                repr(float(self.lower[m])),
                repr(float(self.upper[m])),
                int(self.counts[m]),
                repr(float(self.mean_confidence[m])),
                repr(float(self.accuracy[m])),
            ])
        writer.writerow(["overall", "", int(self.counts.sum()),
                         repr(self.overall_confidence), repr(self.overall_accuracy)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def reliability_data(probs: np.ndarray, labels: np.ndarray, bins: int = DEFAULT_BINS) -> BinStats:
    """Equal-width top-label bin statistics plus the overall aggregates."""
    _require_nonempty(probs)
    conf, correct = top_label(probs, labels)
    idx = equal_width_bin_index(conf, bins)
    counts = np.bincount(idx, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    corr_sum = np.bincount(idx, weights=correct, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.where(counts > 0, conf_sum / np.maximum(counts, 1), np.nan)
        acc = np.where(counts > 0, corr_sum / np.maximum(counts, 1), np.nan)
    edges = np.arange(bins + 1) / bins
    return BinStats(
        lower=edges[:-1],
        upper=edges[1:],
        counts=counts,
        mean_confidence=mean_conf,
        accuracy=acc,
        overall_confidence=float(conf.mean()),
        overall_accuracy=float(correct.mean()),
    )


# ---------------------------------------------------------------------------
# top-label metrics


def ece(
    probs: np.ndarray,
    labels: np.ndarray,
    binning: str = "equal_width",
    bins: int = DEFAULT_BINS,
    r: int = 1,
) -> float:
    """Binned expected calibration error of the top-label prediction.

    r=1 is the count-weighted mean absolute accuracy/confidence gap; r=2 is
    the square root of the count-weighted mean squared gap.
    """
    _require_nonempty(probs)
    conf, correct = top_label(probs, labels)
    n = conf.size
    if binning == "equal_width":
        stats = reliability_data(probs, labels, bins)
        mask = stats.counts > 0
        gap = np.abs(stats.accuracy[mask] - stats.mean_confidence[mask])
        w = stats.counts[mask] / n
    elif binning == "equal_mass":
        order = np.argsort(conf, kind="stable")
        c, k = conf[order], correct[order]
        gaps, ws = [], []
        for sl in equal_mass_slices(n, bins):
            if sl.stop == sl.start:
                continue
            gaps.append(abs(k[sl].mean() - c[sl].mean()))
            ws.append((sl.stop - sl.start) / n)
        gap, w = np.array(gaps), np.array(ws)
    else:
        raise ValueError(f"unknown binning {binning!r}")
    if r == 1:
        return float(w @ gap)
    if r == 2:
        return float(np.sqrt(w @ (gap * gap)))
    raise ValueError(f"order r must be 1 or 2, got {r}")


def dece(probs: np.ndarray, labels: np.ndarray, bins: int = DEFAULT_BINS) -> float:
    """Debiased equal-mass calibration error.

    Subtracts the per-bin plug-in variance A(1-A)/(|B|-1) from each squared
    gap, floors the weighted total at zero, and takes the square root.  Every
    bin must contain at least 2 samples.
    """
    _require_nonempty(probs)
    conf, correct = top_label(probs, labels)
    n = conf.size
    order = np.argsort(conf, kind="stable")
    c, k = conf[order], correct[order]
    total = 0.0
    for sl in equal_mass_slices(n, bins):
        size = sl.stop - sl.start
        if size < 2:
            raise ValueError(
                f"debiased ECE needs >= 2 samples per bin; a bin got {size} "
                f"(N={n}, bins={bins})"
            )
        acc = k[sl].mean()
        gap = acc - c[sl].mean()
        total += (size / n) * (gap * gap - acc * (1.0 - acc) / (size - 1))
    return float(np.sqrt(max(total, 0.0)))


def ace(probs: np.ndarray, labels: np.ndarray, bins: int = DEFAULT_BINS) -> float:
    """Unweighted mean absolute gap over the nonempty equal-width bins."""
    _require_nonempty(probs)
    stats = reliability_data(probs, labels, bins)
    mask = stats.counts > 0
    return float(np.abs(stats.accuracy[mask] - stats.mean_confidence[mask]).mean())


def sweep_ece(probs: np.ndarray, labels: np.ndarray, r: int = 1) -> float:
    """Equal-mass ECE at the largest bin count with monotone bin accuracies.

    Scans bin counts from N downward and stops at the first count whose
    bin-wise accuracies are non-decreasing in confidence order (count 1 is
    always monotone, so the scan terminates).
    """
    _require_nonempty(probs)
    conf, correct = top_label(probs, labels)
    n = conf.size
    order = np.argsort(conf, kind="stable")
    c, k = conf[order], correct[order]
    csum_k = np.concatenate([[0.0], np.cumsum(k)])
    csum_c = np.concatenate([[0.0], np.cumsum(c)])
    for b in range(n, 0, -1):
        bounds = (np.arange(b + 1) * n) // b
        sizes = np.diff(bounds)
        accs = np.diff(csum_k[bounds]) / sizes
        if np.all(np.diff(accs) >= 0):
            gaps = np.abs(accs - np.diff(csum_c[bounds]) / sizes)
            w = sizes / n
            if r == 1:
                return float(w @ gaps)
            return float(np.sqrt(w @ (gaps * gaps)))
    raise AssertionError("unreachable: a single bin is always monotone")


def ks_error(probs: np.ndarray, labels: np.ndarray) -> float:
    """Max gap between cumulative correctness and confidence mass, over
    samples in (stable) ascending confidence order."""
    _require_nonempty(probs)
    conf, correct = top_label(probs, labels)
    order = np.argsort(conf, kind="stable")
    n = conf.size
    h = np.cumsum(correct[order]) / n
    g = np.cumsum(conf[order]) / n
    return float(np.abs(h - g).max())


def mmce(probs: np.ndarray, labels: np.ndarray, kernel_bandwidth: float = 0.4) -> float:
    """Kernel-embedding top-label calibration error with a Laplacian kernel.

    Returns sqrt of the (zero-floored) biased V-statistic
    (1/N^2) sum_ij (e_i - c_i) exp(-|c_i - c_j| / bw) (e_j - c_j).
    """
    _require_nonempty(probs)
    conf, correct = top_label(probs, labels)
    resid = correct - conf
    n = conf.size
    total = 0.0
    block = 2048
    for s in range(0, n, block):
        cs = conf[s:s + block]
        kmat = np.exp(-np.abs(cs[:, None] - conf[None, :]) / kernel_bandwidth)
        total += float(resid[s:s + block] @ kmat @ resid)
    return float(np.sqrt(max(total / (n * n), 0.0)))


def kde_ece(
    probs: np.ndarray,
    labels: np.ndarray,
    bandwidth: float | None = None,
    grid_points: int = 1024,
) -> float:
    """Kernel-smoothed top-label calibration error.

    Gaussian-kernel Nadaraya-Watson estimate of accuracy given confidence,
    integrated (trapezoid rule) against the smoothed confidence density on a
    fixed grid over [1/L, 1].  Default bandwidth is the 1.06 * sigma * N^-1/5
    rule of thumb, floored at 1e-3.
    """
    _require_nonempty(probs)
    conf, correct = top_label(probs, labels)
    n, n_classes = np.asarray(probs).shape
    if bandwidth is None:
        sigma = float(np.std(conf, ddof=1)) if n > 1 else 0.0
        bandwidth = max(1.06 * sigma * n ** (-0.2), 1e-3)
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be > 0, got {bandwidth}")
    grid = np.linspace(1.0 / n_classes, 1.0, grid_points)
    t = (grid[:, None] - conf[None, :]) / bandwidth
    kmat = np.exp(-0.5 * t * t)  # unnormalized Gaussian
    denom = kmat.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        pi = np.where(denom > 0, kmat @ correct / np.maximum(denom, 1e-300), 0.0)
    density = denom / (n * bandwidth * np.sqrt(2.0 * np.pi))
    integrand = np.where(denom > 0, np.abs(grid - pi) * density, 0.0)
    return float(np.trapezoid(integrand, grid))


# ---------------------------------------------------------------------------
# classwise metrics


def _classwise_bin_gaps(
    class_probs: np.ndarray, class_events: np.ndarray, bins: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-bin (count, |mean event - mean prob|) for one class column."""
    idx = equal_width_bin_index(class_probs, bins)
    counts = np.bincount(idx, minlength=bins)
    p_sum = np.bincount(idx, weights=class_probs, minlength=bins)
    e_sum = np.bincount(idx, weights=class_events, minlength=bins)
    mask = counts > 0
    gaps = np.abs(e_sum[mask] - p_sum[mask]) / counts[mask]
    return counts[mask], gaps


def cwece(
    probs: np.ndarray,
    labels: np.ndarray,
    variant: str = "a",
    bins: int | None = None,
) -> float:
    """Classwise binned calibration error.

    variant "a": class-averaged (1/L factor), 15 bins.  variant "s": summed
    over classes (no 1/L), 14 bins by default to keep it distinct from "a".
    variant "r2": order-2 with square root, class-averaged, 15 bins.
    """
    _require_nonempty(probs)
    probs = np.asarray(probs, dtype=np.float64)
    n, n_classes = probs.shape
    if bins is None:
        bins = DEFAULT_BINS - 1 if variant == "s" else DEFAULT_BINS
    events = (np.asarray(labels)[:, None] == np.arange(n_classes)[None, :]).astype(np.float64)
    total = 0.0
    for l in range(n_classes):
        counts, gaps = _classwise_bin_gaps(probs[:, l], events[:, l], bins)
        if variant == "r2":
            total += float((counts / n) @ (gaps * gaps))
        else:
            total += float((counts / n) @ gaps)
    if variant == "a":
        return total / n_classes
    if variant == "s":
        return total
    if variant == "r2":
        return float(np.sqrt(total / n_classes))
    raise ValueError(f"unknown cwece variant {variant!r}")


def tcwece(
    probs: np.ndarray,
    labels: np.ndarray,
    threshold: float | None = None,
    bins: int = DEFAULT_BINS,
) -> float:
    """Thresholded classwise error: only (sample, class) entries with
    probability strictly above ``threshold`` (default 1/L) are scored.

    Per class the gaps are weighted by retained count; classes with no
    retained entries are skipped and the rest averaged.
    """
    return _tcwece_impl(probs, labels, threshold, bins, kmeans_bins=None)


def tcwece_k(
    probs: np.ndarray,
    labels: np.ndarray,
    k: int = DEFAULT_BINS,
    threshold: float | None = None,
) -> float:
    """Thresholded classwise error with 1-D k-means bin assignments instead
    of fixed equal-width edges."""
    return _tcwece_impl(probs, labels, threshold, bins=None, kmeans_bins=k)


def _tcwece_impl(probs, labels, threshold, bins, kmeans_bins) -> float:
    _require_nonempty(probs)
    probs = np.asarray(probs, dtype=np.float64)
    n, n_classes = probs.shape
    if threshold is None:
        threshold = 1.0 / n_classes
    if not 0.0 <= threshold < 1.0:
        raise ValueError(f"threshold must be in [0, 1), got {threshold}")
    events = (np.asarray(labels)[:, None] == np.arange(n_classes)[None, :]).astype(np.float64)
    per_class = []
    for l in range(n_classes):
        keep = probs[:, l] > threshold
        retained = int(keep.sum())
        if retained == 0:
            continue
        p, e = probs[keep, l], events[keep, l]
        if kmeans_bins is None:
            counts, gaps = _classwise_bin_gaps(p, e, bins)
        else:
            kk = min(kmeans_bins, retained)
            _, assign = kmeans_1d(p, kk)
            counts = np.bincount(assign, minlength=kk)
            p_sum = np.bincount(assign, weights=p, minlength=kk)
            e_sum = np.bincount(assign, weights=e, minlength=kk)
            mask = counts > 0
            counts, gaps = counts[mask], np.abs(e_sum[mask] - p_sum[mask]) / counts[mask]
        per_class.append(float((counts / retained) @ gaps))
    if not per_class:
        raise ValueError(f"no entries retained above threshold {threshold}")
    return float(np.mean(per_class))


# ---------------------------------------------------------------------------
# canonical metrics


def skce(probs: np.ndarray, labels: np.ndarray, kernel_bandwidth: float = 1.0) -> float:
    """Unbiased pairwise kernel calibration error over full probability rows.

    Matrix kernel = exp(-||p - p'||_1 / bw) * identity, so each pair
    contributes exp(-||p_i - p_j||_1 / bw) <e_i - p_i, e_j - p_j>.  The
    unbiased estimator averages over the N(N-1)/2 unordered pairs and may be
    negative.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n, n_classes = probs.shape
    if n < 2:
        raise ValueError("SKCE needs at least 2 samples")
    resid = probs.copy()
    resid[np.arange(n), labels] -= 1.0
    resid = -resid  # e - p
    total = 0.0
    block = 256
    for s in range(0, n, block):
        pb = probs[s:s + block]
        l1 = np.abs(pb[:, None, :] - probs[None, :, :]).sum(axis=2)
        kmat = np.exp(-l1 / kernel_bandwidth)
        inner = resid[s:s + block] @ resid.T
        contrib = kmat * inner
        # keep strictly upper-triangular pairs (global i < j)
        rows = np.arange(s, min(s + block, n))[:, None]
        total += float(contrib[rows < np.arange(n)[None, :]].sum())
    return float(total / (n * (n - 1) / 2))


def dkde_ce(
    probs: np.ndarray,
    labels: np.ndarray,
    bandwidth: float = 1.0,
    order: int = 2,
) -> float:
    """Leave-one-out Dirichlet-kernel estimate of the canonical gap.

    Kernels are evaluated in the log domain (gammaln) so large class counts
    do not overflow; probabilities are clamped at 1e-12 and renormalized for
    the kernel only.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n, n_classes = probs.shape
    if n < 2:
        raise ValueError("DKDE-CE needs at least 2 samples")
    safe = np.maximum(probs, 1e-12)
    safe = safe / safe.sum(axis=1, keepdims=True)
    alpha = safe / bandwidth  # kernel parameters b_l / h per row
    # log K(a_j ; b_i) = lgamma(L + sum alpha_i) - sum lgamma(1 + alpha_i)
    #                    + sum alpha_i * log a_j
    const_i = gammaln(n_classes + alpha.sum(axis=1)) - gammaln(1.0 + alpha).sum(axis=1)
    logk = const_i[:, None] + alpha @ np.log(safe).T  # [i, j]
    np.fill_diagonal(logk, -np.inf)
    logk -= logk.max(axis=0, keepdims=True)  # stabilize per column j
    w = np.exp(logk)
    w /= w.sum(axis=0, keepdims=True)
    events = (np.asarray(labels)[:, None] == np.arange(n_classes)[None, :]).astype(np.float64)
    pi = w.T @ events  # [j, L] leave-one-out estimate
    diff = np.abs(probs - pi)
    return float((diff ** order).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# reference scores


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    _require_nonempty(probs)
    pred = np.asarray(probs).argmax(axis=1)
    return float((pred == np.asarray(labels)).mean())


def nll(probs: np.ndarray, labels: np.ndarray) -> float:
    return loss_mod.nll_loss(probs, labels).value


# ---------------------------------------------------------------------------
# registry and reports

METRICS = {
    "ece_ew": lambda p, y: ece(p, y, "equal_width", DEFAULT_BINS, r=1),
    "ece_em": lambda p, y: ece(p, y, "equal_mass", DEFAULT_BINS, r=1),
    "ece_r2": lambda p, y: ece(p, y, "equal_width", DEFAULT_BINS, r=2),
    "dece": dece,
    "ace": ace,
    "sweep_ece": lambda p, y: sweep_ece(p, y, r=1),
    "sweep_ece_r2": lambda p, y: sweep_ece(p, y, r=2),
    "ks": ks_error,
    "mmce": mmce,
    "kde_ece": kde_ece,
    "cwece_a": lambda p, y: cwece(p, y, "a"),
    "cwece_s": lambda p, y: cwece(p, y, "s"),
    "cwece_r2": lambda p, y: cwece(p, y, "r2"),
    "tcwece": tcwece,
    "tcwece_k": tcwece_k,
    "dkde_ce": dkde_ce,
    "skce": skce,
    "nll": nll,
    "accuracy": accuracy,
}


def get_metric(metric_id: str):
    try:
        return METRICS[metric_id]
    except KeyError:
        raise ValueError(
            f"unknown metric {metric_id!r}; available: {', '.join(sorted(METRICS))}"
        ) from None


@dataclass
class MetricReport:
    """Named metric values for one (dataset, calibrator) pair."""

    values: dict[str, float]
    metadata: dict[str, str] = field(default_factory=dict)

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for name, value in self.values.items():
            writer.writerow([name, repr(float(value))])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_csv(cls, source: str | Path) -> "MetricReport":
        text = Path(source).read_text(encoding="utf-8") if isinstance(source, Path) else source
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["metric", "value"]:
            raise ValueError("not a metric report CSV")
        return cls(values={name: float(value) for name, value in rows[1:]})

    def to_table(self) -> str:
        width = max((len(k) for k in self.values), default=6)
        lines = [f"{'metric'.ljust(width)}  value", f"{'-' * width}  {'-' * 12}"]
        for name, value in self.values.items():
            lines.append(f"{name.ljust(width)}  {value: .10f}")
        return "\n".join(lines)


# binned metrics that honour an explicit bin-count override
_BINNED_BUILDERS = {
    "ece_ew": lambda b: lambda p, y: ece(p, y, "equal_width", b, r=1),
    "ece_em": lambda b: lambda p, y: ece(p, y, "equal_mass", b, r=1),
    "ece_r2": lambda b: lambda p, y: ece(p, y, "equal_width", b, r=2),
    "dece": lambda b: lambda p, y: dece(p, y, b),
    "ace": lambda b: lambda p, y: ace(p, y, b),
    "cwece_a": lambda b: lambda p, y: cwece(p, y, "a", b),
    "cwece_s": lambda b: lambda p, y: cwece(p, y, "s", b),
    "cwece_r2": lambda b: lambda p, y: cwece(p, y, "r2", b),
    "tcwece": lambda b: lambda p, y: tcwece(p, y, bins=b),
    "tcwece_k": lambda b: lambda p, y: tcwece_k(p, y, k=b),
}


def evaluate(
    probs: np.ndarray,
    labels: np.ndarray,
    metric_ids: list[str] | None = None,
    metadata: dict[str, str] | None = None,
    bins: int | None = None,
) -> MetricReport:
    """Compute the requested metrics (default: the whole registry).

    ``bins`` overrides the bin count of every binned metric (otherwise each
    uses its documented default); the value used is recorded in metadata.
    """
    ids = metric_ids if metric_ids is not None else list(METRICS)
    values = {}
    for mid in ids:
        fn = get_metric(mid)
        if bins is not None and mid in _BINNED_BUILDERS:
            fn = _BINNED_BUILDERS[mid](bins)
        values[mid] = float(fn(probs, labels))
    meta = dict(metadata or {})
    if bins is not None:
        meta["bins"] = str(bins)
    return MetricReport(values=values, metadata=meta)
