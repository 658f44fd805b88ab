"""Training losses over probability matrices: the sorted-window alignment
objective, plus NLL and Brier baselines.

The window objective flattens the N x L per-class probabilities into atomic
events (sample i, class l), sorts them, and penalizes every length-M run of
consecutive sorted values whose mean predicted probability deviates from the
empirical event frequency in that run by more than ``epsilon``.  A 1-D
k-means weighting (``weighting="adaptive"``) counterbalances the flood of
near-zero probabilities in many-class problems.

Gradients are taken with the sort permutation, k-means assignments, and
cluster sizes held constant (they change only on a measure-zero set), so the
backward pass is an exact subgradient of the frozen-structure loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class HCalConfig:
    """Hyperparameters of the window-alignment loss.

    Defaults are the standard training configuration: epsilon = 1e-20,
    window M = 200, multiplier r = 1e5, C = 15 clusters, adaptive weighting.
    ``norm="squared"`` switches the hinge to a squared mean gap with epsilon
    forced to 0; combined with window=1 and uniform weighting this reduces to
    r times the Brier score.
    """

    epsilon: float = 1e-20
    window: int = 200
    multiplier: float = 1e5
    clusters: int = 15
    norm: str = "abs"  # "abs" | "squared"
    weighting: str = "adaptive"  # "adaptive" | "uniform"
    cache_weights: bool = False  # trainer reuses first-epoch k-means weights

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must be in [0, 1), got {self.epsilon}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.multiplier <= 0:
            raise ValueError(f"multiplier must be > 0, got {self.multiplier}")
        if self.clusters < 1:
            raise ValueError(f"clusters must be >= 1, got {self.clusters}")
        if self.norm not in ("abs", "squared"):
            raise ValueError(f"norm must be 'abs' or 'squared', got {self.norm!r}")
        if self.weighting not in ("adaptive", "uniform"):
            raise ValueError(f"weighting must be 'adaptive' or 'uniform', got {self.weighting!r}")


@dataclass
class WindowSet:
    """Sorted atomic-event probabilities and the permutation that sorts them.

    ``perm`` maps sorted position -> flat (sample * L + class) index; ties are
    broken by that flat index (stable sort), so results are deterministic.
    All length-``window`` runs at stride 1 form the constraint windows.
    """

    sorted_values: np.ndarray
    perm: np.ndarray
    window: int

    @property
    def n_windows(self) -> int:
        return self.sorted_values.size - self.window + 1


@dataclass
class LossOutput:
    value: float
    prob_grad: np.ndarray
    n_active_windows: int = 0
    max_window_violation: float = 0.0


def event_indicators(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Flat 0/1 vector: entry (i * L + l) is 1 iff sample i has label l."""
    return (np.asarray(labels)[:, None] == np.arange(n_classes)[None, :]).ravel()


def build_windows(
    probs: np.ndarray, labels: np.ndarray, window: int
) -> tuple[WindowSet, np.ndarray, np.ndarray]:
    """Sort atomic-event probabilities; return per-position summand vectors.

    At sorted position j holding probability p for event (i, {l}):
    a_j = (1 - p) * 1{Y_i = l} and b_j = p * 1{Y_i != l}.  Sliding sums of
    ``a`` and ``b`` are exactly the two tallies whose gap the loss bounds.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n, l = probs.shape
    if window > n * l:
        raise ValueError(f"window {window} exceeds the {n * l} atomic events")
    flat = probs.ravel()
    perm = np.argsort(flat, kind="stable")
    q = flat[perm]
    ev = event_indicators(labels, l)[perm]
    a = (1.0 - q) * ev
    b = q * (~ev)
    return WindowSet(q, perm, window), a, b


def window_sums(vec: np.ndarray, window: int) -> np.ndarray:
    """Sliding sums of every length-``window`` run, via prefix sums."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size < window:
        raise ValueError(f"need at least {window} values, got {vec.size}")
    prefix = np.concatenate([[0.0], np.cumsum(vec)])
    return prefix[window:] - prefix[:-window]


def kmeans_1d(values: np.ndarray, k: int, max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic 1-D Lloyd clustering.

    Centers start at the k equally-spaced quantiles of ``values``; iteration
    stops when assignments stabilize or after ``max_iter`` rounds.  Ties in
    nearest-center assignment go to the lower center index.  Returns
    (centers, assignment).
    """
    values = np.asarray(values, dtype=np.float64)
    centers = np.quantile(values, (np.arange(k) + 0.5) / k)
    assign = None
    for _ in range(max_iter):
        # nearest sorted center via boundary search; a value exactly on a
        # boundary is equidistant and goes to the lower center
        boundaries = (centers[:-1] + centers[1:]) / 2.0
        new_assign = np.searchsorted(boundaries, values, side="left")
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        counts = np.bincount(assign, minlength=k)
        sums = np.bincount(assign, weights=values, minlength=k)
        nonempty = counts > 0
        centers = np.where(nonempty, sums / np.maximum(counts, 1), centers)
        centers = np.sort(centers)
    boundaries = (centers[:-1] + centers[1:]) / 2.0
    assign = np.searchsorted(boundaries, values, side="left")
    return centers, assign


def kmeans_weights(window_centroids: np.ndarray, clusters: int) -> np.ndarray:
    """Per-window weight 1 / (C * size of the window's cluster).

    Weights sum to (number of nonempty clusters) / C <= 1, so dense regions
    are averaged rather than dominating the loss.
    """
    window_centroids = np.asarray(window_centroids, dtype=np.float64)
    if window_centroids.size == 0:
        raise ValueError("need at least one window")
    _, assign = kmeans_1d(window_centroids, clusters)
    counts = np.bincount(assign, minlength=clusters)
    return 1.0 / (clusters * counts[assign])


def _window_weights(ws: WindowSet, cfg: HCalConfig) -> np.ndarray:
    if cfg.weighting == "uniform":
        return np.full(ws.n_windows, 1.0 / ws.n_windows)
    centroids = window_sums(ws.sorted_values, ws.window) / ws.window
    return kmeans_weights(centroids, cfg.clusters)


def hcal_loss(
    probs: np.ndarray,
    labels: np.ndarray,
    cfg: HCalConfig,
    weights: np.ndarray | None = None,
) -> LossOutput:
    """Window-alignment loss with subgradients w.r.t. the probabilities.

    ``weights`` overrides the per-window weights (used by the trainer when
    ``cfg.cache_weights`` is set); otherwise they come from ``cfg.weighting``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    ws, a, b = build_windows(probs, labels, cfg.window)
    m = cfg.window
    diff = (window_sums(a, m) - window_sums(b, m)) / m

    if weights is None:
        weights = _window_weights(ws, cfg)
    elif weights.size != ws.n_windows:
        raise ValueError(f"got {weights.size} weights for {ws.n_windows} windows")

    if cfg.norm == "squared":
        # squared variant: epsilon pinned to 0 so the objective is a plain
        # weighted mean of squared window gaps
        per_window = diff * diff
        dper = 2.0 * diff / m
        active = diff != 0.0
        max_violation = float(np.abs(diff).max()) if diff.size else 0.0
    else:
        violation = np.abs(diff) - cfg.epsilon
        per_window = np.maximum(violation, 0.0)
        active = violation > 0.0
        dper = np.where(active, np.sign(diff) / m, 0.0)
        max_violation = float(per_window.max()) if per_window.size else 0.0

    value = cfg.multiplier * float(weights @ per_window)

    # dvalue/dV1 per window; position j collects every window covering it
    g = cfg.multiplier * weights * dper
    cover = _scatter_window_grad(g, m, ws.sorted_values.size)
    prob_grad_flat = np.zeros(probs.size)
    prob_grad_flat[ws.perm] = -cover  # d(a_j - b_j)/dp_j = -1 regardless of the event bit
    return LossOutput(
        value=value,
        prob_grad=prob_grad_flat.reshape(probs.shape),
        n_active_windows=int(active.sum()),
        max_window_violation=max_violation,
    )


def _scatter_window_grad(g: np.ndarray, window: int, n_positions: int) -> np.ndarray:
    """Sum window gradients onto positions: position j is covered by windows
    max(0, j - M + 1) .. min(j, n_windows - 1)."""
    n_windows = g.size
    prefix = np.concatenate([[0.0], np.cumsum(g)])
    j = np.arange(n_positions)
    hi = np.minimum(j, n_windows - 1) + 1
    lo = np.maximum(j - window + 1, 0)
    return prefix[hi] - prefix[lo]


def hcal_loss_frozen(
    probs: np.ndarray,
    labels: np.ndarray,
    cfg: HCalConfig,
    perm: np.ndarray,
    weights: np.ndarray,
) -> float:
    """Loss value with the sort permutation and weights held fixed.

    This is the function the backward pass differentiates; finite-difference
    checks must evaluate it, not the re-sorting loss.
    """
    probs = np.asarray(probs, dtype=np.float64)
    l = probs.shape[1]
    q = probs.ravel()[perm]
    ev = event_indicators(labels, l)[perm]
    a = (1.0 - q) * ev
    b = q * (~ev)
    m = cfg.window
    diff = (window_sums(a, m) - window_sums(b, m)) / m
    if cfg.norm == "squared":
        per_window = diff * diff
    else:
        per_window = np.maximum(np.abs(diff) - cfg.epsilon, 0.0)
    return cfg.multiplier * float(weights @ per_window)


def frozen_structure(probs: np.ndarray, labels: np.ndarray, cfg: HCalConfig):
    """Sort permutation and window weights at the current probabilities."""
    ws, _, _ = build_windows(probs, labels, cfg.window)
    return ws.perm, _window_weights(ws, cfg)


NLL_CLAMP = 1e-12


def nll_loss(probs: np.ndarray, labels: np.ndarray) -> LossOutput:
    """Mean negative log-likelihood; probabilities clamped below at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[0]
    labels = np.asarray(labels)
    p_label = np.maximum(probs[np.arange(n), labels], NLL_CLAMP)
    value = float(-np.log(p_label).mean())
    grad = np.zeros_like(probs)
    grad[np.arange(n), labels] = -1.0 / (n * p_label)
    return LossOutput(value=value, prob_grad=grad)


def brier_loss(probs: np.ndarray, labels: np.ndarray) -> LossOutput:
    """Mean squared error against one-hot labels, averaged over N * L entries."""
    probs = np.asarray(probs, dtype=np.float64)
    n, l = probs.shape
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    resid = probs - onehot
    value = float((resid * resid).sum() / (n * l))
    return LossOutput(value=value, prob_grad=2.0 * resid / (n * l))


def resolve_loss(spec):
    """Map a loss spec (HCalConfig | 'hcal' | 'nll' | 'brier') to a callable."""
    if isinstance(spec, HCalConfig):
        return lambda probs, labels: hcal_loss(probs, labels, spec)
    if spec == "hcal":
        cfg = HCalConfig()
        return lambda probs, labels: hcal_loss(probs, labels, cfg)
    if spec == "nll":
        return nll_loss
    if spec == "brier":
        return brier_loss
    raise ValueError(f"unknown loss spec {spec!r}")
