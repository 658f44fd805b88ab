"""Learnable monotonic calibration mappings with analytic gradients.

Three families, all acting on logits and producing row-stochastic
probabilities, all monotone non-decreasing per logit coordinate for every
parameter value, hence argmax (accuracy) preserving:

* ``ensemble_temp`` -- mixture of m tempered softmaxes with learnable
  temperatures and mixture weights.
* ``piecewise_linear`` -- continuous piecewise-linear transform of the
  max-normalized logit over [-100, 0] with z learnable non-negative slopes,
  followed by row softmax.
* ``monotonic_net`` -- elementwise min-of-max-of-affine scalar network
  (non-negative input weights) on the max-normalized logit, then softmax.

Positivity is enforced by exp-reparameterization, so the flat parameter
vector is unconstrained and Adam-friendly.  ``forward`` returns a trace
caching everything ``backward`` needs.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .dataset import softmax_rows

PIECEWISE_RANGE = 100.0  # transform domain is [-PIECEWISE_RANGE, 0]

STANDARD_HYPER_GRID = {
    "ensemble_temp": (16, 32, 64, 128),
    "piecewise_linear": (1, 10, 100, 500),
    "monotonic_net": ((2, 2), (10, 10), (20, 20), (50, 50)),
}

_FAMILY_IDS = {"ensemble_temp": 0, "piecewise_linear": 1, "monotonic_net": 2}
_MAP_MAGIC = b"HMAP"
_MAP_HEADER = struct.Struct("<4sIIIIII")  # magic, version, family, h0, h1, n_classes, n_params


@dataclass
class ForwardTrace:
    """Cached forward pass: inputs, intermediates, and output probabilities."""

    logits: np.ndarray
    probs: np.ndarray
    cache: dict[str, Any] = field(default_factory=dict)


def _softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Row-softmax Jacobian-transpose product: dL/dz from dL/dsoftmax(z)."""
    inner = (dprobs * probs).sum(axis=1, keepdims=True)
    return probs * (dprobs - inner)


def _rowmax_normalize_backward(dx: np.ndarray, argmax_idx: np.ndarray) -> np.ndarray:
    """Backprop through x = logits - logits[argmax] per row."""
    dlogits = dx.copy()
    np.subtract.at(dlogits, (np.arange(dx.shape[0]), argmax_idx), dx.sum(axis=1))
    return dlogits


class CalibrationMap:
    """Base class; concrete families implement forward/backward."""

    family: str

    def __init__(self, params: np.ndarray, seed: int, n_classes: int = 0):
        self.params = np.asarray(params, dtype=np.float64).copy()
        self.seed = seed
        self.n_classes = n_classes  # 0 = not pinned to a class count yet

    @property
    def n_params(self) -> int:
        return self.params.size

    def hyper(self) -> tuple[int, int]:
        raise NotImplementedError

    def describe(self) -> str:
        h = self.hyper()
        if self.family == "ensemble_temp":
            return f"ensemble_temp(m={h[0]})"
        if self.family == "piecewise_linear":
            return f"piecewise_linear(z={h[0]})"
        return f"monotonic_net(groups={h[0]}, units={h[1]})"

    def forward(self, logits: np.ndarray) -> ForwardTrace:
        raise NotImplementedError

    def backward(self, trace: ForwardTrace, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def clone(self) -> "CalibrationMap":
        new = type(self).__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.params = self.params.copy()
        return new

    def _check_trace(self, trace: ForwardTrace, upstream: np.ndarray) -> None:
        if upstream.shape != trace.probs.shape:
            raise ValueError(
                f"upstream shape {upstream.shape} does not match probs {trace.probs.shape}"
            )

    @staticmethod
    def _check_finite(probs: np.ndarray) -> None:
        if not np.all(np.isfinite(probs)):
            raise FloatingPointError("non-finite probabilities in forward pass (parameter blow-up?)")


class EnsembleTempMap(CalibrationMap):
    """Weighted mixture of m tempered softmaxes.

    params = [raw log-temperatures (m), raw weight logits (m)];
    T_k = exp(raw_t_k) > 0, weights = softmax(raw_w), so the output
    sum_k w_k softmax(logits / T_k) is a convex combination of
    order-preserving transforms.
    """

    family = "ensemble_temp"

    def __init__(self, m: int, seed: int = 0, params: np.ndarray | None = None, n_classes: int = 0):
        if m < 1:
            raise ValueError(f"need at least one temperature component, got m={m}")
        self.m = m
        if params is None:
            params = np.zeros(2 * m)  # T_k = 1, uniform weights: identity softmax
        if params.size != 2 * m:
            raise ValueError(f"ensemble_temp with m={m} needs {2 * m} params, got {params.size}")
        super().__init__(params, seed, n_classes)

    def hyper(self):
        return (self.m, 0)

    def _unpack(self):
        raw_t = self.params[: self.m]
        raw_w = self.params[self.m:]
        temps = np.exp(raw_t)
        w = np.exp(raw_w - raw_w.max())
        w /= w.sum()
        return temps, w

    def forward(self, logits: np.ndarray) -> ForwardTrace:
        logits = np.asarray(logits, dtype=np.float64)
        temps, w = self._unpack()
        members = np.stack([softmax_rows(logits / t) for t in temps])  # (m, N, L)
        probs = np.einsum("k,kij->ij", w, members)
        self._check_finite(probs)
        return ForwardTrace(logits, probs, {"members": members, "temps": temps, "weights": w})

    def backward(self, trace, upstream):
        self._check_trace(trace, upstream)
        members = trace.cache["members"]
        temps = trace.cache["temps"]
        w = trace.cache["weights"]
        logits = trace.logits

        dw = np.einsum("ij,kij->k", upstream, members)
        raw_w_grad = w * (dw - float(w @ dw))

        raw_t_grad = np.empty(self.m)
        dlogits = np.zeros_like(logits)
        for k in range(self.m):
            dz = _softmax_backward(members[k], w[k] * upstream)
            # z = logits / T_k: dT flows through -logits / T^2, raw grad is dT * T
            raw_t_grad[k] = float((dz * (-logits / temps[k])).sum())
            dlogits += dz / temps[k]
        return np.concatenate([raw_t_grad, raw_w_grad]), dlogits


class PiecewiseLinearMap(CalibrationMap):
    """Continuous piecewise-linear transform over [-100, 0], then softmax.

    The row max is subtracted so inputs land in (-inf, 0]; anything below
    -100 is clamped to the domain edge.  params = raw slopes (z), segment
    slope s_j = exp(raw_j) > 0; all-ones slopes give the identity transform.
    """

    family = "piecewise_linear"

    def __init__(self, z: int, seed: int = 0, params: np.ndarray | None = None, n_classes: int = 0):
        if z < 1:
            raise ValueError(f"need at least one segment, got z={z}")
        self.z = z
        self.seg_width = PIECEWISE_RANGE / z
        if params is None:
            params = np.zeros(z)  # unit slopes: identity on [-100, 0]
        if params.size != z:
            raise ValueError(f"piecewise_linear with z={z} needs {z} params, got {params.size}")
        super().__init__(params, seed, n_classes)

    def hyper(self):
        return (self.z, 0)

    def forward(self, logits: np.ndarray) -> ForwardTrace:
        logits = np.asarray(logits, dtype=np.float64)
        slopes = np.exp(self.params)
        argmax_idx = logits.argmax(axis=1)
        x = logits - logits[np.arange(len(logits)), argmax_idx][:, None]
        clamped = x < -PIECEWISE_RANGE
        xc = np.maximum(x, -PIECEWISE_RANGE)
        seg = np.minimum(
            ((xc + PIECEWISE_RANGE) / self.seg_width).astype(np.int64), self.z - 1
        )
        knots = -PIECEWISE_RANGE + self.seg_width * np.arange(self.z)
        cum = np.concatenate([[0.0], np.cumsum(slopes) * self.seg_width])
        y = -PIECEWISE_RANGE + cum[seg] + slopes[seg] * (xc - knots[seg])
        probs = softmax_rows(y)
        self._check_finite(probs)
        return ForwardTrace(
            logits,
            probs,
            {"xc": xc, "seg": seg, "knots": knots, "slopes": slopes,
             "clamped": clamped, "argmax_idx": argmax_idx},
        )

    def backward(self, trace, upstream):
        self._check_trace(trace, upstream)
        xc, seg = trace.cache["xc"], trace.cache["seg"]
        knots, slopes = trace.cache["knots"], trace.cache["slopes"]
        dy = _softmax_backward(trace.probs, upstream)

        dy_flat, seg_flat = dy.ravel(), seg.ravel()
        # dy/ds_j = seg_width for every full segment j below, plus the partial
        # run inside the active segment
        per_seg = np.bincount(seg_flat, weights=dy_flat, minlength=self.z)
        suffix = np.concatenate([(per_seg[::-1].cumsum())[::-1][1:], [0.0]])
        partial = np.bincount(
            seg_flat, weights=dy_flat * (xc.ravel() - knots[seg_flat]), minlength=self.z
        )
        slope_grad = self.seg_width * suffix + partial
        param_grad = slopes * slope_grad

        dx = dy * slopes[seg]
        dx[trace.cache["clamped"]] = 0.0
        dlogits = _rowmax_normalize_backward(dx, trace.cache["argmax_idx"])
        return param_grad, dlogits


class MonotonicNetMap(CalibrationMap):
    """Min-over-groups of max-over-units of affine pieces, then softmax.

    Each scalar max-normalized logit x maps to
    min_k max_j (a_kj * x + b_kj) with a_kj = exp(raw_a_kj) > 0, which is
    strictly increasing for any parameter value.  params = [raw_a (K*J),
    biases (K*J)].  At init all slopes are 1 and biases are spread over the
    working range [-100, 0], so the transform is x plus a constant (exact
    identity after softmax).
    """

    family = "monotonic_net"

    def __init__(
        self,
        groups: int,
        units: int,
        seed: int = 0,
        params: np.ndarray | None = None,
        n_classes: int = 0,
    ):
        if groups < 1 or units < 1:
            raise ValueError(f"need >=1 groups and units, got ({groups}, {units})")
        self.groups = groups
        self.units = units
        n = groups * units
        if params is None:
            rng = np.random.default_rng(seed)
            slot = PIECEWISE_RANGE / units
            centers = -PIECEWISE_RANGE + (np.arange(units) + 0.5) * slot
            biases = np.tile(centers, groups) + rng.uniform(-0.25 * slot, 0.25 * slot, n)
            params = np.concatenate([np.zeros(n), biases])
        if params.size != 2 * n:
            raise ValueError(
                f"monotonic_net ({groups}, {units}) needs {2 * n} params, got {params.size}"
            )
        super().__init__(params, seed, n_classes)

    def hyper(self):
        return (self.groups, self.units)

    def _unpack(self):
        n = self.groups * self.units
        a = np.exp(self.params[:n]).reshape(self.groups, self.units)
        b = self.params[n:].reshape(self.groups, self.units)
        return a, b

    def forward(self, logits: np.ndarray) -> ForwardTrace:
        logits = np.asarray(logits, dtype=np.float64)
        a, b = self._unpack()
        argmax_idx = logits.argmax(axis=1)
        x = logits - logits[np.arange(len(logits)), argmax_idx][:, None]
        flat = x.ravel()
        y_flat = np.empty_like(flat)
        active = np.empty(flat.size, dtype=np.int64)
        # blockwise to keep the (block, K, J) workspace bounded
        block = max(1, 8_000_000 // (self.groups * self.units))
        for s in range(0, flat.size, block):
            chunk = flat[s:s + block]
            vals = chunk[:, None, None] * a[None] + b[None]  # (block, K, J)
            j_star = vals.argmax(axis=2)  # ties -> lowest unit index
            group_max = np.take_along_axis(vals, j_star[:, :, None], axis=2)[:, :, 0]
            k_star = group_max.argmin(axis=1)  # ties -> lowest group index
            rows = np.arange(len(chunk))
            y_flat[s:s + block] = group_max[rows, k_star]
            active[s:s + block] = k_star * self.units + j_star[rows, k_star]
        y = y_flat.reshape(x.shape)
        probs = softmax_rows(y)
        self._check_finite(probs)
        return ForwardTrace(
            logits, probs, {"x": x, "active": active, "a": a, "argmax_idx": argmax_idx}
        )

    def backward(self, trace, upstream):
        self._check_trace(trace, upstream)
        x, active, a = trace.cache["x"], trace.cache["active"], trace.cache["a"]
        n = self.groups * self.units
        dy = _softmax_backward(trace.probs, upstream)
        dy_flat = dy.ravel()

        da = np.bincount(active, weights=dy_flat * x.ravel(), minlength=n)
        db = np.bincount(active, weights=dy_flat, minlength=n)
        param_grad = np.concatenate([a.ravel() * da, db])

        dx = (dy_flat * a.ravel()[active]).reshape(x.shape)
        dlogits = _rowmax_normalize_backward(dx, trace.cache["argmax_idx"])
        return param_grad, dlogits


def init_map(family: str, hyper, seed: int = 0) -> CalibrationMap:
    """Create a near-identity map of the given family.

    ``hyper`` is an int (m or z) for the first two families and a
    (groups, units) pair for ``monotonic_net``.  Off-grid sizes are allowed
    but flagged with a warning.
    """
    if family == "ensemble_temp":
        m = int(hyper)
        _warn_off_grid(family, m)
        return EnsembleTempMap(m, seed=seed)
    if family == "piecewise_linear":
        z = int(hyper)
        _warn_off_grid(family, z)
        return PiecewiseLinearMap(z, seed=seed)
    if family == "monotonic_net":
        groups, units = (int(hyper[0]), int(hyper[1]))
        _warn_off_grid(family, (groups, units))
        return MonotonicNetMap(groups, units, seed=seed)
    raise ValueError(f"unknown mapping family {family!r}")


def _warn_off_grid(family: str, hyper) -> None:
    if hyper not in STANDARD_HYPER_GRID[family]:
        warnings.warn(
            f"{family} hyper {hyper!r} is outside the standard grid "
            f"{STANDARD_HYPER_GRID[family]}",
            stacklevel=3,
        )


def save_map(m: CalibrationMap, path: str | Path) -> None:
    """Serialize a map (binary, little-endian) plus a text sidecar."""
    path = Path(path)
    h = m.hyper()
    header = _MAP_HEADER.pack(
        _MAP_MAGIC, 1, _FAMILY_IDS[m.family], h[0], h[1], m.n_classes, m.n_params
    )
    path.write_bytes(header + m.params.astype("<f8").tobytes())
    sidecar = path.with_name(path.name + ".meta.txt")
    lines = [
        f"family = {m.family}",
        f"hyper = {h[0]}" if h[1] == 0 else f"hyper = {h[0]}x{h[1]}",
        f"seed = {m.seed}",
        f"n_classes = {m.n_classes}",
        f"n_params = {m.n_params}",
    ]
    sidecar.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_map(path: str | Path) -> CalibrationMap:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _MAP_HEADER.size:
        raise ValueError(f"{path}: truncated map file")
    magic, version, fam_id, h0, h1, n_classes, n_params = _MAP_HEADER.unpack_from(raw)
    if magic != _MAP_MAGIC or version != 1:
        raise ValueError(f"{path}: not a calibration map file")
    params = np.frombuffer(raw, dtype="<f8", count=n_params, offset=_MAP_HEADER.size).copy()
    families = {v: k for k, v in _FAMILY_IDS.items()}
    family = families.get(fam_id)
    seed = _read_sidecar_seed(path)
    if family == "ensemble_temp":
        return EnsembleTempMap(h0, seed=seed, params=params, n_classes=n_classes)
    if family == "piecewise_linear":
        return PiecewiseLinearMap(h0, seed=seed, params=params, n_classes=n_classes)
    if family == "monotonic_net":
        return MonotonicNetMap(h0, h1, seed=seed, params=params, n_classes=n_classes)
    raise ValueError(f"{path}: unknown family id {fam_id}")


def _read_sidecar_seed(path: Path) -> int:
    sidecar = path.with_name(path.name + ".meta.txt")
    if sidecar.exists():
        for line in sidecar.read_text(encoding="utf-8").splitlines():
            if line.startswith("seed"):
                try:
                    return int(line.split("=")[1])
                except (IndexError, ValueError):
                    pass
    return 0
