"""Diagnostics for the linear well-posedness theory.

1-D Wasserstein and Kolmogorov-Smirnov statistics, the range/null-space
split of data vectors, and the marginal verdicts for under- and
over-determined linear maps.  Reports serialize to JSON for the CLI.
"""

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TheoryReport",
    "w2_1d",
    "ks_statistic_1d",
    "project_data",
    "under_determined_check",
    "over_determined_check",
    "energy_decay_check",
]


@dataclass
class TheoryReport:
    """Named metrics plus pass/fail verdicts with their thresholds.

    Every verdict key must name a metric present in ``metrics``; a
    verdict is a dict with keys "pass", "threshold", "value".
    """

    case: str
    metrics: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in self.verdicts:
            if name not in self.metrics:
                raise ValueError(f"verdict {name!r} references no metric")

    def all_pass(self):
        return all(v["pass"] for v in self.verdicts.values())

    def to_json(self):
        return json.dumps(
            {"case": self.case, "metrics": self.metrics, "verdicts": self.verdicts},
            indent=2,
            sort_keys=True,
        )

    def add_verdict(self, name, threshold, above=False):
        """Verdict on an existing metric: pass iff value < threshold
        (or > threshold when ``above`` is set)."""
        value = self.metrics[name]
        ok = value > threshold if above else value < threshold
        self.verdicts[name] = {"pass": bool(ok), "threshold": float(threshold), "value": value}


def w2_1d(a, b):
    """1-D quadratic Wasserstein distance between equal-size samples.

    Sorts both and returns sqrt(mean of squared differences of order
    statistics); requires equal lengths (no quantile interpolation here).
    """
    a = np.sort(np.asarray(a, dtype=np.float64).reshape(-1))
    b = np.sort(np.asarray(b, dtype=np.float64).reshape(-1))
    if a.shape != b.shape:
        raise ValueError("w2_1d requires equal sample counts")
    if a.size == 0:
        raise ValueError("samples must be nonempty")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def ks_statistic_1d(a, b):
    """Two-sample Kolmogorov-Smirnov statistic (sup distance of ECDFs)."""
    a = np.sort(np.asarray(a, dtype=np.float64).reshape(-1))
    b = np.sort(np.asarray(b, dtype=np.float64).reshape(-1))
    if a.size == 0 or b.size == 0:
        raise ValueError("samples must be nonempty")
    grid = np.concatenate([a, b])
    ca = np.searchsorted(a, grid, side="right") / a.size
    cb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(ca - cb)))


def project_data(map_, y):
    """Split y into its range(A) component and the orthogonal rest.

    y_A = V V^T y and y_Aperp = y - y_A, so the two parts sum back to y.
    Accepts a single vector (n,) or a batch (Q, n).
    """
    y = np.asarray(y, dtype=np.float64)
    ya = (np.atleast_2d(y) @ map_.V) @ map_.V.T
    ya = ya[0] if y.ndim == 1 else ya
    return ya, y - ya


def _as_samples(y, dim, name):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        if dim != 1:
            raise ValueError(f"{name} must be (M, {dim})")
        y = y[:, None]
    if y.ndim != 2 or y.shape[1] != dim:
        raise ValueError(f"{name} must be (M, {dim})")
    return y


def under_determined_check(map_, us_final, us_init, ref_samples_y, thresholds):
    """Marginal verdicts for an under-determined linear map (n < m).

    Checks coordinatewise (i) KS between the pushed final ensemble
    {A u_j} and the reference data samples, and (ii) KS between the
    null-space coordinates {A_aug u_j} of the final and initial
    ensembles, which the flow should have left distributionally unchanged.
    Thresholds: "y_marginal_ks" for (i), "ytilde_marginal_ks" for (ii).
    """
    if map_.out_dim >= map_.in_dim:
        raise ValueError("under_determined_check requires n < m")
    ref = _as_samples(ref_samples_y, map_.out_dim, "ref_samples_y")
    yf = us_final.particles @ map_.A.T
    yt_f = us_final.particles @ map_.A_aug.T
    yt_i = us_init.particles @ map_.A_aug.T
    report = TheoryReport(case="under")
    for k in range(map_.out_dim):
        report.metrics[f"ks_y_{k}"] = ks_statistic_1d(yf[:, k], ref[:, k])
        report.add_verdict(f"ks_y_{k}", thresholds["y_marginal_ks"])
    for k in range(map_.A_aug.shape[0]):
        report.metrics[f"ks_ytilde_{k}"] = ks_statistic_1d(yt_f[:, k], yt_i[:, k])
        report.add_verdict(f"ks_ytilde_{k}", thresholds["ytilde_marginal_ks"])
    return report


def over_determined_check(map_, ys_final, ref_samples, thresholds):
    """Marginal verdicts for an over-determined linear map (n > m).

    Both sample sets are expressed in the r-dimensional range coordinates
    V^T y and compared marginal-by-marginal (threshold "ya_marginal_ks").
    Raw-coordinate KS values are reported as metrics only: agreement of
    the full distributions is not required by the theory.
    """
    if map_.out_dim <= map_.in_dim:
        raise ValueError("over_determined_check requires n > m")
    ys = _as_samples(ys_final, map_.out_dim, "ys_final")
    ref = _as_samples(ref_samples, map_.out_dim, "ref_samples")
    za = ys @ map_.V
    zr = ref @ map_.V
    report = TheoryReport(case="over")
    for k in range(map_.rank):
        report.metrics[f"ks_yA_{k}"] = ks_statistic_1d(za[:, k], zr[:, k])
        report.add_verdict(f"ks_yA_{k}", thresholds["ya_marginal_ks"])
    for k in range(map_.out_dim):
        report.metrics[f"ks_raw_{k}"] = ks_statistic_1d(ys[:, k], ref[:, k])
    return report


def energy_decay_check(energies, min_fraction):
    """(passed, fraction) where fraction counts consecutive non-increases."""
    e = np.asarray(energies, dtype=np.float64).reshape(-1)
    if e.size < 2:
        raise ValueError("need at least 2 energies")
    frac = float(np.mean(np.diff(e) <= 0.0))
    return frac >= min_fraction, frac
