"""Validation statistics comparing learned feedback rollouts against
open-loop oracle triples, and table emission in the usual layout.

Two families of value-function statistics coexist: err_V / err_dV evaluate
the surrogate along its own learned trajectories, while d_V / d_dV evaluate
it along the oracle trajectories (where cost-to-go and adjoint are the
ground truth for the value function and its gradient).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .core_types import MetricError, trapezoid


@dataclass
class LearnedRollout:
    """Closed-loop quantities of one ensemble member under the learned law."""

    y: object                # StateTrajectory
    p: object                # AdjointTrajectory
    u: object                # ControlTrajectory
    J: float
    J_t: np.ndarray          # cost-to-go along (y, u)
    v_model: np.ndarray      # V_theta(t, y(t))
    vy_model: np.ndarray     # dV_theta/dy (t, y(t))


@dataclass
class OracleReference:
    """Open-loop stationary triple plus model evaluations along it."""

    y: object
    u: object
    p: object
    J: float
    J_t: np.ndarray          # cost-to-go along the oracle pair
    v_model: np.ndarray      # V_theta along the oracle state
    vy_model: np.ndarray     # dV_theta/dy along the oracle state


METRIC_NAMES = ("err_J_avg", "err_J_nmse", "err_Y", "err_P", "err_U",
                "err_V", "err_dV", "d_V", "d_dV")


@dataclass
class MetricsReport:
    split: str
    gamma1: float
    gamma2: float
    err_J_avg: float
    err_J_nmse: float
    err_Y: float
    err_P: float
    err_U: float
    err_V: float
    err_dV: float
    d_V: float
    d_dV: float

    def metrics(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_NAMES}

    def to_json(self, path, config_hash="") -> None:
        doc = {"split": self.split, "gamma1": self.gamma1, "gamma2": self.gamma2,
               "metrics": self.metrics(), "config_hash": config_hash}
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def from_json(cls, path) -> "MetricsReport":
        with open(path) as fh:
            doc = json.load(fh)
        return cls(split=doc["split"], gamma1=doc["gamma1"], gamma2=doc["gamma2"],
                   **doc["metrics"])


def _ratio(num: float, den: float, what: str) -> float:
    if den == 0.0:
        raise MetricError(f"zero denominator in {what}")
    return num / den


def _nmse_traj(pairs, grid, what):
    num = sum(float(trapezoid(np.einsum("ki,ki->k", a - b, a - b), grid))
              for a, b in pairs)
    den = sum(float(trapezoid(np.einsum("ki,ki->k", b, b), grid)) for _, b in pairs)
    return _ratio(num, den, what)


def _nmse_scalar_traj(pairs, grid, what):
    num = sum(float(trapezoid((a - b) ** 2, grid)) for a, b in pairs)
    den = sum(float(trapezoid(b ** 2, grid)) for _, b in pairs)
    return _ratio(num, den, what)


def compute_metrics(learned, oracle, split: str, gamma1=0.0, gamma2=0.0) -> MetricsReport:
    """All nine statistics for one split; summation order is the list order."""
    if len(learned) != len(oracle) or not learned:
        raise MetricError("learned and oracle bundles must pair up nonempty")
    grid = learned[0].y.grid
    J_l = [m.J for m in learned]
    J_o = [m.J for m in oracle]
    sum_Jo = sum(J_o)
    err_J_avg = _ratio(sum(J_l) - sum_Jo, sum_Jo, "err_J_avg")
    err_J_nmse = _ratio(sum((a - b) ** 2 for a, b in zip(J_l, J_o)),
                        sum(b ** 2 for b in J_o), "err_J_nmse")
    err_Y = _nmse_traj([(m.y.values, o.y.values) for m, o in zip(learned, oracle)],
                       grid, "err_Y")
    err_P = _nmse_traj([(m.p.values, o.p.values) for m, o in zip(learned, oracle)],
                       grid, "err_P")
    err_U = _nmse_traj([(m.u.values, o.u.values) for m, o in zip(learned, oracle)],
                       grid, "err_U")
    err_V = _nmse_scalar_traj([(m.v_model, m.J_t) for m in learned], grid, "err_V")
    err_dV = _nmse_traj([(m.vy_model, m.p.values) for m in learned], grid, "err_dV")
    d_V = _nmse_scalar_traj([(o.v_model, o.J_t) for o in oracle], grid, "d_V")
    d_dV = _nmse_traj([(o.vy_model, o.p.values) for o in oracle], grid, "d_dV")
    return MetricsReport(split=split, gamma1=gamma1, gamma2=gamma2,
                         err_J_avg=err_J_avg, err_J_nmse=err_J_nmse,
                         err_Y=err_Y, err_P=err_P, err_U=err_U,
                         err_V=err_V, err_dV=err_dV, d_V=d_V, d_dV=d_dV)


# --------------------------------------------------------------------------
# table emission
# --------------------------------------------------------------------------

def _pct(v: float) -> str:
    return f"{100.0 * v:.2g} %"


def emit_markdown(reports) -> str:
    """Penalty rows x metric columns, percentages at 2 significant digits."""
    if not reports:
        raise MetricError("need at least one report")
    header = ["Penalty"] + list(METRIC_NAMES)
    lines = ["| " + " | ".join(header) + " |",
             "|" + "|".join(["---"] * len(header)) + "|"]
    for r in reports:
        label = f"g1={r.gamma1:g}, g2={r.gamma2:g}"
        cells = [_pct(getattr(r, k)) for k in METRIC_NAMES]
        lines.append("| " + " | ".join([label] + cells) + " |")
    return "\n".join(lines) + "\n"


def emit_csv(reports) -> str:
    """Raw ratios at full precision; parses back into identical reports."""
    lines = ["split,gamma1,gamma2," + ",".join(METRIC_NAMES)]
    for r in reports:
        vals = [getattr(r, k) for k in METRIC_NAMES]
        lines.append(",".join([r.split, f"{r.gamma1:.17g}", f"{r.gamma2:.17g}"]
                              + [f"{v:.17g}" for v in vals]))
    return "\n".join(lines) + "\n"


def parse_csv(text: str):
    lines = [ln for ln in text.strip().splitlines() if ln]
    header = lines[0].split(",")
    if header[3:] != list(METRIC_NAMES):
        raise MetricError("unrecognized metrics CSV header")
    reports = []
    for ln in lines[1:]:
        parts = ln.split(",")
        vals = {k: float(v) for k, v in zip(METRIC_NAMES, parts[3:])}
        reports.append(MetricsReport(split=parts[0], gamma1=float(parts[1]),
                                     gamma2=float(parts[2]), **vals))
    return reports


def emit_tables(reports, markdown_path=None, csv_path=None):
    """Render all reports; optionally persist both representations."""
    md = emit_markdown(reports)
    csv = emit_csv(reports)
    if markdown_path:
        with open(markdown_path, "w") as fh:
            fh.write(md)
    if csv_path:
        with open(csv_path, "w") as fh:
            fh.write(csv)
    return md, csv
