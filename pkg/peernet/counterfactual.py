"""
School-level counterfactual shocks and social-multiplier distributions.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

from .errors import InputValidationError, UniquenessError
from .models import ShockKind, ShockScenario
from .netgraph import SchoolNetwork
from .structsim import resolvent_solve

logger = logging.getLogger(__name__)

DEFAULT_BIN_WIDTH = 0.1


@dataclass(frozen=True, eq=False)
class ShockResult:
    """Per-student GPA response to one scenario, for the targeted schools."""

    scenario: ShockScenario
    lam: float
    school_ids: np.ndarray
    node_ids: np.ndarray
    isolated: np.ndarray
    delta_y: np.ndarray
    multiplier: np.ndarray

    @property
    def label(self) -> str:
        return "confounded" if self.scenario.kind == ShockKind.FIXED_EFFECT else self.scenario.kind.value

    def summary(self) -> Dict[str, float]:
        return {
            "min": float(self.multiplier.min()),
            "max": float(self.multiplier.max()),
            "mean": float(self.multiplier.mean()),
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "school_id": self.school_ids,
            "node_id": self.node_ids,
            "isolated": self.isolated,
            "delta_y": self.delta_y,
            "multiplier": self.multiplier,
        })

    def school_summary(self) -> pd.DataFrame:
        frame = self.to_frame()
        return (
            frame.groupby("school_id", sort=False)["multiplier"]
            .agg(n="count", min="min", max="max", mean="mean")
            .reset_index()
        )


def _intercept_pattern(scenario: ShockScenario, lam: float, net: SchoolNetwork) -> np.ndarray:
    if scenario.kind == ShockKind.FIXED_EFFECT and scenario.restricted_model == 3:
        return 1.0 - lam * net.noniso_mask
    return np.ones(net.n)


def apply_shock(scenario: ShockScenario, lam: float, nets: Sequence[SchoolNetwork]) -> ShockResult:
    """
    Propagate a school-level shock through the equilibrium.

    An alpha shock moves GPA one for one. A preference shock, in delta^2 dc
    units, moves GPA by (I - lam G)^-1 1. A fixed-effect shock bumps the
    intercept of a restricted model and solves the resolvent on that
    pattern: uniform within a school under Model 2, and under Model 3 the
    school effect plus a has-friends dummy moving by -lam, so non-isolated
    intercepts rise by 1 - lam.
    """
    if abs(lam) >= 1:
        raise UniquenessError(f"|lambda| = {abs(lam)} >= 1: the resolvent does not exist", module="counterfactual")
    by_id = {net.school_id: net for net in nets}
    targets = scenario.target_schools if scenario.target_schools is not None else [net.school_id for net in nets]
    unknown = [s for s in targets if s not in by_id]
    if unknown:
        raise InputValidationError(f"Unknown target schools: {unknown}", module="counterfactual")
    if sum(by_id[s].n for s in targets) == 0:
        raise InputValidationError("no students to shock", module="counterfactual")

    schools, nodes, isolated, units = [], [], [], []
    for school_id in targets:
        net = by_id[school_id]
        if scenario.kind == ShockKind.ALPHA:
            unit = np.ones(net.n)
        else:
            unit = resolvent_solve(net, lam, _intercept_pattern(scenario, lam, net))
        schools.append(np.full(net.n, school_id, dtype=object))
        nodes.append(np.asarray(net.node_ids, dtype=object))
        isolated.append(net.iso_mask.astype(bool))
        units.append(unit)

    if scenario.kind == ShockKind.FIXED_EFFECT:
        logger.info(f"Model {scenario.restricted_model} intercept shock cannot separate alpha from preference shocks")
    multiplier = np.concatenate(units)
    return ShockResult(
        scenario=scenario,
        lam=float(lam),
        school_ids=np.concatenate(schools),
        node_ids=np.concatenate(nodes),
        isolated=np.concatenate(isolated),
        delta_y=scenario.magnitude * multiplier,
        multiplier=multiplier,
    )


def multiplier_distribution(result: ShockResult, bin_width: float = DEFAULT_BIN_WIDTH) -> pd.DataFrame:
    """
    Histogram of per-student GPA changes on contiguous bins aligned to
    multiples of bin_width.

    Returns:
        DataFrame with columns bin_left, bin_right, count, share
    """
    if bin_width <= 0:
        raise InputValidationError(f"bin_width must be positive, got {bin_width}", module="counterfactual")
    if result.delta_y.size == 0:
        raise InputValidationError("no students to shock", module="counterfactual")
    values = result.delta_y
    index = np.floor(values / bin_width + 1e-9).astype(np.int64)
    lo, hi = int(index.min()), int(index.max())
    bins = np.arange(lo, hi + 1)
    counts = np.bincount(index - lo, minlength=len(bins))
    return pd.DataFrame({
        "bin_left": bins * bin_width,
        "bin_right": (bins + 1) * bin_width,
        "count": counts,
        "share": counts / counts.sum(),
    })


def histogram_rows(result: ShockResult, bin_width: float = DEFAULT_BIN_WIDTH) -> List[Dict]:
    """Histogram as records tagged with the scenario, ready for CSV emission."""
    frame = multiplier_distribution(result, bin_width)
    frame.insert(0, "kind", result.label)
    frame.insert(1, "magnitude", result.scenario.magnitude)
    return frame.to_dict(orient="records")
