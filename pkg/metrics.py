"""
Depth evaluation metrics: five error measures and three threshold accuracies
over valid pixels, plus dataset-level aggregation and report formatting.
"""

import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from typing import Dict, Hashable, Iterable, List, Mapping, Tuple, Union

import numpy as np

from depth_types import DepthKind, DepthMap, ValidityPolicy

logger = logging.getLogger(__name__)

DELTA_BASE = 1.25

ERROR_FIELDS = ("arel", "srel", "rmse", "rmsl", "log10", "silog")
ACCURACY_FIELDS = ("delta1", "delta2", "delta3")
METRIC_FIELDS = ERROR_FIELDS + ACCURACY_FIELDS


@dataclass(frozen=True)
class MetricReport:
    arel: float
    srel: float
    rmse: float
    rmsl: float
    log10: float
    silog: float
    delta1: float
    delta2: float
    delta3: float
    n_valid: int
    # Valid pixels whose non-positive prediction was clamped to min_depth
    n_clamped: int = 0

    def __post_init__(self):
        if self.n_valid < 1:
            raise ValueError("a metric report needs at least one valid pixel")
        values = [getattr(self, name) for name in METRIC_FIELDS]
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"non-finite metric in report: {values}")
        if not self.delta1 <= self.delta2 <= self.delta3:
            raise ValueError("delta accuracies must be non-decreasing")


def evaluate(pred: Union[DepthMap, np.ndarray], gt: DepthMap, policy: ValidityPolicy) -> MetricReport:
    """Score a metric prediction against ground truth on the policy-restricted valid set.

    `pred` is a metric DepthMap or the raw H x W network output; raw outputs carry
    no mask of their own and may hold non-positive values, which are clamped.
    """
    if isinstance(pred, DepthMap):
        if pred.kind is not DepthKind.METRIC:
            raise ValueError("evaluate compares metric depth maps")
        pred_values, pred_valid = pred.values, pred.valid
    else:
        pred_values = np.asarray(pred, dtype=np.float64)
        pred_valid = np.ones(pred_values.shape, dtype=bool)
    if pred_values.shape != gt.shape:
        raise ValueError(f"prediction shape {pred_values.shape} != ground truth shape {gt.shape}")
    if gt.kind is not DepthKind.METRIC:
        raise ValueError("evaluate compares metric depth maps")

    g_all = gt.values
    in_range = (g_all >= policy.min_depth) & (g_all <= policy.max_depth)
    mask = gt.valid & pred_valid & in_range
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no valid pixels left after applying the validity policy")

    g = g_all[mask]
    d = pred_values[mask]
    if not np.all(np.isfinite(d)):
        raise ValueError("prediction holds non-finite values on valid pixels")
    clamped = d <= 0
    n_clamped = int(clamped.sum())
    if n_clamped:
        logger.warning("Clamped %d non-positive predictions to %s", n_clamped, policy.min_depth)
        d = np.where(clamped, policy.min_depth, d)

    diff = d - g
    log_diff = np.log(d) - np.log(g)
    ratio = np.maximum(d / g, g / d)
    return MetricReport(
        arel=float(np.mean(np.abs(diff) / g)),
        srel=float(np.mean(diff ** 2 / g)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmsl=float(np.sqrt(np.mean(log_diff ** 2))),
        log10=float(np.mean(np.abs(np.log10(d) - np.log10(g)))),
        silog=float(100.0 * np.sqrt(np.var(log_diff))),
        delta1=float(np.mean(ratio < DELTA_BASE)),
        delta2=float(np.mean(ratio < DELTA_BASE ** 2)),
        delta3=float(np.mean(ratio < DELTA_BASE ** 3)),
        n_valid=n,
        n_clamped=n_clamped,
    )


def aggregate(reports: Iterable[MetricReport]) -> MetricReport:
    """Per-image average of every metric; pixel counts are summed."""
    reports = list(reports)
    if not reports:
        raise ValueError("cannot aggregate an empty list of reports")
    means = {name: math.fsum(getattr(r, name) for r in reports) / len(reports) for name in METRIC_FIELDS}
    return MetricReport(
        **means,
        n_valid=sum(r.n_valid for r in reports),
        n_clamped=sum(r.n_clamped for r in reports),
    )


def aggregate_by(items: Iterable[Tuple[Hashable, MetricReport]]) -> Dict[Hashable, MetricReport]:
    """Aggregate reports per group key, e.g. per scale family or category."""
    groups: Dict[Hashable, List[MetricReport]] = defaultdict(list)
    for key, report in items:
        groups[key].append(report)
    return {key: aggregate(group) for key, group in groups.items()}


def mean_relative_improvement(ours: Mapping[str, Union[float, MetricReport]],
                              reference: Mapping[str, Union[float, MetricReport]],
                              field: str = "arel") -> float:
    """Mean over shared datasets of (ours - ref) / ref; negative is better for error metrics."""
    shared = [name for name in ours if name in reference]
    if not shared:
        raise ValueError("no datasets in common between the two result sets")

    def value(entry):
        return getattr(entry, field) if isinstance(entry, MetricReport) else float(entry)

    changes = []
    for name in shared:
        ref = value(reference[name])
        if ref == 0:
            raise ValueError(f"reference {field} is zero on {name}")
        changes.append((value(ours[name]) - ref) / ref)
    return math.fsum(changes) / len(changes)


def report_to_dict(report: MetricReport) -> Dict[str, Union[float, int]]:
    return asdict(report)


def report_from_dict(data: Mapping[str, Union[float, int]]) -> MetricReport:
    names = {f.name for f in fields(MetricReport)}
    return MetricReport(**{k: v for k, v in data.items() if k in names})


def format_report(report: MetricReport) -> str:
    """One `metric value` pair per line."""
    lines = [f"{name} {getattr(report, name):.6f}" for name in METRIC_FIELDS]
    lines.append(f"n_valid {report.n_valid}")
    lines.append(f"n_clamped {report.n_clamped}")
    return "\n".join(lines) + "\n"


def dump_reports(per_image: Mapping[str, MetricReport], summary: MetricReport) -> str:
    payload = {
        "summary": report_to_dict(summary),
        "per_image": {name: report_to_dict(r) for name, r in per_image.items()},
    }
    return json.dumps(payload, indent=2, sort_keys=True)
