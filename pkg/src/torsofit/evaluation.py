"""Registration statistics, surgical-pattern transfer, and parameter sweeps.

Statistics follow the MAE/SD/min/max convention over absolute distances;
pattern curves are evaluated on the registered model and projected onto the
scan surface. Sweeps re-register targets while varying the number of active
landmarks, the blendshape count, or one regularization weight.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .energy import EnergyWeights
from .geometry import TriangleMesh, evaluate_anchors
from .shape import DeformableModel, deform_vertices, truncate_blendshapes
from .solver import RegistrationResult, register
from .spatial import FilterConfig, ScanIndex, project_points


class EvaluationError(Exception):
    pass


@dataclass
class DistanceStats:
    """MAE / spread of absolute distances, mm."""

    mae: float
    sd: float
    max: float
    min: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise EvaluationError("statistics need at least one distance")

    def row(self):
        return {"mae": self.mae, "sd": self.sd, "max": self.max,
                "min": self.min, "n": self.n}


def distance_stats(distances) -> DistanceStats:
    """Statistics of |d_i|; SD is the population standard deviation."""
    d = np.abs(np.asarray(distances, dtype=np.float64)).reshape(-1)
    if len(d) == 0:
        raise EvaluationError("statistics need at least one distance")
    return DistanceStats(mae=float(d.mean()), sd=float(d.std()),
                         max=float(d.max()), min=float(d.min()), n=len(d))


def surface_error(result: RegistrationResult,
                  scan: TriangleMesh | None = None) -> DistanceStats:
    """Stats over the final retained closest-point distances d_CP."""
    corr = result.correspondences
    if corr is None or corr.n_pairs == 0:
        raise EvaluationError("result carries no retained correspondences")
    return distance_stats(corr.distances)


def landmark_error(result: RegistrationResult, model: DeformableModel,
                   scan_landmarks) -> DistanceStats:
    """Stats over the model-to-scan landmark distances d_L after deformation."""
    scan_landmarks = np.asarray(scan_landmarks, dtype=np.float64)
    anchors = model.landmark_anchors[:len(scan_landmarks)]
    if not anchors:
        raise EvaluationError("model has no landmarks")
    deformed = deform_vertices(model, result.pose, result.alpha)
    pos = evaluate_anchors(deformed, model.template.triangles, anchors)
    return distance_stats(
        np.linalg.norm(pos - scan_landmarks[:len(anchors)], axis=1))


# ---------------------------------------------------------------------------
# Pattern transfer
# ---------------------------------------------------------------------------

@dataclass
class TransferredPattern:
    """A pattern polyline projected onto the scan surface.

    Points whose projection residual exceeds the distance filter (e.g. the
    curve crosses a hole) are flagged unreliable but still emitted.
    """

    name: str
    points: np.ndarray      # (P, 3) on the scan surface
    residuals: np.ndarray   # (P,) projection distances, mm
    unreliable: np.ndarray  # (P,) bool
    oriented: bool = False

    @property
    def max_residual(self):
        return float(self.residuals.max())

    @property
    def n_unreliable(self):
        return int(self.unreliable.sum())


def transfer_patterns(model: DeformableModel, result: RegistrationResult,
                      scan: TriangleMesh,
                      filters: FilterConfig | None = None,
                      scan_index: ScanIndex | None = None):
    """Map the model's pattern curves onto the scan.

    Each curve anchor is evaluated on the registered (deformed) model, then
    projected to the closest scan-surface point; the projection distance is
    the residual.
    """
    filters = filters or FilterConfig()
    if scan_index is None:
        scan_index = ScanIndex(scan)
    deformed = deform_vertices(model, result.pose, result.alpha)
    out = []
    for curve in model.patterns:
        pts = evaluate_anchors(deformed, model.template.triangles,
                               curve.anchors)
        proj, dist, _, _, _ = project_points(scan_index, pts)
        out.append(TransferredPattern(
            name=curve.name, points=proj, residuals=dist,
            unreliable=dist > filters.max_distance, oriented=curve.oriented))
    return out


def save_pattern_text(patterns, path):
    """Plain-text export: one block per pattern (name, count, xyz rows)."""
    with open(path, "w", encoding="utf-8") as f:
        for p in patterns:
            f.write(f"pattern {p.name} {len(p.points)} "
                    f"oriented={int(p.oriented)}\n")
            for xyz, bad in zip(p.points, p.unreliable):
                flag = " unreliable" if bad else ""
                f.write(f"{xyz[0]:.9g} {xyz[1]:.9g} {xyz[2]:.9g}{flag}\n")


def save_pattern_obj(patterns, path):
    """OBJ export with line elements (one `l` record per polyline)."""
    with open(path, "w", encoding="utf-8") as f:
        base = 1
        for p in patterns:
            f.write(f"o {p.name}\n")
            for xyz in p.points:
                f.write(f"v {xyz[0]:.9g} {xyz[1]:.9g} {xyz[2]:.9g}\n")
            ids = " ".join(str(base + i) for i in range(len(p.points)))
            f.write(f"l {ids}\n")
            base += len(p.points)


# ---------------------------------------------------------------------------
# Sweeps (Figures 4-8 drivers)
# ---------------------------------------------------------------------------

def _registration_cell(model, target, weights, filters, solver_config,
                       active_landmarks=None):
    """One sweep cell: register and report surface / landmark MAE."""
    result = register(model, target.scan,
                      scan_landmarks=target.scan_landmarks,
                      weights=weights, filters=filters,
                      solver_config=solver_config,
                      active_landmarks=active_landmarks)
    surf = surface_error(result).mae
    lm = landmark_error(result, model, target.scan_landmarks).mae
    return surf, lm, result.converged


def _mean_rows(label, values, cells):
    rows = []
    for value, per_target in zip(values, cells):
        surf = [c[0] for c in per_target]
        lm = [c[1] for c in per_target]
        conv = [c[2] for c in per_target]
        rows.append({label: value,
                     "surface_mae": float(np.mean(surf)),
                     "landmark_mae": float(np.mean(lm)),
                     "n_targets": len(per_target),
                     "n_converged": int(sum(conv))})
    return rows


def sweep_landmarks(model, targets, weights=None, counts=None,
                    filters=None, solver_config=None, jobs=1):
    """Mean surface / landmark MAE per active-landmark count (Fig. 4)."""
    weights = weights or EnergyWeights()
    counts = list(counts) if counts is not None \
        else list(range(len(model.landmarks) + 1))
    for c in counts:
        if not (0 <= c <= len(model.landmarks)):
            raise EvaluationError(f"landmark count {c} out of range")
    tasks = [(model, t, weights, filters, solver_config, c)
             for c in counts for t in targets]
    cells = _run_cells(_registration_cell, tasks, jobs)
    grouped = [cells[i * len(targets):(i + 1) * len(targets)]
               for i in range(len(counts))]
    return _mean_rows("landmarks", counts, grouped)


def sweep_blendshapes(model, targets, weights=None, counts=None,
                      filters=None, solver_config=None, jobs=1):
    """Mean surface MAE per blendshape truncation count (Fig. 5/6)."""
    weights = weights or EnergyWeights()
    counts = list(counts) if counts is not None \
        else list(range(model.n_shapes + 1))
    tasks = [(truncate_blendshapes(model, c), t, weights, filters,
              solver_config, None)
             for c in counts for t in targets]
    cells = _run_cells(_registration_cell, tasks, jobs)
    grouped = [cells[i * len(targets):(i + 1) * len(targets)]
               for i in range(len(counts))]
    return _mean_rows("blendshapes", counts, grouped)


LAMBDA_FIELDS = ("lambda_d", "lambda_s", "lambda_bs", "lambda_j", "lambda_l")


def sweep_lambda(model, targets, which, values, weights=None,
                 filters=None, solver_config=None, jobs=1):
    """Mean surface / landmark MAE per value of one lambda (Fig. 7/8)."""
    if which not in LAMBDA_FIELDS:
        raise EvaluationError(f"unknown weight {which!r}; "
                              f"expected one of {LAMBDA_FIELDS}")
    base = weights or EnergyWeights()
    values = [float(v) for v in values]
    tasks = [(model, t, replace(base, **{which: v}), filters,
              solver_config, None)
             for v in values for t in targets]
    cells = _run_cells(_registration_cell, tasks, jobs)
    grouped = [cells[i * len(targets):(i + 1) * len(targets)]
               for i in range(len(values))]
    return _mean_rows(which, values, grouped)


def _run_cells(fn, tasks, jobs):
    """Run independent sweep cells, optionally in parallel, order-preserving."""
    if jobs is None or jobs <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=int(jobs)) as pool:
        return list(pool.map(lambda t: fn(*t), tasks))
