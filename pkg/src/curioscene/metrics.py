"""Assignment-based scene-code metric and DSSIM image metric.

The parameter metric matches objects by position (exact search for small
counts), then sums weighted attribute norms per matched pair plus a global
light term.  The same accumulation runs on plain arrays for evaluation and
on tape tensors for supervised training, so the two are bitwise equal.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import CountMismatch, InvalidConfig, ShapeMismatch
from .nn import SceneCode

_MAX_OBJECTS = 9

_EXHAUSTIVE_LIMIT = 8

# Accepts 1-ulp cost noise when checking Hungarian ties; genuine ties come
# from duplicated coordinates and land well inside this.
_TIE_TOL = 1e-9

GROUP_ORDER = ("position", "color", "rotation", "confidence", "light")


@dataclass
class MetricWeights:
    position: float = 1.0
    color: float = 1.0
    rotation: float = 1.0
    confidence: float = 1.0
    light: float = 1.0

    def validate(self) -> None:
        for name in GROUP_ORDER:
            if getattr(self, name) < 0.0:
                raise InvalidConfig(f"metric weight {name} must be >= 0")


def optimal_assignment(pos_a: np.ndarray, pos_b: np.ndarray) -> tuple:
    """Permutation P minimizing sum_i ||a_i - b_{P_i}||.

    Exhaustive search up to 8 objects, Hungarian at 9; ties resolve to the
    lexicographically smallest permutation.
    """
    pos_a = np.asarray(pos_a, dtype=np.float64)
    pos_b = np.asarray(pos_b, dtype=np.float64)
    if len(pos_a) != len(pos_b):
        raise CountMismatch(f"{len(pos_a)} objects vs {len(pos_b)}")
    n = len(pos_a)
    if n == 0:
        return ()
    if n > _MAX_OBJECTS:
        raise InvalidConfig(f"assignment supports up to {_MAX_OBJECTS} objects, got {n}")
    cost = np.linalg.norm(pos_a[:, None, :] - pos_b[None, :, :], axis=2)
    if n <= _EXHAUSTIVE_LIMIT:
        perms = _perm_table(n)
        totals = cost[np.arange(n)[None, :], perms].sum(axis=1)
        # argmin takes the first minimum; the table is in lexicographic order
        return tuple(int(j) for j in perms[int(np.argmin(totals))])
    return _hungarian_lex(cost)


_PERM_TABLES: dict[int, np.ndarray] = {}


def _perm_table(n: int) -> np.ndarray:
    if n not in _PERM_TABLES:
        _PERM_TABLES[n] = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
    return _PERM_TABLES[n]


def _hungarian_lex(cost: np.ndarray) -> tuple:
    from scipy.optimize import linear_sum_assignment

    n = cost.shape[0]
    rows, cols = linear_sum_assignment(cost)
    base = cost[rows, cols].sum()
    tol = _TIE_TOL * max(1.0, abs(base))
    perm: list[int] = []
    used: set[int] = set()
    for i in range(n):
        for j in range(n):
            if j in used:
                continue
            prefix = sum(cost[k, perm[k]] for k in range(i)) + cost[i, j]
            rest_rows = list(range(i + 1, n))
            rest_cols = [c for c in range(n) if c not in used and c != j]
            if rest_rows:
                sub = cost[np.ix_(rest_rows, rest_cols)]
                rr, cc = linear_sum_assignment(sub)
                prefix += sub[rr, cc].sum()
            if prefix <= base + tol:
                perm.append(j)
                used.add(j)
                break
    return tuple(perm)


# -- shared Eq. 1 arithmetic -------------------------------------------
# These helpers run the same numpy kernels whether handed arrays or tape
# tensors, which is what makes the training loss bitwise-identical to the
# evaluation metric.


def _is_tensor(x) -> bool:
    return isinstance(x, ad.Tensor)


def _sqrt(x):
    return x.sqrt() if _is_tensor(x) else np.sqrt(x)


def _abs(x):
    return ad.maximum(x, -x) if _is_tensor(x) else np.maximum(x, -x)


def _vec_norms(delta):
    """Per-row Euclidean norms of an (n, d) difference."""
    sq = delta * delta
    return _sqrt(sq.sum(axis=1) if _is_tensor(sq) else np.sum(sq, axis=1))


def _angles(rot):
    if _is_tensor(rot):
        return ad.atan2(rot[:, 1], rot[:, 0])
    return np.arctan2(rot[:, 1], rot[:, 0])


def _wrap_angle_abs(delta):
    """|delta| wrapped into [0, pi]; the wrap count is gradient-detached."""
    raw = delta.data if _is_tensor(delta) else delta
    k = np.floor(raw / (2.0 * math.pi) + 0.5)
    return _abs(delta - (2.0 * math.pi) * k)


def _light_vector(light):
    az, el = light[0], light[1]
    if _is_tensor(light):
        return (el.cos() * az.cos(), el.sin(), el.cos() * az.sin())
    return (np.cos(el) * np.cos(az), np.sin(el), np.cos(el) * np.sin(az))


def light_angle(light_a, light_b):
    """Angle in radians between two (azimuth, elevation) directions.

    Chord-based: 2 asin(||u_a - u_b|| / 2).  Well conditioned near zero;
    exact zero for identical directions.
    """
    ua = _light_vector(light_a)
    ub = _light_vector(light_b)
    chord_sq = sum((pa - pb) * (pa - pb) for pa, pb in zip(ua, ub))
    half = _sqrt(chord_sq) * 0.5
    if _is_tensor(half):
        return ad.minimum(half, 1.0).asin() * 2.0
    return np.arcsin(np.minimum(half, 1.0)) * 2.0


def eq1_total(a_vals: dict, b_vals: dict, assignment, weights: MetricWeights):
    """Weighted Eq. 1 sum over matched objects plus the global light term.

    a_vals/b_vals hold arrays or tensors keyed like SceneCode fields; only
    keys present in both contribute.  Returns a scalar of the input kind.
    """
    perm = np.asarray(assignment, dtype=int)
    total = 0.0
    delta = a_vals["centers"] - b_vals["centers"][perm]
    total = total + _vec_norms(delta).sum() * weights.position
    if "rgbs" in a_vals and "rgbs" in b_vals:
        delta = a_vals["rgbs"] - b_vals["rgbs"][perm]
        total = total + _vec_norms(delta).sum() * weights.color
    if "rotations" in a_vals and "rotations" in b_vals:
        delta = _angles(a_vals["rotations"]) - _angles(b_vals["rotations"])[perm]
        total = total + _wrap_angle_abs(delta).sum() * weights.rotation
    if "confidences" in a_vals and "confidences" in b_vals:
        delta = a_vals["confidences"] - b_vals["confidences"][perm]
        total = total + _abs(delta).sum() * weights.confidence
    if "light" in a_vals and "light" in b_vals:
        total = total + light_angle(a_vals["light"], b_vals["light"]) * weights.light
    return total


def code_values(code: SceneCode) -> dict:
    values = {"centers": code.centers}
    for key in ("rgbs", "rotations", "confidences", "light"):
        val = getattr(code, key)
        if val is not None:
            values[key] = val
    return values


def param_metric(
    a: SceneCode, b: SceneCode, weights: MetricWeights | None = None
) -> tuple[float, dict]:
    """Eq. 1 total plus the per-group report row.

    Breakdown units follow the results tables: mean per-object norms,
    confidence as MSE against the matched counterpart, light in degrees.
    """
    weights = weights or MetricWeights()
    weights.validate()
    if a.n_objects != b.n_objects:
        raise CountMismatch(f"{a.n_objects} objects vs {b.n_objects}")
    a_vals, b_vals = code_values(a), code_values(b)
    perm = np.asarray(optimal_assignment(a.centers, b.centers), dtype=int)
    total = float(eq1_total(a_vals, b_vals, perm, weights))
    n = max(1, a.n_objects)
    breakdown: dict[str, float] = {}
    breakdown["position"] = float(_vec_norms(a.centers - b.centers[perm]).sum() / n)
    if "rgbs" in a_vals and "rgbs" in b_vals:
        breakdown["color"] = float(_vec_norms(a.rgbs - b.rgbs[perm]).sum() / n)
    if "rotations" in a_vals and "rotations" in b_vals:
        delta = _angles(a.rotations) - _angles(b.rotations)[perm]
        breakdown["rotation"] = float(np.sum(_wrap_angle_abs(delta)) / n)
    if "confidences" in a_vals and "confidences" in b_vals:
        delta = a.confidences - b.confidences[perm]
        breakdown["confidence"] = float(np.mean(delta * delta))
    if "light" in a_vals and "light" in b_vals:
        breakdown["direction_deg"] = float(np.degrees(light_angle(a.light, b.light)))
    return total, breakdown


def select_confident(code: SceneCode, threshold: float = 0.5) -> SceneCode:
    """Proposals with confidence >= threshold; global light passes through."""
    if code.confidences is None:
        raise InvalidConfig("select_confident needs confidences")
    keep = code.confidences >= threshold
    return SceneCode(
        centers=code.centers[keep],
        rgbs=None if code.rgbs is None else code.rgbs[keep],
        rotations=None if code.rotations is None else code.rotations[keep],
        confidences=code.confidences[keep],
        light=code.light,
    )


def evaluate_pair(
    pred: SceneCode,
    truth: SceneCode,
    weights: MetricWeights | None = None,
    threshold: float = 0.5,
    variable_count: bool = False,
) -> dict:
    """Per-scene metric record, handling variable counts.

    With variable_count, low-confidence proposals are dropped first; a count
    mismatch is reported as count_error and Eq. 1 runs on the best-matched
    min-count subset.
    """
    weights = weights or MetricWeights()
    if variable_count and pred.confidences is not None:
        pred = select_confident(pred, threshold)
    record: dict = {"count_error": abs(pred.n_objects - truth.n_objects)}
    if pred.n_objects == truth.n_objects:
        total, groups = param_metric(pred, truth, weights)
    elif min(pred.n_objects, truth.n_objects) == 0:
        return {**record, "param_error": None}
    else:
        sub_pred, sub_truth = _min_count_match(pred, truth)
        total, groups = param_metric(sub_pred, sub_truth, weights)
    record["param_error"] = total
    record.update(groups)
    return record


def _min_count_match(a: SceneCode, b: SceneCode) -> tuple[SceneCode, SceneCode]:
    from scipy.optimize import linear_sum_assignment

    cost = np.linalg.norm(a.centers[:, None, :] - b.centers[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    return _take(a, rows), _take(b, cols)


def _take(code: SceneCode, idx) -> SceneCode:
    return SceneCode(
        centers=code.centers[idx],
        rgbs=None if code.rgbs is None else code.rgbs[idx],
        rotations=None if code.rotations is None else code.rotations[idx],
        confidences=None if code.confidences is None else code.confidences[idx],
        light=code.light,
    )


# -- DSSIM -------------------------------------------------------------

_WIN = 11

_SIGMA = 1.5

_C1 = 0.01**2

_C2 = 0.03**2


def _gaussian_window() -> np.ndarray:
    half = (_WIN - 1) // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2.0 * _SIGMA**2))
    window = np.outer(g, g)
    return window / window.sum()


_WINDOW = _gaussian_window()


def _windowed(img: np.ndarray) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(img, (_WIN, _WIN))
    return np.tensordot(view, _WINDOW, axes=([2, 3], [0, 1]))


def dssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural dissimilarity (1 - SSIM) / 2 on [0, 1] images.

    Gaussian-weighted 11x11 windows, averaged over the valid interior and
    the channels.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    elif a.ndim != 3:
        raise ShapeMismatch(f"expected (C, H, W) images, got {a.shape}")
    if a.shape[1] < _WIN or a.shape[2] < _WIN:
        raise ShapeMismatch(f"images must be at least {_WIN}x{_WIN}, got {a.shape}")
    ssim_channels = []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]
        mu_x = _windowed(x)
        mu_y = _windowed(y)
        var_x = _windowed(x * x) - mu_x * mu_x
        var_y = _windowed(y * y) - mu_y * mu_y
        cov = _windowed(x * y) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + _C1) * (2.0 * cov + _C2)
        den = (mu_x * mu_x + mu_y * mu_y + _C1) * (var_x + var_y + _C2)
        ssim_channels.append(np.mean(num / den))
    ssim = float(np.mean(ssim_channels))
    return (1.0 - ssim) / 2.0


# -- reports -----------------------------------------------------------


@dataclass
class EvalReport:
    per_scene: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"aggregate": self.aggregate, "per_scene": self.per_scene}, indent=2
        )

    def table(self) -> str:
        return format_table([("eval", self.aggregate)])


def aggregate_records(records: list[dict]) -> dict:
    keys: list[str] = []
    for rec in records:
        for key in rec:
            if key not in keys:
                keys.append(key)
    out = {}
    for key in keys:
        vals = [r[key] for r in records if r.get(key) is not None]
        out[key] = float(np.mean(vals)) if vals else None
    return out


def build_report(records: list[dict]) -> EvalReport:
    return EvalReport(per_scene=records, aggregate=aggregate_records(records))


def evaluate_codes(
    codes: list[SceneCode],
    dataset,
    indices,
    camera=None,
    weights: MetricWeights | None = None,
    threshold: float = 0.5,
) -> EvalReport:
    """Score predicted codes against dataset labels, with optional novel-view
    DSSIM when a camera is given (3D worlds only)."""
    from . import render as rn
    from . import worlds as wd

    spec = dataset.spec
    variable = spec.object_count[0] != spec.object_count[1]
    records = []
    for code, index in zip(codes, indices):
        truth = dataset.label(int(index))
        record = evaluate_pair(code, truth, weights, threshold, variable_count=variable)
        if camera is not None:
            tape = ad.Tape()
            img_pred = rn.render_scene(tape, code, spec, dataset.image_size, camera=camera)
            img_true = rn.render_scene(tape, truth, spec, dataset.image_size, camera=camera)
            record["image_dssim"] = dssim(img_pred.data, img_true.data)
        records.append(record)
    return build_report(records)


def novel_view_eval(
    encoder,
    heads,
    dataset,
    novel_camera,
    split: str = "test",
    weights: MetricWeights | None = None,
    threshold: float = 0.5,
) -> EvalReport:
    """Encode each test image and score it from a held-out viewpoint."""
    from .nn import encode

    spec = dataset.spec
    if spec.dims != 2 and spec.camera is not None and novel_camera is not None:
        same = (
            np.allclose(novel_camera.position, spec.camera.position)
            and np.allclose(novel_camera.look_at, spec.camera.look_at)
            and novel_camera.fov_y == spec.camera.fov_y
        )
        if same:
            raise InvalidConfig("novel view camera matches the training camera")
    indices = dataset.split[split]
    codes = [encode(dataset.images[int(i)], encoder, heads) for i in indices]
    return evaluate_codes(codes, dataset, indices, novel_camera, weights, threshold)


def ratio_report(report: EvalReport, reference: EvalReport) -> dict:
    """Aggregate metric ratios vs a reference run; None where undefined.

    Equal values give exactly 1.0 even at zero, so a self-comparison is all
    ones; an unequal value over a zero reference has no defined ratio.
    """
    ratios = {}
    for key, value in report.aggregate.items():
        ref = reference.aggregate.get(key)
        if value is None or ref is None:
            ratios[key] = None
        elif value == ref:
            ratios[key] = 1.0
        elif ref <= 0.0:
            ratios[key] = None
        else:
            ratios[key] = value / ref
    return ratios


def format_table(rows: list[tuple[str, dict]]) -> str:
    """Aligned text table; rows are (label, {metric: value})."""
    keys: list[str] = []
    for _, values in rows:
        for key in values:
            if key not in keys:
                keys.append(key)
    widths = {key: max(len(key), 10) for key in keys}
    label_w = max([len(label) for label, _ in rows] + [6])
    lines = [" ".join(["method".ljust(label_w)] + [k.rjust(widths[k]) for k in keys])]
    for label, values in rows:
        cells = []
        for key in keys:
            val = values.get(key)
            cells.append(("--" if val is None else f"{val:.4f}").rjust(widths[key]))
        lines.append(" ".join([label.ljust(label_w)] + cells))
    return "\n".join(lines)
