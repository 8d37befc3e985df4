"""
Segmentation and localization metrics in the NICE-I / NIR-ISL style.

Masks are 2-D boolean numpy arrays. Boundary sets are integer arrays of
shape (K, 2) holding (row, col) pixel coordinates.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigurationError, DimensionError, EmptyMaskError

SEGMENTATION_METRICS = ("e1", "e2")
LOCALIZATION_METRICS = ("mdice", "mhdis")


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if pred.ndim != 2 or pred.size == 0:
        raise DimensionError(f"masks must be non-empty 2-D arrays, got shape {pred.shape}")
    return pred, gt


def e1(pred, gt) -> float:
    """Fraction of pixels where ``pred`` and ``gt`` disagree."""
    pred, gt = _pair(pred, gt)
    return np.count_nonzero(pred ^ gt) / pred.size


def e1_batch(pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> float:
    values = [e1(p, g) for p, g in pairs]
    if not values:
        raise ConfigurationError("e1_batch needs at least one mask pair")
    return float(np.mean(values))


def fp_fn_rates(pred, gt) -> tuple[float, float]:
    """False-positive rate over gt background and false-negative rate over gt foreground.

    A rate whose denominator is zero is defined as 0.
    """
    pred, gt = _pair(pred, gt)
    n_fg = np.count_nonzero(gt)
    n_bg = gt.size - n_fg
    fp = np.count_nonzero(pred & ~gt)
    fn = np.count_nonzero(~pred & gt)
    return (fp / n_bg if n_bg else 0.0), (fn / n_fg if n_fg else 0.0)


def e2_batch(pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> float:
    """Mean of per-image (fp + fn) / 2."""
    rates = [fp_fn_rates(p, g) for p, g in pairs]
    if not rates:
        raise ConfigurationError("e2_batch needs at least one mask pair")
    return sum(fp + fn for fp, fn in rates) / (2 * len(rates))


def dice(a, b) -> float:
    """2|a∩b| / (|a| + |b|); two empty masks score 1."""
    a, b = _pair(a, b)
    total = np.count_nonzero(a) + np.count_nonzero(b)
    if total == 0:
        return 1.0
    return 2 * np.count_nonzero(a & b) / total


def boundary_points(mask) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour (outside counts as background)."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise DimensionError(f"mask must be 2-D, got shape {m.shape}")
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return np.argwhere(m & ~interior)


def _points(a) -> np.ndarray:
    pts = np.asarray(a, dtype=np.int64).reshape(-1, 2)
    if len(pts) == 0:
        raise EmptyMaskError("Hausdorff distance is undefined for an empty point set")
    return pts


def _directed_sq(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> int:
    worst = 0
    for start in range(0, len(a), chunk):
        block = a[start : start + chunk]
        d = block[:, None, :] - b[None, :, :]
        nearest = np.einsum("ijk,ijk->ij", d, d).min(axis=1)
        worst = max(worst, int(nearest.max()))
    return worst


def hausdorff(a, b) -> float:
    """Symmetric Hausdorff distance between two point sets, by exhaustive search."""
    a, b = _points(a), _points(b)
    # squared integer distances keep the max/min exact; one sqrt at the end
    return math.sqrt(max(_directed_sq(a, b), _directed_sq(b, a)))


def normalized_hausdorff(a, b, h: int, w: int) -> float:
    """Hausdorff distance divided by the image diagonal."""
    a, b = _points(a), _points(b)
    for pts in (a, b):
        if (pts < 0).any() or (pts[:, 0] >= h).any() or (pts[:, 1] >= w).any():
            raise DimensionError(f"points fall outside the {h}x{w} image")
    return hausdorff(a, b) / math.hypot(h, w)


def boundary_hausdorff(pred, gt) -> float:
    """Normalized Hausdorff between the boundaries of two region masks.

    Evaluation policy for empty regions: both empty -> 0, one empty -> 1
    (the worst normalized distance).
    """
    pred, gt = _pair(pred, gt)
    bp, bg = boundary_points(pred), boundary_points(gt)
    if len(bp) == 0 and len(bg) == 0:
        return 0.0
    if len(bp) == 0 or len(bg) == 0:
        return 1.0
    return normalized_hausdorff(bp, bg, *pred.shape)


# ---------------------------------------------------------------------------
# Per-image records and aggregate reports
# ---------------------------------------------------------------------------

@dataclass
class ImageRecord:
    id: str
    e1: float
    fp: float
    fn: float
    dice_inner: float | None = None
    dice_outer: float | None = None
    hdis_inner: float | None = None  # normalized
    hdis_outer: float | None = None


@dataclass
class EvalReport:
    records: list[ImageRecord]
    E1: float
    E2: float
    mDice: float | None
    mHdis: float | None
    n: int
    inputs: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "n": self.n,
            "aggregates": {"E1": self.E1, "E2": self.E2, "mDice": self.mDice, "mHdis": self.mHdis},
            "records": [asdict(r) for r in self.records],
            "inputs": self.inputs,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        payload = json.loads(text)
        report = aggregate([ImageRecord(**r) for r in payload["records"]])
        report.inputs = payload.get("inputs", {})
        return report

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = [f.name for f in ImageRecord.__dataclass_fields__.values()]
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for r in self.records:
            writer.writerow({k: ("" if v is None else v) for k, v in asdict(r).items()})
        return buf.getvalue()


def evaluate_image(
    image_id: str,
    pred,
    gt,
    pred_inner=None,
    gt_inner=None,
    pred_outer=None,
    gt_outer=None,
) -> ImageRecord:
    """Segmentation metrics for one image, plus localization metrics when region masks are given."""
    fp, fn = fp_fn_rates(pred, gt)
    rec = ImageRecord(id=image_id, e1=e1(pred, gt), fp=fp, fn=fn)
    if pred_inner is not None and gt_inner is not None:
        rec.dice_inner = dice(pred_inner, gt_inner)
        rec.hdis_inner = boundary_hausdorff(pred_inner, gt_inner)
    if pred_outer is not None and gt_outer is not None:
        rec.dice_outer = dice(pred_outer, gt_outer)
        rec.hdis_outer = boundary_hausdorff(pred_outer, gt_outer)
    return rec


def aggregate(records: Sequence[ImageRecord]) -> EvalReport:
    """Average per-image records into E1, E2, mDice and mHdis.

    mDice and mHdis average inner and outer per image first, then over
    images; they are None when any record lacks localization values.
    """
    if not records:
        raise ConfigurationError("aggregate needs at least one record")
    n = len(records)
    big_e1 = sum(r.e1 for r in records) / n
    big_e2 = sum(r.fp + r.fn for r in records) / (2 * n)
    loc_fields = ("dice_inner", "dice_outer", "hdis_inner", "hdis_outer")
    if all(getattr(r, f) is not None for r in records for f in loc_fields):
        m_dice = sum((r.dice_inner + r.dice_outer) / 2 for r in records) / n
        m_hdis = sum((r.hdis_inner + r.hdis_outer) / 2 for r in records) / n
    else:
        m_dice = m_hdis = None
    return EvalReport(list(records), big_e1, big_e2, m_dice, m_hdis, n)


# ---------------------------------------------------------------------------
# Rank sums
# ---------------------------------------------------------------------------

DIRECTIONS = ("lower", "higher", "rank")


@dataclass
class ScoreCell:
    method: str
    metric: str
    dataset: str
    score: float
    direction: str  # lower | higher (is better) | rank (score is already a rank)


@dataclass
class RankTable:
    methods: list[str]
    columns: list[tuple[str, str]]  # (metric, dataset)
    ranks: dict[str, dict[tuple[str, str], float]]
    segmentation: dict[str, float]
    localization: dict[str, float]
    total: dict[str, float]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["method"] + [f"{m}:{d}" for m, d in self.columns]
        writer.writerow(header + ["segmentation_rank_sum", "localization_rank_sum", "rank_sum"])
        for method in self.methods:
            row = [method] + [_fmt(self.ranks[method][c]) for c in self.columns]
            row += [_fmt(self.segmentation[method]), _fmt(self.localization[method]), _fmt(self.total[method])]
            writer.writerow(row)
        return buf.getvalue()


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def metric_task(metric: str) -> str:
    key = metric.lower()
    if key in SEGMENTATION_METRICS:
        return "segmentation"
    if key in LOCALIZATION_METRICS:
        return "localization"
    return "other"


def rank_sum(cells: Sequence[ScoreCell]) -> RankTable:
    """Rank methods within every (metric, dataset) column and total the ranks.

    Ties share the mean rank. Cells with direction ``rank`` carry a
    precomputed rank and are summed as-is. E1/E2 columns count towards the
    segmentation sum, mDice/mHdis towards localization; every column
    counts towards the total.
    """
    if not cells:
        raise ConfigurationError("rank_sum needs at least one score cell")
    methods = list(dict.fromkeys(c.method for c in cells))
    columns = list(dict.fromkeys((c.metric, c.dataset) for c in cells))
    grid: dict[tuple[str, str], dict[str, ScoreCell]] = {col: {} for col in columns}
    for c in cells:
        if c.direction not in DIRECTIONS:
            raise ConfigurationError(f"direction must be one of {DIRECTIONS}, got {c.direction!r}")
        slot = grid[(c.metric, c.dataset)]
        if c.method in slot:
            raise ConfigurationError(f"duplicate cell for {c.method!r} at {c.metric}/{c.dataset}")
        slot[c.method] = c
    ranks: dict[str, dict[tuple[str, str], float]] = {m: {} for m in methods}
    for col, slot in grid.items():
        if set(slot) != set(methods):
            missing = sorted(set(methods) - set(slot))
            raise ConfigurationError(f"ragged score grid: column {col[0]}/{col[1]} lacks {missing}")
        directions = {c.direction for c in slot.values()}
        if len(directions) != 1:
            raise ConfigurationError(f"column {col[0]}/{col[1]} mixes directions {sorted(directions)}")
        direction = directions.pop()
        scores = np.array([slot[m].score for m in methods], dtype=float)
        if direction == "rank":
            col_ranks = scores
        else:
            col_ranks = rankdata(scores if direction == "lower" else -scores, method="average")
        for m, r in zip(methods, col_ranks):
            ranks[m][col] = float(r)
    seg = {m: sum(r for (met, _), r in ranks[m].items() if metric_task(met) == "segmentation") for m in methods}
    loc = {m: sum(r for (met, _), r in ranks[m].items() if metric_task(met) == "localization") for m in methods}
    total = {m: sum(ranks[m].values()) for m in methods}
    return RankTable(methods, columns, ranks, seg, loc, total)


@dataclass
class RankDiscrepancy:
    method: str
    group: str
    computed: float
    published: float


def check_published_sums(table: RankTable, published: Mapping[str, Mapping[str, float]]) -> list[RankDiscrepancy]:
    """Compare computed rank sums against externally reported ones.

    ``published`` maps method -> {"segmentation"|"localization"|"total": value}.
    Mismatches are reported, never corrected.
    """
    out = []
    sums = {"segmentation": table.segmentation, "localization": table.localization, "total": table.total}
    for method, groups in published.items():
        if method not in table.total:
            continue
        for group, value in groups.items():
            computed = sums[group][method]
            if computed != value:
                out.append(RankDiscrepancy(method, group, computed, float(value)))
    return out


def read_score_csv(text: str) -> list[ScoreCell]:
    """Parse ``method,metric,dataset,score,direction`` rows."""
    reader = csv.DictReader(io.StringIO(text))
    required = ["method", "metric", "dataset", "score", "direction"]
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != required:
        raise ConfigurationError(f"score CSV header must be {','.join(required)}, got {reader.fieldnames}")
    cells = []
    for lineno, row in enumerate(reader, start=2):
        try:
            score = float(row["score"])
        except (TypeError, ValueError):
            raise ConfigurationError(f"line {lineno}: score {row['score']!r} is not a number") from None
        cells.append(ScoreCell(row["method"], row["metric"], row["dataset"], score, row["direction"].strip()))
    return cells
