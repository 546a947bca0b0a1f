"""Verification metrics: TAR at fixed FAR, error-versus-reject curves and
confidence/similarity correlation bins.

Threshold rule: with ``N`` impostor scores and target ``f``, let
``k = floor(f * N)``; the threshold is the ``(k+1)``-th largest impostor
score and a pair is accepted iff its score is strictly greater. Ties can
therefore only lower the achieved FAR, never push it above the target.
"""

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from ._validation import check_scores

FAR_TARGETS = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)
DEFAULT_R_GRID = tuple(round(0.01 * i, 2) for i in range(41))
CURVE_CSV_HEADER = ["r", "far_target", "threshold", "achieved_far", "tar", "n_retained"]
# guards floor/ceil against products like 0.7 * 100 = 70.00000000000001
_ROUND_EPS = 1e-9


@dataclass(frozen=True)
class OperatingPoint:
    far_target: float
    threshold: float
    achieved_far: float
    tar: float


@dataclass
class RocSummary:
    points: list
    n_genuine: int
    n_impostor: int

    def tar(self, far_target):
        for p in self.points:
            if p.far_target == far_target:
                return p.tar
        raise KeyError(far_target)

    def to_dict(self):
        return {
            "n_genuine": self.n_genuine,
            "n_impostor": self.n_impostor,
            "points": [asdict(p) for p in self.points],
        }


@dataclass(frozen=True)
class ScoredPair:
    """One verification trial; ``pair_confidence`` is always the minimum."""

    similarity: float
    pair_confidence: float
    is_genuine: bool
    image_a: int
    image_b: int

    @classmethod
    def from_confidences(cls, similarity, conf_a, conf_b, is_genuine, image_a, image_b):
        return cls(float(similarity), float(min(conf_a, conf_b)), bool(is_genuine), int(image_a), int(image_b))


class ScoredPairs:
    """Columnar batch of :class:`ScoredPair` trials."""

    def __init__(self, similarity, pair_confidence, is_genuine, image_a, image_b):
        self.similarity = np.asarray(similarity, dtype=np.float64).reshape(-1)
        self.pair_confidence = np.asarray(pair_confidence, dtype=np.float64).reshape(-1)
        self.is_genuine = np.asarray(is_genuine, dtype=bool).reshape(-1)
        self.image_a = np.asarray(image_a, dtype=np.int64).reshape(-1)
        self.image_b = np.asarray(image_b, dtype=np.int64).reshape(-1)
        n = len(self.similarity)
        for name in ("pair_confidence", "is_genuine", "image_a", "image_b"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries, expected {n}")

    @classmethod
    def from_confidences(cls, similarity, conf_a, conf_b, is_genuine, image_a, image_b):
        return cls(similarity, np.minimum(conf_a, conf_b), is_genuine, image_a, image_b)

    @classmethod
    def from_pairs(cls, pairs):
        pairs = list(pairs)
        return cls(
            [p.similarity for p in pairs],
            [p.pair_confidence for p in pairs],
            [p.is_genuine for p in pairs],
            [p.image_a for p in pairs],
            [p.image_b for p in pairs],
        )

    def __len__(self):
        return len(self.similarity)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return ScoredPair(
                float(self.similarity[idx]),
                float(self.pair_confidence[idx]),
                bool(self.is_genuine[idx]),
                int(self.image_a[idx]),
                int(self.image_b[idx]),
            )
        return ScoredPairs(
            self.similarity[idx],
            self.pair_confidence[idx],
            self.is_genuine[idx],
            self.image_a[idx],
            self.image_b[idx],
        )

    def with_confidence(self, pair_confidence):
        return ScoredPairs(self.similarity, pair_confidence, self.is_genuine, self.image_a, self.image_b)


def _as_scored_pairs(pairs):
    return pairs if isinstance(pairs, ScoredPairs) else ScoredPairs.from_pairs(pairs)


def tar_at_far(genuine_scores, impostor_scores, far_target):
    """Return ``(threshold, achieved_far, tar)`` at one FAR target."""
    genuine = check_scores(genuine_scores, "genuine_scores")
    impostor = check_scores(impostor_scores, "impostor_scores")
    if not 0.0 <= far_target <= 1.0:
        raise ValueError(f"far_target must lie in [0, 1], got {far_target}")
    n_imp = impostor.size
    k = math.floor(far_target * n_imp + _ROUND_EPS)
    if k >= n_imp:
        return -math.inf, float(np.count_nonzero(impostor > -math.inf)) / n_imp, 1.0
    # (k+1)-th largest == element n-1-k of the ascending order
    threshold = float(np.partition(impostor, n_imp - 1 - k)[n_imp - 1 - k])
    achieved = np.count_nonzero(impostor > threshold) / n_imp
    tar = np.count_nonzero(genuine > threshold) / genuine.size
    return threshold, float(achieved), float(tar)


def roc_summary(genuine_scores, impostor_scores, far_targets=FAR_TARGETS):
    genuine = check_scores(genuine_scores, "genuine_scores")
    impostor = check_scores(impostor_scores, "impostor_scores")
    points = [OperatingPoint(f, *tar_at_far(genuine, impostor, f)) for f in far_targets]
    return RocSummary(points, int(genuine.size), int(impostor.size))


def retained_count(n, r):
    """Pairs kept after rejecting fraction ``r``: ``ceil((1 - r) * n)``."""
    return min(n, math.ceil((1.0 - r) * n - _ROUND_EPS))


def rejection_order(pairs):
    """Indices sorted by confidence descending, ties by (image_a, image_b)."""
    pairs = _as_scored_pairs(pairs)
    return np.lexsort((pairs.image_b, pairs.image_a, -pairs.pair_confidence))


@dataclass
class CurvePoint:
    r: float
    n_retained: int
    n_genuine: int
    n_impostor: int
    roc: RocSummary | None
    note: str = ""


@dataclass
class ErrorRejectCurve:
    r_grid: list
    points: list
    far_targets: list = field(default_factory=lambda: list(FAR_TARGETS))

    def tar(self, r, far_target):
        for p in self.points:
            if p.r == r:
                return math.nan if p.roc is None else p.roc.tar(far_target)
        raise KeyError(r)

    def tar_series(self, far_target):
        return np.array([math.nan if p.roc is None else p.roc.tar(far_target) for p in self.points])

    def to_dict(self):
        return {
            "r_grid": list(self.r_grid),
            "far_targets": list(self.far_targets),
            "points": [
                {
                    "r": p.r,
                    "n_retained": p.n_retained,
                    "n_genuine": p.n_genuine,
                    "n_impostor": p.n_impostor,
                    "note": p.note,
                    "roc": None if p.roc is None else p.roc.to_dict(),
                }
                for p in self.points
            ],
        }


def error_vs_reject(pairs, r_grid=DEFAULT_R_GRID, far_targets=FAR_TARGETS, *, threads=1):
    """TAR at each FAR target after rejecting the lowest-confidence pairs.

    FAR and TAR at rejection rate ``r`` are computed over the retained pairs
    only. Points that retain no genuine or no impostor pairs carry
    ``roc=None`` and a note instead of raising.
    """
    pairs = _as_scored_pairs(pairs)
    if len(pairs) == 0:
        raise ValueError("error_vs_reject needs at least one pair")
    r_grid = [float(r) for r in r_grid]
    if any(not 0.0 <= r < 1.0 for r in r_grid):
        raise ValueError("rejection rates must lie in [0, 1)")
    if any(b <= a for a, b in zip(r_grid, r_grid[1:])):
        raise ValueError("r_grid must be strictly increasing")
    order = rejection_order(pairs)
    sim = pairs.similarity[order]
    gen = pairs.is_genuine[order]
    n = len(pairs)

    def point(r):
        m = retained_count(n, r)
        g, i = sim[:m][gen[:m]], sim[:m][~gen[:m]]
        if g.size == 0 or i.size == 0:
            missing = "genuine" if g.size == 0 else "impostor"
            return CurvePoint(r, m, int(g.size), int(i.size), None, f"no {missing} pairs retained")
        return CurvePoint(r, m, int(g.size), int(i.size), roc_summary(g, i, far_targets))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            points = list(pool.map(point, r_grid))
    else:
        points = [point(r) for r in r_grid]
    return ErrorRejectCurve(r_grid, points, list(far_targets))


def count_decreases(values, tolerance=0.0):
    """Number of adjacent steps where the sequence drops by more than ``tolerance``."""
    values = np.asarray([v for v in values if not math.isnan(v)])
    return int(np.count_nonzero(np.diff(values) < -tolerance))


@dataclass
class CorrelationBins:
    edges: np.ndarray
    counts: np.ndarray
    mean_similarity: np.ndarray
    degenerate: bool = False

    @property
    def occupied(self):
        return self.counts > 0

    def occupied_means(self):
        return self.mean_similarity[self.occupied]

    def to_dict(self):
        return {
            "edges": [float(e) for e in self.edges],
            "counts": [int(c) for c in self.counts],
            "mean_similarity": [None if math.isnan(m) else float(m) for m in self.mean_similarity],
            "degenerate": self.degenerate,
        }


def correlation_bins(mated_pairs, n_bins=100, value_range=None):
    """Mean mated similarity per uniform confidence bin.

    Bin edges span the observed confidence range unless ``value_range`` is
    given. Empty bins carry NaN means. When every confidence is identical the
    result has a single occupied bin and ``degenerate=True``.
    """
    pairs = _as_scored_pairs(mated_pairs)
    if len(pairs) == 0:
        raise ValueError("correlation_bins needs at least one mated pair")
    if not np.all(pairs.is_genuine):
        raise ValueError("correlation_bins accepts mated pairs only")
    conf, sim = pairs.pair_confidence, pairs.similarity
    lo, hi = (float(conf.min()), float(conf.max())) if value_range is None else map(float, value_range)
    degenerate = hi <= lo
    edges = np.linspace(lo, hi, n_bins + 1) if not degenerate else np.full(n_bins + 1, lo)
    if degenerate:
        idx = np.zeros(len(conf), dtype=np.int64)
    else:
        idx = np.floor((conf - lo) / (hi - lo) * n_bins).astype(np.int64)
        idx = np.clip(idx, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    sums = np.bincount(idx, weights=sim, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return CorrelationBins(edges, counts, means, degenerate)


def build_covariate_protocol(
    image_ids,
    identity_ids,
    embeddings,
    recognizer,
    confidences,
    *,
    n_genuine=10_000,
    n_impostor=100_000,
    rng,
):
    """Sample genuine and impostor image pairs and score them.

    Similarity is the cosine of recognizer-projected embeddings; pair
    confidence is the minimum of the two per-image confidences.
    ``n_genuine=None`` keeps every mated pair.
    """
    image_ids = np.asarray(image_ids, dtype=np.int64)
    identity_ids = np.asarray(identity_ids, dtype=np.int64)
    confidences = np.asarray(confidences, dtype=np.float64)
    if len(np.unique(identity_ids)) < 2:
        raise ValueError("impostor sampling needs at least two identities")

    order = np.lexsort((image_ids, identity_ids))
    ids_sorted = identity_ids[order]
    _, starts, counts = np.unique(ids_sorted, return_index=True, return_counts=True)
    ga, gb = [], []
    for start, count in zip(starts, counts):
        ia, ib = np.triu_indices(count, k=1)
        ga.append(order[start + ia])
        gb.append(order[start + ib])
    ga = np.concatenate(ga) if ga else np.empty(0, dtype=np.int64)
    gb = np.concatenate(gb) if gb else np.empty(0, dtype=np.int64)
    if n_genuine is not None and len(ga) > n_genuine:
        keep = np.sort(rng.choice(len(ga), size=n_genuine, replace=False))
        ga, gb = ga[keep], gb[keep]

    n = len(image_ids)
    ia = rng.integers(n, size=n_impostor)
    ib = rng.integers(n, size=n_impostor)
    clash = identity_ids[ia] == identity_ids[ib]
    while np.any(clash):
        ib[clash] = rng.integers(n, size=int(clash.sum()))
        clash = identity_ids[ia] == identity_ids[ib]

    a = np.concatenate([ga, ia])
    b = np.concatenate([gb, ib])
    genuine = np.concatenate([np.ones(len(ga), bool), np.zeros(len(ia), bool)])
    sim = recognizer.similarity(embeddings[a], embeddings[b])
    return ScoredPairs.from_confidences(sim, confidences[a], confidences[b], genuine, image_ids[a], image_ids[b])


def write_curve_csv(path, curve):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_CSV_HEADER)
    for p in curve.points:
        for f in curve.far_targets:
            if p.roc is None:
                writer.writerow([repr(p.r), repr(f), "nan", "nan", "nan", p.n_retained])
                continue
            op = next(o for o in p.roc.points if o.far_target == f)
            writer.writerow(
                [repr(p.r), repr(f), repr(op.threshold), repr(op.achieved_far), repr(op.tar), p.n_retained]
            )
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_curve_csv(path):
    """Rows of the curve CSV as dicts of floats (``n_retained`` as int)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CURVE_CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for row in reader:
            parsed = {k: float(row[k]) for k in CURVE_CSV_HEADER[:-1]}
            parsed["n_retained"] = int(row["n_retained"])
            rows.append(parsed)
    return rows


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(_sanitize(payload), fh, indent=2, sort_keys=True, allow_nan=False, default=_json_default)
        fh.write("\n")


def _sanitize(obj):
    """JSON has no inf/nan: infinities become strings, nan becomes null."""
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        if math.isnan(obj):
            return None
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return float(obj)
    return obj


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")
