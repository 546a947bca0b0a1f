"""Confidence-weighted set descriptors and set-to-set verification.

A set of member features ``v_i`` with confidences ``s_i`` is reduced to
``v = sum_i s_i v_i / sum_i s_i``. The descriptor is not renormalized;
set similarity is the cosine of two descriptors, which ignores scale.
"""

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_embeddings
from .embedsim import write_embedding_store
from .metrics import roc_summary

MANIFEST_HEADER = ["set_id", "identity", "image_id"]
WEIGHTINGS = ("uniform", "confidence")


@dataclass(frozen=True)
class FaceSet:
    set_id: int
    identity_id: int
    image_ids: tuple
    embeddings: np.ndarray
    confidences: np.ndarray

    def __post_init__(self):
        emb = check_embeddings(self.embeddings, unit=True, name="set embeddings")
        conf = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
        if len(self.image_ids) == 0:
            raise ValueError(f"set {self.set_id} has no members")
        if emb.shape[0] != len(self.image_ids) or conf.shape[0] != len(self.image_ids):
            raise ValueError(f"set {self.set_id}: members, embeddings and confidences disagree")
        if np.any(conf < 0) or not np.all(np.isfinite(conf)):
            raise ValueError(f"set {self.set_id}: confidences must be finite and nonnegative")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "confidences", conf)

    def __len__(self):
        return len(self.image_ids)

    def with_confidences(self, confidences):
        return FaceSet(self.set_id, self.identity_id, self.image_ids, self.embeddings, confidences)


@dataclass(frozen=True)
class SetDescriptor:
    vector: np.ndarray
    weight_sum: float


def fuse(face_set):
    """Confidence-weighted average of the member embeddings."""
    s = face_set.confidences
    total = math.fsum(s)
    if total <= 0:
        raise ValueError(f"set {face_set.set_id}: confidences sum to zero")
    return SetDescriptor((s / total) @ face_set.embeddings, total)


class SetFuser(TransformerMixin, BaseEstimator):
    """Map a sequence of :class:`FaceSet` to a descriptor matrix.

    ``weighting='uniform'`` ignores member confidences and averages.
    """

    def __init__(self, weighting="confidence"):
        self.weighting = weighting

    def fit(self, X=None, y=None):
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")
        return self

    def transform(self, X):
        self.fit()
        rows = []
        for fs in X:
            if self.weighting == "uniform":
                fs = fs.with_confidences(np.ones(len(fs)))
            rows.append(fuse(fs).vector)
        return np.array(rows)


def _cosine_rows(D, ia, ib):
    A, B = D[ia], D[ib]
    num = np.einsum("ij,ij->i", A, B)
    return np.clip(num / (np.linalg.norm(A, axis=1) * np.linalg.norm(B, axis=1)), -1.0, 1.0)


def set_pairs(sets, *, n_impostor=None, rng=None):
    """Genuine pairs (same identity) and impostor pairs (different identity).

    Impostor pairs are exhaustive unless ``n_impostor`` caps them, in which
    case a seeded uniform subset is taken. Returns ``(ia, ib, is_genuine)``
    as index arrays into ``sets``.
    """
    identities = np.array([fs.identity_id for fs in sets])
    ia, ib = np.triu_indices(len(sets), k=1)
    genuine = identities[ia] == identities[ib]
    imp = np.flatnonzero(~genuine)
    if n_impostor is not None and len(imp) > n_impostor:
        if rng is None:
            raise ValueError("sampling impostor pairs needs an rng")
        imp = np.sort(rng.choice(imp, size=n_impostor, replace=False))
    keep = np.sort(np.concatenate([np.flatnonzero(genuine), imp]))
    return ia[keep], ib[keep], genuine[keep]


def set_verification(sets, pairs, weighting="confidence", far_targets=None):
    """RocSummary of set-to-set verification.

    ``pairs`` is the ``(ia, ib, is_genuine)`` triple from :func:`set_pairs`.
    Returns ``(roc, similarities)``.
    """
    ia, ib, genuine = (np.asarray(p) for p in pairs)
    if len(ia) == 0:
        raise ValueError("set_verification needs at least one set pair")
    descriptors = SetFuser(weighting).transform(sets)
    sim = _cosine_rows(descriptors, ia, ib)
    kwargs = {} if far_targets is None else {"far_targets": far_targets}
    return roc_summary(sim[genuine], sim[~genuine], **kwargs), sim


def build_set_manifest(
    image_ids,
    identity_ids,
    qualities,
    *,
    sets_per_identity=3,
    size_range=(2, 16),
    low_quality_fraction=0.3,
    low_quality_threshold=0.3,
    rng,
):
    """Draw disjoint sets per identity, each with a minimum share of
    low-quality members.

    A set's size is drawn uniformly from ``size_range`` and then shrunk if
    the identity has too few low-quality images left to honour the share.
    Returns a list of ``(set_id, identity_id, image_ids)``.
    """
    lo, hi = size_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad size range {size_range}")
    image_ids = np.asarray(image_ids, dtype=np.int64)
    identity_ids = np.asarray(identity_ids, dtype=np.int64)
    qualities = np.asarray(qualities, dtype=np.float64)
    manifest = []
    for ident in np.unique(identity_ids):
        rows = np.flatnonzero(identity_ids == ident)
        low = list(rng.permutation(rows[qualities[rows] < low_quality_threshold]))
        high = list(rng.permutation(rows[qualities[rows] >= low_quality_threshold]))
        for _ in range(sets_per_identity):
            size = int(rng.integers(lo, hi + 1))
            while size >= lo:
                n_low = math.ceil(low_quality_fraction * size)
                if n_low <= len(low) and size - n_low <= len(high):
                    break
                size -= 1
            if size < lo:
                break
            members = [low.pop() for _ in range(n_low)] + [high.pop() for _ in range(size - n_low)]
            manifest.append(
                (len(manifest), int(ident), tuple(sorted(int(image_ids[m]) for m in members)))
            )
    return manifest


def materialize_sets(manifest, image_ids, features, confidences):
    """Attach member features and confidences to a manifest."""
    lookup = {int(i): n for n, i in enumerate(image_ids)}
    sets = []
    for set_id, ident, members in manifest:
        rows = [lookup[m] for m in members]
        sets.append(FaceSet(set_id, ident, tuple(members), features[rows], confidences[rows]))
    return sets


def write_manifest_csv(path, manifest):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for set_id, ident, members in manifest:
        for m in members:
            writer.writerow([set_id, ident, m])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_manifest_csv(path):
    grouped = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for set_id, ident, image_id in reader:
            key = (int(set_id), int(ident))
            grouped.setdefault(key, []).append(int(image_id))
    return [(sid, ident, tuple(members)) for (sid, ident), members in sorted(grouped.items())]


def write_descriptor_store(path, sets, descriptors, weight_sums):
    """Fused descriptors in the embedding-store layout, set id in the image slot."""
    write_embedding_store(
        path,
        [fs.set_id for fs in sets],
        [fs.identity_id for fs in sets],
        weight_sums,
        np.zeros(len(sets), dtype=np.uint32),
        descriptors,
    )
