"""Two-fold generation of mated-pair verification scores.

Identities are split into two folds. A recognizer fitted on one fold scores
every mated pair of the other, then the roles swap, so no pair is scored by
a recognizer that saw its images.
"""

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from ._validation import RankDeficiencyError, check_embeddings, normalize_rows
from .seeding import derive_rng

PAIR_CSV_HEADER = ["image_a", "image_b", "identity", "y", "fold"]


@dataclass(frozen=True)
class FoldSplit:
    fold_a: tuple
    fold_b: tuple

    def fold_of(self, name):
        if name == "a":
            return self.fold_a
        if name == "b":
            return self.fold_b
        raise ValueError(f"unknown fold {name!r}")


@dataclass(frozen=True)
class PairSample:
    image_a: int
    image_b: int
    identity_id: int
    y: float
    fold: str


def split_folds(identity_ids, seed):
    """Seeded balanced partition of identities into two folds."""
    ids = sorted(int(i) for i in identity_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("identity ids must be unique")
    if len(ids) < 2:
        raise ValueError("need at least 2 identities to split into folds")
    order = derive_rng(seed, "folds").permutation(len(ids))
    half = len(ids) // 2
    fold_a = tuple(sorted(ids[i] for i in order[:half]))
    fold_b = tuple(sorted(ids[i] for i in order[half:]))
    return FoldSplit(fold_a, fold_b)


def cosine_similarity(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def principal_angles(U, V):
    """Principal angles (radians, ascending) between two orthonormal bases."""
    cosines = np.linalg.svd(U.T @ V, compute_uv=False)
    # arccos loses all precision near 0; use the complement's sines there
    sines = np.linalg.svd(V - U @ (U.T @ V), compute_uv=False)[::-1][: len(cosines)]
    angles = np.arccos(np.clip(cosines, -1.0, 1.0))
    small = cosines > 1 / np.sqrt(2)
    angles[small] = np.arcsin(np.clip(sines[small], 0.0, 1.0))
    return np.sort(angles)


def orthogonal_iteration(M, k, *, tol=1e-10, max_iter=500, random_state=0):
    """Top-``k`` eigenpairs of a symmetric PSD matrix by orthogonal iteration.

    Convergence is declared when the sine of the largest principal angle
    between successive iterates drops below ``tol``. Returns
    ``(basis, eigenvalues, n_iter, converged)`` with eigenvalues descending.
    """
    d = M.shape[0]
    rng = np.random.default_rng(random_state)
    Q, _ = np.linalg.qr(rng.standard_normal((d, k)))
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        Z = M @ Q
        Q_new, _ = np.linalg.qr(Z)
        change = np.linalg.norm(Q_new - Q @ (Q.T @ Q_new), ord=2)
        Q = Q_new
        if change < tol:
            converged = True
            break
    # Rayleigh-Ritz rotation so columns are ordered eigenvectors
    evals, evecs = np.linalg.eigh(Q.T @ M @ Q)
    order = np.argsort(evals)[::-1]
    Q = Q @ evecs[:, order]
    # deterministic sign: largest-magnitude entry of each column positive
    signs = np.sign(Q[np.argmax(np.abs(Q), axis=0), np.arange(k)])
    signs[signs == 0] = 1.0
    return Q * signs, evals[order], n_iter, converged


class SubspaceRecognizer(TransformerMixin, BaseEstimator):
    """Rank-``k`` linear recognizer estimated from unlabeled embeddings.

    ``fit`` estimates the top-``k`` eigenspace of the embedding second-moment
    matrix; ``transform`` maps embeddings to unit-norm ``k``-dim features.

    Parameters
    ----------
    n_components : int
        Dimension ``k`` of the identity subspace.
    tol : float
        Subspace-change threshold for orthogonal iteration.
    max_iter : int
        Iteration cap.
    rank_tol : float
        Relative eigenvalue floor below which the fold is rank deficient.
    random_state : int
        Seed of the starting block.
    """

    def __init__(self, n_components=8, tol=1e-10, max_iter=500, rank_tol=1e-12, random_state=0):
        self.n_components = n_components
        self.tol = tol
        self.max_iter = max_iter
        self.rank_tol = rank_tol
        self.random_state = random_state

    def fit(self, X, y=None, *, fold=None, identity_ids=None):
        X = check_embeddings(X)
        k = self.n_components
        if not 0 < k < X.shape[1]:
            raise ValueError(f"n_components must lie in (0, {X.shape[1]}), got {k}")
        if X.shape[0] < k:
            raise RankDeficiencyError(f"{X.shape[0]} samples cannot span a {k}-dim subspace")
        M = X.T @ X / X.shape[0]
        basis, evals, n_iter, converged = orthogonal_iteration(
            M, k, tol=self.tol, max_iter=self.max_iter, random_state=self.random_state
        )
        if evals[-1] <= self.rank_tol * max(evals[0], np.finfo(float).tiny):
            raise RankDeficiencyError(
                f"fold is rank deficient: eigenvalue {k} is {evals[-1]:.3g} "
                f"(leading {evals[0]:.3g})"
            )
        self.components_ = basis
        self.eigenvalues_ = evals
        self.n_iter_ = n_iter
        self.converged_ = converged
        self.fold_ = fold
        self.identities_ = frozenset(int(i) for i in identity_ids) if identity_ids is not None else frozenset()
        self.n_features_in_ = X.shape[1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "components_"):
            raise NotFittedError("SubspaceRecognizer is not fitted yet")

    def project(self, X):
        """Raw subspace coordinates ``X @ A_hat``."""
        self._check_fitted()
        X = check_embeddings(X, dim=self.n_features_in_)
        return X @ self.components_

    def transform(self, X):
        return normalize_rows(self.project(X))

    def similarity(self, X1, X2):
        """Row-wise cosine of projected embeddings."""
        P1, P2 = self.project(X1), self.project(X2)
        num = np.einsum("ij,ij->i", P1, P2)
        den = np.linalg.norm(P1, axis=1) * np.linalg.norm(P2, axis=1)
        if np.any(den == 0):
            raise ValueError("an embedding projects to zero")
        return np.clip(num / den, -1.0, 1.0)


def fit_recognizer(world, identity_ids, k, *, fold=None, random_state=0):
    """Fit a recognizer on the records belonging to ``identity_ids``."""
    mask = np.isin(world.identity_ids, np.asarray(identity_ids, dtype=np.int64))
    return SubspaceRecognizer(n_components=k, random_state=random_state).fit(
        world.embeddings[mask], fold=fold, identity_ids=identity_ids
    )


def _identity_pairs(n, budget, rng):
    """Canonical (i<j) index pairs among n images, optionally subsampled."""
    ia, ib = np.triu_indices(n, k=1)
    if budget is not None and len(ia) > budget:
        keep = np.sort(rng.choice(len(ia), size=budget, replace=False))
        ia, ib = ia[keep], ib[keep]
    return ia, ib


def score_mated_pairs(
    recognizer, world, identity_ids, fold, *, pair_budget=500, clamp=True, seed=0, threads=1
):
    """Score every mated pair among ``identity_ids`` with ``recognizer``.

    The recognizer must come from the opposite fold. Output is sorted by
    identity then image ids, independent of ``threads``.
    """
    if recognizer.fold_ is not None and recognizer.fold_ == fold:
        raise ValueError(f"recognizer was fitted on fold {fold!r}; score the other fold")
    overlap = recognizer.identities_ & {int(i) for i in identity_ids}
    if overlap:
        raise ValueError(f"{len(overlap)} identities were seen by the recognizer")

    by_identity = {}
    for idx, ident in enumerate(world.identity_ids):
        by_identity.setdefault(int(ident), []).append(idx)

    def score_one(ident):
        rows = np.array(sorted(by_identity.get(ident, []), key=lambda i: world.image_ids[i]))
        if len(rows) < 2:
            return []
        rng = derive_rng(seed, "pair-budget", ident)
        ia, ib = _identity_pairs(len(rows), pair_budget, rng)
        y = recognizer.similarity(world.embeddings[rows[ia]], world.embeddings[rows[ib]])
        if clamp:
            y = np.clip(y, 0.0, 1.0)
        ids = world.image_ids[rows]
        return [
            PairSample(int(ids[a]), int(ids[b]), ident, float(v), fold)
            for a, b, v in zip(ia, ib, y)
        ]

    idents = sorted(int(i) for i in identity_ids)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(score_one, idents))
    else:
        chunks = [score_one(i) for i in idents]
    return [p for chunk in chunks for p in chunk]


def generate_pair_corpus(world, k, seed, *, pair_budget=500, clamp=True, threads=1):
    """Run both fold directions and return ``(split, recognizers, pairs)``."""
    split = split_folds([i.id for i in world.identities], seed)
    recognizers = {}
    pairs = []
    for fit_fold, score_fold in (("a", "b"), ("b", "a")):
        rec = fit_recognizer(world, split.fold_of(fit_fold), k, fold=fit_fold)
        recognizers[fit_fold] = rec
        pairs.extend(
            score_mated_pairs(
                rec,
                world,
                split.fold_of(score_fold),
                score_fold,
                pair_budget=pair_budget,
                clamp=clamp,
                seed=seed,
                threads=threads,
            )
        )
    pairs.sort(key=lambda p: (p.identity_id, p.image_a, p.image_b))
    return split, recognizers, pairs


def pair_count(n_images, budget=None):
    full = n_images * (n_images - 1) // 2
    return full if budget is None else min(full, budget)


def write_pairs_csv(path, pairs):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PAIR_CSV_HEADER)
    for p in pairs:
        writer.writerow([p.image_a, p.image_b, p.identity_id, repr(float(p.y)), p.fold])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_pairs_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PAIR_CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        pairs = []
        for row in reader:
            y = float(row[3])
            if not math.isfinite(y):
                raise ValueError(f"{path}: non-finite score")
            pairs.append(PairSample(int(row[0]), int(row[1]), int(row[2]), y, row[4]))
    return pairs
