"""Synthetic identities and quality-degraded embeddings.

Identity prototypes live on a fixed ``k``-dimensional subspace of ``R^d``
spanned by an orthonormal basis ``A``. An observation of identity ``mu`` with
latent quality ``q`` is ``normalize(mu + tau(q) * eta)`` where
``tau(q) = noise_scale * (1 - q)`` and ``eta`` is full-dimensional noise with
unit expected squared norm. Noise leaks energy out of the identity subspace,
so the projection norm ``||A^T e||`` is an analytic recognizability score.

Degradations are embedding-space stand-ins for image corruptions. Each one
lowers ``q`` by a fixed decrement (floored at 0) and adds noise whose scale is
``noise_scale`` times the decrement actually applied:

==========  =========  ==================================================
kind        decrement  noise
==========  =========  ==================================================
iso_noise   0.20       isotropic Gaussian
coord_mask  0.30       isotropic Gaussian, then a random coordinate subset
                       (``mask_fraction`` of ``d``) is zeroed
heavy_tail  0.25       Student-t with ``heavy_tail_df`` degrees of freedom,
                       rescaled to unit variance per coordinate
==========  =========  ==================================================
"""

import csv
import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from ._validation import check_embeddings, check_positive_int, check_probability
from .seeding import derive_rng

DEGRADATION_KINDS = ("iso_noise", "coord_mask", "heavy_tail")
DEGRADATION_BITS = {"iso_noise": 1, "coord_mask": 2, "heavy_tail": 4}
DEFAULT_DECREMENTS = {"iso_noise": 0.2, "coord_mask": 0.3, "heavy_tail": 0.25}

STORE_MAGIC = b"PCEB"
STORE_VERSION = 1
_STORE_HEADER = struct.Struct("<4sIIQ")


@dataclass(frozen=True)
class WorldConfig:
    """Parameters of a synthetic world.

    ``quality_override`` pins every latent quality to one value, which is
    handy for building noiseless fixtures.
    """

    ambient_dim: int = 64
    identity_dim: int = 8
    num_identities: int = 200
    images_per_identity: int = 20
    high_quality_weight: float = 0.6
    high_quality_beta: tuple = (8.0, 2.0)
    low_quality_beta: tuple = (1.5, 4.0)
    degradation_probability: float = 0.2
    noise_scale: float = 3.0
    mask_fraction: float = 0.1
    heavy_tail_df: float = 3.0
    decrements: dict = field(default_factory=lambda: dict(DEFAULT_DECREMENTS))
    quality_override: float | None = None
    seed: int = 0

    def __post_init__(self):
        check_positive_int(self.ambient_dim, "ambient_dim")
        check_positive_int(self.identity_dim, "identity_dim")
        if self.identity_dim >= self.ambient_dim:
            raise ValueError(
                f"identity_dim ({self.identity_dim}) must be smaller than "
                f"ambient_dim ({self.ambient_dim})"
            )
        check_positive_int(self.num_identities, "num_identities")
        check_positive_int(self.images_per_identity, "images_per_identity")
        check_probability(self.high_quality_weight, "high_quality_weight")
        check_probability(self.degradation_probability, "degradation_probability")
        check_probability(self.mask_fraction, "mask_fraction")
        if not self.noise_scale >= 0:
            raise ValueError(f"noise_scale must be nonnegative, got {self.noise_scale}")
        if self.heavy_tail_df <= 2:
            raise ValueError("heavy_tail_df must exceed 2 for a finite variance")
        for a, b in (self.high_quality_beta, self.low_quality_beta):
            if a <= 0 or b <= 0:
                raise ValueError("Beta shape parameters must be positive")
        unknown = set(self.decrements) - set(DEGRADATION_KINDS)
        if unknown:
            raise ValueError(f"unknown degradation kinds in decrements: {sorted(unknown)}")
        for kind in DEGRADATION_KINDS:
            if self.decrements.get(kind, -1) < 0:
                raise ValueError(f"missing or negative decrement for {kind}")
        if self.quality_override is not None:
            check_probability(self.quality_override, "quality_override")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def tau(self, q):
        return self.noise_scale * (1.0 - q)


@dataclass(frozen=True)
class Identity:
    id: int
    latent: np.ndarray
    prototype: np.ndarray


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    identity_id: int
    quality: float
    degradations: frozenset
    embedding: np.ndarray

    @property
    def degradation_mask(self):
        return degradations_to_mask(self.degradations)


def degradations_to_mask(kinds):
    mask = 0
    for kind in kinds:
        mask |= DEGRADATION_BITS[kind]
    return mask


def mask_to_degradations(mask):
    return frozenset(k for k, bit in DEGRADATION_BITS.items() if mask & bit)


def identity_basis(config):
    """The fixed orthonormal ``d x k`` basis of the identity subspace."""
    rng = derive_rng(config.seed, "basis")
    gaussian = rng.standard_normal((config.ambient_dim, config.identity_dim))
    q, r = np.linalg.qr(gaussian)
    # sign convention makes the basis unique for a given draw
    return q * np.sign(np.diag(r))


def oracle_confidence(e, basis):
    """Norm of the projection of a unit embedding onto the identity subspace."""
    E = check_embeddings(e, dim=basis.shape[0], unit=True, name="e")
    values = np.minimum(np.linalg.norm(E @ basis, axis=1), 1.0)
    return float(values[0]) if np.ndim(e) == 1 else values


def _normalize(v):
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValueError("degradation produced a zero embedding")
    return v / norm


def apply_degradation(record, kind, rng, config=None):
    """Return a copy of ``record`` with one more degradation of ``kind``."""
    if kind not in DEGRADATION_BITS:
        raise ValueError(f"unknown degradation kind {kind!r}; expected one of {DEGRADATION_KINDS}")
    config = config or WorldConfig()
    d = record.embedding.shape[0]
    new_q = max(0.0, record.quality - config.decrements[kind])
    scale = config.noise_scale * (record.quality - new_q)

    if kind == "heavy_tail":
        df = config.heavy_tail_df
        noise = rng.standard_t(df, size=d) * np.sqrt((df - 2.0) / df)
    else:
        noise = rng.standard_normal(d)
    embedding = record.embedding + scale * noise / np.sqrt(d)
    if kind == "coord_mask":
        n_masked = max(1, int(round(config.mask_fraction * d)))
        embedding[rng.choice(d, size=n_masked, replace=False)] = 0.0
    return replace(
        record,
        quality=new_q,
        degradations=record.degradations | {kind},
        embedding=_normalize(embedding),
    )


class World:
    """Identities, their observations and the identity basis."""

    def __init__(self, config, basis, identities, records):
        self.config = config
        self.basis = basis
        self.identities = identities
        self.records = records
        self.embeddings = np.array([r.embedding for r in records]).reshape(len(records), -1)
        self.qualities = np.array([r.quality for r in records], dtype=np.float64)
        self.identity_ids = np.array([r.identity_id for r in records], dtype=np.int64)
        self.image_ids = np.array([r.image_id for r in records], dtype=np.int64)
        self.degradation_masks = np.array([r.degradation_mask for r in records], dtype=np.uint32)

    def __len__(self):
        return len(self.records)

    def oracle_confidences(self):
        return oracle_confidence(self.embeddings, self.basis)

    def subset(self, identity_ids):
        keep = set(int(i) for i in identity_ids)
        return World(
            self.config,
            self.basis,
            [i for i in self.identities if i.id in keep],
            [r for r in self.records if r.identity_id in keep],
        )

    def write(self, store_path, identities_path):
        write_embedding_store(
            store_path,
            self.image_ids,
            self.identity_ids,
            self.qualities,
            self.degradation_masks,
            self.embeddings,
        )
        write_identities_csv(identities_path, self.identities)

    @classmethod
    def read(cls, config, store_path, identities_path):
        store = read_embedding_store(store_path)
        basis = identity_basis(config)
        identities = read_identities_csv(identities_path, basis)
        records = [
            ImageRecord(
                int(store["image_id"][i]),
                int(store["identity_id"][i]),
                float(store["quality"][i]),
                mask_to_degradations(int(store["mask"][i])),
                store["embedding"][i].copy(),
            )
            for i in range(len(store))
        ]
        return cls(config, basis, identities, records)


def _sample_quality(config, rng):
    if config.quality_override is not None:
        return float(config.quality_override)
    if rng.random() < config.high_quality_weight:
        return float(rng.beta(*config.high_quality_beta))
    return float(rng.beta(*config.low_quality_beta))


def _generate_identity(config, basis, identity_id, split):
    rng = derive_rng(config.seed, f"{split}/identity", identity_id)
    d = config.ambient_dim
    latent = rng.standard_normal(config.identity_dim)
    prototype = basis @ latent
    prototype = prototype / np.linalg.norm(prototype)
    identity = Identity(identity_id, latent, prototype)

    records = []
    for j in range(config.images_per_identity):
        q = _sample_quality(config, rng)
        tau = config.tau(q)
        eta = rng.standard_normal(d) / np.sqrt(d)
        embedding = prototype.copy() if tau == 0 else _normalize(prototype + tau * eta)
        record = ImageRecord(
            identity_id * config.images_per_identity + j, identity_id, q, frozenset(), embedding
        )
        if rng.random() < config.degradation_probability:
            n_kinds = int(rng.integers(1, len(DEGRADATION_KINDS) + 1))
            chosen = rng.choice(len(DEGRADATION_KINDS), size=n_kinds, replace=False)
            for idx in sorted(chosen):
                record = apply_degradation(record, DEGRADATION_KINDS[idx], rng, config)
        records.append(record)
    return identity, records


def generate_world(config, split="train"):
    """Generate identities and their observations.

    Worlds with the same config but different ``split`` share the identity
    basis and draw disjoint identity populations, which is how evaluation
    data unseen in training is produced.
    """
    basis = identity_basis(config)
    identities, records = [], []
    # each identity owns a seed stream, so the loop order is irrelevant
    for identity_id in range(config.num_identities):
        identity, recs = _generate_identity(config, basis, identity_id, split)
        identities.append(identity)
        records.extend(recs)
    return World(config, basis, identities, records)


def _store_dtype(d):
    return np.dtype(
        [
            ("image_id", "<u8"),
            ("identity_id", "<u8"),
            ("quality", "<f8"),
            ("mask", "<u4"),
            ("embedding", "<f8", (d,)),
        ]
    )


def write_embedding_store(path, image_ids, identity_ids, qualities, masks, embeddings):
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n, d = embeddings.shape
    table = np.zeros(n, dtype=_store_dtype(d))
    table["image_id"] = image_ids
    table["identity_id"] = identity_ids
    table["quality"] = qualities
    table["mask"] = masks
    table["embedding"] = embeddings
    with open(path, "wb") as fh:
        fh.write(_STORE_HEADER.pack(STORE_MAGIC, STORE_VERSION, d, n))
        fh.write(table.tobytes())


def read_embedding_store(path):
    with open(path, "rb") as fh:
        header = fh.read(_STORE_HEADER.size)
        if len(header) != _STORE_HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, d, n = _STORE_HEADER.unpack(header)
        if magic != STORE_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != STORE_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        dtype = _store_dtype(d)
        payload = fh.read()
    if len(payload) != n * dtype.itemsize:
        raise ValueError(f"{path}: expected {n} records of {dtype.itemsize} bytes")
    return np.frombuffer(payload, dtype=dtype).copy()


def write_identities_csv(path, identities):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "latent"])
    for ident in identities:
        writer.writerow([ident.id, " ".join(repr(float(x)) for x in ident.latent)])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_identities_csv(path, basis):
    identities = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "latent"]:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            latent = np.array([float(x) for x in row["latent"].split()])
            prototype = basis @ latent
            identities.append(Identity(int(row["id"]), latent, prototype / np.linalg.norm(prototype)))
    return identities
