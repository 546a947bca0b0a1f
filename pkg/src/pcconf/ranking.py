"""Ranking images by predicted confidence for visual inspection."""

import csv
import io
from dataclasses import dataclass

import numpy as np

BUCKETS = ("low", "mid", "high")
RANKED_CSV_HEADER = ["rank", "image_id", "identity", "confidence", "quality", "bucket"]


@dataclass
class RankedExport:
    image_ids: np.ndarray
    confidences: np.ndarray
    buckets: np.ndarray
    boundaries: tuple
    samples: dict

    def bucket_members(self, name):
        return self.image_ids[self.buckets == BUCKETS.index(name)]


def rank_by_confidence(image_ids, confidences, *, boundaries=(1 / 3, 2 / 3), samples_per_bucket=10, rng):
    """Sort ascending by (confidence, image id) and split by rank fraction.

    ``boundaries`` are rank fractions: with the defaults each bucket holds a
    third of the ranking. Each bucket contributes a seeded random sample,
    listed in rank order.
    """
    image_ids = np.asarray(image_ids, dtype=np.int64)
    confidences = np.asarray(confidences, dtype=np.float64)
    order = np.lexsort((image_ids, confidences))
    n = len(order)
    cuts = [int(np.floor(b * n)) for b in boundaries]
    buckets = np.zeros(n, dtype=np.int64)
    buckets[cuts[0] : cuts[1]] = 1
    buckets[cuts[1] :] = 2
    samples = {}
    for b, name in enumerate(BUCKETS):
        positions = np.flatnonzero(buckets == b)
        take = min(samples_per_bucket, len(positions))
        picked = np.sort(rng.choice(positions, size=take, replace=False)) if take else positions[:0]
        samples[name] = [int(image_ids[order[p]]) for p in picked]
    return RankedExport(image_ids[order], confidences[order], buckets, tuple(boundaries), samples)


def write_ranked_csv(path, export, identity_of, quality_of):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RANKED_CSV_HEADER)
    for rank, (image_id, conf, bucket) in enumerate(zip(export.image_ids, export.confidences, export.buckets)):
        writer.writerow(
            [rank, int(image_id), identity_of[int(image_id)], repr(float(conf)), repr(float(quality_of[int(image_id)])), BUCKETS[bucket]]
        )
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())
