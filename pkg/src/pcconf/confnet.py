"""Predictive-confidence network and its loser-takes-all training.

The model is a small ReLU perceptron ending in a sigmoid unit. A mated pair
``(e1, e2)`` with verification score ``y`` is trained so that the smaller of
the two outputs matches ``y``::

    L(s1, s2, y) = (min(s1, s2) - y) ** 2

Only the lower-confidence image receives gradient. On an exact tie the
subgradient is split equally between the two images.
"""

import hashlib
import json
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from ._validation import NumericalError, check_embeddings

CHECKPOINT_MAGIC = b"PCNM"
CHECKPOINT_VERSION = 1


def loss(s1, s2, y):
    """Loser-takes-all squared error; works elementwise on arrays."""
    return (np.minimum(s1, s2) - y) ** 2


def loss_gradient(s1, s2, y):
    """Partial derivatives ``(dL/ds1, dL/ds2)``; elementwise on arrays."""
    s1, s2, y = np.broadcast_arrays(
        np.asarray(s1, dtype=np.float64), np.asarray(s2, dtype=np.float64), np.asarray(y, dtype=np.float64)
    )
    g1 = np.where(s1 < s2, 2.0 * (s1 - y), 0.0)
    g2 = np.where(s2 < s1, 2.0 * (s2 - y), 0.0)
    tie = s1 == s2
    g1 = np.where(tie, s1 - y, g1)
    g2 = np.where(tie, s2 - y, g2)
    if g1.ndim == 0:
        return float(g1), float(g2)
    return g1, g2


def _sigmoid(z):
    # split branches keep exp() from overflowing
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class ConfidenceModel:
    """Weights of the feed-forward confidence network.

    ``weights[i]`` has shape ``(sizes[i], sizes[i+1])``; hidden layers use
    ReLU and the single output unit uses a sigmoid.
    """

    def __init__(self, weights, biases):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias vector per weight matrix")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i} input size does not match previous output")
        if self.weights[-1].shape[1] != 1:
            raise ValueError("the output layer must have a single unit")

    @classmethod
    def initialize(cls, sizes, rng):
        """Glorot-uniform weights, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, sizes):
        return cls(
            [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
            [np.zeros(b) for b in sizes[1:]],
        )

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self):
        return self.weights[0].shape[0]

    def parameters(self):
        """Flat view order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self):
        return ConfidenceModel([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def checksum(self):
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()

    def _forward_cache(self, X):
        activations = [X]
        a = X
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            a = _sigmoid(z) if i == last else np.maximum(z, 0.0)
            activations.append(a)
        return activations

    def forward(self, X):
        """Confidence in (0, 1) for each row of ``X`` (or a single vector)."""
        single = np.ndim(X) == 1
        X = check_embeddings(X, dim=self.input_dim)
        s = self._forward_cache(X)[-1][:, 0]
        return float(s[0]) if single else s

    def _backprop(self, activations, grad_s):
        """Parameter gradients given dL/ds for every row of the batch."""
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        s = activations[-1]
        delta = grad_s[:, None] * s * (1.0 - s)
        for i in range(len(self.weights) - 1, -1, -1):
            grads_w[i] = activations[i].T @ delta
            grads_b[i] = delta.sum(axis=0)
            if i:
                delta = (delta @ self.weights[i].T) * (activations[i] > 0)
        return grads_w, grads_b

    def pair_loss_and_gradient(self, X1, X2, y):
        """Mean loss over a batch of pairs and its parameter gradient.

        Returns ``(loss, grads_w, grads_b)``.
        """
        X1 = check_embeddings(X1, dim=self.input_dim, name="X1")
        X2 = check_embeddings(X2, dim=self.input_dim, name="X2")
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        n = X1.shape[0]
        if X2.shape[0] != n or y.shape[0] != n:
            raise ValueError("X1, X2 and y must have the same number of rows")
        activations = self._forward_cache(np.vstack([X1, X2]))
        s = activations[-1][:, 0]
        s1, s2 = s[:n], s[n:]
        g1, g2 = loss_gradient(s1, s2, y)
        grad_s = np.concatenate([np.atleast_1d(g1), np.atleast_1d(g2)]) / n
        grads_w, grads_b = self._backprop(activations, grad_s)
        return float(np.mean(loss(s1, s2, y))), grads_w, grads_b

    def backward(self, e1, e2, y):
        """Parameter gradient of the loss for one pair, in ``parameters()`` order."""
        _, gw, gb = self.pair_loss_and_gradient(e1, e2, [y])
        out = []
        for w, b in zip(gw, gb):
            out.extend((w, b))
        return out


@dataclass
class TrainConfig:
    batch_size: int = 64
    initial_lr: float = 0.1
    decay_factor: float = 10.0
    max_decays: int = 2
    patience: int = 3
    rel_tol: float = 1e-3
    max_epochs: int = 60
    hidden_sizes: tuple = (128, 128)
    seed: int = 0
    tie_gradient_policy: str = "split-equally"

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        for name in ("batch_size", "patience", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.decay_factor <= 1:
            raise ValueError("decay_factor must exceed 1")
        if self.max_decays < 0:
            raise ValueError("max_decays must be nonnegative")
        if self.tie_gradient_policy != "split-equally":
            raise ValueError("only the split-equally tie policy is supported")
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    lr_events: list = field(default_factory=list)
    checksum: str = ""
    wall_clock: float = 0.0
    stop_reason: str = ""

    def to_dict(self, include_timing=False):
        out = asdict(self)
        if not include_timing:
            out.pop("wall_clock")
        return out


@dataclass
class PairCorpus:
    """Training pairs as row indices into an embedding matrix."""

    embeddings: np.ndarray
    index_a: np.ndarray
    index_b: np.ndarray
    y: np.ndarray
    groups: np.ndarray

    def __len__(self):
        return len(self.y)

    @classmethod
    def from_pairs(cls, pairs, image_ids, embeddings):
        lookup = {int(i): n for n, i in enumerate(image_ids)}
        try:
            ia = np.array([lookup[p.image_a] for p in pairs], dtype=np.int64)
            ib = np.array([lookup[p.image_b] for p in pairs], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"pair references unknown image id {exc.args[0]}") from None
        return cls(
            np.asarray(embeddings, dtype=np.float64),
            ia,
            ib,
            np.array([p.y for p in pairs], dtype=np.float64),
            np.array([p.identity_id for p in pairs], dtype=np.int64),
        )


def _balanced_batches(groups, n_batches, batch_size, rng):
    """Yield pair indices: identity uniformly, then a pair within it."""
    order = np.argsort(groups, kind="stable")
    uniq, starts, counts = np.unique(groups[order], return_index=True, return_counts=True)
    for _ in range(n_batches):
        which = rng.integers(len(uniq), size=batch_size)
        within = (rng.random(batch_size) * counts[which]).astype(np.int64)
        yield order[starts[which] + within]


def train(model, corpus, config):
    """SGD with balanced sampling and plateau learning-rate decay.

    Mutates and returns ``model`` with a :class:`TrainReport`.
    """
    if len(corpus) == 0:
        raise ValueError("cannot train on an empty corpus")
    if corpus.embeddings.shape[1] != model.input_dim:
        raise ValueError("corpus embedding dimension does not match the model")
    start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    report = TrainReport()
    lr = config.initial_lr
    decays, wait = 0, 0
    best = np.inf
    n_batches = -(-len(corpus) // config.batch_size)
    params = model.parameters()
    E = corpus.embeddings

    for epoch in range(config.max_epochs):
        total = 0.0
        for idx in _balanced_batches(corpus.groups, n_batches, config.batch_size, rng):
            batch_loss, gw, gb = model.pair_loss_and_gradient(
                E[corpus.index_a[idx]], E[corpus.index_b[idx]], corpus.y[idx]
            )
            if not np.isfinite(batch_loss):
                raise NumericalError(f"non-finite loss at epoch {epoch} (lr={lr})")
            for p, g in zip(params, [g for pair in zip(gw, gb) for g in pair]):
                p -= lr * g
            total += batch_loss
        epoch_loss = total / n_batches
        report.epoch_losses.append(epoch_loss)

        if epoch_loss < best * (1.0 - config.rel_tol):
            best = epoch_loss
            wait = 0
        else:
            wait += 1
        if wait >= config.patience:
            if decays >= config.max_decays:
                report.stop_reason = "plateau"
                break
            lr /= config.decay_factor
            decays += 1
            wait = 0
            report.lr_events.append({"epoch": epoch, "lr": lr})
    else:
        report.stop_reason = "max_epochs"

    report.checksum = model.checksum()
    report.wall_clock = time.perf_counter() - start
    return model, report


class ConfidenceRegressor(RegressorMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` on mated pairs, ``predict`` per embedding.

    ``fit(X, y, groups=...)`` takes ``X`` of shape ``(n_pairs, 2, d)``.
    ``groups`` holds the identity of each pair for balanced sampling; without
    it every pair is its own group.
    """

    def __init__(
        self,
        hidden_sizes=(128, 128),
        batch_size=64,
        learning_rate=0.1,
        decay_factor=10.0,
        max_decays=2,
        patience=3,
        rel_tol=1e-3,
        max_epochs=60,
        random_state=0,
    ):
        self.hidden_sizes = hidden_sizes
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.decay_factor = decay_factor
        self.max_decays = max_decays
        self.patience = patience
        self.rel_tol = rel_tol
        self.max_epochs = max_epochs
        self.random_state = random_state

    def train_config(self):
        return TrainConfig(
            batch_size=self.batch_size,
            initial_lr=self.learning_rate,
            decay_factor=self.decay_factor,
            max_decays=self.max_decays,
            patience=self.patience,
            rel_tol=self.rel_tol,
            max_epochs=self.max_epochs,
            hidden_sizes=tuple(self.hidden_sizes),
            seed=self.random_state,
        )

    def fit(self, X, y, groups=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[1] != 2:
            raise ValueError(f"X must have shape (n_pairs, 2, d), got {X.shape}")
        n, _, d = X.shape
        corpus = PairCorpus(
            X.reshape(2 * n, d),
            np.arange(0, 2 * n, 2),
            np.arange(1, 2 * n, 2),
            np.asarray(y, dtype=np.float64).reshape(-1),
            np.arange(n) if groups is None else np.asarray(groups),
        )
        return self.fit_corpus(corpus)

    def fit_corpus(self, corpus):
        config = self.train_config()
        rng = np.random.default_rng(config.seed)
        sizes = [corpus.embeddings.shape[1], *config.hidden_sizes, 1]
        model = ConfidenceModel.initialize(sizes, rng)
        # training draws from its own stream, separate from initialization
        config.seed = int(rng.integers(2**63))
        self.model_, self.report_ = train(model, corpus, config)
        self.n_features_in_ = sizes[0]
        return self

    def predict(self, X):
        if not hasattr(self, "model_"):
            raise NotFittedError("ConfidenceRegressor is not fitted yet")
        return self.model_.forward(check_embeddings(X, dim=self.n_features_in_))


_CKPT_HEADER = struct.Struct("<4sII")


def save_checkpoint(path, model, sidecar=None):
    """Binary weights plus an optional JSON sidecar at ``path + '.json'``."""
    sizes = model.sizes
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(sizes)))
        fh.write(np.asarray(sizes, dtype="<u4").tobytes())
        for p in model.parameters():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    if sidecar is not None:
        with open(str(path) + ".json", "w") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _CKPT_HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, n_sizes = _CKPT_HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    offset = _CKPT_HEADER.size
    sizes = np.frombuffer(data, dtype="<u4", count=n_sizes, offset=offset).astype(int)
    offset += 4 * n_sizes
    weights, biases = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(data, dtype="<f8", count=a * b, offset=offset).reshape(a, b)
        offset += 8 * a * b
        bias = np.frombuffer(data, dtype="<f8", count=b, offset=offset)
        offset += 8 * b
        weights.append(w.copy())
        biases.append(bias.copy())
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return ConfidenceModel(weights, biases)
