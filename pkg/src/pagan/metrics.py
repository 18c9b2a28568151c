"""RID, Inception Score, FID and RMSE against a locally trained probe classifier."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from pagan import tensor as T
from pagan.augment import AugmentConfig, augment
from pagan.nets import Conv2d, LeakyReLU, Linear, Reshape, Sequential, _conv_sizes
from pagan.objectives import PROB_CLAMP

log = logging.getLogger(__name__)

FID_RIDGE = 1e-6


@dataclass
class MetricReport:
    rid_mean: float = float("nan")
    rid_std: float = float("nan")
    is_mean: float = float("nan")
    is_std: float = float("nan")
    fid: float = float("nan")
    rmse: float = float("nan")

    def lines(self):
        return [f"{k}\t{v!r}" for k, v in asdict(self).items()]

    def write(self, path):
        with open(path, "w") as f:
            f.write("\n".join(self.lines()) + "\n")

    @classmethod
    def read(cls, path):
        values = {}
        with open(path) as f:
            for line in f:
                if line.strip():
                    k, v = line.rstrip("\n").split("\t")
                    values[k] = float(v)
        return cls(**values)


def sequential_splits(n, splits):
    """Index ranges of ``splits`` consecutive parts; the remainder joins the last."""
    if splits < 1 or n < splits:
        raise ValueError(f"cannot split {n} items into {splits} non-empty parts")
    size = n // splits
    bounds = [i * size for i in range(splits)] + [n]
    return [(bounds[i], bounds[i + 1]) for i in range(splits)]


def _kl_rows(p, q):
    """Row-wise KL(p || q) with 0 log 0 = 0; q is clamped so the result stays finite."""
    q = np.clip(q, PROB_CLAMP, 1.0)
    safe_p = np.clip(np.where(p > 0, p, 1.0), PROB_CLAMP, 1.0)
    return np.sum(np.where(p > 0, safe_p * (np.log(safe_p) - np.log(q)), 0.0), axis=1)


def rid_from_posteriors(p_orig, p_rec, splits=10):
    p_orig, p_rec = np.asarray(p_orig, dtype=np.float64), np.asarray(p_rec, dtype=np.float64)
    if p_orig.shape != p_rec.shape:
        raise ValueError(f"originals and reconstructions differ in shape: {p_orig.shape} vs {p_rec.shape}")
    kl = _kl_rows(p_orig, p_rec)
    scores = np.array([np.exp(kl[a:b].mean()) for a, b in sequential_splits(len(kl), splits)])
    return float(scores.mean()), float(scores.std())


def rid(classifier, originals, reconstructions, splits=10):
    """exp(mean KL(p(y|x) || p(y|rec))) per sequential split; (mean, std)."""
    if len(originals) != len(reconstructions):
        raise ValueError(f"length mismatch: {len(originals)} vs {len(reconstructions)}")
    return rid_from_posteriors(classifier.predict_proba(originals),
                               classifier.predict_proba(reconstructions), splits)


def inception_score_from_posteriors(posteriors, splits=10):
    p = np.asarray(posteriors, dtype=np.float64)
    if len(p) == 0:
        raise ValueError("inception score needs samples")
    scores = []
    for a, b in sequential_splits(len(p), splits):
        part = p[a:b]
        marginal = part.mean(axis=0, keepdims=True)
        scores.append(np.exp(_kl_rows(part, np.broadcast_to(marginal, part.shape)).mean()))
    scores = np.asarray(scores)
    return float(scores.mean()), float(scores.std())


def inception_score(classifier, samples, splits=10):
    return inception_score_from_posteriors(classifier.predict_proba(samples), splits)


def _sqrt_psd(m):
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid(features_a, features_b):
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature sets must be (n, d) with equal d: {a.shape} vs {b.shape}")
    d = a.shape[1]
    if len(a) < d + 1 or len(b) < d + 1:
        raise ValueError(f"need at least {d + 1} samples per set, got {len(a)} and {len(b)}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    ridge = FID_RIDGE * np.eye(d)
    cov_a = np.cov(a, rowvar=False).reshape(d, d) + ridge
    cov_b = np.cov(b, rowvar=False).reshape(d, d) + ridge
    # Tr (S_a S_b)^(1/2) = Tr (S_a^(1/2) S_b S_a^(1/2))^(1/2), a symmetric PSD product
    root_a = _sqrt_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    eig = np.clip(np.linalg.eigvalsh(0.5 * (inner + inner.T)), 0, None)
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.sqrt(eig).sum())


def rmse(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


class LinearAutoencoder:
    """Pixel-L2-optimal rank-k autoencoder (PCA); its reconstructions are the blurry baseline."""

    def __init__(self, images, k):
        flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        if not 1 <= k <= min(flat.shape):
            raise ValueError(f"rank {k} outside [1, {min(flat.shape)}]")
        self.mean = flat.mean(axis=0)
        _, _, vt = np.linalg.svd(flat - self.mean, full_matrices=False)
        self.basis = vt[:k]

    def reconstruct(self, images):
        images = np.asarray(images)
        flat = images.reshape(len(images), -1).astype(np.float64) - self.mean
        rec = (flat @ self.basis.T) @ self.basis + self.mean
        return rec.reshape(images.shape).astype(images.dtype)


def derangement(n, rng):
    """A permutation with no fixed point (n >= 2)."""
    if n < 2:
        raise ValueError("a derangement needs at least 2 items")
    while True:
        perm = rng.permutation(n)
        if np.all(perm != np.arange(n)):
            return perm


# --- probe classifier ----------------------------------------------------------------

class ProbeClassifier:
    """Small conv classifier standing in for the Inception network.

    ``features`` taps the penultimate activations (used by FID).
    """

    def __init__(self, image_shape, n_classes, rng, width=16, hidden=64, dtype=np.float32):
        if n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {n_classes}")
        c, h, w = image_shape
        hs, ws = _conv_sizes(h, 2), _conv_sizes(w, 2)
        flat = 2 * width * hs[-1] * ws[-1]
        self.image_shape = tuple(image_shape)
        self.n_classes = n_classes
        self.width = width
        self.hidden = hidden
        self.trunk = Sequential([
            Conv2d(c, width, 4, 2, 1, rng, dtype=dtype), LeakyReLU(0.1),
            Conv2d(width, 2 * width, 4, 2, 1, rng, dtype=dtype), LeakyReLU(0.1),
            Reshape((flat,)), Linear(flat, hidden, rng, dtype=dtype), LeakyReLU(0.1),
        ], "probe")
        self.head = Sequential([Linear(hidden, n_classes, rng, dtype=dtype)], "probe_head")
        self.heldout_accuracy = float("nan")

    def logits(self, x):
        return self.head(self.trunk(x))

    def params(self):
        return self.trunk.params() + self.head.params()

    def named_params(self):
        yield from self.trunk.named_params()
        yield from self.head.named_params()

    def _batched(self, x, fn, batch=512):
        x = np.asarray(x, dtype=self.params()[0].dtype)
        return np.concatenate([fn(x[i:i + batch]) for i in range(0, len(x), batch)])

    def predict_proba(self, x):
        return self._batched(x, lambda b: T.softmax(self.logits(b)).data).astype(np.float64)

    def features(self, x):
        return self._batched(x, lambda b: self.trunk(b).data).astype(np.float64)

    def accuracy(self, x, labels):
        return float(np.mean(self.predict_proba(x).argmax(axis=1) == np.asarray(labels)))


@dataclass
class ProbeConfig:
    epochs: int = 4
    batch_size: int = 64
    lr: float = 1e-3
    heldout_fraction: float = 0.1
    seed: int = 0
    width: int = 16
    hidden: int = 64
    augment: AugmentConfig = AugmentConfig()


def train_probe_classifier(images, labels, config=None):
    """Fit a ProbeClassifier with the training-time augmenter applied to every batch."""
    from pagan.trainer import Adam

    config = config or ProbeConfig()
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError(f"need at least 2 classes, got {len(classes)}")
    n_classes = int(labels.max()) + 1
    rng = np.random.default_rng(config.seed)
    n_held = int(round(config.heldout_fraction * len(images)))
    order = rng.permutation(len(images))
    held, train = order[:n_held], order[n_held:]
    probe = ProbeClassifier(images.shape[1:], n_classes, rng, config.width, config.hidden)
    opt = Adam(probe.params(), lr=config.lr, betas=(0.9, 0.999))
    onehot = np.eye(n_classes, dtype=np.float32)
    for epoch in range(config.epochs):
        perm = rng.permutation(train)
        for i in range(0, len(perm) - config.batch_size + 1, config.batch_size):
            idx = perm[i:i + config.batch_size]
            xb = augment(images[idx], config.augment, rng)
            with T.Tape() as tape:
                logp = T.log_softmax(probe.logits(xb))
                loss = T.neg(T.mean(T.sum(T.mul(logp, onehot[labels[idx]]), axis=1)))
            opt.step(tape.backward(loss))
        if n_held:
            log.info("probe epoch %d: held-out accuracy %.4f", epoch,
                     probe.accuracy(images[held], labels[held]))
    if n_held:
        probe.heldout_accuracy = probe.accuracy(images[held], labels[held])
    probe.heldout_indices = held
    return probe


def evaluate(probe, originals, reconstructions, samples, splits=10):
    """MetricReport for one model: RID/RMSE on reconstructions, IS/FID on samples."""
    r_mean, r_std = rid(probe, originals, reconstructions, splits)
    i_mean, i_std = inception_score(probe, samples, splits)
    feats_real = probe.features(originals)
    feats_fake = probe.features(samples)
    try:
        f = fid(feats_real, feats_fake)
    except ValueError:
        f = float("nan")
    return MetricReport(r_mean, r_std, i_mean, i_std, f, rmse(originals, reconstructions))
