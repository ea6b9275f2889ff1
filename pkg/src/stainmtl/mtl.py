"""Desk-scale multi-task model: density head, per-pixel stain-matrix head and a
classification head fed with their concatenated outputs.

For a batch of ``n`` pixels with ``d`` features:

* density head:  ``H_hat = softplus(F @ A_h + b_h)``, shape ``(n, r)``
* matrix head:   ``W_hat = softplus(F @ A_w + b_w)``, reshaped to ``(n, m, r)``
* class head:    ``logit = concat(H_hat, flat(W_hat)) @ a_c + b_c``
* reconstruction ``recon[i] = W_hat[i] @ H_hat[i]``, shape ``(n, m)``

The training objective is ``alpha * mse(recon, od_target) + bce(logit, label)``.
"""

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._random import check_random_state
from .color import rgb_to_od
from .exceptions import InvalidInput, StainError

DEFAULT_ALPHA = 0.3


class NonFiniteLoss(StainError, ArithmeticError):
    def __init__(self, step):
        self.step = step
        super().__init__(f"non-finite loss at step {step}")


def softplus(z):
    return np.logaddexp(0.0, z)


@dataclass
class ToyModelParams:
    density_weight: np.ndarray  # (d, r)
    density_bias: np.ndarray  # (r,)
    matrix_weight: np.ndarray  # (d, m*r)
    matrix_bias: np.ndarray  # (m*r,)
    class_weight: np.ndarray  # (r + m*r,)
    class_bias: float
    m: int = 3
    window: int = 0  # feature neighbourhood radius used by image predictors

    def __post_init__(self):
        self.density_weight = np.asarray(self.density_weight, dtype=float)
        self.density_bias = np.asarray(self.density_bias, dtype=float)
        self.matrix_weight = np.asarray(self.matrix_weight, dtype=float)
        self.matrix_bias = np.asarray(self.matrix_bias, dtype=float)
        self.class_weight = np.asarray(self.class_weight, dtype=float)
        self.class_bias = float(self.class_bias)
        d, r = self.density_weight.shape
        m = self.m
        if (
            self.density_bias.shape != (r,)
            or self.matrix_weight.shape != (d, m * r)
            or self.matrix_bias.shape != (m * r,)
            or self.class_weight.shape != (r + m * r,)
        ):
            raise InvalidInput("inconsistent parameter shapes")

    @property
    def d(self):
        return self.density_weight.shape[0]

    @property
    def r(self):
        return self.density_weight.shape[1]

    def ravel(self):
        return np.concatenate(
            [
                self.density_weight.ravel(),
                self.density_bias,
                self.matrix_weight.ravel(),
                self.matrix_bias,
                self.class_weight,
                [self.class_bias],
            ]
        )

    def with_flat(self, flat):
        """Copy with every parameter taken from ``flat`` (the :meth:`ravel` layout)."""
        d, r, m = self.d, self.r, self.m
        sizes = [d * r, r, d * m * r, m * r, r + m * r, 1]
        parts = np.split(np.asarray(flat, dtype=float), np.cumsum(sizes)[:-1])
        return ToyModelParams(
            parts[0].reshape(d, r),
            parts[1].copy(),
            parts[2].reshape(d, m * r),
            parts[3].copy(),
            parts[4].copy(),
            parts[5][0],
            m=m,
            window=self.window,
        )

    def to_dict(self):
        return {
            "d": self.d,
            "r": self.r,
            "m": self.m,
            "window": self.window,
            "density_weight": self.density_weight.ravel().tolist(),
            "density_bias": self.density_bias.tolist(),
            "matrix_weight": self.matrix_weight.ravel().tolist(),
            "matrix_bias": self.matrix_bias.tolist(),
            "class_weight": self.class_weight.tolist(),
            "class_bias": self.class_bias,
        }

    @classmethod
    def from_dict(cls, data):
        try:
            d, r, m = int(data["d"]), int(data["r"]), int(data["m"])
            return cls(
                np.reshape(data["density_weight"], (d, r)),
                data["density_bias"],
                np.reshape(data["matrix_weight"], (d, m * r)),
                data["matrix_bias"],
                data["class_weight"],
                data["class_bias"],
                m=m,
                window=int(data.get("window", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInput(f"malformed model parameters: {exc}") from exc

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def init_params(d, r=2, m=3, scale=0.1, random_state=None, window=0):
    """Gaussian weights with std ``scale``, zero biases."""
    if d < 1 or r < 1:
        raise InvalidInput("d and r must be at least 1")
    rng = check_random_state(random_state)
    return ToyModelParams(
        rng.normal(0.0, scale, (d, r)),
        np.zeros(r),
        rng.normal(0.0, scale, (d, m * r)),
        np.zeros(m * r),
        rng.normal(0.0, scale, r + m * r),
        0.0,
        m=m,
        window=window,
    )


@dataclass
class PixelBatch:
    features: np.ndarray  # (n, d)
    od_target: np.ndarray  # (n, m)
    labels: np.ndarray  # (n,)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.od_target = np.asarray(self.od_target, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        n = self.features.shape[0]
        if self.features.ndim != 2 or self.od_target.ndim != 2:
            raise InvalidInput("features and od_target must be 2-D")
        if self.od_target.shape[0] != n or self.labels.shape != (n,):
            raise InvalidInput("features, od_target and labels disagree on pixel count")
        if np.any(self.od_target < 0):
            raise InvalidInput("od_target must be nonnegative")


def image_features(img, window=0):
    """Per-pixel OD triple, plus its box mean over a ``2*window+1`` square."""
    od = rgb_to_od(img)
    feats = [od]
    if window > 0:
        feats.append(uniform_filter(od, size=(2 * window + 1, 2 * window + 1, 1), mode="nearest"))
    return np.concatenate(feats, axis=-1).reshape(-1, 3 * len(feats)), od.reshape(-1, 3)


def pixel_batch(img, mask, window=0):
    """Build a :class:`PixelBatch` from an RGB image and its binary mask."""
    features, od = image_features(img, window)
    return PixelBatch(features, od, np.asarray(mask, dtype=bool).ravel())


class ForwardResult(NamedTuple):
    h_hat: np.ndarray
    w_hat: np.ndarray
    logits: np.ndarray
    recon: np.ndarray


class _Cache(NamedTuple):
    z_h: np.ndarray
    z_w: np.ndarray
    concat: np.ndarray


def _forward(params, features):
    F = np.asarray(features, dtype=float)
    if F.ndim != 2 or F.shape[1] != params.d:
        raise InvalidInput(f"expected features of shape (n, {params.d}), got {F.shape}")
    n, r, m = F.shape[0], params.r, params.m
    z_h = F @ params.density_weight + params.density_bias
    z_w = F @ params.matrix_weight + params.matrix_bias
    h_hat = softplus(z_h)
    w_flat = softplus(z_w)
    w_hat = w_flat.reshape(n, m, r)
    concat = np.concatenate([h_hat, w_flat], axis=1)
    logits = concat @ params.class_weight + params.class_bias
    recon = np.einsum("nmr,nr->nm", w_hat, h_hat)
    return ForwardResult(h_hat, w_hat, logits, recon), _Cache(z_h, z_w, concat)


def forward(params, batch):
    """Run all three heads on a batch (or a bare ``(n, d)`` feature array)."""
    features = batch.features if isinstance(batch, PixelBatch) else batch
    return _forward(params, features)[0]


def reconstruction_loss(res, batch):
    if res.recon.shape != batch.od_target.shape:
        raise InvalidInput("reconstruction and target shapes differ")
    resid = res.recon - batch.od_target
    return float(np.mean(resid * resid))


def _bce_terms(logits, labels):
    z = np.asarray(logits, dtype=float)
    return np.maximum(z, 0.0) - z * labels + np.log1p(np.exp(-np.abs(z)))


def segmentation_loss(res, batch):
    """Mean binary cross-entropy on logits, in a form that never overflows."""
    return float(np.mean(_bce_terms(res.logits, batch.labels)))


def total_loss(alpha, recon, seg):
    """Joint objective ``alpha * recon + seg``."""
    return alpha * recon + seg


def loss_and_gradients(params, batch, alpha=DEFAULT_ALPHA):
    """Return ``(recon, seg, total, grads)`` with ``grads`` a ToyModelParams."""
    res, cache = _forward(params, batch.features)
    n, m, r = res.w_hat.shape
    recon = reconstruction_loss(res, batch)
    seg = segmentation_loss(res, batch)

    g_logit = (expit(res.logits) - batch.labels) / n
    g_class_w = cache.concat.T @ g_logit
    g_class_b = g_logit.sum()
    g_concat = np.outer(g_logit, params.class_weight)
    g_h = g_concat[:, :r].copy()
    g_wflat = g_concat[:, r:].copy()

    g_recon = alpha * 2.0 * (res.recon - batch.od_target) / (n * m)
    g_h += np.einsum("nm,nmr->nr", g_recon, res.w_hat)
    g_wflat += (g_recon[:, :, None] * res.h_hat[:, None, :]).reshape(n, m * r)

    g_zh = g_h * expit(cache.z_h)
    g_zw = g_wflat * expit(cache.z_w)
    F = batch.features
    grads = ToyModelParams(
        F.T @ g_zh,
        g_zh.sum(axis=0),
        F.T @ g_zw,
        g_zw.sum(axis=0),
        g_class_w,
        g_class_b,
        m=params.m,
        window=params.window,
    )
    return recon, seg, total_loss(alpha, recon, seg), grads


def gradients(params, batch, alpha=DEFAULT_ALPHA):
    return loss_and_gradients(params, batch, alpha)[3]


def objective(params, batch, alpha=DEFAULT_ALPHA):
    res = forward(params, batch)
    return total_loss(alpha, reconstruction_loss(res, batch), segmentation_loss(res, batch))


def finite_diff_check(params, batch, alpha=DEFAULT_ALPHA, epsilon=1e-5, grad_fn=gradients):
    """Worst relative error between ``grad_fn`` and central differences.

    The relative error of each parameter is
    ``|g - g_fd| / max(|g|, |g_fd|, 1e-8)``.
    """
    if epsilon <= 0:
        raise InvalidInput("epsilon must be positive")
    flat = params.ravel()
    analytic = grad_fn(params, batch, alpha).ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        step = np.zeros_like(flat)
        step[i] = epsilon
        plus = objective(params.with_flat(flat + step), batch, alpha)
        minus = objective(params.with_flat(flat - step), batch, alpha)
        numeric[i] = (plus - minus) / (2.0 * epsilon)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


class LossRecord(NamedTuple):
    step: int
    recon: float
    seg: float
    total: float


def train(params, batches, alpha=DEFAULT_ALPHA, lr=0.1, steps=100, seed=0):
    """Plain gradient descent on the joint objective.

    With several batches, the batch for each step is drawn from a generator
    seeded by ``seed``. Each trace row holds the losses evaluated before that
    step's update. Raises NonFiniteLoss if a loss stops being finite.
    """
    if lr < 0:
        raise InvalidInput("learning rate must be nonnegative")
    if steps < 1:
        raise InvalidInput("steps must be at least 1")
    if isinstance(batches, PixelBatch):
        batches = [batches]
    batches = list(batches)
    if not batches:
        raise InvalidInput("no training batches")
    rng = check_random_state(seed)
    flat = params.ravel()
    trace = []
    for step in range(steps):
        batch = batches[int(rng.integers(len(batches)))] if len(batches) > 1 else batches[0]
        current = params.with_flat(flat)
        with np.errstate(over="ignore", invalid="ignore"):
            recon, seg, total, grads = loss_and_gradients(current, batch, alpha)
        if not np.isfinite(total):
            raise NonFiniteLoss(step)
        trace.append(LossRecord(step, recon, seg, total))
        flat = flat - lr * grads.ravel()
    return params.with_flat(flat), trace


def predict_logit_map(params, img):
    """Per-pixel logit map of an RGB image, shape ``(height, width)``."""
    img = np.asarray(img)
    features, _ = image_features(img, params.window)
    return forward(params, features).logits.reshape(img.shape[:2])


class MultiTaskStainModel(ClassifierMixin, BaseEstimator):
    """Binary pixel classifier trained jointly with stain reconstruction.

    ``X`` is an ``(n, d)`` feature matrix whose first three columns are the
    pixel's optical density unless ``od_target`` is passed to ``fit``.
    """

    def __init__(
        self,
        n_stains=2,
        alpha=DEFAULT_ALPHA,
        learning_rate=0.5,
        n_steps=500,
        init_scale=0.1,
        random_state=0,
    ):
        self.n_stains = n_stains
        self.alpha = alpha
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.init_scale = init_scale
        self.random_state = random_state

    def fit(self, X, y, od_target=None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise InvalidInput("X must be 2-D")
        if od_target is None:
            if X.shape[1] < 3:
                raise InvalidInput("pass od_target when X has fewer than 3 columns")
            od_target = X[:, :3]
        y = np.asarray(y)
        self.classes_ = np.array([0, 1])
        batch = PixelBatch(X, od_target, y.astype(bool))
        init = init_params(
            X.shape[1], self.n_stains, np.shape(od_target)[1], self.init_scale, self.random_state
        )
        seed = 0 if self.random_state is None else self.random_state
        self.params_, trace = train(init, batch, self.alpha, self.learning_rate, self.n_steps, seed)
        self.loss_curve_ = [rec.total for rec in trace]
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        return forward(self.params_, np.asarray(X, dtype=float)).logits

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)

    def transform(self, X):
        """Predicted stain densities ``H_hat`` for each row of ``X``."""
        check_is_fitted(self, "params_")
        return forward(self.params_, np.asarray(X, dtype=float)).h_hat
