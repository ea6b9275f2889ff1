"""Stain matrix / stain density estimation by sparse NMF, and SPCN normalisation.

An optical-density matrix ``X`` of shape ``(m, n)`` (channels x pixels) is
factorised as ``X ~ W @ H`` with ``W`` an ``(m, r)`` matrix of unit-norm stain
colour vectors and ``H`` an ``(r, n)`` matrix of per-pixel stain densities.
"""

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._random import make_rng
from ._validation import check_od, check_rgb
from .color import from_matrix, od_to_rgb, rgb_to_od, to_matrix
from .exceptions import InsufficientTissue, InvalidInput

_EPS = 1e-12
_H_INIT_FLOOR = 1e-3
_SCALE_FLOOR = 1e-6
_DEGENERATE_COSINE = 0.999


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


HEMATOXYLIN = _unit([0.65, 0.70, 0.29])
EOSIN = _unit([0.07, 0.99, 0.11])
RESIDUAL = _unit(np.abs(np.cross(HEMATOXYLIN, EOSIN)))


def reference_stains(n_stains):
    """Reference H&E(+residual) stain matrix with ``n_stains`` columns."""
    if not 1 <= n_stains <= 3:
        raise InvalidInput(f"n_stains must lie in [1, 3], got {n_stains}")
    return np.stack([HEMATOXYLIN, EOSIN, RESIDUAL][:n_stains], axis=1)


@dataclass(frozen=True)
class SeparationConfig:
    n_stains: int = 2
    sparsity: float = 0.001
    max_iter: int = 200
    tol: float = 1e-6
    tissue_threshold: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_stains <= 3:
            raise InvalidInput(f"n_stains must lie in [1, 3], got {self.n_stains}")
        if self.sparsity < 0:
            raise InvalidInput("sparsity must be nonnegative")
        if self.max_iter < 1:
            raise InvalidInput("max_iter must be at least 1")
        if self.tol < 0:
            raise InvalidInput("tol must be nonnegative")


@dataclass
class Separation:
    """Result of :func:`estimate_stains`.

    ``objective`` holds the sparse-NMF objective on tissue pixels before the
    first update and after every accepted iteration.
    """

    stain_matrix: np.ndarray
    density: np.ndarray
    objective: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    degenerate: bool = False
    tissue: np.ndarray = None


@dataclass
class StainProfile:
    stains: np.ndarray
    density_scale: np.ndarray

    def __post_init__(self):
        self.stains = np.asarray(self.stains, dtype=float)
        self.density_scale = np.asarray(self.density_scale, dtype=float)
        if self.stains.ndim != 2 or self.density_scale.shape != (self.stains.shape[1],):
            raise InvalidInput("density_scale must have one entry per stain column")
        if np.any(self.stains < 0) or np.any(self.density_scale <= 0):
            raise InvalidInput("stain profile entries must be nonnegative with positive scales")

    def canonical(self):
        order = canonical_order(self.stains)
        return StainProfile(self.stains[:, order], self.density_scale[order])

    def to_dict(self):
        m, r = self.stains.shape
        return {
            "m": m,
            "r": r,
            "columns": self.stains.flatten(order="F").tolist(),
            "density_scale": self.density_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        try:
            m, r = int(data["m"]), int(data["r"])
            cols = np.asarray(data["columns"], dtype=float)
            scale = np.asarray(data["density_scale"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInput(f"malformed stain profile: {exc}") from exc
        if cols.size != m * r:
            raise InvalidInput(f"expected {m * r} column entries, got {cols.size}")
        return cls(cols.reshape((m, r), order="F"), scale)

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def tissue_mask(od, threshold=0.15):
    """Pixels whose OD vector has L2 norm strictly above ``threshold``."""
    od = check_od(od)
    return np.linalg.norm(od, axis=0) > threshold


def _solve_normal(G, B, Ws, X):
    # least squares on one support set via its Gram matrix; pinv only when singular
    k = G.shape[0]
    scale = np.trace(G)
    if k == 1:
        return B / scale if scale > 0 else np.zeros_like(B)
    if k == 2:
        det = G[0, 0] * G[1, 1] - G[0, 1] * G[1, 0]
        if det > 1e-10 * scale * scale:
            return np.stack([G[1, 1] * B[0] - G[0, 1] * B[1], G[0, 0] * B[1] - G[1, 0] * B[0]]) / det
    return np.linalg.pinv(Ws) @ X


def nnls_project(W, X):
    """Per-pixel nonnegative least squares ``argmin_{h >= 0} ||x - W h||``.

    Exact for the small stain counts used here: every support set is
    enumerated and the feasible unconstrained solution with the smallest
    residual is kept, which is the NNLS optimum.
    """
    W = np.asarray(W, dtype=float)
    X = np.asarray(X, dtype=float)
    r = W.shape[1]
    G = W.T @ W
    B = W.T @ X
    best_h = np.zeros((r, X.shape[1]))
    best_res = np.einsum("ij,ij->j", X, X)
    for size in range(1, r + 1):
        for support in itertools.combinations(range(r), size):
            Ws = W[:, support]
            coef = _solve_normal(G[np.ix_(support, support)], B[support, :], Ws, X)
            resid = X - Ws @ coef
            res = np.einsum("ij,ij->j", resid, resid)
            better = np.all(coef >= 0, axis=0) & (res < best_res)
            if np.any(better):
                best_res = np.where(better, res, best_res)
                best_h[:, better] = 0.0
                best_h[np.ix_(support, np.flatnonzero(better))] = coef[:, better]
    return best_h


def canonical_order(W):
    """Column order: descending cosine to hematoxylin, ties by larger first channel."""
    W = np.asarray(W, dtype=float)
    norms = np.linalg.norm(W, axis=0)
    cos = (HEMATOXYLIN[: W.shape[0]] @ W) / np.where(norms > 0, norms, 1.0)
    cos = np.round(cos, 12)  # cosines equal up to rounding count as ties
    return np.lexsort((-W[0], -cos))


def sparse_nmf_objective(X, W, H, sparsity):
    R = (X - W @ H).ravel()
    return float(R @ R + sparsity * np.abs(H).sum())


def _normalize_columns(W, H, W_prev):
    norms = np.sqrt(np.einsum("ij,ij->j", W, W))
    if norms.min() <= 0:
        dead = norms <= 0
        # a zero column only arises from an all-zero density row; WH is unaffected
        W = W.copy()
        W[:, dead] = W_prev[:, dead]
        norms = np.where(dead, 1.0, norms)
    return W / norms, H * norms[:, None]


def estimate_stains(od, config=None):
    """Fit ``(W, H)`` to an OD matrix by sparse NMF on tissue pixels.

    Minimises ``||X_tissue - W H||_F^2 + sparsity * sum(H)`` with alternating
    multiplicative updates. After each W update the columns are rescaled to
    unit norm and the scale is moved into H. An iterate is only accepted if
    it does not increase the objective, so the recorded trace is
    non-increasing. Background pixels get densities by nonnegative projection
    onto the fitted W.

    Raises InsufficientTissue when fewer than ``10 * n_stains`` pixels pass
    the tissue threshold. Hitting ``max_iter`` is not an error; check
    ``converged`` on the result.
    """
    cfg = config or SeparationConfig()
    od = check_od(od)
    m, n = od.shape
    r = cfg.n_stains
    if r > m:
        raise InvalidInput(f"cannot fit {r} stains to {m} channels")
    tissue = tissue_mask(od, cfg.tissue_threshold)
    n_tissue = int(tissue.sum())
    if n_tissue < 10 * r:
        raise InsufficientTissue(n_tissue, 10 * r)
    X = od[:, tissue]
    lam = cfg.sparsity

    rng = make_rng(cfg.seed)
    W = reference_stains(r)[:m] + rng.uniform(0.0, 0.05, size=(m, r))
    W = W / np.linalg.norm(W, axis=0)
    H = np.maximum(nnls_project(W, X), _H_INIT_FLOOR)

    obj = sparse_nmf_objective(X, W, H, lam)
    trace = [obj]
    converged = False
    n_iter = 0
    for n_iter in range(1, cfg.max_iter + 1):
        H_new = H * (W.T @ X) / ((W.T @ W) @ H + (0.5 * lam + _EPS))
        W_new = W * (X @ H_new.T) / (W @ H_new @ H_new.T + _EPS)
        W_new, H_scaled = _normalize_columns(W_new, H_new, W)
        obj_new = sparse_nmf_objective(X, W_new, H_scaled, lam)
        if obj_new > obj:
            # renormalising W can raise the L1 term; fall back to the H step alone
            W_new, H_scaled = W, H_new
            obj_new = sparse_nmf_objective(X, W_new, H_scaled, lam)
            if obj_new > obj:
                converged = True
                n_iter -= 1
                break
        rel = (obj - obj_new) / max(obj, _EPS)
        W, H, obj = W_new, H_scaled, obj_new
        trace.append(obj)
        if rel < cfg.tol:
            converged = True
            break

    order = canonical_order(W)
    W = W[:, order]
    H_full = np.empty((r, n))
    H_full[:, tissue] = H[order]
    if n_tissue < n:
        H_full[:, ~tissue] = nnls_project(W, od[:, ~tissue])

    degenerate = False
    if r > 1:
        gram = W.T @ W
        degenerate = bool(np.any(gram[np.triu_indices(r, 1)] > _DEGENERATE_COSINE))

    return Separation(
        stain_matrix=W,
        density=H_full,
        objective=trace,
        n_iter=n_iter,
        converged=converged,
        degenerate=degenerate,
        tissue=tissue,
    )


def reconstruct(W, H):
    """OD matrix ``W @ H``."""
    W = np.asarray(W, dtype=float)
    H = np.asarray(H, dtype=float)
    if W.ndim != 2 or H.ndim != 2 or W.shape[1] != H.shape[0]:
        raise InvalidInput(f"cannot multiply stain matrix {W.shape} by density {H.shape}")
    return W @ H


def density_percentile(H, p=99):
    """Per-stain ``p``-th percentile by the nearest-rank rule."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    n = H.shape[1]
    if n < 1:
        raise InvalidInput("density has no pixels")
    if not 0 < p <= 100:
        raise InvalidInput(f"percentile must lie in (0, 100], got {p}")
    rank = max(1, math.ceil(p * n / 100))
    return np.sort(H, axis=1)[:, rank - 1]


def separate_image(img, config=None):
    """Convenience wrapper: RGB image -> :class:`Separation`."""
    img = check_rgb(img)
    return estimate_stains(to_matrix(rgb_to_od(img)), config)


def stain_densities(img, config=None):
    """Stain matrix from sparse NMF plus unshrunk densities for every pixel.

    The L1 term biases the NMF densities towards zero; recolouring uses the
    nonnegative projection of each pixel onto the fitted matrix instead.
    Returns ``(W, H, separation)``.
    """
    img = check_rgb(img)
    od = to_matrix(rgb_to_od(img))
    sep = estimate_stains(od, config)
    return sep.stain_matrix, nnls_project(sep.stain_matrix, od), sep


def _scales(H):
    return np.maximum(density_percentile(H), _SCALE_FLOOR)


def fit_profile(img, config=None):
    """Stain matrix and 99th-percentile density scales of an RGB image."""
    W, H, _ = stain_densities(img, config)
    return StainProfile(W, _scales(H))


def normalize_spcn(src, target, config=None):
    """Structure-preserving colour normalisation of ``src`` towards ``target``.

    The source densities keep their spatial structure; each stain row is
    rescaled so its 99th percentile matches the target and recombined with
    the target stain matrix.
    """
    cfg = config or SeparationConfig()
    src = check_rgb(src)
    target = target.canonical()
    if target.stains.shape != (3, cfg.n_stains):
        raise InvalidInput(
            f"target profile has shape {target.stains.shape}, expected (3, {cfg.n_stains})"
        )
    _, H, _ = stain_densities(src, cfg)
    H = H * (target.density_scale / _scales(H))[:, None]
    od = reconstruct(target.stains, H)
    return od_to_rgb(from_matrix(od, src.shape[:2]))


class StainSeparator(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`estimate_stains`.

    ``fit`` learns a stain matrix from one RGB image; ``transform`` maps RGB
    images to per-pixel densities of shape ``(height, width, n_stains)`` by
    nonnegative projection onto that matrix, and ``inverse_transform`` maps
    densities back to RGB.
    """

    def __init__(
        self,
        n_stains=2,
        sparsity=0.001,
        max_iter=200,
        tol=1e-6,
        tissue_threshold=0.15,
        random_state=0,
    ):
        self.n_stains = n_stains
        self.sparsity = sparsity
        self.max_iter = max_iter
        self.tol = tol
        self.tissue_threshold = tissue_threshold
        self.random_state = random_state

    def _config(self):
        return SeparationConfig(
            n_stains=self.n_stains,
            sparsity=self.sparsity,
            max_iter=self.max_iter,
            tol=self.tol,
            tissue_threshold=self.tissue_threshold,
            seed=self.random_state if self.random_state is not None else 0,
        )

    def fit(self, X, y=None):
        W, H, sep = stain_densities(X, self._config())
        self.stain_matrix_ = W
        self.density_scale_ = _scales(H)
        self.objective_ = np.asarray(sep.objective)
        self.n_iter_ = sep.n_iter
        self.degenerate_ = sep.degenerate
        return self

    def transform(self, X):
        check_is_fitted(self, "stain_matrix_")
        X = check_rgb(X)
        H = nnls_project(self.stain_matrix_, to_matrix(rgb_to_od(X)))
        return from_matrix(H, X.shape[:2])

    def inverse_transform(self, X):
        check_is_fitted(self, "stain_matrix_")
        X = np.asarray(X, dtype=float)
        od = reconstruct(self.stain_matrix_, to_matrix(X))
        return od_to_rgb(from_matrix(od, X.shape[:2]))

    @property
    def profile_(self):
        check_is_fitted(self, "stain_matrix_")
        return StainProfile(self.stain_matrix_, self.density_scale_)


class SPCNNormalizer(StainSeparator):
    """Fit on a target image, then ``transform`` recolours images towards it."""

    def fit(self, X, y=None):
        return super().fit(X, y)

    def transform(self, X):
        check_is_fitted(self, "stain_matrix_")
        return normalize_spcn(X, self.profile_, self._config())

    def inverse_transform(self, X):
        raise NotImplementedError("SPCN normalisation is not invertible")

    @classmethod
    def from_profile(cls, profile, **params):
        est = cls(**params)
        profile = profile.canonical()
        est.stain_matrix_ = profile.stains
        est.density_scale_ = profile.density_scale
        return est
