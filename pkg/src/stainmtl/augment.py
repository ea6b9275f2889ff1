"""Stain augmentation: stain-matrix perturbation, RandStainNA-style LAB
recolouring, the probabilistic mixture of the two, and random flips."""

import json
from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._random import check_random_state
from ._validation import check_probability, check_rgb
from .color import channel_stats, from_matrix, lab_to_rgb, od_to_rgb, rgb_to_lab
from .exceptions import InsufficientTissue, InvalidInput
from .stainsep import SeparationConfig, reconstruct, stain_densities

CHANNELS = ("L", "a", "b")
MIN_TARGET_STD = 0.01


@dataclass(frozen=True)
class PerturbConfig:
    scale_sigma: float = 0.05
    max_attempts: int = 10

    def __post_init__(self):
        if self.scale_sigma < 0:
            raise InvalidInput("scale_sigma must be nonnegative")
        if self.max_attempts < 1:
            raise InvalidInput("max_attempts must be at least 1")


@dataclass
class StatPrior:
    """Gaussian priors over per-image LAB channel means and stds."""

    mu_mean: np.ndarray
    sigma_mean: np.ndarray
    mu_std: np.ndarray
    sigma_std: np.ndarray
    n_images: int

    def __post_init__(self):
        for name in ("mu_mean", "sigma_mean", "mu_std", "sigma_std"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (3,):
                raise InvalidInput(f"{name} must have one value per LAB channel")
            setattr(self, name, arr)
        if np.any(self.sigma_mean < 0) or np.any(self.sigma_std < 0):
            raise InvalidInput("prior standard deviations must be nonnegative")
        if self.n_images < 1:
            raise InvalidInput("n_images must be at least 1")

    def to_dict(self):
        return {
            "channels": {
                c: {
                    "mu_mean": float(self.mu_mean[k]),
                    "sigma_mean": float(self.sigma_mean[k]),
                    "mu_std": float(self.mu_std[k]),
                    "sigma_std": float(self.sigma_std[k]),
                }
                for k, c in enumerate(CHANNELS)
            },
            "n_images": int(self.n_images),
        }

    @classmethod
    def from_dict(cls, data):
        try:
            ch = [data["channels"][c] for c in CHANNELS]
            fields = {
                key: [float(c[key]) for c in ch]
                for key in ("mu_mean", "sigma_mean", "mu_std", "sigma_std")
            }
            return cls(n_images=int(data["n_images"]), **fields)
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInput(f"malformed prior: {exc}") from exc

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class MixturePolicy:
    """Branch probabilities; the remaining mass is left unaugmented."""

    p_randstainna: float = 0.25
    p_stain_sep: float = 0.25

    def __post_init__(self):
        check_probability(self.p_randstainna, "p_randstainna")
        check_probability(self.p_stain_sep, "p_stain_sep")
        if self.p_randstainna + self.p_stain_sep > 1.0:
            raise InvalidInput("branch probabilities must sum to at most 1")


@dataclass
class AugmentedSample:
    image: np.ndarray
    mask: np.ndarray
    applied: str


def stain_scale_factors(shape, scale_sigma, random_state=None):
    """Independent log-normal factors ``exp(N(0, scale_sigma^2))``."""
    rng = check_random_state(random_state)
    return np.exp(rng.normal(0.0, scale_sigma, size=shape))


def perturb_stain_matrix(W, config=None, random_state=None):
    """Scale every entry by ``exp(N(0, sigma^2))`` and renormalise columns."""
    cfg = config or PerturbConfig()
    W = np.asarray(W, dtype=float)
    factors = stain_scale_factors(W.shape, cfg.scale_sigma, random_state)
    if cfg.scale_sigma == 0:
        return W.copy()
    Wp = W * factors
    return Wp / np.linalg.norm(Wp, axis=0)


def stain_augment(img, sep_config=None, perturb_config=None, random_state=None):
    """Recolour ``img`` by perturbing its stain matrix with densities held fixed.

    Returns ``(image, ok)``. The first separation uses ``sep_config.seed``;
    if the fitted stains are degenerate, up to ``max_attempts - 1`` further
    seeds are drawn from the generator. When every attempt is degenerate
    the input comes back unchanged with ``ok=False``. InsufficientTissue is
    propagated.
    """
    sep_cfg = sep_config or SeparationConfig()
    pcfg = perturb_config or PerturbConfig()
    rng = check_random_state(random_state)
    img = check_rgb(img)
    cfg = sep_cfg
    for attempt in range(pcfg.max_attempts):
        if attempt:
            cfg = replace(sep_cfg, seed=int(rng.integers(2**63)))
        W, H, sep = stain_densities(img, cfg)
        if not sep.degenerate:
            break
    else:
        return img.copy(), False
    Wp = perturb_stain_matrix(W, pcfg, rng)
    od = reconstruct(Wp, H)
    return od_to_rgb(from_matrix(od, img.shape[:2])), True


def fit_stat_prior(corpus):
    """Fit Gaussian priors to the LAB channel statistics of a corpus."""
    corpus = list(corpus)
    if not corpus:
        raise InvalidInput("cannot fit a prior to an empty corpus")
    return prior_from_stats(channel_stats(rgb_to_lab(check_rgb(img))) for img in corpus)


def prior_from_stats(stats):
    """Population mean/std of per-image channel means and stds."""
    stats = list(stats)
    if not stats:
        raise InvalidInput("cannot fit a prior without statistics")
    means = np.stack([s.mean for s in stats])
    stds = np.stack([s.std for s in stats])
    return StatPrior(
        mu_mean=means.mean(axis=0),
        sigma_mean=means.std(axis=0),
        mu_std=stds.mean(axis=0),
        sigma_std=stds.std(axis=0),
        n_images=len(stats),
    )


def randstainna_augment(img, prior, random_state=None):
    """Reinhard transfer in LAB towards a style sampled from ``prior``.

    Three target means are drawn first, then three target stds (clamped to
    at least 0.01). Channels with zero spread are moved to the target mean.
    """
    rng = check_random_state(random_state)
    img = check_rgb(img)
    target_mean = rng.normal(prior.mu_mean, prior.sigma_mean)
    target_std = np.maximum(rng.normal(prior.mu_std, prior.sigma_std), MIN_TARGET_STD)
    lab = rgb_to_lab(img)
    stats = channel_stats(lab)
    # rounding in the mean leaves ~1e-14 spread on constant channels
    ratio = np.divide(target_std, stats.std, out=np.zeros(3), where=stats.std > 1e-8)
    return lab_to_rgb((lab - stats.mean) * ratio + target_mean)


def mixture_augment(
    image,
    mask,
    policy=None,
    prior=None,
    sep_config=None,
    perturb_config=None,
    random_state=None,
):
    """Pick one colour augmentation branch at random and apply it.

    ``u ~ U[0, 1)``: ``u < p_randstainna`` selects RandStainNA, ``u <
    p_randstainna + p_stain_sep`` the stain-matrix perturbation, anything
    else leaves the image alone. A stain branch that cannot separate the
    image falls back to identity. The mask is returned untouched.
    """
    policy = policy or MixturePolicy()
    if policy.p_randstainna > 0 and prior is None:
        raise InvalidInput("a StatPrior is required when p_randstainna > 0")
    rng = check_random_state(random_state)
    image = check_rgb(image)
    u = rng.random()
    if u < policy.p_randstainna:
        return AugmentedSample(randstainna_augment(image, prior, rng), mask, "randstainna")
    if u < policy.p_randstainna + policy.p_stain_sep:
        try:
            out, ok = stain_augment(image, sep_config, perturb_config, rng)
        except InsufficientTissue:
            ok = False
        if ok:
            return AugmentedSample(out, mask, "stain_sep")
    return AugmentedSample(image, mask, "identity")


def flip(arr, horizontal=False, vertical=False):
    if horizontal:
        arr = arr[:, ::-1]
    if vertical:
        arr = arr[::-1]
    return np.ascontiguousarray(arr)


def geometric_augment(image, mask, random_state=None):
    """Independent horizontal and vertical flips (p = 0.5 each) of image and mask."""
    rng = check_random_state(random_state)
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.ndim < 2 or image.shape[:2] != mask.shape[:2]:
        raise InvalidInput(
            f"image {image.shape[:2]} and mask {mask.shape[:2]} dimensions differ"
        )
    horizontal, vertical = rng.random(2) < 0.5
    return flip(image, horizontal, vertical), flip(mask, horizontal, vertical)


def _as_image_list(X):
    if isinstance(X, np.ndarray) and X.ndim == 3:
        return [X], True
    return list(X), False


class RandStainNA(TransformerMixin, BaseEstimator):
    """Fit LAB statistic priors on a corpus; ``transform`` draws a new style
    per image from an internal generator seeded by ``random_state``."""

    def __init__(self, random_state=None):
        self.random_state = random_state

    def fit(self, X, y=None):
        images, _ = _as_image_list(X)
        self.prior_ = fit_stat_prior(images)
        self._rng = check_random_state(self.random_state)
        return self

    def transform(self, X):
        check_is_fitted(self, "prior_")
        images, single = _as_image_list(X)
        out = [randstainna_augment(img, self.prior_, self._rng) for img in images]
        return out[0] if single else out


class StainMixtureAugmenter(TransformerMixin, BaseEstimator):
    """Mixture of RandStainNA and stain-matrix perturbation as a transformer.

    ``fit`` takes a template corpus for the RandStainNA prior. After
    ``transform``, ``applied_`` lists the branch taken for each image.
    """

    def __init__(
        self,
        p_randstainna=0.25,
        p_stain_sep=0.25,
        scale_sigma=0.05,
        n_stains=2,
        sparsity=0.001,
        max_iter=200,
        random_state=None,
    ):
        self.p_randstainna = p_randstainna
        self.p_stain_sep = p_stain_sep
        self.scale_sigma = scale_sigma
        self.n_stains = n_stains
        self.sparsity = sparsity
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        images, _ = _as_image_list(X)
        self.policy_ = MixturePolicy(self.p_randstainna, self.p_stain_sep)
        self.prior_ = fit_stat_prior(images)
        self._rng = check_random_state(self.random_state)
        return self

    def transform(self, X):
        check_is_fitted(self, "prior_")
        images, single = _as_image_list(X)
        sep_cfg = SeparationConfig(
            n_stains=self.n_stains, sparsity=self.sparsity, max_iter=self.max_iter
        )
        pcfg = PerturbConfig(scale_sigma=self.scale_sigma)
        out, applied = [], []
        for img in images:
            img = check_rgb(img)
            placeholder = np.zeros(img.shape[:2], dtype=bool)
            s = mixture_augment(img, placeholder, self.policy_, self.prior_, sep_cfg, pcfg, self._rng)
            out.append(s.image)
            applied.append(s.applied)
        self.applied_ = applied
        return out[0] if single else out
