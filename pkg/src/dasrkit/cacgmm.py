"""Guided complex angular central Gaussian mixture model (cACGMM) masking.

Observations are unit-normalised multichannel STFT vectors.  Each class has
one Hermitian shape matrix per frequency bin and one mixture weight per
frame; sharing the weights across frequency aligns class identities between
bins, and the oracle activity zeroes inactive classes outright.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .audio import Spectrogram
from .manifest import ActivityGrid


@dataclass(frozen=True)
class CacgmmConfig:
    iterations: int = 20
    eps: float = 1e-10
    weight_floor: float = 1e-6

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass(frozen=True)
class CacgParams:
    covariance: np.ndarray      # (class, bin, channel, channel)
    weights: np.ndarray         # (class, frame)


@dataclass(frozen=True)
class Masks:
    """Class posteriors ``gamma`` of shape ``(class, frame, bin)``; the last class is noise."""

    gamma: np.ndarray
    target_index: int
    params: CacgParams | None = None
    log_likelihood: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def target(self) -> np.ndarray:
        return self.gamma[self.target_index]


def _log_normaliser(dim: int) -> float:
    # (I-1)! / (2 pi^I): the cACG density integrates to one over the complex unit sphere
    return math.lgamma(dim) - math.log(2.0) - dim * math.log(math.pi)


def cacg_log_density(z, b) -> float | np.ndarray:
    """log p(z; B) = log((I-1)!/(2 pi^I)) - log det B - I log(z^H B^-1 z).

    Broadcasts over leading dimensions of ``z`` (``(..., I)``) and ``b`` (``(..., I, I)``).
    """
    z = np.asarray(z, dtype=np.complex128)
    b = np.asarray(b, dtype=np.complex128)
    dim = z.shape[-1]
    try:
        chol = np.linalg.cholesky(b)
    except np.linalg.LinAlgError as exc:
        raise ValueError("shape matrix is not positive definite") from exc
    logdet = 2 * np.sum(np.log(np.abs(np.diagonal(chol, axis1=-2, axis2=-1))), axis=-1)
    sol = np.linalg.solve(b, z[..., None])[..., 0]
    quad = np.real(np.sum(z.conj() * sol, axis=-1))
    out = _log_normaliser(dim) - logdet - dim * np.log(quad)
    return float(out) if np.ndim(out) == 0 else out


def normalize_observations(x: np.ndarray) -> np.ndarray:
    """Unit-normalise ``(channel, frame, bin)`` STFT data to ``(bin, frame, channel)`` directions."""
    z = x.transpose(2, 1, 0)
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    return z / np.maximum(norm, 1e-10)


def _hermitize(a):
    return 0.5 * (a + a.conj().swapaxes(-1, -2))


def _e_step(z, cov, weights, active):
    """Posteriors and log-likelihood for directions ``z`` (bin, frame, channel)."""
    dim = z.shape[-1]
    chol = np.linalg.cholesky(cov)                                   # (K, F, I, I)
    logdet = 2 * np.sum(np.log(np.abs(np.diagonal(chol, axis1=-2, axis2=-1))), axis=-1)
    # z^H B^-1 z = || L^-1 z ||^2
    y = np.linalg.inv(chol) @ np.swapaxes(z, -1, -2)[None]           # (K, F, I, T)
    quad = np.maximum(np.sum(np.abs(y) ** 2, axis=-2), 1e-300)      # (K, F, T)
    log_p = _log_normaliser(dim) - logdet[..., None] - dim * np.log(quad)
    with np.errstate(divide="ignore"):
        log_w = np.where(active, np.log(np.where(active, weights, 1.0)), -np.inf)
    logits = log_p + log_w[:, None, :]                               # (K, F, T)
    top = np.max(logits, axis=0)
    shifted = np.exp(logits - top)
    total = shifted.sum(axis=0)
    gamma = shifted / total
    loglik = float(np.sum(top + np.log(total)))
    return gamma, quad, loglik


def _m_step(z, gamma, quad, active, cfg):
    dim = z.shape[-1]
    mass = gamma.sum(axis=1)                                          # (K, T)
    weights = np.maximum(cfg.weight_floor, mass) * active
    weights = weights / weights.sum(axis=0, keepdims=True)
    w = gamma / quad                                                  # (K, F, T)
    zt = np.swapaxes(z, -1, -2)                                       # (F, I, T)
    cov = (zt[None] * w[:, :, None, :]) @ z.conj()[None]              # (K, F, I, I)
    denom = np.maximum(gamma.sum(axis=-1), 1e-10)[..., None, None]
    cov = dim * cov / denom
    cov = _hermitize(cov)
    tr = np.trace(cov, axis1=-2, axis2=-1).real
    # a class with no posterior mass at a bin keeps an isotropic shape
    empty = tr <= 1e-12
    cov[empty] = np.eye(dim)
    tr[empty] = dim
    cov = cov + (cfg.eps * tr / dim)[..., None, None] * np.eye(dim)
    return cov, weights


def fit_cacgmm(z: np.ndarray, activity: np.ndarray, cfg: CacgmmConfig = CacgmmConfig(),
               initial: CacgParams | None = None):
    """EM for a cACGMM with frame-wise class weights restricted by ``activity``.

    :param z: unit directions, shape ``(bin, frame, channel)``
    :param activity: boolean ``(class, frame)``; every frame needs one active class
    :return: ``(gamma (class, frame, bin), params, log_likelihood per E-step)``
    """
    active = np.asarray(activity, dtype=bool)
    num_classes, frames = active.shape
    bins, t2, dim = z.shape
    if t2 != frames:
        raise ValueError(f"activity has {frames} frames, observations {t2}")
    if not active.any(axis=0).all():
        raise ValueError("every frame needs at least one active class")
    if initial is None:
        weights = active / active.sum(axis=0, keepdims=True)
        cov = np.broadcast_to(np.eye(dim, dtype=np.complex128),
                              (num_classes, bins, dim, dim)).copy()
    else:
        weights, cov = initial.weights, initial.covariance
    history = []
    for _ in range(cfg.iterations):
        gamma, quad, ll = _e_step(z, cov, weights, active)
        history.append(ll)
        cov, weights = _m_step(z, gamma, quad, active, cfg)
    gamma, _, ll = _e_step(z, cov, weights, active)
    history.append(ll)
    gamma = np.where(active[:, None, :], gamma, 0.0)
    return gamma.transpose(0, 2, 1), CacgParams(cov, weights), np.asarray(history)


def fit_guided_cacgmm(s: Spectrogram, a: ActivityGrid, cfg: CacgmmConfig = CacgmmConfig(),
                      target_speaker: str | None = None) -> Masks:
    """Speaker and noise masks for ``s`` guided by oracle activity ``a``.

    Classes are the grid's speakers followed by an always-active noise class.
    Speakers without any active frame are left out of the fit and get
    all-zero masks.
    """
    if s.num_channels < 2:
        raise ValueError("guided cACGMM needs at least two channels")
    if s.num_frames < 2:
        raise ValueError("need at least two frames")
    if a.num_frames != s.num_frames:
        raise ValueError(f"activity grid has {a.num_frames} frames, spectrogram {s.num_frames}")
    target_speaker = a.target_speaker if target_speaker is None else target_speaker
    if target_speaker is None or target_speaker not in a.speakers:
        raise ValueError(f"target speaker {target_speaker!r} not in activity grid")
    target = a.speakers.index(target_speaker)
    if not a.activity[target].any():
        raise ValueError(f"target speaker {target_speaker!r} is never active")
    activity = np.vstack([a.activity, np.ones((1, a.num_frames), dtype=bool)])
    live = np.flatnonzero(activity.any(axis=1))
    z = normalize_observations(s.data)
    gamma_live, params, history = fit_cacgmm(z, activity[live], cfg)
    gamma = np.zeros((activity.shape[0], s.num_frames, s.num_bins))
    gamma[live] = gamma_live
    return Masks(gamma, target, params, history)
