"""One-step-ahead posterior variance for every surrogate.

All models share the form

    s_{n+1}(x*)^2 = c * [ s_n(x*)^2 - v_n(x*, x)^2 / (noise(x) + s_n(x)^2) ]

where ``s_n`` and ``v_n`` are the (uninflated) posterior variance/covariance,
``noise`` is the model's effective noise of a new sample at ``x`` and ``c`` is
1 except for the Student-t process.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .gp_core import LinearGaussianPosterior, kernel_matrix


@dataclass(frozen=True)
class LookaheadQuery:
    candidate: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "candidate", np.atleast_2d(np.asarray(self.candidate, float)))
        object.__setattr__(self, "targets", np.atleast_2d(np.asarray(self.targets, float)))


def woodbury_quadform(A, b, c, d) -> float:
    """Quadratic form ``[b; d]^T M^{-1} [b; d]`` with ``M = [[A, b], [b^T, c]]``.

    Evaluated through the Schur complement ``c - q``, ``q = b^T A^{-1} b``:
    ``q + (d - q)^2 / (c - q)``. Note the plus sign; this is what a dense
    inverse of the bordered matrix gives.
    """
    b = np.asarray(b, float)
    q = float(b @ linalg.solve(np.asarray(A, float), b, assume_a="pos"))
    schur = c - q
    if schur == 0:
        raise ZeroDivisionError("bordered system is singular")
    return q + (d - q) ** 2 / schur


def _pieces(post: LinearGaussianPosterior, Xc, Xs):
    """Current variances at candidates/targets and their cross-covariance."""
    Xc = np.atleast_2d(np.asarray(Xc, float))
    Xs = np.atleast_2d(np.asarray(Xs, float))
    _, Vc = post._half(Xc)
    _, Vs = post._half(Xs)
    var_c = np.maximum(post._prior_var(Xc) - np.einsum("ij,ij->j", Vc, Vc), 0.0)
    var_s = np.maximum(post._prior_var(Xs) - np.einsum("ij,ij->j", Vs, Vs), 0.0)
    cross = kernel_matrix(Xs, post.params, Xc) - Vs.T @ Vc  # m x k
    return var_c, var_s, cross


def lookahead_variance(post: LinearGaussianPosterior, Xc, Xs, noise=None) -> np.ndarray:
    """Look-ahead variance at each target (columns) for each candidate (rows).

    Returns an array of shape ``(len(Xc), len(Xs))``. ``noise`` overrides the
    model's effective noise at the candidates.
    """
    var_c, var_s, cross = _pieces(post, Xc, Xs)
    noise = post.lookahead_noise(Xc) if noise is None else np.broadcast_to(noise, var_c.shape)
    reduced = var_s[None, :] - cross.T ** 2 / (noise + var_c)[:, None]
    return post.lookahead_factor() * np.maximum(reduced, 0.0)


def lookahead_variance_self(post: LinearGaussianPosterior, Xc, noise=None) -> np.ndarray:
    """Look-ahead variance at the candidate itself, ``x* = x_{n+1}``.

    ``s^2 * noise / (noise + s^2)`` (times the TP factor).
    """
    Xc = np.atleast_2d(np.asarray(Xc, float))
    _, var = post.base_predict(Xc)
    noise = post.lookahead_noise(Xc) if noise is None else np.broadcast_to(noise, var.shape)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(noise + var > 0, var * noise / (noise + var), 0.0)
    return post.lookahead_factor() * out


def _single(post, query: LookaheadQuery):
    if query.candidate.shape[0] != 1:
        raise ValueError("query must hold exactly one candidate")
    return lookahead_variance(post, query.candidate, query.targets)[0]


def lookahead_var_gaussian(post, query: LookaheadQuery) -> np.ndarray:
    """Exact one-step-ahead variance of the Gaussian GP (independent of ``y_{n+1}``)."""
    return _single(post, query)


def lookahead_var_tgp(state, query: LookaheadQuery) -> np.ndarray:
    """t-GP look-ahead: effective noise ``tau^2 (nu+1)/(nu-1)``."""
    return _single(state, query)


def lookahead_var_clgp(state, query: LookaheadQuery) -> np.ndarray:
    """Cl-GP look-ahead: noise ``1/v_check`` with ``v_check = v+ p+ + v- p-``."""
    return _single(state, query)


def lookahead_var_tp(tp, query: LookaheadQuery) -> np.ndarray:
    """TP look-ahead: Gaussian look-ahead times ``(nu + beta_check - 2)/(nu + n - 1)``."""
    return _single(tp, query)
