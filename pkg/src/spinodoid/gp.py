"""Ordinary-kriging Gaussian process with a Gaussian correlation.

Constant prior mean ``beta``, process variance ``sigma2`` and correlation
``r(s, s') = exp(-sum_i 10**w_i (s_i - s'_i)**2)``. ``beta`` and ``sigma2``
are profiled in closed form; the roughness vector ``w`` maximizes the
concentrated log-likelihood by multi-start L-BFGS-B with analytic gradients.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.stats import qmc

log = logging.getLogger(__name__)

GP_SCHEMA = "spinodoid.gp/1"
LN10 = math.log(10.0)


class GPFitError(RuntimeError):
    pass


def _sqdiff(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Per-dimension squared differences, shape (len(A), len(B), d)."""
    return (A[:, None, :] - B[None, :, :]) ** 2


@dataclass
class GPModel:
    X: np.ndarray
    q: np.ndarray
    beta: float
    sigma2: float
    w: np.ndarray
    nugget: float
    alpha: np.ndarray  # R^-1 (q - beta)
    log_likelihood: float = float("nan")
    loo_rmse: float = float("nan")
    _chol: tuple | None = field(default=None, init=False, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def _check(self, S) -> np.ndarray:
        S = np.atleast_2d(np.asarray(S, dtype=float))
        if S.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} input dimensions, got {S.shape[1]}")
        return S

    def correlation(self, S) -> np.ndarray:
        S = self._check(S)
        return np.exp(-_sqdiff(S, self.X) @ 10.0**self.w)

    def predict(self, S, return_var: bool = False):
        """Posterior mean ``beta + r(S)^T alpha`` and optionally the kriging variance."""
        c = self.correlation(S)
        mean = self.beta + c @ self.alpha
        if not return_var:
            return mean
        return mean, self._variance(c)

    def predict_with_grad(self, S):
        """Posterior mean and its gradient with respect to the normalized inputs."""
        S = self._check(S)
        diff = S[:, None, :] - self.X[None, :, :]
        c = np.exp(-(diff**2) @ 10.0**self.w)
        ca = c * self.alpha
        mean = self.beta + ca.sum(axis=1)
        grad = -2.0 * 10.0**self.w * np.einsum("mr,mrd->md", ca, diff)
        return mean, grad

    def _variance(self, c: np.ndarray) -> np.ndarray:
        if self.sigma2 == 0.0:
            return np.zeros(len(c))
        if self._chol is None:
            R = np.exp(-_sqdiff(self.X, self.X) @ 10.0**self.w) + self.nugget * np.eye(len(self.X))
            self._chol = cho_factor(R, lower=True)
        ones = np.ones(len(self.X))
        Ri_c = cho_solve(self._chol, c.T)
        Ri_1 = cho_solve(self._chol, ones)
        u = 1.0 - ones @ Ri_c
        var = 1.0 + self.nugget - np.einsum("ij,ji->i", c, Ri_c) + u**2 / (ones @ Ri_1)
        return self.sigma2 * np.maximum(var, 0.0)

    def to_dict(self) -> dict:
        return {
            "schema": GP_SCHEMA,
            "beta": self.beta,
            "sigma2": self.sigma2,
            "w": self.w.tolist(),
            "nugget": self.nugget,
            "log_likelihood": self.log_likelihood,
            "loo_rmse": self.loo_rmse,
            "X": self.X.tolist(),
            "q": self.q.tolist(),
            "alpha": self.alpha.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GPModel":
        if d.get("schema") != GP_SCHEMA:
            raise ValueError(f"unsupported GP schema {d.get('schema')!r}")
        return cls(
            X=np.asarray(d["X"], dtype=float).reshape(len(d["X"]), -1),
            q=np.asarray(d["q"], dtype=float),
            beta=float(d["beta"]),
            sigma2=float(d["sigma2"]),
            w=np.asarray(d["w"], dtype=float),
            nugget=float(d["nugget"]),
            alpha=np.asarray(d["alpha"], dtype=float),
            log_likelihood=float(d.get("log_likelihood", "nan")),
            loo_rmse=float(d.get("loo_rmse", "nan")),
        )

    def save(self, path, extra: dict | None = None) -> None:
        d = self.to_dict()
        if extra:
            d = {**extra, **d}
        Path(path).write_text(json.dumps(d))

    @classmethod
    def load(cls, path) -> "GPModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def gp_predict(model: GPModel, s_test, return_var: bool = False):
    return model.predict(s_test, return_var=return_var)


def gp_predict_grad(model: GPModel, s_test) -> np.ndarray:
    return model.predict_with_grad(s_test)[1]


class _Profile:
    """Concentrated likelihood pieces for standardized observations."""

    def __init__(self, X, y, nugget):
        self.D = np.moveaxis(_sqdiff(X, X), -1, 0)  # (d, r, r)
        self.y = y
        self.nugget = nugget
        self.r = len(y)

    def factor(self, w):
        Rc = np.exp(-np.tensordot(10.0**w, self.D, axes=1))
        L = cho_factor(Rc + self.nugget * np.eye(self.r), lower=True)
        ones = np.ones(self.r)
        Ri_1 = cho_solve(L, ones)
        beta = (Ri_1 @ self.y) / (Ri_1 @ ones)
        resid = self.y - beta
        a = cho_solve(L, resid)
        sigma2 = max(resid @ a / self.r, 1e-300)
        logdet = 2.0 * np.sum(np.log(np.diag(L[0])))
        return Rc, L, beta, sigma2, a, logdet

    def objective(self, w):
        """-2 log-likelihood (up to a constant) and its gradient in w."""
        try:
            Rc, L, _, sigma2, a, logdet = self.factor(w)
        except np.linalg.LinAlgError:
            return 1e20, np.zeros_like(w)
        f = self.r * math.log(sigma2) + logdet
        Ri = cho_solve(L, np.eye(self.r))
        grad = np.empty_like(w)
        for k in range(len(w)):
            M = self.D[k] * Rc
            scale = -LN10 * 10.0 ** w[k]
            grad[k] = scale * (np.sum(Ri * M) - (a @ M @ a) / sigma2)
        return f, grad


def gp_fit(
    X,
    q,
    n_restarts: int = 8,
    bounds: tuple[float, float] = (-3.0, 3.0),
    nugget: float = 1e-6,
    seed: int = 0,
) -> GPModel:
    """Maximum-likelihood fit of a constant-mean GP to inputs ``X`` in [0, 1]^d."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    q = np.asarray(q, dtype=float).ravel()
    r, d = X.shape
    if len(q) != r:
        raise ValueError("X and q lengths differ")
    if r == 0:
        raise ValueError("no training data")
    if r == 1 or np.ptp(q) == 0.0:
        return GPModel(X, q, float(q[0]), 0.0, np.zeros(d), nugget, np.zeros(r), float("nan"), 0.0)

    q_mean, q_std = float(q.mean()), float(q.std())
    y = (q - q_mean) / q_std
    starts = qmc.LatinHypercube(d=d, seed=np.random.default_rng(seed)).random(n_restarts)
    starts = bounds[0] + starts * (bounds[1] - bounds[0])

    while True:
        prof = _Profile(X, y, nugget)
        best = None
        for x0 in starts:
            res = minimize(prof.objective, x0, jac=True, method="L-BFGS-B", bounds=[bounds] * d)
            if np.isfinite(res.fun) and res.fun < 1e19 and (best is None or res.fun < best.fun):
                best = res
        if best is None:
            raise GPFitError("likelihood optimization failed from every start")
        try:
            Rc, L, beta, sigma2, a, logdet = prof.factor(best.x)
            break
        except np.linalg.LinAlgError:
            if nugget >= 1e-2:
                raise GPFitError("covariance stays singular even with a large nugget") from None
            nugget *= 10.0
            warnings.warn(f"ill-conditioned covariance; nugget raised to {nugget:g}", RuntimeWarning)

    Ri_diag = np.diag(cho_solve(L, np.eye(r)))
    loo = a / Ri_diag * q_std
    loglik = -0.5 * (r * math.log(sigma2 * q_std**2) + logdet + r * (1.0 + math.log(2 * math.pi)))
    model = GPModel(
        X=X,
        q=q,
        beta=q_mean + q_std * beta,
        sigma2=sigma2 * q_std**2,
        w=np.asarray(best.x, dtype=float),
        nugget=nugget,
        alpha=a * q_std,
        log_likelihood=float(loglik),
        loo_rmse=float(np.sqrt(np.mean(loo**2))),
    )
    log.debug("gp fit: w=%s loo_rmse=%.3e", model.w, model.loo_rmse)
    return model
