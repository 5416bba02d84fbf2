"""Ordered probit of block-position buckets on transaction characteristics.

P(bucket = j | x) = Phi(k_j - x'b) - Phi(k_{j-1} - x'b), with k_0 = -inf and k_J = +inf.
Negative coefficients move a transaction towards the front of the block.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import norm

from config import ProbitSettings
from errors import DomainError, InputError
from position_builder import DesignMatrix

logger = logging.getLogger(__name__)

_ROUNDING = 8 * np.finfo(float).eps  # summation noise of the log-likelihood near the optimum


@dataclass
class ProbitFit:
    names: Tuple[str, ...]
    beta: np.ndarray
    cutpoints: np.ndarray
    covariance: np.ndarray
    log_likelihood: float
    n_obs: int
    converged: bool
    iterations: int
    gradient_norm: float = float("nan")
    clamped_rows: int = 0
    dropped_columns: Tuple[str, ...] = ()
    separated: Tuple[str, ...] = ()  # regressors whose likelihood keeps rising towards an infinite coefficient

    @property
    def buckets(self) -> int:
        return len(self.cutpoints) + 1

    @property
    def param_names(self) -> List[str]:
        return list(self.names) + [f"cut{i}" for i in range(1, len(self.cutpoints) + 1)]

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.beta, self.cutpoints])

    def coef(self, name: str) -> float:
        return float(self.beta[self.names.index(name)])


def _check_cutpoints(cutpoints) -> np.ndarray:
    cuts = np.asarray(cutpoints, dtype=float)
    if cuts.ndim != 1 or cuts.size == 0 or not np.all(np.isfinite(cuts)) or np.any(np.diff(cuts) <= 0):
        raise DomainError(f"cutpoints must be finite and strictly increasing, got {cuts.tolist()}")
    return cuts


def _bounds(beta, cuts, X, y) -> Tuple[np.ndarray, np.ndarray]:
    index = np.asarray(X, dtype=float) @ np.asarray(beta, dtype=float)
    edges = np.concatenate(([-np.inf], cuts, [np.inf]))
    y = np.asarray(y, dtype=int)
    return edges[y] - index, edges[y - 1] - index


def _cell_probability(upper: np.ndarray, lower: np.ndarray) -> np.ndarray:
    # survival differences keep precision when the whole cell sits in the upper tail
    with np.errstate(invalid="ignore"):
        return np.where(lower > 0, norm.sf(lower) - norm.sf(upper), norm.cdf(upper) - norm.cdf(lower))


def cell_probabilities(beta, cutpoints, X) -> np.ndarray:
    """(n, J) matrix of category probabilities; rows telescope to exactly 1"""
    cuts = _check_cutpoints(cutpoints)
    index = np.asarray(X, dtype=float) @ np.asarray(beta, dtype=float)
    cdf = norm.cdf(cuts[None, :] - index[:, None])
    n = cdf.shape[0]
    cdf = np.hstack([np.zeros((n, 1)), cdf, np.ones((n, 1))])
    return np.diff(cdf, axis=1)


def _loglik(beta, cuts, X, y, floor: float) -> Tuple[float, int]:
    upper, lower = _bounds(beta, cuts, X, y)
    p = _cell_probability(upper, lower)
    clamped = int(np.count_nonzero(p < floor))
    return float(np.sum(np.log(np.maximum(p, floor)))), clamped


def log_likelihood(beta, cutpoints, data: DesignMatrix, floor: float = 1e-300) -> float:
    cuts = _check_cutpoints(cutpoints)
    value, clamped = _loglik(beta, cuts, data.X, data.y, floor)
    if clamped:
        logger.warning("Clamped %d zero-probability cells at %g", clamped, floor)
    return value


def score_and_information(beta, cutpoints, data: DesignMatrix, floor: float = 1e-300) -> Tuple[np.ndarray, np.ndarray]:
    """Analytic gradient and observed information (minus Hessian) over (beta, cutpoints)"""
    cuts = _check_cutpoints(cutpoints)
    X = np.asarray(data.X, dtype=float)
    y = np.asarray(data.y, dtype=int)
    k, m = X.shape[1], cuts.size

    upper, lower = _bounds(beta, cuts, X, y)
    p = np.maximum(_cell_probability(upper, lower), floor)
    phi_u, phi_l = norm.pdf(upper), norm.pdf(lower)
    with np.errstate(invalid="ignore"):
        u_phi_u = np.where(np.isfinite(upper), upper * phi_u, 0.0)
        l_phi_l = np.where(np.isfinite(lower), lower * phi_l, 0.0)

    a = phi_u / p
    b = phi_l / p
    d = a - b
    has_upper = y <= m
    has_lower = y >= 2
    up_idx = y - 1  # cutpoint index bounding the cell from above
    lo_idx = y - 2

    grad = np.zeros(k + m)
    grad[:k] = -X.T @ d
    grad[k:] += np.bincount(up_idx[has_upper], weights=a[has_upper], minlength=m)
    grad[k:] -= np.bincount(lo_idx[has_lower], weights=b[has_lower], minlength=m)

    h_ss = -(u_phi_u - l_phi_l) / p - d * d
    h_s_up = u_phi_u / p + a * d
    h_s_lo = -l_phi_l / p - b * d
    h_up_up = -u_phi_u / p - a * a
    h_lo_lo = l_phi_l / p - b * b
    h_up_lo = a * b

    hess = np.zeros((k + m, k + m))
    hess[:k, :k] = X.T @ (h_ss[:, None] * X)
    for c in range(m):
        w = np.where(has_upper & (up_idx == c), h_s_up, 0.0) + np.where(has_lower & (lo_idx == c), h_s_lo, 0.0)
        col = X.T @ w
        hess[:k, k + c] = col
        hess[k + c, :k] = col
        hess[k + c, k + c] = (
            h_up_up[has_upper & (up_idx == c)].sum() + h_lo_lo[has_lower & (lo_idx == c)].sum()
        )
        if c > 0:
            both = has_upper & has_lower & (up_idx == c)
            off = h_up_lo[both].sum()
            hess[k + c, k + c - 1] = off
            hess[k + c - 1, k + c] = off
    return grad, -hess


def _to_natural(theta: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    beta = theta[:k]
    raw = theta[k:]
    cuts = raw[0] + np.concatenate(([0.0], np.cumsum(np.exp(raw[1:]))))
    return beta, cuts


def _to_reparam(beta: np.ndarray, cuts: np.ndarray) -> np.ndarray:
    return np.concatenate([beta, [cuts[0]], np.log(np.diff(cuts))])


def _jacobian(theta: np.ndarray, k: int) -> np.ndarray:
    """d(beta, cutpoints) / d(beta, k1, log-gaps)"""
    m = theta.size - k
    J = np.eye(k + m)
    gaps = np.exp(theta[k + 1:])
    cut_block = np.zeros((m, m))
    cut_block[:, 0] = 1.0
    for i in range(1, m):
        cut_block[i, 1:i + 1] = gaps[:i]
    J[k:, k:] = cut_block
    return J


def _reparam_derivatives(theta, k, data, floor):
    beta, cuts = _to_natural(theta, k)
    grad, info = score_and_information(beta, cuts, data, floor)
    J = _jacobian(theta, k)
    g_r = J.T @ grad
    hess_r = J.T @ (-info) @ J
    m = theta.size - k
    gaps = np.exp(theta[k + 1:])
    g_cuts = grad[k:]
    for l in range(1, m):
        # second derivative of every cut above the gap with respect to its log-gap
        hess_r[k + l, k + l] += gaps[l - 1] * g_cuts[l:].sum()
    return grad, g_r, hess_r


def _newton_direction(g: np.ndarray, hess: np.ndarray) -> np.ndarray:
    info = -hess
    try:
        np.linalg.cholesky(info)
        return np.linalg.solve(info, g)
    except np.linalg.LinAlgError:
        # shift the spectrum until the step is an ascent direction
        eigmin = np.linalg.eigvalsh((info + info.T) / 2).min()
        shift = abs(eigmin) + 1e-6 * max(1.0, np.abs(info).max())
        return np.linalg.solve(info + shift * np.eye(info.shape[0]), g)


def _start_values(data: DesignMatrix, buckets: int) -> Tuple[np.ndarray, np.ndarray]:
    shares = np.bincount(data.y, minlength=buckets + 1)[1:] / data.n_obs
    cuts = norm.ppf(np.clip(np.cumsum(shares)[:-1], 1e-12, 1 - 1e-12))
    # tiny categories can collapse two quantiles; keep them strictly ordered
    for i in range(1, cuts.size):
        if cuts[i] <= cuts[i - 1]:
            cuts[i] = cuts[i - 1] + 1e-6
    return np.zeros(data.X.shape[1]), cuts


def separated_columns(data: DesignMatrix) -> List[str]:
    """0/1 regressors with one level confined to the lowest or the highest bucket"""
    out = []
    for j, name in enumerate(data.names):
        col = data.X[:, j]
        if not np.all((col == 0) | (col == 1)):
            continue
        for level in (0, 1):
            ys = data.y[col == level]
            if ys.size and (np.all(ys == 1) or np.all(ys == data.buckets)):
                out.append(name)
                break
    return out


def fit_ordered_probit(data: DesignMatrix, config: Optional[ProbitSettings] = None) -> ProbitFit:
    """Newton maximum likelihood with step-halving; covariance is the inverse information"""
    config = config or ProbitSettings()
    buckets = data.buckets
    if data.n_obs == 0:
        raise InputError("Cannot fit an ordered probit on zero observations")
    counts = np.bincount(data.y, minlength=buckets + 1)[1:]
    if counts.size != buckets or np.any(counts == 0):
        raise InputError(f"Every bucket needs at least one observation, got counts {counts.tolist()}")
    constant = data.constant_columns()
    if constant:
        raise InputError(f"Regressors constant within sample: {', '.join(constant)}")

    separated = separated_columns(data)
    if separated:
        logger.warning("Separated regressors, coefficients not identified: %s", ", ".join(separated))

    k = data.X.shape[1]
    beta, cuts = _start_values(data, buckets)
    theta = _to_reparam(beta, cuts)
    floor = config.probability_floor
    ll, _ = _loglik(beta, cuts, data.X, data.y, floor)
    converged = False
    iterations = 0
    grad_norm = float("inf")

    for iterations in range(1, config.max_iterations + 1):
        grad, g_r, hess_r = _reparam_derivatives(theta, k, data, floor)
        grad_norm = float(np.max(np.abs(grad)))
        if grad_norm < config.tolerance:
            converged = True
            break
        step = _newton_direction(g_r, hess_r)
        t = 1.0
        accepted = False
        for _ in range(config.max_halvings + 1):
            candidate = theta + t * step
            b_new, c_new = _to_natural(candidate, k)
            ll_new, _ = _loglik(b_new, c_new, data.X, data.y, floor)
            if np.isfinite(ll_new) and ll_new >= ll - _ROUNDING * abs(ll):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            logger.warning("Line search stalled at iteration %d (gradient %.3g)", iterations, grad_norm)
            break
        theta, ll = candidate, ll_new
    else:
        grad, _, _ = _reparam_derivatives(theta, k, data, floor)
        grad_norm = float(np.max(np.abs(grad)))
        converged = grad_norm < config.tolerance

    beta, cuts = _to_natural(theta, k)
    _, g_r, hess_r = _reparam_derivatives(theta, k, data, floor)
    J = _jacobian(theta, k)
    try:
        cov_r = np.linalg.inv(-hess_r)
    except np.linalg.LinAlgError:
        cov_r = np.linalg.pinv(-hess_r)
        converged = False
    covariance = J @ cov_r @ J.T
    covariance = (covariance + covariance.T) / 2
    se = np.sqrt(np.clip(np.diag(covariance)[:k], 0.0, None))
    for name, s in zip(data.names, se):
        if (not np.isfinite(s) or s > config.max_standard_error) and name not in separated:
            logger.warning("Standard error of %s is %.3g; treating it as separated", name, s)
            separated.append(name)
    if separated:
        converged = False

    _, clamped = _loglik(beta, cuts, data.X, data.y, floor)
    if clamped:
        logger.warning("Fit touched the probability floor on %d rows", clamped)
    if not converged:
        logger.warning("Ordered probit did not converge after %d iterations (gradient %.3g)", iterations, grad_norm)

    return ProbitFit(
        names=tuple(data.names),
        beta=beta,
        cutpoints=cuts,
        covariance=covariance,
        log_likelihood=ll,
        n_obs=data.n_obs,
        converged=converged,
        iterations=iterations,
        gradient_norm=grad_norm,
        clamped_rows=clamped,
        separated=tuple(separated),
    )


def fit_design(data: DesignMatrix, config: Optional[ProbitSettings] = None) -> ProbitFit:
    """fit_ordered_probit after dropping regressors that are constant in this sample"""
    config = config or ProbitSettings()
    dropped = tuple(data.constant_columns()) if config.drop_constant_columns else ()
    if dropped:
        logger.warning("Dropping constant regressors: %s", ", ".join(dropped))
        data = data.drop(dropped)
    fit = fit_ordered_probit(data, config)
    fit.dropped_columns = dropped
    return fit


def significance_stars(p: float) -> str:
    if not np.isfinite(p):
        return ""
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.1:
        return "*"
    return ""


def coefficient_table(names: Sequence[str], coef, se) -> pd.DataFrame:
    coef = np.asarray(coef, dtype=float)
    se = np.asarray(se, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, coef / se, np.nan)
    p = np.where(np.isfinite(z), 2 * norm.sf(np.abs(z)), np.nan)
    frame = pd.DataFrame({"coef": coef, "se": se, "z": z, "p": p}, index=list(names))
    frame["stars"] = [significance_stars(v) for v in frame["p"]]
    frame.index.name = "variable"
    return frame


def standard_errors(fit: ProbitFit) -> pd.DataFrame:
    """coef / SE / z / two-sided p / stars for every coefficient and cutpoint"""
    se = np.sqrt(np.clip(np.diag(fit.covariance), 0.0, None))
    return coefficient_table(fit.param_names, fit.params, se)
