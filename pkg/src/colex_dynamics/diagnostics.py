"""Convergence diagnostics on ``(n_chains, n_draws)`` arrays.

Rank-normalized split R-hat and bulk effective sample size.
"""

from __future__ import annotations

import numpy as np
from scipy import stats

# Chains with a larger split R-hat count as not converged.
RHAT_LIMIT = 1.05


def _split_chains(ary: np.ndarray) -> np.ndarray:
    ary = np.atleast_2d(np.asarray(ary, dtype=float))
    half = ary.shape[1] // 2
    return np.vstack((ary[:, :half], ary[:, -half:]))


def _z_scale(ary: np.ndarray) -> np.ndarray:
    rank = stats.rankdata(ary, method="average").reshape(ary.shape)
    return stats.norm.ppf((rank - 0.5) / ary.size)


def _rhat(ary: np.ndarray) -> float:
    _, n = ary.shape
    chain_mean = ary.mean(axis=1)
    within = np.mean(np.var(ary, axis=1, ddof=1))
    between = n * np.var(chain_mean, ddof=1)
    if within == 0:
        return 1.0 if between == 0 else np.inf
    return float(np.sqrt(((n - 1) / n * within + between / n) / within))


def split_rhat(ary: np.ndarray) -> float:
    """Maximum of bulk and folded rank-normalized split R-hat."""
    ary = np.atleast_2d(np.asarray(ary, dtype=float))
    if ary.shape[1] < 4 or not np.isfinite(ary).all():
        return float("nan")
    bulk = _rhat(_z_scale(_split_chains(ary)))
    folded = np.abs(ary - np.median(ary))
    tail = _rhat(_z_scale(_split_chains(folded)))
    return max(bulk, tail)


def _autocov(x: np.ndarray) -> np.ndarray:
    n = len(x)
    centered = x - x.mean()
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    spectrum = np.fft.rfft(centered, size)
    acov = np.fft.irfft(spectrum * np.conjugate(spectrum), size)[:n]
    return acov / n


def _ess(ary: np.ndarray) -> float:
    n_chain, n_draw = ary.shape
    acov = np.asarray([_autocov(chain) for chain in ary])
    chain_mean = ary.mean(axis=1)
    mean_var = np.mean(acov[:, 0]) * n_draw / (n_draw - 1.0)
    var_plus = mean_var * (n_draw - 1.0) / n_draw
    if n_chain > 1:
        var_plus += np.var(chain_mean, ddof=1)
    if var_plus <= 0:
        return float(n_chain * n_draw)

    rho = np.zeros(n_draw)
    rho_even = 1.0
    rho[0] = rho_even
    rho_odd = 1.0 - (mean_var - np.mean(acov[:, 1])) / var_plus
    rho[1] = rho_odd

    # Geyer's initial positive sequence
    t = 1
    while t < n_draw - 2 and (rho_even + rho_odd) >= 0.0:
        rho_even = 1.0 - (mean_var - np.mean(acov[:, t + 1])) / var_plus
        rho_odd = 1.0 - (mean_var - np.mean(acov[:, t + 2])) / var_plus
        rho[t + 1] = rho_even
        if rho_even + rho_odd >= 0:
            rho[t + 2] = rho_odd
        t += 2
    max_t = t

    # Geyer's initial monotone sequence
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2

    tau = -1.0 + 2.0 * np.sum(rho[:max_t]) + np.sum(rho[max_t + 1 : max_t + 2])
    tau = max(tau, 1.0 / np.log10(n_chain * n_draw))
    return float(n_chain * n_draw / tau)


def ess_bulk(ary: np.ndarray) -> float:
    ary = np.atleast_2d(np.asarray(ary, dtype=float))
    if ary.shape[1] < 4 or not np.isfinite(ary).all():
        return float("nan")
    return _ess(_z_scale(_split_chains(ary)))


def equal_tailed_interval(values: np.ndarray, prob: float = 0.95) -> tuple[float, float]:
    tail = (1.0 - prob) / 2.0
    low, high = np.quantile(np.asarray(values, dtype=float), [tail, 1.0 - tail])
    return float(low), float(high)
