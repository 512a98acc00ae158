"""Pure-numpy backend for the per-AP data-factor sweep.

`cfep.kernels` prefers the compiled Cython backend and falls back to this
module; both implement the identical contract documented on
`data_factor_sweep`.
"""

from __future__ import annotations

import numpy as np

_LN_PI = float(np.log(np.pi))


def _logsumexp(a: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def _safe_cholesky(mats: np.ndarray, rel_jitter: float) -> np.ndarray:
    """Batched Cholesky with one diagonal-jitter retry (then raises)."""
    try:
        return np.linalg.cholesky(mats)
    except np.linalg.LinAlgError:
        pass
    mats = mats.copy()
    n = mats.shape[-1]
    jitter = rel_jitter * np.einsum("...ii->...", mats).real / n
    idx = np.arange(n)
    mats[..., idx, idx] += jitter[..., None]
    return np.linalg.cholesky(mats)


def data_factor_sweep(
    y: np.ndarray,
    ext_h_prec: np.ndarray,
    ext_h_pm: np.ndarray,
    log_ext_x: np.ndarray,
    points: np.ndarray,
    sigma_v2: float,
    prec_floor: float,
    rel_jitter: float,
    per_symbol_cov: bool,
):
    """One data-factor sweep for a single AP: all users, all slots.

    For every (user k, slot t): form the Gaussian summary of the other
    users' symbol-times-channel interference, evaluate the symbol likelihood
    message over the constellation, condition the channel on each candidate
    symbol, moment-match the resulting mixture onto a diagonal Gaussian and
    divide out the channel extrinsic.

    Parameters
    ----------
    y            : (T, N) complex receive vectors.
    ext_h_prec   : (K, T, N) channel-extrinsic precisions, strictly > 0.
    ext_h_pm     : (K, T, N) channel-extrinsic precision*mean.
    log_ext_x    : (K, T, S) normalized log pmfs of the symbol extrinsics.
    points       : (S,) constellation, no zero point.
    sigma_v2     : per-antenna noise variance.
    prec_floor   : clamp floor for divided message precisions.
    rel_jitter   : relative diagonal jitter retry for covariance factorization.
    per_symbol_cov : evaluate one covariance per symbol even when |s|^2 is
                   constant over the constellation (forces the general path).

    Returns
    -------
    (log_msg_x (K,T,S), msg_h_prec (K,T,N), msg_h_pm (K,T,N), clamp_count)
    """
    y = np.asarray(y, dtype=complex)
    ext_h_prec = np.asarray(ext_h_prec, dtype=float)
    ext_h_pm = np.asarray(ext_h_pm, dtype=complex)
    log_ext_x = np.asarray(log_ext_x, dtype=float)
    points = np.asarray(points, dtype=complex)
    K, T, N = ext_h_prec.shape
    S = points.shape[0]

    abs2 = np.abs(points) ** 2
    shared = (not per_symbol_cov) and (np.ptp(abs2) <= 1e-12 * abs2.max())

    p_x = np.exp(log_ext_x)                       # (K,T,S)
    m_x = p_x @ points                            # (K,T)
    r_x = p_x @ abs2                              # (K,T)
    tau_x = np.maximum(r_x - np.abs(m_x) ** 2, 0.0)

    var_h = 1.0 / ext_h_prec                      # (K,T,N)
    m_h = ext_h_pm * var_h                        # (K,T,N)

    # interference moments, direct leave-one-out summation per user
    mean_terms = m_x[..., None] * m_h             # (K,T,N)
    diag_terms = r_x[..., None] * var_h           # (K,T,N)
    outer_terms = tau_x[..., None, None] * (
        m_h[..., :, None] * m_h[..., None, :].conj()
    )                                             # (K,T,N,N)
    m_z = np.empty_like(m_h)
    d_z = np.empty_like(var_h)
    b_z = np.empty_like(outer_terms)
    for k in range(K):
        others = np.arange(K) != k
        m_z[k] = mean_terms[others].sum(axis=0)
        d_z[k] = diag_terms[others].sum(axis=0)
        b_z[k] = outer_terms[others].sum(axis=0)

    idx = np.arange(N)
    sig_base = b_z.copy()                         # C_v + C_z, (K,T,N,N)
    sig_base[..., idx, idx] += d_z + sigma_v2

    chol_base = _safe_cholesky(sig_base, rel_jitter)
    base_inv = np.linalg.inv(sig_base)            # (K,T,N,N)
    resid0 = y[None, :, :] - m_z                  # (K,T,N)
    u = np.einsum("ktnm,ktm->ktn", base_inv, resid0)

    resid_s = resid0[..., None, :] - points[:, None] * m_h[..., None, :]  # (K,T,S,N)

    if shared:
        a2 = float(abs2[0])
        sig_lik = sig_base.copy()
        sig_lik[..., idx, idx] += a2 * var_h
        chol = _safe_cholesky(sig_lik, rel_jitter)
        lik_inv = np.linalg.inv(sig_lik)
        logdet = 2.0 * np.log(np.einsum("...ii->...i", chol).real).sum(axis=-1)
        quad = np.einsum(
            "ktsn,ktnm,ktsm->kts", resid_s.conj(), lik_inv, resid_s
        ).real
        loglik = -quad - (N * _LN_PI + logdet)[..., None]
    else:
        sig_lik = np.broadcast_to(
            sig_base[:, :, None], (K, T, S, N, N)
        ).copy()
        sig_lik[..., idx, idx] += abs2[:, None] * var_h[:, :, None, :]
        chol = _safe_cholesky(sig_lik, rel_jitter)
        lik_inv = np.linalg.inv(sig_lik)
        logdet = 2.0 * np.log(np.einsum("...ii->...i", chol).real).sum(axis=-1)
        quad = np.einsum(
            "ktsn,ktsnm,ktsm->kts", resid_s.conj(), lik_inv, resid_s
        ).real
        loglik = -quad - (N * _LN_PI + logdet)

    log_msg_x = loglik - _logsumexp(loglik, axis=-1, keepdims=True)

    log_w = log_msg_x + log_ext_x
    w = np.exp(log_w - _logsumexp(log_w, axis=-1, keepdims=True))  # (K,T,S)

    # conditional channel statistics per candidate symbol
    rhs = ext_h_pm[:, :, None, :] + points.conj()[:, None] * u[:, :, None, :]
    if shared:
        prec_cond = a2 * base_inv.copy()
        prec_cond[..., idx, idx] += ext_h_prec
        cov_cond = np.linalg.inv(prec_cond)       # (K,T,N,N)
        diag_cond = np.einsum("...ii->...i", cov_cond).real[:, :, None, :]
        m_cond = np.einsum("ktnm,ktsm->ktsn", cov_cond, rhs)
    else:
        prec_cond = abs2[:, None, None] * base_inv[:, :, None]
        prec_cond = prec_cond.copy()
        prec_cond[..., idx, idx] += ext_h_prec[:, :, None, :]
        cov_cond = np.linalg.inv(prec_cond)
        diag_cond = np.einsum("...ii->...i", cov_cond).real
        m_cond = np.einsum("ktsnm,ktsm->ktsn", cov_cond, rhs)

    m_mix = np.einsum("kts,ktsn->ktn", w, m_cond)
    second = np.einsum("kts,ktsn->ktn", w, diag_cond + np.abs(m_cond) ** 2)
    var_mix = np.maximum(second - np.abs(m_mix) ** 2, 1e-300)

    proj_prec = 1.0 / var_mix
    proj_pm = m_mix / var_mix
    msg_prec = proj_prec - ext_h_prec
    msg_pm = proj_pm - ext_h_pm

    low = msg_prec < prec_floor
    clamp_count = int(low.sum())
    if clamp_count:
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.where(msg_prec != 0, msg_pm / msg_prec, m_mix)
        msg_prec = np.where(low, prec_floor, msg_prec)
        msg_pm = np.where(low, prec_floor * mean, msg_pm)

    return log_msg_x, msg_prec, msg_pm, clamp_count
