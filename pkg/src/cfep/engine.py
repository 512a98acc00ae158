"""Per-AP factor-graph computation.

Each access point runs a local bilinear inference step on its own
observations: a pilot factor per contamination group (a conditionally
unbiased LMMSE channel message), a data factor per slot (symbol likelihood
message and channel-mixture projection under a Gaussian interference
summary), and the extrinsic/belief bookkeeping connecting them. Channel
messages are diagonal complex Gaussians in natural parameters; symbol
messages are categorical pmfs kept in the log domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cfep import kernels
from cfep.gaussian import (
    LOG_FLOOR,
    Categorical,
    DiagGaussian,
    FullGaussian,
    complex_gaussian_logpdf,
    gaussian_divide,
    log_normalize,
    project_mixture_diag,
    regularize_cov,
    ClampStats,
)
from cfep.scenario import PilotBook

__all__ = [
    "EngineOptions",
    "APWorkspace",
    "build_workspace",
    "preprocess_pilots",
    "interference_moments",
    "symbol_message",
    "conditional_channel_stats",
    "channel_message",
    "pilot_extrinsic",
    "pilot_factor_message",
    "update_extrinsics",
    "channel_belief",
    "channel_estimate",
    "ap_iterate",
]


@dataclass
class EngineOptions:
    """Runtime switches for the factor updates."""

    mode: str = "simplified"      # extrinsics: "simplified" (beliefs) | "exact" (leave-one-out)
    damping: float = 1.0          # convex damping of new channel-message natural params
    prec_floor: float = 1e-8      # clamp floor for divided message precisions
    rel_jitter: float = 1e-12     # covariance regularization scale
    per_symbol_cov: bool = False  # disable the constant-modulus shared-covariance path

    def __post_init__(self):
        if self.mode not in ("simplified", "exact"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must be in (0, 1]")
        if self.prec_floor <= 0:
            raise ValueError("prec_floor must be positive")


@dataclass
class APWorkspace:
    """Full message store of one access point.

    Message arrays are indexed (user k, slot t, antenna n) or
    (user k, slot t, symbol s); pilot-factor messages are per user only.
    `log_bx` holds the decentralized symbol beliefs refreshed by the
    scheduler before each sweep.
    """

    index: int
    y_pilot: np.ndarray        # (G, N) despread pilot observations
    y_data: np.ndarray         # (T, N)
    link_var: np.ndarray       # (K,) prior channel variance per user
    groups: list               # user index arrays per pilot group
    group_of: np.ndarray       # (K,)
    points: np.ndarray         # (S,)
    log_prior: np.ndarray      # (S,)
    sigma_x2: float
    sigma_v2: float
    pilot_len: int
    # factor-to-variable messages
    msg2h_prec: np.ndarray = field(default=None, repr=False)  # (K,T,N)
    msg2h_pm: np.ndarray = field(default=None, repr=False)    # (K,T,N)
    msg3h_prec: np.ndarray = field(default=None, repr=False)  # (K,N)
    msg3h_pm: np.ndarray = field(default=None, repr=False)    # (K,N)
    log_msg2x: np.ndarray = field(default=None, repr=False)   # (K,T,S)
    # variable-to-factor extrinsics (refreshed every sweep)
    ext_h_prec: np.ndarray = field(default=None, repr=False)  # (K,T,N)
    ext_h_pm: np.ndarray = field(default=None, repr=False)    # (K,T,N)
    log_ext_x: np.ndarray = field(default=None, repr=False)   # (K,T,S)
    ext3_prec: np.ndarray = field(default=None, repr=False)   # (K,N)
    ext3_pm: np.ndarray = field(default=None, repr=False)     # (K,N)
    # decentralized symbol beliefs (set by the consensus scheduler)
    log_bx: np.ndarray = field(default=None, repr=False)      # (K,T,S)
    genie_idx: np.ndarray | None = None                       # (K,T) true symbol indices
    clamp_count: int = 0

    @property
    def num_users(self) -> int:
        return self.link_var.shape[0]

    @property
    def num_slots(self) -> int:
        return self.y_data.shape[0]

    @property
    def num_antennas(self) -> int:
        return self.y_data.shape[1]

    @property
    def constant_modulus(self) -> bool:
        a2 = np.abs(self.points) ** 2
        return bool(np.ptp(a2) <= 1e-12 * a2.max())


def preprocess_pilots(yp: np.ndarray, book: PilotBook) -> np.ndarray:
    """Despread one AP's pilot block against every pilot sequence.

    yp is (N, P); returns (G, N) equivalent observations, one per group:
    y_g = Yp conj(seq_g), which collapses to P*sigma_x^2 * sum of the
    group's channels plus noise of variance P*sigma_x^2*sigma_v^2 per
    component.
    """
    return book.sequences.conj() @ yp.T.astype(complex)


def build_workspace(
    index: int,
    yp: np.ndarray,
    y: np.ndarray,
    link_var: np.ndarray,
    book: PilotBook,
    points: np.ndarray,
    prior_pmf: np.ndarray,
    sigma_v2: float,
    genie_symbols: np.ndarray | None = None,
) -> APWorkspace:
    """Assemble and initialize one AP's workspace from its received blocks."""
    points = np.asarray(points, dtype=complex)
    if np.any(np.abs(points) == 0):
        raise ValueError("constellation must not contain the zero symbol")
    ws = APWorkspace(
        index=index,
        y_pilot=preprocess_pilots(yp, book),
        y_data=np.ascontiguousarray(y.T),
        link_var=np.asarray(link_var, dtype=float),
        groups=book.groups(),
        group_of=book.assignment.copy(),
        points=points,
        log_prior=np.log(np.asarray(prior_pmf, dtype=float)),
        sigma_x2=book.symbol_power,
        sigma_v2=float(sigma_v2),
        pilot_len=book.pilot_len,
    )
    if genie_symbols is not None:
        ws.genie_idx = np.argmin(
            np.abs(genie_symbols[..., None] - points[None, None, :]), axis=-1
        )
    _init_messages(ws)
    return ws


def _init_messages(ws: APWorkspace):
    """Warm start: uniform symbol messages, non-informative data-factor
    channel messages, and pilot-factor messages evaluated with the prior as
    each interferer's hypothetical posterior (contaminated pilot LMMSE)."""
    K, T, N = ws.num_users, ws.num_slots, ws.num_antennas
    S = ws.points.shape[0]
    ws.msg2h_prec = np.zeros((K, T, N))
    ws.msg2h_pm = np.zeros((K, T, N), dtype=complex)
    ws.log_msg2x = np.full((K, T, S), -np.log(S))
    ws.ext3_prec = np.zeros((K, N))
    ws.ext3_pm = np.zeros((K, N), dtype=complex)
    ws.msg3h_prec = np.empty((K, N))
    ws.msg3h_pm = np.empty((K, N), dtype=complex)
    _pilot_factor_sweep(ws, damping=1.0)
    ws.log_bx = np.broadcast_to(ws.log_prior, (K, T, S)).copy()
    if ws.genie_idx is not None:
        _clamp_genie(ws)


def _clamp_genie(ws: APWorkspace):
    log = np.full_like(ws.log_msg2x, LOG_FLOOR)
    k_idx, t_idx = np.meshgrid(
        np.arange(ws.num_users), np.arange(ws.num_slots), indexing="ij"
    )
    log[k_idx, t_idx, ws.genie_idx] = 0.0
    ws.log_msg2x = log


# ---------------------------------------------------------------------------
# reference (per-entry) operations; the kernel sweep fuses these


def interference_moments(ws: APWorkspace, k: int, t: int):
    """Mean and covariance of the other users' symbol-times-channel sum.

    Exact first/second moments of sum_{i != k} x_it h_li under independent
    symbol and channel extrinsics; the covariance is the diagonal
    accumulation of the channel covariances plus rank-one outer products
    from the symbol variances.
    """
    N = ws.num_antennas
    m_z = np.zeros(N, dtype=complex)
    c_z = np.zeros((N, N), dtype=complex)
    p = np.exp(ws.log_ext_x)
    abs2 = np.abs(ws.points) ** 2
    for i in range(ws.num_users):
        if i == k:
            continue
        m_x = p[i, t] @ ws.points
        r_x = p[i, t] @ abs2
        tau_x = max(r_x - abs(m_x) ** 2, 0.0)
        var_i = 1.0 / ws.ext_h_prec[i, t]
        m_i = ws.ext_h_pm[i, t] * var_i
        m_z += m_x * m_i
        c_z += np.diag(r_x * var_i) + tau_x * np.outer(m_i, m_i.conj())
    return m_z, c_z


def symbol_message(ws: APWorkspace, k: int, t: int, opts: EngineOptions | None = None) -> Categorical:
    """Likelihood message from the data factor to symbol (k, t).

    pmf[s] is proportional to the Gaussian density of the residual
    y_t - m_z - s*m_h under covariance C_v + C_z + |s|^2 C_h, normalized
    over the constellation.
    """
    opts = opts or EngineOptions()
    m_z, c_z = interference_moments(ws, k, t)
    var_h = 1.0 / ws.ext_h_prec[k, t]
    m_h = ws.ext_h_pm[k, t] * var_h
    base = c_z + ws.sigma_v2 * np.eye(ws.num_antennas)
    logp = np.array(
        [
            complex_gaussian_logpdf(
                ws.y_data[t],
                m_z + s * m_h,
                base + np.diag(abs(s) ** 2 * var_h),
                opts.rel_jitter,
            )
            for s in ws.points
        ]
    )
    return Categorical(ws.points, np.exp(log_normalize(logp)))


def conditional_channel_stats(
    ws: APWorkspace, k: int, t: int, s: complex, opts: EngineOptions | None = None
) -> FullGaussian:
    """Posterior of channel (k) at slot t given symbol value s.

    Combines the channel extrinsic with the observation whitened by the
    noise-plus-interference covariance C_v + C_z.
    """
    if abs(s) == 0:
        raise ValueError("conditioning symbol must be nonzero")
    opts = opts or EngineOptions()
    m_z, c_z = interference_moments(ws, k, t)
    base = regularize_cov(
        c_z + ws.sigma_v2 * np.eye(ws.num_antennas), opts.rel_jitter
    )
    base_inv = np.linalg.inv(base)
    prec = abs(s) ** 2 * base_inv + np.diag(ws.ext_h_prec[k, t])
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.conj().T)
    rhs = ws.ext_h_pm[k, t] + np.conj(s) * (base_inv @ (ws.y_data[t] - m_z))
    return FullGaussian(cov @ rhs, cov)


def channel_message(
    ws: APWorkspace, k: int, t: int, opts: EngineOptions | None = None,
    stats: ClampStats | None = None,
) -> DiagGaussian:
    """Message from the data factor to channel (k, t).

    Mixture of symbol-conditional channel posteriors weighted by the local
    symbol belief, moment-matched to a diagonal Gaussian, divided by the
    channel extrinsic.
    """
    opts = opts or EngineOptions()
    lik = symbol_message(ws, k, t, opts).pmf
    log_w = np.log(np.maximum(lik, 1e-300)) + ws.log_ext_x[k, t]
    w = np.exp(log_normalize(log_w))
    comps = [conditional_channel_stats(ws, k, t, s, opts) for s in ws.points]
    proj = project_mixture_diag(
        w, np.array([c.mean for c in comps]), np.array([c.cov for c in comps])
    )
    ext = DiagGaussian(ws.ext_h_prec[k, t], ws.ext_h_pm[k, t])
    return gaussian_divide(proj, ext, opts.prec_floor, stats)


def pilot_extrinsic(ws: APWorkspace, k: int) -> DiagGaussian:
    """Extrinsic toward the pilot factor: product of all data-factor
    channel messages for user k."""
    return DiagGaussian(ws.msg2h_prec[k].sum(axis=0), ws.msg2h_pm[k].sum(axis=0))


def pilot_factor_message(ws: APWorkspace, g: int, k: int) -> DiagGaussian:
    """Message from pilot factor g to channel k (k must be in group g).

    Interferers in the group enter through their hypothetical posteriors
    (prior times pilot extrinsic); the result is the Bayesian estimate of
    h_k from the despread pilot observation with those interferers
    subtracted in the mean and added to the effective noise. All matrices
    involved are diagonal, so the arithmetic is componentwise.
    """
    members = ws.groups[g]
    if k not in members:
        raise ValueError(f"user {k} is not in pilot group {g}")
    gain = ws.sigma_x2 * ws.pilot_len
    noise = ws.sigma_v2 / gain
    obs = ws.y_pilot[g] / gain
    r = np.full(ws.num_antennas, noise)
    for i in members:
        if i == k:
            continue
        q_prec = ws.ext3_prec[i] + 1.0 / ws.link_var[i]
        r += 1.0 / q_prec
        obs = obs - ws.ext3_pm[i] / q_prec
    prec = 1.0 / ws.link_var[k] + 1.0 / r
    return DiagGaussian(prec, obs / r)


def _pilot_factor_sweep(ws: APWorkspace, damping: float):
    """Vectorized pilot-factor messages for all users (one AP)."""
    gain = ws.sigma_x2 * ws.pilot_len
    noise = ws.sigma_v2 / gain
    q_prec = ws.ext3_prec + (1.0 / ws.link_var)[:, None]   # (K,N)
    q_var = 1.0 / q_prec
    q_mean = ws.ext3_pm * q_var
    for g, members in enumerate(ws.groups):
        if len(members) == 0:
            continue
        var_sum = q_var[members].sum(axis=0)
        mean_sum = q_mean[members].sum(axis=0)
        obs0 = ws.y_pilot[g] / gain
        for k in members:
            r = noise + (var_sum - q_var[k])
            obs = obs0 - (mean_sum - q_mean[k])
            prec_new = 1.0 / ws.link_var[k] + 1.0 / r
            pm_new = obs / r
            if damping < 1.0:
                prec_new = damping * prec_new + (1.0 - damping) * ws.msg3h_prec[k]
                pm_new = damping * pm_new + (1.0 - damping) * ws.msg3h_pm[k]
            ws.msg3h_prec[k] = prec_new
            ws.msg3h_pm[k] = pm_new


def channel_belief(ws: APWorkspace):
    """Natural parameters of the channel beliefs: pilot-factor message times
    all data-factor messages, per user."""
    prec = ws.msg3h_prec + ws.msg2h_prec.sum(axis=1)
    pm = ws.msg3h_pm + ws.msg2h_pm.sum(axis=1)
    return prec, pm


def channel_estimate(ws: APWorkspace) -> np.ndarray:
    """(K, N) channel estimates: means of the channel beliefs."""
    prec, pm = channel_belief(ws)
    return pm / prec


def update_extrinsics(ws: APWorkspace, mode: str = "simplified"):
    """Refresh the variable-to-factor extrinsics feeding the data factors.

    simplified: extrinsics are replaced by the full beliefs (the
    large-system shortcut); exact: leave-one-out products, i.e. the channel
    belief minus the target slot's own message and the symbol belief divided
    by the local data-factor message.
    """
    ws.ext3_prec = ws.msg2h_prec.sum(axis=1)
    ws.ext3_pm = ws.msg2h_pm.sum(axis=1)
    bh_prec = ws.msg3h_prec + ws.ext3_prec
    bh_pm = ws.msg3h_pm + ws.ext3_pm
    T = ws.num_slots
    if mode == "simplified":
        ws.ext_h_prec = np.repeat(bh_prec[:, None, :], T, axis=1)
        ws.ext_h_pm = np.repeat(bh_pm[:, None, :], T, axis=1)
        ws.log_ext_x = ws.log_bx.copy()
    elif mode == "exact":
        ws.ext_h_prec = bh_prec[:, None, :] - ws.msg2h_prec
        ws.ext_h_pm = bh_pm[:, None, :] - ws.msg2h_pm
        ws.log_ext_x = log_normalize(ws.log_bx - ws.log_msg2x)
    else:
        raise ValueError(f"unknown mode {mode!r}")


def ap_iterate(ws: APWorkspace, opts: EngineOptions, tracer=None) -> None:
    """One local sweep of AP `ws`: pilot extrinsics, data extrinsics,
    pilot-factor messages, then the fused data-factor sweep (symbol and
    channel messages). The caller is responsible for symbol-belief refresh
    and inter-AP exchange."""
    update_extrinsics(ws, opts.mode)
    _pilot_factor_sweep(ws, opts.damping)
    log_mx, mh_prec, mh_pm, clamps = kernels.data_factor_sweep(
        ws.y_data,
        ws.ext_h_prec,
        ws.ext_h_pm,
        ws.log_ext_x,
        ws.points,
        ws.sigma_v2,
        opts.prec_floor,
        opts.rel_jitter,
        opts.per_symbol_cov,
    )
    ws.clamp_count += clamps
    if opts.damping < 1.0:
        ws.msg2h_prec = opts.damping * mh_prec + (1.0 - opts.damping) * ws.msg2h_prec
        ws.msg2h_pm = opts.damping * mh_pm + (1.0 - opts.damping) * ws.msg2h_pm
    else:
        ws.msg2h_prec = mh_prec
        ws.msg2h_pm = mh_pm
    ws.log_msg2x = log_mx
    if ws.genie_idx is not None:
        _clamp_genie(ws)
    if tracer is not None:
        _trace_ap(ws, tracer)


def _trace_ap(ws: APWorkspace, tracer):
    for k in range(ws.num_users):
        for t in range(ws.num_slots):
            tracer.emit(
                "psi2_to_h",
                ap=ws.index,
                k=k,
                t=t,
                prec=ws.msg2h_prec[k, t].tolist(),
                prec_mean_re=ws.msg2h_pm[k, t].real.tolist(),
                prec_mean_im=ws.msg2h_pm[k, t].imag.tolist(),
            )
            tracer.emit(
                "psi2_to_x",
                ap=ws.index,
                k=k,
                t=t,
                pmf=np.exp(ws.log_msg2x[k, t]).tolist(),
            )
        tracer.emit(
            "psi3_to_h",
            ap=ws.index,
            k=k,
            prec=ws.msg3h_prec[k].tolist(),
            prec_mean_re=ws.msg3h_pm[k].real.tolist(),
            prec_mean_im=ws.msg3h_pm[k].imag.tolist(),
        )
