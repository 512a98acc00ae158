import numpy as np
import pytest

from cfep import engine, scenario
from cfep.engine import (
    APWorkspace,
    EngineOptions,
    channel_estimate,
    channel_message,
    conditional_channel_stats,
    interference_moments,
    pilot_extrinsic,
    pilot_factor_message,
    preprocess_pilots,
    symbol_message,
    update_extrinsics,
)
from conftest import crandn, qam4, random_workspace, randomize_extrinsics


def enumeration_moments(ws, k, t):
    """Oracle: exhaustive enumeration over the interferers' symbols combined
    with the channel extrinsic moments."""
    others = [i for i in range(ws.num_users) if i != k]
    S = ws.points.shape[0]
    N = ws.num_antennas
    pmf = np.exp(ws.log_ext_x)
    mean = np.zeros(N, dtype=complex)
    second = np.zeros((N, N), dtype=complex)
    for combo in np.ndindex(*([S] * len(others))):
        prob = 1.0
        m_c = np.zeros(N, dtype=complex)
        c_c = np.zeros((N, N), dtype=complex)
        for i, si in zip(others, combo):
            prob *= pmf[i, t, si]
            var_i = 1.0 / ws.ext_h_prec[i, t]
            m_i = ws.ext_h_pm[i, t] * var_i
            m_c += ws.points[si] * m_i
            c_c += abs(ws.points[si]) ** 2 * np.diag(var_i)
        mean += prob * m_c
        second += prob * (c_c + np.outer(m_c, m_c.conj()))
    cov = second - np.outer(mean, mean.conj())
    return mean, cov


class TestPreprocessPilots:
    def test_noiseless_single_user(self, rng):
        N, P = 2, 4
        power = 0.7
        book = scenario.assign_pilots(1, P, power)
        h = crandn(rng, N, 1)
        yp = h @ book.sequences[[0]]
        out = preprocess_pilots(yp, book)
        assert np.allclose(out[0], P * power * h[:, 0], rtol=1e-12)

    def test_two_user_superposition(self, rng):
        N, P = 2, 2
        book = scenario.assign_pilots(4, P, 1.0)  # users 0 and 2 share group 0
        h = crandn(rng, N, 4)
        yp = h @ book.sequences[book.assignment]
        out = preprocess_pilots(yp, book)
        assert np.allclose(out[0], P * (h[:, 0] + h[:, 2]), rtol=1e-10)

    def test_matches_dense_product_oracle(self, rng):
        book = scenario.assign_pilots(5, 3, 1.3)
        yp = crandn(rng, 2, 3)
        out = preprocess_pilots(yp, book)
        for g in range(3):
            assert np.allclose(out[g], yp @ book.sequences[g].conj())


class TestInterferenceMoments:
    def test_single_user_empty_sum(self, rng):
        ws, _ = random_workspace(rng, num_users=1)
        m_z, c_z = interference_moments(ws, 0, 0)
        assert np.all(m_z == 0) and np.all(c_z == 0)

    def test_point_mass_symbols_deterministic_channels(self, rng):
        ws, _ = random_workspace(rng, num_users=2)
        # point mass on symbol 1, nearly deterministic channel extrinsics
        log = np.full_like(ws.log_ext_x, -1e6)
        log[..., 1] = 0.0
        ws.log_ext_x = log
        ws.ext_h_prec = np.full_like(ws.ext_h_prec, 1e20)
        m_z, c_z = interference_moments(ws, 0, 2)
        m_h = ws.ext_h_pm[1, 2] / ws.ext_h_prec[1, 2]
        assert np.allclose(m_z, ws.points[1] * m_h)
        assert np.abs(c_z).max() < 1e-12

    def test_matches_enumeration_oracle(self, rng):
        for k in range(3):
            ws, _ = random_workspace(rng, num_users=3)
            m_z, c_z = interference_moments(ws, k, 1)
            m_ref, c_ref = enumeration_moments(ws, k, 1)
            assert np.allclose(m_z, m_ref, atol=1e-12)
            assert np.allclose(c_z, c_ref, atol=1e-12)


class TestSymbolMessage:
    def test_large_noise_is_uniform(self, rng):
        ws, _ = random_workspace(rng, sigma_v2=1e12)
        msg = symbol_message(ws, 0, 0)
        assert np.allclose(msg.pmf, 0.25, atol=1e-6)

    def test_exact_match_is_point_mass(self, rng):
        ws, _ = random_workspace(rng, num_users=1, sigma_v2=1e-12)
        ws.ext_h_prec = np.full_like(ws.ext_h_prec, 1e14)
        ws.ext_h_pm = ws.ext_h_prec * (0.4 - 0.9j)
        m_h = ws.ext_h_pm[0, 0] / ws.ext_h_prec[0, 0]
        ws.y_data[0] = ws.points[2] * m_h
        msg = symbol_message(ws, 0, 0)
        assert msg.pmf[2] > 1 - 1e-9

    def test_scalar_density_oracle(self, rng):
        # one user, one antenna: pmf proportional to exp(-|y - s*m_h|^2 / v)
        ws, _ = random_workspace(rng, num_users=1, num_antennas=1, sigma_v2=0.25)
        ws.ext_h_prec = np.full_like(ws.ext_h_prec, 4.0)  # var 0.25
        ws.ext_h_pm = np.full_like(ws.ext_h_pm, 4.0)      # mean 1
        ws.y_data[:] = 1.0
        # total variance 0.25 + |s|^2 * 0.25 = 0.5 for unit 4QAM
        msg = symbol_message(ws, 0, 0)
        want = np.exp(-np.abs(1.0 - ws.points) ** 2 / 0.5)
        want /= want.sum()
        assert np.allclose(msg.pmf, want, rtol=1e-10)

    def test_scale_equivariance(self, rng):
        # scaling y, m_h, sigma_v by gamma (covariances by gamma^2) leaves
        # the pmf unchanged
        ws, _ = random_workspace(rng)
        base = symbol_message(ws, 1, 2).pmf
        gamma = 7.3
        ws.y_data *= gamma
        ws.sigma_v2 *= gamma**2
        ws.ext_h_prec /= gamma**2
        # prec_mean = prec * mean scales by gamma * (1/gamma^2)
        ws.ext_h_pm /= gamma
        scaled = symbol_message(ws, 1, 2).pmf
        assert np.allclose(base, scaled, rtol=1e-9)


class TestConditionalChannelStats:
    def test_matched_filter_limit(self, rng):
        ws, _ = random_workspace(rng, num_users=1, num_antennas=1, sigma_v2=0.04)
        ws.ext_h_prec = np.full_like(ws.ext_h_prec, 1e-12)
        ws.ext_h_pm = np.zeros_like(ws.ext_h_pm)
        s = ws.points[1]
        fg = conditional_channel_stats(ws, 0, 0, s)
        assert np.allclose(fg.mean, ws.y_data[0] / s, rtol=1e-9)
        assert np.allclose(fg.cov, 0.04 / abs(s) ** 2, rtol=1e-9)

    def test_prior_dominated_limit(self, rng):
        ws, _ = random_workspace(rng, num_users=1, sigma_v2=1e10)
        s = ws.points[0]
        fg = conditional_channel_stats(ws, 0, 1, s)
        assert np.allclose(fg.mean, ws.ext_h_pm[0, 1] / ws.ext_h_prec[0, 1], atol=1e-8)
        assert np.allclose(np.diag(fg.cov).real, 1.0 / ws.ext_h_prec[0, 1], rtol=1e-8)

    def test_matches_joint_conditioning_oracle(self, rng):
        for trial in range(20):
            ws, _ = random_workspace(rng)
            k, t = 1, 2
            s = ws.points[trial % 4]
            fg = conditional_channel_stats(ws, k, t, s)
            # oracle: condition the joint Gaussian (h, y) on y
            m_z, c_z = interference_moments(ws, k, t)
            n = ws.num_antennas
            var_h = 1.0 / ws.ext_h_prec[k, t]
            m_h = ws.ext_h_pm[k, t] * var_h
            c_h = np.diag(var_h)
            cov_y = abs(s) ** 2 * c_h + c_z + ws.sigma_v2 * np.eye(n)
            cross = np.conj(s) * c_h
            gain = cross @ np.linalg.inv(cov_y)
            mean = m_h + gain @ (ws.y_data[t] - s * m_h - m_z)
            cov = c_h - gain @ cross.conj().T
            assert np.allclose(fg.mean, mean, rtol=1e-10, atol=1e-10)
            assert np.allclose(fg.cov, cov, rtol=1e-10, atol=1e-10)

    def test_zero_symbol_rejected(self, rng):
        ws, _ = random_workspace(rng)
        with pytest.raises(ValueError):
            conditional_channel_stats(ws, 0, 0, 0.0)


class TestChannelMessage:
    def test_point_mass_belief_diffuse_prior(self, rng):
        ws, _ = random_workspace(rng, num_users=1, sigma_v2=0.09)
        ws.ext_h_prec = np.full_like(ws.ext_h_prec, 1e-10)
        ws.ext_h_pm = np.zeros_like(ws.ext_h_pm)
        log = np.full_like(ws.log_ext_x, -1e6)
        log[..., 3] = 0.0
        ws.log_ext_x = log
        s = ws.points[3]
        msg = channel_message(ws, 0, 0)
        assert np.allclose(msg.mean, ws.y_data[0] / s, rtol=1e-6)
        assert np.allclose(msg.variance, 0.09 / abs(s) ** 2, rtol=1e-6)

    def test_uniform_belief_symmetric_observation(self, rng):
        ws, _ = random_workspace(rng, num_users=1)
        ws.log_ext_x = np.full_like(ws.log_ext_x, np.log(0.25))
        ws.ext_h_pm = np.zeros_like(ws.ext_h_pm)
        ws.y_data[:] = 0.0
        msg = channel_message(ws, 0, 0)
        assert np.allclose(msg.mean, 0.0, atol=1e-12)


class TestPilotFactor:
    def test_singleton_wiener_example(self):
        # prior variance 1, effective pilot noise 1, despread observation 2
        book = scenario.assign_pilots(1, 1, 1.0)
        ws = engine.build_workspace(
            0,
            np.full((1, 1), 2.0 + 0j),
            np.zeros((1, 1), dtype=complex),
            np.array([1.0]),
            book,
            qam4(),
            np.full(4, 0.25),
            sigma_v2=1.0,
        )
        ws.ext3_prec = np.zeros((1, 1))
        ws.ext3_pm = np.zeros((1, 1), dtype=complex)
        msg = pilot_factor_message(ws, 0, 0)
        assert np.allclose(msg.mean, 1.0)
        assert np.allclose(msg.variance, 0.5)

    def test_vanishing_prior_power(self, rng):
        ws, _ = random_workspace(rng, link_var=np.full(3, 1e-300))
        ws.ext3_prec = np.zeros_like(ws.ext3_prec)
        ws.ext3_pm = np.zeros_like(ws.ext3_pm)
        msg = pilot_factor_message(ws, ws.group_of[0], 0)
        assert np.allclose(msg.mean, 0.0, atol=1e-280)
        assert np.allclose(msg.variance, 1e-300, rtol=1e-9)

    def test_known_interferer_cancellation(self, rng):
        # two users share the pilot; the interferer is known perfectly
        sigma_x2, P, sigma_v2 = 1.0, 2, 0.3
        book = scenario.PilotBook(
            scenario.assign_pilots(2, P, sigma_x2).sequences,
            np.zeros(2, dtype=int),  # both users in group 0
            sigma_x2,
        )
        h2 = crandn(rng, 1)[0]
        y_group = np.array([0.9 - 0.4j], dtype=complex)
        ws = engine.build_workspace(
            0,
            np.zeros((1, P), dtype=complex),
            np.zeros((1, 1), dtype=complex),
            np.array([1.0, 1.0]),
            book,
            qam4(),
            np.full(4, 0.25),
            sigma_v2=sigma_v2,
        )
        ws.y_pilot = y_group[None, :].repeat(P, axis=0)
        # interferer known perfectly: huge data precision centered at h2
        big = 1e300
        ws.ext3_prec = np.array([[0.0], [big]])
        ws.ext3_pm = np.array([[0.0], [big * h2]])
        msg = pilot_factor_message(ws, 0, 0)
        gain = sigma_x2 * P
        obs = y_group / gain - h2
        noise = sigma_v2 / gain
        assert np.allclose(msg.mean, obs / (1.0 + noise), rtol=1e-9)

    def test_wrong_group_rejected(self, rng):
        ws, _ = random_workspace(rng)
        g = int(ws.group_of[0])
        other = (g + 1) % ws.pilot_len
        with pytest.raises(ValueError):
            pilot_factor_message(ws, other, 0)


class TestExtrinsics:
    def test_pilot_extrinsic_single_slot_identity(self, rng):
        ws, _ = random_workspace(rng, num_slots=1)
        ws.msg2h_prec = rng.uniform(0.5, 2.0, ws.msg2h_prec.shape)
        ws.msg2h_pm = crandn(rng, *ws.msg2h_pm.shape)
        ext = pilot_extrinsic(ws, 1)
        assert np.allclose(ext.prec, ws.msg2h_prec[1, 0])
        assert np.allclose(ext.prec_mean, ws.msg2h_pm[1, 0])

    def test_pilot_extrinsic_iid_combination(self, rng):
        ws, _ = random_workspace(rng, num_slots=5)
        mean = np.array([1 + 1j, -2j])
        ws.msg2h_prec[0] = 2.0
        ws.msg2h_pm[0] = 2.0 * mean
        ext = pilot_extrinsic(ws, 0)
        assert np.allclose(ext.mean, mean)
        assert np.allclose(ext.variance, 0.5 / 5)

    def test_pilot_extrinsic_weighted_mean_oracle(self, rng):
        ws, _ = random_workspace(rng, num_slots=3)
        ws.msg2h_prec = rng.uniform(0.1, 2.0, ws.msg2h_prec.shape)
        ws.msg2h_pm = crandn(rng, *ws.msg2h_pm.shape)
        ext = pilot_extrinsic(ws, 2)
        prec = ws.msg2h_prec[2].sum(axis=0)
        mean = (ws.msg2h_pm[2].sum(axis=0)) / prec
        assert np.allclose(ext.mean, mean)
        assert np.allclose(ext.prec, prec)

    def test_exact_single_slot_equals_pilot_message(self, rng):
        ws, _ = random_workspace(rng, num_slots=1)
        ws.msg2h_prec = rng.uniform(0.5, 2.0, ws.msg2h_prec.shape)
        ws.msg2h_pm = crandn(rng, *ws.msg2h_pm.shape)
        update_extrinsics(ws, "exact")
        assert np.allclose(ws.ext_h_prec[:, 0], ws.msg3h_prec)
        assert np.allclose(ws.ext_h_pm[:, 0], ws.msg3h_pm)

    def test_leave_one_out_perturbation_scale(self, rng):
        # simplified vs exact differ by one message out of T: O(1/T) in the mean
        T = 100
        ws, _ = random_workspace(rng, num_slots=T)
        ws.msg2h_prec = rng.uniform(0.9, 1.1, ws.msg2h_prec.shape)
        ws.msg2h_pm = (1.0 + 0.1 * crandn(rng, *ws.msg2h_pm.shape)) * ws.msg2h_prec
        update_extrinsics(ws, "exact")
        exact_mean = ws.ext_h_pm / ws.ext_h_prec
        update_extrinsics(ws, "simplified")
        simp_mean = ws.ext_h_pm / ws.ext_h_prec
        rel = np.abs(exact_mean - simp_mean) / np.abs(simp_mean)
        assert rel.max() < 5.0 / T

    def test_simplified_single_ap_uniform_prior(self, rng):
        # with one AP and uniform prior the symbol belief is the local message
        ws, _ = random_workspace(rng)
        ws.log_msg2x = np.log(rng.dirichlet(np.ones(4), size=(ws.num_users, ws.num_slots)))
        from cfep.gaussian import log_normalize

        ws.log_bx = log_normalize(ws.log_prior[None, None, :] + ws.log_msg2x)
        update_extrinsics(ws, "simplified")
        assert np.allclose(np.exp(ws.log_ext_x), np.exp(log_normalize(ws.log_msg2x)))


class TestChannelEstimate:
    def test_pilot_only_when_data_noninformative(self, rng):
        ws, _ = random_workspace(rng)
        ws.msg2h_prec = np.zeros_like(ws.msg2h_prec)
        ws.msg2h_pm = np.zeros_like(ws.msg2h_pm)
        est = channel_estimate(ws)
        assert np.allclose(est, ws.msg3h_pm / ws.msg3h_prec)

    def test_zero_information_gives_prior_mean(self, rng):
        ws, _ = random_workspace(rng)
        ws.y_pilot = np.zeros_like(ws.y_pilot)
        ws.ext3_prec = np.zeros_like(ws.ext3_prec)
        ws.ext3_pm = np.zeros_like(ws.ext3_pm)
        engine._pilot_factor_sweep(ws, damping=1.0)
        ws.msg2h_prec = np.zeros_like(ws.msg2h_prec)
        ws.msg2h_pm = np.zeros_like(ws.msg2h_pm)
        assert np.allclose(channel_estimate(ws), 0.0)


class TestSweepAgainstReferenceOps:
    def test_ap_iterate_matches_reference_composition(self, rng):
        """The fused kernel sweep must reproduce the per-entry toolkit ops."""
        ws, _ = random_workspace(rng, num_users=4, num_slots=3)
        ws.msg2h_prec = rng.uniform(0.2, 1.5, ws.msg2h_prec.shape)
        ws.msg2h_pm = crandn(rng, *ws.msg2h_pm.shape) * ws.msg2h_prec
        ws.log_msg2x = np.log(rng.dirichlet(np.ones(4), size=(4, 3)))
        from cfep.gaussian import log_normalize

        ws.log_bx = log_normalize(ws.log_prior[None, None, :] + ws.log_msg2x)
        opts = EngineOptions()

        import copy

        ref = copy.deepcopy(ws)
        update_extrinsics(ref, opts.mode)
        engine._pilot_factor_sweep(ref, damping=1.0)
        want_x = np.empty_like(ref.log_msg2x)
        want_prec = np.empty_like(ref.msg2h_prec)
        want_pm = np.empty_like(ref.msg2h_pm)
        for k in range(ref.num_users):
            for t in range(ref.num_slots):
                want_x[k, t] = np.log(symbol_message(ref, k, t, opts).pmf)
                msg = channel_message(ref, k, t, opts)
                want_prec[k, t] = msg.prec
                want_pm[k, t] = msg.prec_mean

        engine.ap_iterate(ws, opts)
        assert np.allclose(ws.msg3h_prec, ref.msg3h_prec, rtol=1e-12)
        assert np.allclose(ws.msg3h_pm, ref.msg3h_pm, rtol=1e-12)
        assert np.allclose(np.exp(ws.log_msg2x), np.exp(want_x), atol=1e-12)
        assert np.allclose(ws.msg2h_prec, want_prec, rtol=1e-9, atol=1e-12)
        assert np.allclose(ws.msg2h_pm, want_pm, rtol=1e-9, atol=1e-12)

    def test_genie_high_snr_recovers_truth(self):
        # one AP, strong links, known symbols: estimate approaches the truth
        rng = np.random.default_rng(7)
        K, N, P, T = 2, 2, 2, 8
        sigma_x2, sigma_v2 = 1.0, 1e-8
        book = scenario.assign_pilots(K, P, sigma_x2)
        points = qam4(sigma_x2)
        prior = np.full(4, 0.25)
        chan = scenario.ChannelModel(np.ones((1, K)), N)
        real = scenario.draw_realization(chan, book, T, points, prior, sigma_v2, rng)
        ws = engine.build_workspace(
            0, real.Yp[0], real.Y[0], np.ones(K), book, points, prior, sigma_v2,
            genie_symbols=real.X,
        )
        opts = EngineOptions()
        for _ in range(5):
            ws.log_bx = ws.log_msg2x.copy()
            engine.ap_iterate(ws, opts)
        est = channel_estimate(ws)
        assert np.abs(est.T - real.H[0]).max() < 1e-3
