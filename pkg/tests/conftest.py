import numpy as np
import pytest

from cfep import engine, scenario


def qam4(power=1.0):
    return scenario.qam_constellation(4, power)


def crandn(rng, *shape):
    return scenario.crandn(rng, *shape)


def random_workspace(
    rng,
    num_users=3,
    num_slots=4,
    num_antennas=2,
    pilot_len=3,
    sigma_x2=1.0,
    sigma_v2=0.5,
    link_var=None,
):
    """Workspace with randomized observations and randomized O(1) extrinsic
    stores, for oracle tests of the per-entry factor operations."""
    K, T, N, P = num_users, num_slots, num_antennas, pilot_len
    if link_var is None:
        link_var = rng.uniform(0.5, 2.0, K)
    book = scenario.assign_pilots(K, P, sigma_x2)
    points = qam4(sigma_x2)
    prior = np.full(4, 0.25)
    chan = scenario.ChannelModel(link_var[None, :].repeat(1, axis=0), N)
    real = scenario.draw_realization(chan, book, T, points, prior, sigma_v2, rng)
    ws = engine.build_workspace(
        0, real.Yp[0], real.Y[0], link_var, book, points, prior, sigma_v2
    )
    randomize_extrinsics(ws, rng)
    return ws, real


def randomize_extrinsics(ws, rng):
    """Fill the extrinsic stores with random informative values."""
    K, T, N = ws.num_users, ws.num_slots, ws.num_antennas
    S = ws.points.shape[0]
    ws.ext_h_prec = rng.uniform(0.5, 3.0, (K, T, N))
    ws.ext_h_pm = crandn(rng, K, T, N) * ws.ext_h_prec
    ws.log_ext_x = np.log(rng.dirichlet(np.ones(S), size=(K, T)))
    ws.ext3_prec = rng.uniform(0.5, 3.0, (K, N))
    ws.ext3_pm = crandn(rng, K, N) * ws.ext3_prec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
