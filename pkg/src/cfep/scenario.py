"""Cell-free uplink scenario: geometry, path loss, pilots, Monte-Carlo draws.

The default experiment places access points on a regular grid inside a
square service area, drops user terminals uniformly at random, derives
per-link channel variances from a log-distance path-loss law and synthesizes
received pilot/data blocks Y = H X + V per access point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Geometry",
    "ChannelModel",
    "PilotBook",
    "Realization",
    "build_geometry",
    "channel_from_geometry",
    "path_loss_variance",
    "assign_pilots",
    "qam_constellation",
    "draw_realization",
    "dbm_to_watts",
    "crandn",
]

# path-loss law: 10*log10(variance) = PL_REF_DB - PL_EXP_DB * log10(d)
PL_REF_DB = -30.0
PL_EXP_DB = 36.7
MIN_LINK_DISTANCE = 1.0  # meters; guards against a UT landing on an AP


@dataclass
class Geometry:
    """AP/UT layout plus the AP connectivity graph (symmetric, connected)."""

    area_side: float
    ap_positions: np.ndarray  # (L, 2) meters
    ut_positions: np.ndarray  # (K, 2) meters
    ap_links: np.ndarray      # (L, L) bool adjacency, no self loops

    @property
    def num_aps(self) -> int:
        return self.ap_positions.shape[0]

    @property
    def num_uts(self) -> int:
        return self.ut_positions.shape[0]

    def neighbors(self, l: int) -> np.ndarray:
        return np.flatnonzero(self.ap_links[l])

    def distances(self) -> np.ndarray:
        """(L, K) AP-to-UT Euclidean distances."""
        diff = self.ap_positions[:, None, :] - self.ut_positions[None, :, :]
        return np.linalg.norm(diff, axis=-1)


@dataclass
class ChannelModel:
    """Per-link Rayleigh variances; covariance of h_lk is link_variance[l,k]*I."""

    link_variance: np.ndarray  # (L, K) linear power, > 0
    num_antennas: int

    def __post_init__(self):
        if np.any(self.link_variance <= 0):
            raise ValueError("link variances must be positive")
        if self.num_antennas < 1:
            raise ValueError("need at least one antenna")


@dataclass
class PilotBook:
    """Orthogonal pilot sequences and the user-to-sequence assignment.

    sequences[g] is the g-th pilot row (length P) with per-symbol power
    symbol_power and self-product P * symbol_power; distinct rows are
    orthogonal. Users sharing a group index are pilot-contaminated.
    """

    sequences: np.ndarray   # (P, P) complex
    assignment: np.ndarray  # (K,) int group index per user
    symbol_power: float

    @property
    def pilot_len(self) -> int:
        return self.sequences.shape[0]

    @property
    def num_users(self) -> int:
        return self.assignment.shape[0]

    def groups(self) -> list[np.ndarray]:
        """User index arrays per group (possibly empty)."""
        return [np.flatnonzero(self.assignment == g) for g in range(self.pilot_len)]

    def processed_noise_var(self, noise_var: float) -> float:
        """Noise variance per component after matched pilot despreading."""
        return self.pilot_len * self.symbol_power * noise_var


@dataclass
class Realization:
    """One Monte-Carlo draw of channels, symbols, noise and received blocks.

    Shapes: H (L,N,K), Xp (K,P), X (K,T), Vp (L,N,P), Vd (L,N,T),
    Yp (L,N,P), Y (L,N,T); Yp = H@Xp + Vp and Y = H@X + Vd hold exactly.
    """

    H: np.ndarray
    Xp: np.ndarray
    X: np.ndarray
    Vp: np.ndarray
    Vd: np.ndarray
    Yp: np.ndarray
    Y: np.ndarray

    _FIELDS = ("H", "Xp", "X", "Vp", "Vd", "Yp", "Y")

    def to_bytes(self) -> bytes:
        """Deterministic flat serialization: a JSON shape header terminated
        by a newline, then the fields in declaration order as little-endian
        complex128 C-order raw bytes."""
        header = {name: list(getattr(self, name).shape) for name in self._FIELDS}
        blob = json.dumps(header, sort_keys=True).encode() + b"\n"
        for name in self._FIELDS:
            blob += np.ascontiguousarray(getattr(self, name)).astype("<c16").tobytes()
        return blob

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Realization":
        head, _, rest = blob.partition(b"\n")
        header = json.loads(head.decode())
        arrays = {}
        offset = 0
        for name in cls._FIELDS:
            shape = tuple(header[name])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(rest, dtype="<c16", count=count, offset=offset)
            arrays[name] = arr.reshape(shape).astype(complex)
            offset += count * 16
        return cls(**arrays)


def dbm_to_watts(p_dbm: float) -> float:
    """Convert dBm to watts: 10^((p-30)/10)."""
    return 10.0 ** ((p_dbm - 30.0) / 10.0)


def path_loss_variance(d) -> np.ndarray | float:
    """Linear channel variance at distance d (meters).

    Distances below MIN_LINK_DISTANCE are clamped to it; d <= 0 is an error.
    """
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance must be positive")
    d = np.maximum(d, MIN_LINK_DISTANCE)
    out = 10.0 ** ((PL_REF_DB - PL_EXP_DB * np.log10(d)) / 10.0)
    return float(out) if out.ndim == 0 else out


def build_geometry(
    area_side: float,
    ap_grid: int,
    num_uts: int,
    rng: np.random.Generator,
    link_range: float | None = None,
    ut_positions: np.ndarray | None = None,
) -> Geometry:
    """Regular ap_grid x ap_grid AP lattice spanning the square area, UTs
    uniform on the square, APs linked when within link_range (default: the
    lattice spacing). Raises if the resulting AP graph is disconnected."""
    if ap_grid < 1 or num_uts < 1:
        raise ValueError("need at least one AP and one UT")
    spacing = area_side / (ap_grid - 1) if ap_grid > 1 else 0.0
    coords = [(spacing * i, spacing * j) for i in range(ap_grid) for j in range(ap_grid)]
    ap_positions = np.array(coords, dtype=float)
    if ut_positions is None:
        ut_positions = rng.uniform(0.0, area_side, size=(num_uts, 2))
    else:
        ut_positions = np.asarray(ut_positions, dtype=float)
        if ut_positions.shape != (num_uts, 2):
            raise ValueError("ut_positions shape mismatch")
    if link_range is None:
        link_range = spacing
    diff = ap_positions[:, None, :] - ap_positions[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    links = dist <= link_range * (1.0 + 1e-9)
    np.fill_diagonal(links, False)
    geo = Geometry(area_side, ap_positions, ut_positions, links)
    if not _connected(links):
        raise ValueError("AP graph is disconnected; consensus requires connectivity")
    return geo


def _connected(links: np.ndarray) -> bool:
    n = links.shape[0]
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        u = stack.pop()
        for v in np.flatnonzero(links[u]):
            if not seen[v]:
                seen[v] = True
                stack.append(v)
    return bool(seen.all())


def channel_from_geometry(geometry: Geometry, num_antennas: int) -> ChannelModel:
    """Path-loss channel variances for every AP-UT link."""
    return ChannelModel(path_loss_variance(geometry.distances()), num_antennas)


def assign_pilots(num_users: int, pilot_len: int, symbol_power: float) -> PilotBook:
    """Round-robin assignment of scaled-DFT orthogonal pilot sequences.

    User k gets sequence k mod P; rows of the P-point DFT matrix scaled to
    per-symbol power symbol_power give exact mutual orthogonality with
    self-product P * symbol_power.
    """
    if pilot_len < 1 or num_users < 1:
        raise ValueError("need at least one user and one pilot symbol")
    g, p = np.meshgrid(np.arange(pilot_len), np.arange(pilot_len), indexing="ij")
    sequences = np.sqrt(symbol_power) * np.exp(-2j * np.pi * g * p / pilot_len)
    assignment = np.arange(num_users) % pilot_len
    return PilotBook(sequences, assignment, float(symbol_power))


def qam_constellation(order: int, power: float = 1.0) -> np.ndarray:
    """Square QAM constellation normalized to average symbol power `power`."""
    side = int(round(np.sqrt(order)))
    if side * side != order or order < 4:
        raise ValueError("order must be a square number >= 4")
    pam = np.arange(-(side - 1), side, 2, dtype=float)
    points = (pam[:, None] + 1j * pam[None, :]).ravel()
    points *= np.sqrt(power / np.mean(np.abs(points) ** 2))
    return points


def crandn(rng: np.random.Generator, *shape) -> np.ndarray:
    """Unit-variance circularly-symmetric complex normal samples."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def draw_realization(
    channel: ChannelModel,
    book: PilotBook,
    num_slots: int,
    points: np.ndarray,
    prior_pmf: np.ndarray,
    noise_var: float,
    rng: np.random.Generator,
) -> Realization:
    """Draw channels, data symbols and noise; synthesize received blocks."""
    L, K = channel.link_variance.shape
    N = channel.num_antennas
    P = book.pilot_len
    T = num_slots
    if book.num_users != K:
        raise ValueError("pilot book does not match the channel user count")
    sd = np.sqrt(channel.link_variance)  # (L, K)
    H = sd[:, None, :] * crandn(rng, L, N, K)
    Xp = book.sequences[book.assignment]
    X = rng.choice(points, size=(K, T), p=prior_pmf)
    Vp = np.sqrt(noise_var) * crandn(rng, L, N, P)
    Vd = np.sqrt(noise_var) * crandn(rng, L, N, T)
    Yp = H @ Xp + Vp
    Y = H @ X + Vd
    return Realization(H, Xp, X, Vp, Vd, Yp, Y)
