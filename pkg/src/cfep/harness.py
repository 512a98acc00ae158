"""Monte-Carlo orchestration: configuration, estimator suite, metrics, output.

Runs the semi-blind decentralized EP estimator against three references on
the same realizations: a genie-aided EP run with the data symbols clamped to
the truth, a closed-form MMSE channel estimate with all transmitted symbols
known, and the contaminated pilot-only LMMSE estimate. Emits an aggregated
CSV (canonical output) and optionally an SVG plot of NMSE versus transmit
power.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from cfep import consensus, engine, scenario
from cfep.consensus import ScheduleOptions, ScheduleState
from cfep.engine import EngineOptions
from cfep.plot import write_nmse_svg

__all__ = [
    "ScenarioConfig",
    "AlgorithmConfig",
    "SweepConfig",
    "OutputConfig",
    "RunConfig",
    "ResultRecord",
    "ESTIMATORS",
    "CSV_HEADER",
    "nmse",
    "ser",
    "run_realization",
    "run_estimator_suite",
    "aggregate",
    "aggregate_and_emit",
]

log = logging.getLogger("cfep")

ESTIMATORS = ("mmse-genie", "genie-ep", "proposed", "pilot-only")
CSV_HEADER = "estimator,tx_power_dbm,snr_db,mean_nmse,std_nmse,mean_ser,realizations,mean_iters"


def _check_keys(block: dict, allowed, where: str):
    unknown = set(block) - set(allowed)
    if unknown:
        raise ValueError(f"unknown {where} keys: {sorted(unknown)}")


@dataclass
class ScenarioConfig:
    area_side: float = 400.0
    ap_grid: int = 4
    num_uts: int = 8
    num_antennas: int = 2
    pilot_len: int = 6
    data_len: int = 10
    constellation: str = "4qam"
    noise_dbm: float = -96.0
    redraw_uts: bool = True

    def validate(self):
        if self.constellation != "4qam" and not self.constellation.endswith("qam"):
            raise ValueError(f"unsupported constellation {self.constellation!r}")
        self.constellation_points(1.0)
        if min(self.ap_grid, self.num_uts, self.num_antennas, self.pilot_len, self.data_len) < 1:
            raise ValueError("scenario sizes must be positive")
        if self.area_side <= 0:
            raise ValueError("area_side must be positive")

    def constellation_points(self, power: float) -> np.ndarray:
        order = int(self.constellation[:-3])
        return scenario.qam_constellation(order, power)


@dataclass
class AlgorithmConfig:
    mode: str = "simplified"
    max_iterations: int = 20
    damping: float = 0.7
    precision_floor: float = 1e-8
    residual_tol: float = 1e-6
    schedule: str = "sequential"
    graph: str = "grid"

    def validate(self):
        if self.graph not in ("grid", "tree"):
            raise ValueError(f"unknown graph {self.graph!r}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        self.schedule_options()  # validates mode/schedule/damping/floor

    def schedule_options(self) -> ScheduleOptions:
        return ScheduleOptions(
            engine=EngineOptions(
                mode=self.mode,
                damping=self.damping,
                prec_floor=self.precision_floor,
            ),
            max_iterations=self.max_iterations,
            residual_tol=self.residual_tol,
            schedule=self.schedule,
        )


@dataclass
class SweepConfig:
    tx_power_dbm: list = field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0, 20.0])
    realizations: int = 100

    def validate(self):
        if not self.tx_power_dbm:
            raise ValueError("tx_power_dbm must not be empty")
        if self.realizations < 1:
            raise ValueError("realizations must be >= 1")


@dataclass
class OutputConfig:
    csv: str = "results.csv"
    plot: str | None = None
    trace: str | None = None

    def validate(self):
        if not self.csv:
            raise ValueError("csv output path is required")


@dataclass
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    algorithm: AlgorithmConfig = field(default_factory=AlgorithmConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        _check_keys(data, ("scenario", "algorithm", "sweep", "output", "seed"), "config")
        cfg = cls()
        for name, sub in (
            ("scenario", ScenarioConfig),
            ("algorithm", AlgorithmConfig),
            ("sweep", SweepConfig),
            ("output", OutputConfig),
        ):
            block = data.get(name, {})
            fields = [f.name for f in dataclasses.fields(sub)]
            _check_keys(block, fields, name)
            setattr(cfg, name, sub(**block))
        cfg.seed = int(data.get("seed", 0))
        cfg.validate()
        return cfg

    def validate(self):
        self.scenario.validate()
        self.algorithm.validate()
        self.sweep.validate()
        self.output.validate()


@dataclass
class ResultRecord:
    estimator: str
    tx_power_dbm: float
    realization: int
    nmse: float
    ser: float | None
    iterations: int
    clamp_count: int
    wall_time: float
    mean_link_var: float

    def __post_init__(self):
        if self.nmse < 0:
            raise ValueError("NMSE must be nonnegative")
        if self.ser is not None and not 0.0 <= self.ser <= 1.0:
            raise ValueError("SER must be in [0, 1]")


def nmse(h_hat: np.ndarray, h: np.ndarray) -> float:
    """tr[(Hhat-H)^H (Hhat-H)] / tr[H^H H] over all stacked estimates."""
    h_hat = np.asarray(h_hat)
    h = np.asarray(h)
    if h_hat.shape != h.shape:
        raise ValueError("shape mismatch")
    denom = float(np.sum(np.abs(h) ** 2))
    if denom == 0.0:
        raise ValueError("reference channel is identically zero")
    return float(np.sum(np.abs(h_hat - h) ** 2) / denom)


def ser(log_bx: np.ndarray, points: np.ndarray, x_true: np.ndarray) -> float:
    """Symbol error rate of argmax decisions from beliefs (ties break to
    the lowest constellation index)."""
    picks = points[np.argmax(log_bx, axis=-1)]
    return float(np.mean(picks != x_true))


def _mmse_genie_estimate(real: scenario.Realization, link_var: np.ndarray, sigma_v2: float) -> np.ndarray:
    """Per-AP MMSE channel estimate given all transmitted symbols.

    With X = [Xp X] known, each antenna row of H_l is a linear-Gaussian
    estimate with diagonal prior; one K x K solve per AP serves all antennas.
    """
    L, N, K = real.H.shape
    x_full = np.concatenate([real.Xp, real.X], axis=1)  # (K, P+T)
    m = x_full.T                                        # (P+T, K)
    gram = m.conj().T @ m
    out = np.empty_like(real.H)
    for l in range(L):
        a = np.diag(1.0 / link_var[l]) + gram / sigma_v2
        y_full = np.concatenate([real.Yp[l], real.Y[l]], axis=1)  # (N, P+T)
        rhs = m.conj().T @ y_full.T / sigma_v2                    # (K, N)
        out[l] = np.linalg.solve(a, rhs).T
    return out


def _pilot_only_estimate(workspaces: list) -> np.ndarray:
    """Contaminated LMMSE from pilots alone: the pilot-factor warm start."""
    return np.stack([(ws.msg3h_pm / ws.msg3h_prec).T for ws in workspaces])


def _build_workspaces(real, link_var, book, points, prior_pmf, sigma_v2, genie):
    L = real.H.shape[0]
    return [
        engine.build_workspace(
            l,
            real.Yp[l],
            real.Y[l],
            link_var[l],
            book,
            points,
            prior_pmf,
            sigma_v2,
            genie_symbols=real.X if genie else None,
        )
        for l in range(L)
    ]


def _run_ep(workspaces, links, opts, tracer=None):
    state = ScheduleState.initialize(links, workspaces)
    stats = consensus.run_schedule(workspaces, state, opts, tracer=tracer)
    est = np.stack([engine.channel_estimate(ws).T for ws in workspaces])
    return est, stats


def run_realization(
    cfg: RunConfig,
    power_dbm: float,
    rng: np.random.Generator,
    fixed_uts: np.ndarray | None = None,
    estimators=ESTIMATORS,
    tracer=None,
) -> dict:
    """One Monte-Carlo realization at one transmit power: draws a scenario
    and runs every requested estimator on the same data. Returns estimator
    name -> metrics dict."""
    sc = cfg.scenario
    sigma_x2 = scenario.dbm_to_watts(power_dbm)
    sigma_v2 = scenario.dbm_to_watts(sc.noise_dbm)
    geo = scenario.build_geometry(
        sc.area_side, sc.ap_grid, sc.num_uts, rng, ut_positions=fixed_uts
    )
    links = geo.ap_links
    if cfg.algorithm.graph == "tree":
        links = consensus.spanning_tree(links, root=0)
    channel = scenario.channel_from_geometry(geo, sc.num_antennas)
    book = scenario.assign_pilots(sc.num_uts, sc.pilot_len, sigma_x2)
    points = sc.constellation_points(sigma_x2)
    prior = np.full(points.shape[0], 1.0 / points.shape[0])
    real = scenario.draw_realization(
        channel, book, sc.data_len, points, prior, sigma_v2, rng
    )
    opts = cfg.algorithm.schedule_options()

    results = {}
    mean_link_var = float(channel.link_variance.mean())

    def record(name, h_hat, ser_value, iters, clamps, wall):
        results[name] = dict(
            nmse=nmse(h_hat, real.H),
            ser=ser_value,
            iterations=iters,
            clamp_count=clamps,
            wall_time=wall,
            mean_link_var=mean_link_var,
        )

    for name in estimators:
        t0 = time.perf_counter()
        if name == "proposed":
            wss = _build_workspaces(
                real, channel.link_variance, book, points, prior, sigma_v2, genie=False
            )
            est, stats = _run_ep(wss, links, opts, tracer=tracer)
            s = ser(wss[0].log_bx, points, real.X)
            record(name, est, s, stats.iterations, sum(w.clamp_count for w in wss),
                   time.perf_counter() - t0)
        elif name == "genie-ep":
            wss = _build_workspaces(
                real, channel.link_variance, book, points, prior, sigma_v2, genie=True
            )
            est, stats = _run_ep(wss, links, opts)
            s = ser(wss[0].log_bx, points, real.X)
            record(name, est, s, stats.iterations, sum(w.clamp_count for w in wss),
                   time.perf_counter() - t0)
        elif name == "mmse-genie":
            est = _mmse_genie_estimate(real, channel.link_variance, sigma_v2)
            record(name, est, None, 0, 0, time.perf_counter() - t0)
        elif name == "pilot-only":
            wss = _build_workspaces(
                real, channel.link_variance, book, points, prior, sigma_v2, genie=False
            )
            est = _pilot_only_estimate(wss)
            record(name, est, None, 0, 0, time.perf_counter() - t0)
        else:
            raise ValueError(f"unknown estimator {name!r}")
    return results


def run_estimator_suite(cfg: RunConfig, estimators=ESTIMATORS, tracer=None) -> list:
    """Full sweep: every power point, every realization, every estimator.

    Per-job determinism comes from seeding each (power, realization) cell
    with SeedSequence(master, power_index, realization_index). A failed
    realization is logged and skipped; the sweep continues.
    """
    sc = cfg.scenario
    fixed_uts = None
    if not sc.redraw_uts:
        rng0 = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2**31]))
        fixed_uts = rng0.uniform(0.0, sc.area_side, size=(sc.num_uts, 2))
    records = []
    failures = 0
    for pi, power in enumerate(cfg.sweep.tx_power_dbm):
        for ri in range(cfg.sweep.realizations):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, pi, ri]))
            try:
                per_est = run_realization(
                    cfg, power, rng, fixed_uts=fixed_uts, estimators=estimators,
                    tracer=tracer,
                )
            except Exception:
                failures += 1
                log.exception(
                    "realization failed (power=%s dBm, index=%d); continuing", power, ri
                )
                continue
            for name, m in per_est.items():
                records.append(
                    ResultRecord(
                        estimator=name,
                        tx_power_dbm=float(power),
                        realization=ri,
                        **m,
                    )
                )
    done = len(records) // max(len(estimators), 1)
    log.info("completed %d realization runs (%d failed)", done, failures)
    return records


def aggregate(records: list) -> list[dict]:
    """Per (estimator, power) means over realizations, in canonical order."""
    rows = []
    powers = sorted({r.tx_power_dbm for r in records})
    names = [e for e in ESTIMATORS if any(r.estimator == e for r in records)]
    names += sorted({r.estimator for r in records} - set(names))
    for name in names:
        for power in powers:
            sel = [r for r in records if r.estimator == name and r.tx_power_dbm == power]
            if not sel:
                continue
            vals = np.array([r.nmse for r in sel])
            sers = [r.ser for r in sel if r.ser is not None]
            rows.append(
                dict(
                    estimator=name,
                    tx_power_dbm=power,
                    mean_link_var=float(np.mean([r.mean_link_var for r in sel])),
                    mean_nmse=float(vals.mean()),
                    std_nmse=float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                    mean_ser=float(np.mean(sers)) if sers else None,
                    realizations=len(sel),
                    mean_iters=float(np.mean([r.iterations for r in sel])),
                )
            )
    return rows


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)


def aggregate_and_emit(records: list, cfg: RunConfig) -> list[str]:
    """Write the aggregated CSV (and the SVG plot when configured).

    Returns the list of files written. The SNR column is the mean per-link
    receive SNR sigma_x^2 * mean(link variance) / sigma_v^2 in dB.
    """
    if not records:
        raise ValueError("no records to aggregate")
    rows = aggregate(records)
    sigma_v2 = scenario.dbm_to_watts(cfg.scenario.noise_dbm)
    written = []
    lines = [CSV_HEADER]
    for row in rows:
        sigma_x2 = scenario.dbm_to_watts(row["tx_power_dbm"])
        snr_db = 10.0 * np.log10(sigma_x2 * row["mean_link_var"] / sigma_v2)
        lines.append(
            ",".join(
                _fmt(v)
                for v in (
                    row["estimator"],
                    row["tx_power_dbm"],
                    float(snr_db),
                    row["mean_nmse"],
                    row["std_nmse"],
                    row["mean_ser"],
                    row["realizations"],
                    row["mean_iters"],
                )
            )
        )
    try:
        with open(cfg.output.csv, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write CSV to {cfg.output.csv!r}: {exc}") from exc
    written.append(cfg.output.csv)
    if cfg.output.plot:
        curves = {}
        for row in rows:
            curves.setdefault(row["estimator"], []).append(
                (row["tx_power_dbm"], row["mean_nmse"])
            )
        try:
            write_nmse_svg(cfg.output.plot, curves)
        except OSError as exc:
            raise OSError(f"cannot write plot to {cfg.output.plot!r}: {exc}") from exc
        written.append(cfg.output.plot)
    return written
