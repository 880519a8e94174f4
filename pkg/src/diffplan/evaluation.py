"""Planning metrics, the benchmark harness, and the ablation sweeps.

L2 is reported at the 1/2/3 s horizons plus their mean; a decode fails when
its error exceeds 10 m anywhere in the first second, and unparseable outputs
count as failures instead of aborting the run.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .codec import FixedPatternTemplate, MalformedSequence, Trajectory
from .decoder import DecodeConfig, decode_autoregressive, decode_diffusion
from .model import DimensionMismatch, MaskPredictor

DEFAULT_HORIZONS = (1.0, 2.0, 3.0)
FAILURE_DISTANCE_M = 10.0
FAILURE_WINDOW_S = 1.0

THRESHOLD_CSV_HEADER = ["tau", "l2_avg", "mean_time_s", "mean_steps"]
STEPS_CSV_HEADER = ["steps", "fixed_pattern", "l2_avg", "failure_rate", "mean_time_s", "mean_calls"]
COMPARE_CSV_HEADER = [
    "decoder", "l2_1s", "l2_2s", "l2_3s", "l2_avg", "failure_rate", "mean_calls", "mean_time_s",
]


@dataclass
class PlanMetrics:
    l2_at: dict[float, float]
    l2_avg: float
    failure_rate: float
    samples: int
    malformed: int = 0


@dataclass
class LatencyReport:
    mean_wallclock_s: float
    mean_model_calls: float
    mean_steps: float
    config: str


@dataclass
class EvalResult:
    metrics: PlanMetrics
    latency: LatencyReport
    records: list = field(default_factory=list)


def _check_comparable(pred: Trajectory, truth: Trajectory):
    if len(pred) != len(truth) or pred.dt != truth.dt:
        raise DimensionMismatch("trajectories differ in length or time spacing")


def l2_error(pred: Trajectory, truth: Trajectory, horizon: float, mode: str = "horizon") -> float:
    """Euclidean error at (or, in cumulative mode, averaged up to) the horizon."""
    _check_comparable(pred, truth)
    stamps = truth.timestamps
    if horizon < stamps[0] - 1e-9 or horizon > stamps[-1] + 1e-9:
        raise DimensionMismatch(f"horizon {horizon} outside trajectory span")
    idx = int(np.argmin(np.abs(stamps - horizon)))
    dists = np.linalg.norm(pred.waypoints - truth.waypoints, axis=1)
    if mode == "horizon":
        return float(dists[idx])
    if mode == "cumulative":
        return float(dists[: idx + 1].mean())
    raise ValueError(f"unknown l2 mode {mode!r}")


def is_failure(pred: Trajectory, truth: Trajectory) -> bool:
    """True when any waypoint inside the first second is off by more than 10 m."""
    _check_comparable(pred, truth)
    early = truth.timestamps <= FAILURE_WINDOW_S + 1e-9
    dists = np.linalg.norm(pred.waypoints[early] - truth.waypoints[early], axis=1)
    return bool((dists > FAILURE_DISTANCE_M).any())


def _decode_one(model, sample, tpl, config, decoder):
    if decoder == "diffusion":
        return decode_diffusion(model, sample.raster, sample.instruction, tpl, config)
    if decoder == "ar":
        return decode_autoregressive(model, sample.raster, sample.instruction, tpl)
    raise ValueError(f"unknown decoder {decoder!r}")


def evaluate(
    model: MaskPredictor,
    samples: list,
    tpl: FixedPatternTemplate,
    config: DecodeConfig,
    decoder: str = "diffusion",
    horizons=DEFAULT_HORIZONS,
    l2_mode: str = "horizon",
    keep_records: bool = False,
) -> EvalResult:
    """Decode every sample and aggregate accuracy plus latency.

    Wall-clock covers the decode call only; metrics are deterministic given
    the model and samples, while timings are not.
    """
    if not samples:
        raise ValueError("evaluation split must be nonempty")
    horizon_errors = {h: [] for h in horizons}
    failures = 0
    malformed = 0
    times, calls, steps = [], [], []
    records = []

    for sample in samples:
        try:
            pred, trace = _decode_one(model, sample, tpl, config, decoder)
        except MalformedSequence:
            malformed += 1
            failures += 1
            records.append({"seed": sample.seed, "pred": None, "failure": True})
            continue
        times.append(trace.wallclock_s)
        calls.append(trace.model_calls)
        steps.append(len(trace.steps))
        failed = is_failure(pred, sample.truth)
        failures += failed
        for h in horizons:
            horizon_errors[h].append(l2_error(pred, sample.truth, h, l2_mode))
        if keep_records:
            records.append(
                {
                    "seed": sample.seed,
                    "pred": pred,
                    "truth": sample.truth,
                    "failure": bool(failed),
                    "wallclock_s": trace.wallclock_s,
                    "model_calls": trace.model_calls,
                }
            )

    l2_at = {h: float(np.mean(v)) if v else float("nan") for h, v in horizon_errors.items()}
    metrics = PlanMetrics(
        l2_at=l2_at,
        l2_avg=float(np.mean(list(l2_at.values()))),
        failure_rate=failures / len(samples),
        samples=len(samples),
        malformed=malformed,
    )
    latency = LatencyReport(
        mean_wallclock_s=float(np.mean(times)) if times else float("nan"),
        mean_model_calls=float(np.mean(calls)) if calls else float("nan"),
        mean_steps=float(np.mean(steps)) if steps else float("nan"),
        config=f"{decoder} {config.summary()}",
    )
    return EvalResult(metrics, latency, records)


def ablate_threshold(
    model: MaskPredictor,
    samples: list,
    tpl: FixedPatternTemplate,
    taus,
    steps: int,
    cache_refresh: int | None = None,
) -> list[dict]:
    """One evaluate row per confidence threshold at a fixed step budget."""
    rows = []
    for tau in taus:
        cfg = DecodeConfig(steps=steps, tau=float(tau), cache_refresh=cache_refresh)
        result = evaluate(model, samples, tpl, cfg)
        rows.append(
            {
                "tau": float(tau),
                "l2_avg": result.metrics.l2_avg,
                "mean_time_s": result.latency.mean_wallclock_s,
                "mean_steps": result.latency.mean_steps,
            }
        )
    return rows


def ablate_steps(
    model: MaskPredictor,
    samples: list,
    tpl: FixedPatternTemplate,
    step_counts,
    fixed_pattern: bool,
    tau: float = 0.5,
) -> list[dict]:
    """Step-budget sweep for one template mode (pass the matching model/template)."""
    rows = []
    for steps in step_counts:
        cfg = DecodeConfig(steps=int(steps), tau=tau)
        result = evaluate(model, samples, tpl, cfg)
        rows.append(
            {
                "steps": int(steps),
                "fixed_pattern": "on" if fixed_pattern else "off",
                "l2_avg": result.metrics.l2_avg,
                "failure_rate": result.metrics.failure_rate,
                "mean_time_s": result.latency.mean_wallclock_s,
                "mean_calls": result.latency.mean_model_calls,
            }
        )
    return rows


def parking_success(
    model: MaskPredictor,
    samples: list,
    tpl: FixedPatternTemplate,
    config: DecodeConfig,
    radius: float = 1.5,
) -> tuple[float, float]:
    """Fraction of decodes landing within half a spot width of the target spot."""
    if not samples:
        raise ValueError("parking split must be nonempty")
    hits = 0
    times = []
    for sample in samples:
        try:
            pred, trace = decode_diffusion(model, sample.raster, sample.instruction, tpl, config)
        except MalformedSequence:
            continue
        times.append(trace.wallclock_s)
        if np.linalg.norm(pred.waypoints[0] - np.asarray(sample.best_spot)) <= radius:
            hits += 1
    return hits / len(samples), float(np.mean(times)) if times else float("nan")


def write_csv(path, header: list[str], rows: list[dict], config_echo: str = "") -> None:
    """Fixed-header CSV; the resolved run configuration rides in a leading comment."""
    with open(path, "w", newline="") as fh:
        if config_echo:
            fh.write(f"# {config_echo}\n")
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in header})


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def summary_text(metrics: PlanMetrics, latency: LatencyReport) -> str:
    """Human-readable block with the standard metric names."""
    lines = [
        f"samples          : {metrics.samples}",
        *(f"L2 (m) {h:.0f} s       : {metrics.l2_at[h]:.3f}" for h in sorted(metrics.l2_at)),
        f"L2 (m) Avg       : {metrics.l2_avg:.3f}",
        f"Failure Rate (%) : {100.0 * metrics.failure_rate:.2f}",
        f"mean model calls : {latency.mean_model_calls:.1f}",
        f"mean decode time : {latency.mean_wallclock_s * 1e3:.1f} ms",
        f"decode config    : {latency.config}",
    ]
    return "\n".join(lines)
