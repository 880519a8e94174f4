"""Synthetic driving scenes and a command-conditioned parking lot generator.

Every sample is a pure function of its seed.  Scenario parameters are drawn
from small discrete grids and rendered into the raster (path curve, speed
bar, stop marker, lot occupancy), so instruction + raster jointly determine
the ground truth with no irreducible noise.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import codec
from .codec import Trajectory, Vocabulary, default_vocabulary

GENERATOR_VERSION = "1"

RASTER_SIZE = 16
RASTER_CHANNELS = 2  # 0: obstacles / parked cars, 1: lane path / markers
CONTEXT_LEN = 6
DT = 0.5
WAYPOINTS = 6

SPEED_LEVELS = np.linspace(4.0, 12.0, 9)  # m/s, encoded as a bar in the raster
TURN_RATES = (0.2, 0.35, 0.5, 0.65)  # rad/s
STOP_TIMES = (1.0, 1.5, 2.0)  # s until full stop

SCENARIOS = ("straight", "left", "right", "stop")
INSTRUCTIONS = {
    "straight": ("go", "straight"),
    "left": ("turn", "left"),
    "right": ("turn", "right"),
    "stop": ("stop", "at", "sign"),
}

# world extent mapped onto the raster grid
X_RANGE = (0.0, 38.0)
Y_RANGE = (-28.0, 28.0)

# fixed parking lot: two rows of five spots, entrance at the bottom middle
SPOT_CENTERS = tuple(
    (float(x), float(y)) for y in (5.0, 11.0) for x in (2.0, 5.0, 8.0, 11.0, 14.0)
)
SPOT_PITCH = 3.0
ENTRANCE = (8.0, 1.0)
PARKING_COMMANDS = {
    "nearest": ("nearest", "spot"),
    "farthest": ("farthest", "spot"),
    "away_from_cars": ("spot", "away", "from", "other", "cars"),
    "next_to_entrance": ("spot", "next", "to", "entrance"),
}


@dataclass(frozen=True)
class SceneSample:
    raster: np.ndarray
    instruction: np.ndarray
    truth: Trajectory
    scenario_id: str
    seed: int


@dataclass(frozen=True)
class ParkingSample:
    raster: np.ndarray
    instruction: np.ndarray
    truth: Trajectory  # single waypoint: the chosen spot center
    scenario_id: str
    seed: int
    command: str
    valid_spots: tuple[tuple[float, float], ...]
    best_spot: tuple[float, float]


def instruction_ids(words, vocab: Vocabulary | None = None, width: int = CONTEXT_LEN):
    vocab = vocab or default_vocabulary()
    if len(words) > width:
        raise ValueError(f"instruction longer than context width {width}")
    padded = tuple(words) + (codec.PAD_WORD,) * (width - len(words))
    return np.array(vocab.ids(padded), dtype=np.int64)


def _cell(x: float, y: float) -> tuple[int, int]:
    col = int((x - X_RANGE[0]) / (X_RANGE[1] - X_RANGE[0]) * (RASTER_SIZE - 1) + 0.5)
    row = int((y - Y_RANGE[0]) / (Y_RANGE[1] - Y_RANGE[0]) * (RASTER_SIZE - 1) + 0.5)
    return min(max(row, 0), RASTER_SIZE - 1), min(max(col, 0), RASTER_SIZE - 1)


def _kinematics(scenario, speed, turn_rate, stop_time, times: np.ndarray) -> np.ndarray:
    if scenario == "straight":
        return np.stack([speed * times, np.zeros_like(times)], axis=1)
    if scenario in ("left", "right"):
        radius = speed / turn_rate
        sign = 1.0 if scenario == "left" else -1.0
        return np.stack(
            [radius * np.sin(turn_rate * times), sign * radius * (1.0 - np.cos(turn_rate * times))],
            axis=1,
        )
    if scenario == "stop":
        # constant deceleration to rest at stop_time, then hold position
        t = np.minimum(times, stop_time)
        x = speed * t - speed * t**2 / (2.0 * stop_time)
        return np.stack([x, np.zeros_like(times)], axis=1)
    raise ValueError(f"unknown scenario {scenario!r}")


def _trajectory(scenario: str, speed: float, turn_rate: float, stop_time: float) -> Trajectory:
    times = DT * np.arange(1, WAYPOINTS + 1)
    return Trajectory(_kinematics(scenario, speed, turn_rate, stop_time, times), dt=DT)


def _render_scene(scenario, speed_level, turn_rate, stop_time) -> np.ndarray:
    raster = np.zeros((RASTER_CHANNELS, RASTER_SIZE, RASTER_SIZE), dtype=np.float32)
    # speed bar in column 0 of the lane channel
    raster[1, : speed_level + 1, 0] = 1.0
    # dense path curve so curvature is visible at raster resolution
    speed = float(SPEED_LEVELS[speed_level])
    fine = np.linspace(0.0, DT * WAYPOINTS, 60)
    for x, y in _kinematics(scenario, speed, turn_rate, stop_time, fine):
        r, c = _cell(float(x), float(y))
        raster[1, r, c] = 1.0
    if scenario == "stop":
        end = _kinematics(scenario, speed, turn_rate, stop_time, np.array([stop_time]))[0]
        r, c = _cell(float(end[0]), float(end[1]))
        raster[0, max(r - 1, 0) : r + 2, min(c + 1, RASTER_SIZE - 1)] = 1.0
    return raster


def generate_scene(seed: int, vocab: Vocabulary | None = None) -> SceneSample:
    """One driving scene: raster, instruction tokens, and closed-form ground truth."""
    rng = np.random.default_rng(seed)
    scenario = SCENARIOS[rng.integers(len(SCENARIOS))]
    speed_level = int(rng.integers(len(SPEED_LEVELS)))
    speed = float(SPEED_LEVELS[speed_level])
    turn_rate = float(TURN_RATES[rng.integers(len(TURN_RATES))])
    stop_time = float(STOP_TIMES[rng.integers(len(STOP_TIMES))])

    truth = _trajectory(scenario, speed, turn_rate, stop_time)
    raster = _render_scene(scenario, speed_level, turn_rate, stop_time)
    return SceneSample(
        raster=raster,
        instruction=instruction_ids(INSTRUCTIONS[scenario], vocab),
        truth=truth,
        scenario_id=scenario,
        seed=int(seed),
    )


def _best_spot(command: str, free: list[int], occupied: list[int]) -> int:
    """Closed-form spot choice; ties break on the lowest spot index."""
    centers = np.asarray(SPOT_CENTERS)
    entrance = np.asarray(ENTRANCE)
    if command == "nearest":
        score = -np.linalg.norm(centers[free] - entrance, axis=1)
    elif command == "farthest":
        score = np.linalg.norm(centers[free] - entrance, axis=1)
    elif command == "next_to_entrance":
        score = -np.abs(centers[free] - entrance).sum(axis=1)
    elif command == "away_from_cars":
        if occupied:
            dists = np.linalg.norm(
                centers[free][:, None, :] - centers[occupied][None, :, :], axis=2
            )
            score = dists.min(axis=1)
        else:
            score = np.zeros(len(free))
    else:
        raise ValueError(f"unknown command {command!r}")
    order = np.lexsort((np.asarray(free), -score))
    return free[order[0]]


def generate_parking(seed: int, vocab: Vocabulary | None = None) -> ParkingSample:
    """One parking task: lot occupancy raster, spoken-style command, chosen spot."""
    rng = np.random.default_rng(seed)
    n_occupied = int(rng.integers(2, 7))
    occupied = sorted(rng.choice(len(SPOT_CENTERS), size=n_occupied, replace=False).tolist())
    free = [i for i in range(len(SPOT_CENTERS)) if i not in occupied]
    command = tuple(PARKING_COMMANDS)[rng.integers(len(PARKING_COMMANDS))]
    best = _best_spot(command, free, occupied)

    raster = np.zeros((RASTER_CHANNELS, RASTER_SIZE, RASTER_SIZE), dtype=np.float32)
    for i, (x, y) in enumerate(SPOT_CENTERS):
        r, c = int(y), int(x)
        raster[1, r, c] = 1.0
        if i in occupied:
            raster[0, r - 1 : r + 2, c - 1 : c + 2] = 1.0
    raster[1, int(ENTRANCE[1]), int(ENTRANCE[0])] = 1.0

    best_center = SPOT_CENTERS[best]
    return ParkingSample(
        raster=raster,
        instruction=instruction_ids(PARKING_COMMANDS[command], vocab),
        truth=Trajectory(np.array([best_center]), dt=DT),
        scenario_id=f"parking/{command}",
        seed=int(seed),
        command=command,
        valid_spots=tuple(SPOT_CENTERS[i] for i in free),
        best_spot=best_center,
    )


def generate(seed: int, kind: str, vocab: Vocabulary | None = None):
    if kind == "driving":
        return generate_scene(seed, vocab)
    if kind == "parking":
        return generate_parking(seed, vocab)
    raise ValueError(f"unknown dataset kind {kind!r}")


def emit_dataset(count: int, seed: int, kind: str, path, tpl=None) -> Path:
    """Line-oriented dataset file plus a sibling manifest; split by seed range."""
    if count < 1:
        raise ValueError("count must be >= 1")
    path = Path(path)
    if path.parent and not path.parent.exists():
        raise OSError(f"output directory does not exist: {path.parent}")
    vocab = default_vocabulary()

    lines = []
    for i in range(count):
        sample = generate(seed + i, kind, vocab)
        record = {
            "seed": sample.seed,
            "kind": kind,
            "scenario": sample.scenario_id,
            "instruction": sample.instruction.tolist(),
            "truth": [[round(float(x), 6) for x in wp] for wp in sample.truth.waypoints],
        }
        if tpl is not None:
            record["tokens"] = codec.encode(sample.truth, tpl).ids.tolist()
        lines.append(json.dumps(record, sort_keys=True))
    payload = "\n".join(lines) + "\n"
    path.write_text(payload)

    manifest = {
        "generator_version": GENERATOR_VERSION,
        "kind": kind,
        "count": count,
        "seed_start": seed,
        "seed_end": seed + count - 1,
        "sha256": hashlib.sha256(payload.encode()).hexdigest(),
    }
    Path(str(path) + ".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(path) -> list:
    """Regenerate samples from the seeds recorded in a dataset file."""
    samples = []
    with open(path) as fh:
        for line in fh:
            record = json.loads(line)
            samples.append(generate(record["seed"], record["kind"]))
    return samples
