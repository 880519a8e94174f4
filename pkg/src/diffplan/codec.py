"""Token vocabulary, fixed-pattern templates, and the trajectory <-> token codec.

A trajectory is rendered into a rigid character-level layout: every waypoint
occupies a fixed window of sign/digit slots wrapped in punctuation, so the
token sequence always has the same length and the same formatting tokens at
the same positions.  Generation then only has to fill the value slots.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DIGITS = tuple("0123456789")
SIGNS = ("+", "-")
POINT = "."
LBRACK = "["
RBRACK = "]"
COMMA = ","
TERMINATOR = ";"
PUNCTUATION = (LBRACK, RBRACK, COMMA, TERMINATOR)
PAD_WORD = "<pad>"
INSTRUCTION_WORDS = (
    "go", "straight", "turn", "left", "right", "stop", "at", "sign",
    "spot", "nearest", "farthest", "away", "from", "other", "cars",
    "next", "to", "entrance", PAD_WORD,
)
MASK_SYMBOL = "[M]"


class MalformedSequence(ValueError):
    """Raised when a token sequence cannot be parsed back into a trajectory."""


@dataclass(frozen=True)
class Vocabulary:
    """Ordered symbol table with dense ids; the mask symbol is reserved and last."""

    symbols: tuple[str, ...]
    id_of: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate symbols in vocabulary")
        if MASK_SYMBOL not in self.symbols:
            raise ValueError("vocabulary must contain the mask symbol")
        object.__setattr__(self, "id_of", {s: i for i, s in enumerate(self.symbols)})

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def mask_id(self) -> int:
        return self.id_of[MASK_SYMBOL]

    def ids(self, words: Iterable[str]) -> list[int]:
        return [self.id_of[w] for w in words]

    def symbol(self, token_id: int) -> str:
        return self.symbols[token_id]


def default_vocabulary() -> Vocabulary:
    """Digits, signs, point, template punctuation, instruction words, then [M]."""
    symbols = DIGITS + SIGNS + (POINT,) + PUNCTUATION + INSTRUCTION_WORDS + (MASK_SYMBOL,)
    return Vocabulary(symbols)


@dataclass(frozen=True)
class CoordinateSlot:
    """Positions of one fixed-width signed decimal: sign, integer digits, fraction digits."""

    sign: int
    int_digits: tuple[int, ...]
    frac_digits: tuple[int, ...]

    @property
    def all_positions(self) -> tuple[int, ...]:
        return (self.sign,) + self.int_digits + self.frac_digits


@dataclass(frozen=True)
class FixedPatternTemplate:
    """Partition of the output window into frozen formatting slots and free value slots.

    ``frozen_positions`` never carry mask tokens and are pinned to
    ``frozen_ids``.  ``punct_positions`` lists the structural punctuation
    (brackets, commas, decimal points, terminator) together with the token
    expected there; for the standard template it coincides with the frozen
    set, while :func:`degenerate_template` keeps the expectation but makes
    every position maskable.
    """

    waypoint_count: int
    int_width: int
    frac_width: int
    length: int
    frozen_positions: tuple[int, ...]
    frozen_ids: tuple[int, ...]
    free_positions: tuple[int, ...]
    slot_layout: tuple[tuple[CoordinateSlot, CoordinateSlot], ...]
    punct_positions: tuple[int, ...]
    punct_ids: tuple[int, ...]
    vocab: Vocabulary

    def __post_init__(self):
        claimed = set(self.frozen_positions) | set(self.free_positions)
        if claimed != set(range(self.length)) or len(self.frozen_positions) + len(
            self.free_positions
        ) != self.length:
            raise ValueError("frozen and free positions must partition the template")

    @property
    def free_count(self) -> int:
        return len(self.free_positions)

    @property
    def fixed_pattern(self) -> bool:
        return len(self.frozen_positions) > 0

    def to_config_block(self) -> str:
        return (
            f"waypoint_count = {self.waypoint_count}\n"
            f"int_digits = {self.int_width}\n"
            f"frac_digits = {self.frac_width}\n"
            f"fixed_pattern = {'on' if self.fixed_pattern else 'off'}\n"
        )


@dataclass
class TokenSequence:
    """Token ids plus per-position mask flags over one template window."""

    ids: np.ndarray
    masked: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.masked = np.asarray(self.masked, dtype=bool)
        if self.ids.shape != self.masked.shape or self.ids.ndim != 1:
            raise ValueError("ids and masked must be 1-d arrays of equal length")

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def copy(self) -> "TokenSequence":
        return TokenSequence(self.ids.copy(), self.masked.copy())

    def any_masked(self) -> bool:
        return bool(self.masked.any())

    def masked_positions(self) -> np.ndarray:
        return np.flatnonzero(self.masked)


@dataclass(frozen=True)
class Trajectory:
    """Waypoints (x forward, y lateral) in meters at uniform time spacing."""

    waypoints: np.ndarray
    dt: float = 0.5

    def __post_init__(self):
        wp = np.asarray(self.waypoints, dtype=float)
        if wp.ndim != 2 or wp.shape[1] != 2 or wp.shape[0] < 1:
            raise ValueError("waypoints must be a (n, 2) array with n >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "waypoints", wp)

    def __len__(self) -> int:
        return int(self.waypoints.shape[0])

    @property
    def timestamps(self) -> np.ndarray:
        return self.dt * np.arange(1, len(self) + 1)


def build_template(
    waypoint_count: int,
    digit_widths: tuple[int, int],
    vocab: Vocabulary | None = None,
) -> FixedPatternTemplate:
    """Lay out ``[sx..x.f..f,sy..y.f..f]`` per waypoint plus a terminator.

    Brackets, commas, decimal points and the terminator are frozen; signs and
    digits are free.  Length is ``n * (2 * (D + F) + 7) + 1``.
    """
    int_width, frac_width = digit_widths
    if waypoint_count < 1:
        raise ValueError("waypoint_count must be >= 1")
    if int_width < 1 or frac_width < 1:
        raise ValueError("digit widths must be >= 1")
    vocab = vocab or default_vocabulary()

    punct: list[tuple[int, int]] = []
    free: list[int] = []
    layout: list[tuple[CoordinateSlot, CoordinateSlot]] = []
    pos = 0

    def coordinate_slot() -> CoordinateSlot:
        nonlocal pos
        sign = pos
        pos += 1
        ints = tuple(range(pos, pos + int_width))
        pos += int_width
        punct.append((pos, vocab.id_of[POINT]))
        pos += 1
        fracs = tuple(range(pos, pos + frac_width))
        pos += frac_width
        slot = CoordinateSlot(sign, ints, fracs)
        free.extend(slot.all_positions)
        return slot

    for _ in range(waypoint_count):
        punct.append((pos, vocab.id_of[LBRACK]))
        pos += 1
        x_slot = coordinate_slot()
        punct.append((pos, vocab.id_of[COMMA]))
        pos += 1
        y_slot = coordinate_slot()
        punct.append((pos, vocab.id_of[RBRACK]))
        pos += 1
        layout.append((x_slot, y_slot))
    punct.append((pos, vocab.id_of[TERMINATOR]))
    pos += 1

    punct_positions = tuple(p for p, _ in punct)
    punct_ids = tuple(i for _, i in punct)
    return FixedPatternTemplate(
        waypoint_count=waypoint_count,
        int_width=int_width,
        frac_width=frac_width,
        length=pos,
        frozen_positions=punct_positions,
        frozen_ids=punct_ids,
        free_positions=tuple(sorted(free)),
        slot_layout=tuple(layout),
        punct_positions=punct_positions,
        punct_ids=punct_ids,
        vocab=vocab,
    )


def degenerate_template(tpl: FixedPatternTemplate) -> FixedPatternTemplate:
    """Same layout with nothing frozen: punctuation becomes maskable output too."""
    return FixedPatternTemplate(
        waypoint_count=tpl.waypoint_count,
        int_width=tpl.int_width,
        frac_width=tpl.frac_width,
        length=tpl.length,
        frozen_positions=(),
        frozen_ids=(),
        free_positions=tuple(range(tpl.length)),
        slot_layout=tpl.slot_layout,
        punct_positions=tpl.punct_positions,
        punct_ids=tpl.punct_ids,
        vocab=tpl.vocab,
    )


def _scaled_magnitude(value: float, frac_width: int) -> int:
    # round half away from zero on the magnitude, deterministic on floats
    return int(np.floor(abs(float(value)) * 10**frac_width + 0.5))


def encode(traj: Trajectory, tpl: FixedPatternTemplate) -> TokenSequence:
    """Render a trajectory into a fully unmasked template-conformant sequence."""
    if len(traj) != tpl.waypoint_count:
        raise ValueError(
            f"trajectory has {len(traj)} waypoints, template expects {tpl.waypoint_count}"
        )
    vocab = tpl.vocab
    ids = np.empty(tpl.length, dtype=np.int64)
    ids[list(tpl.punct_positions)] = tpl.punct_ids

    limit = 10 ** (tpl.int_width + tpl.frac_width)
    for (x_slot, y_slot), (x, y) in zip(tpl.slot_layout, traj.waypoints):
        for slot, value in ((x_slot, x), (y_slot, y)):
            magnitude = _scaled_magnitude(value, tpl.frac_width)
            if magnitude >= limit:
                raise OverflowError(
                    f"coordinate {value!r} does not fit {tpl.int_width} integer digits"
                )
            sign = "-" if value < 0 and magnitude > 0 else "+"
            digits = str(magnitude).zfill(tpl.int_width + tpl.frac_width)
            ids[slot.sign] = vocab.id_of[sign]
            for p, ch in zip(slot.int_digits, digits[: tpl.int_width]):
                ids[p] = vocab.id_of[ch]
            for p, ch in zip(slot.frac_digits, digits[tpl.int_width :]):
                ids[p] = vocab.id_of[ch]
    return TokenSequence(ids, np.zeros(tpl.length, dtype=bool))


def decode(seq: TokenSequence, tpl: FixedPatternTemplate) -> Trajectory:
    """Parse a fully unmasked sequence back into numbers; inverse of :func:`encode`."""
    if len(seq) != tpl.length:
        raise MalformedSequence(f"sequence length {len(seq)} != template length {tpl.length}")
    if seq.masked.any():
        raise MalformedSequence("sequence still contains masked positions")
    vocab = tpl.vocab
    for p, expected in zip(tpl.punct_positions, tpl.punct_ids):
        if seq.ids[p] != expected:
            raise MalformedSequence(
                f"position {p} holds {vocab.symbol(int(seq.ids[p]))!r}, "
                f"expected {vocab.symbol(expected)!r}"
            )

    digit_ids = {vocab.id_of[d]: int(d) for d in DIGITS}
    sign_ids = {vocab.id_of["+"]: 1.0, vocab.id_of["-"]: -1.0}

    def read_slot(slot: CoordinateSlot) -> float:
        sign_tok = int(seq.ids[slot.sign])
        if sign_tok not in sign_ids:
            raise MalformedSequence(f"position {slot.sign} is not a sign token")
        value = 0
        for p in slot.int_digits + slot.frac_digits:
            tok = int(seq.ids[p])
            if tok not in digit_ids:
                raise MalformedSequence(f"position {p} is not a digit token")
            value = value * 10 + digit_ids[tok]
        return sign_ids[sign_tok] * value / 10**tpl.frac_width

    waypoints = [
        (read_slot(x_slot), read_slot(y_slot)) for x_slot, y_slot in tpl.slot_layout
    ]
    return Trajectory(np.array(waypoints, dtype=float))


def fresh_masked(tpl: FixedPatternTemplate) -> TokenSequence:
    """All free positions masked, frozen positions pre-filled from the template."""
    ids = np.full(tpl.length, tpl.vocab.mask_id, dtype=np.int64)
    masked = np.ones(tpl.length, dtype=bool)
    if tpl.frozen_positions:
        idx = list(tpl.frozen_positions)
        ids[idx] = tpl.frozen_ids
        masked[idx] = False
    return TokenSequence(ids, masked)


def render(seq: TokenSequence, vocab: Vocabulary | None = None) -> str:
    """The literal fixed-pattern string, with [M] shown at masked positions."""
    vocab = vocab or default_vocabulary()
    return "".join(vocab.symbol(int(t)) for t in seq.ids)


def check_template_conformance(seq: TokenSequence, tpl: FixedPatternTemplate) -> None:
    """Raise if frozen positions were altered or mask flags disagree with ids."""
    if len(seq) != tpl.length:
        raise MalformedSequence("wrong sequence length for template")
    mask_id = tpl.vocab.mask_id
    if not np.array_equal(seq.masked, seq.ids == mask_id):
        raise MalformedSequence("mask flags disagree with mask tokens")
    for p, expected in zip(tpl.frozen_positions, tpl.frozen_ids):
        if seq.ids[p] != expected or seq.masked[p]:
            raise MalformedSequence(f"frozen position {p} was altered")
