"""Parallel confidence-aware demasking, a prompt-activation cache, and a
left-to-right reference decoder.

One demasking step predicts every masked position at once, then commits the
``max(ceil(free/S), #{confidence > tau})`` most confident predictions and
leaves the rest masked for later steps.  Easy positions therefore resolve
first and the loop finishes within S steps regardless of the threshold.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import codec
from .codec import FixedPatternTemplate, TokenSequence, Trajectory
from .model import MaskPredictor, ModelInput, softmax_rows


@dataclass(frozen=True)
class DecodeConfig:
    """Knobs of the speed/quality trade-off: steps S, threshold tau, cache policy."""

    steps: int = 32
    tau: float = 0.5
    cache_refresh: int | None = None  # None = cache off; K = refresh interval in steps

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.cache_refresh is not None and self.cache_refresh < 1:
            raise ValueError("cache refresh interval must be >= 1")

    def summary(self) -> str:
        cache = "off" if self.cache_refresh is None else f"prompt-cache(K={self.cache_refresh})"
        return f"S={self.steps} tau={self.tau} cache={cache}"


@dataclass
class StepRecord:
    index: int
    pred_ids: np.ndarray
    confidence: np.ndarray
    unmasked: tuple[int, ...]


@dataclass
class DecodeTrace:
    decoder: str
    steps: list[StepRecord] = field(default_factory=list)
    model_calls: int = 0
    wallclock_s: float = 0.0
    cache_hits: int = 0
    cache_refreshes: int = 0

    def unmask_order(self) -> list[int]:
        order = []
        for rec in self.steps:
            order.extend(rec.unmasked)
        return order

    def write_jsonl(self, path) -> None:
        """One step per line: step index, unmasked positions, confidences, ids."""
        with open(path, "w") as fh:
            for rec in self.steps:
                fh.write(
                    json.dumps(
                        {
                            "step": rec.index,
                            "unmasked": list(map(int, rec.unmasked)),
                            "confidence": [round(float(c), 6) for c in rec.confidence],
                            "ids": list(map(int, rec.pred_ids)),
                        }
                    )
                    + "\n"
                )


def _argmax_without_mask(probs: np.ndarray, mask_id: int):
    """Greedy token per row, never the mask symbol; ties go to the lowest id."""
    scored = probs.copy()
    scored[..., mask_id] = -1.0
    ids = scored.argmax(axis=-1)
    conf = np.take_along_axis(probs, ids[..., None], axis=-1)[..., 0]
    return ids, conf


def predict_all(model: MaskPredictor, inp: ModelInput, vocab: codec.Vocabulary | None = None):
    """One forward call; per-position argmax ids and their softmax probabilities."""
    if not inp.response.masked.any():
        raise ValueError("input response has no masked positions")
    vocab = vocab or codec.default_vocabulary()
    probs = model.forward(inp)
    return _argmax_without_mask(probs, vocab.mask_id)


def remask(
    y_t: TokenSequence,
    pred_ids: np.ndarray,
    confidence: np.ndarray,
    tpl: FixedPatternTemplate,
    steps: int,
    tau: float,
) -> TokenSequence:
    """Commit the top-confidence masked predictions, keep the rest masked.

    The number committed is ``max(ceil(|free|/S), #{masked i: confidence_i > tau})``,
    capped by how many positions are still masked.  Frozen and previously
    committed positions are untouched; ties break on position index.
    """
    masked_idx = y_t.masked_positions()
    if masked_idx.size == 0:
        raise ValueError("sequence has no masked positions")
    floor = -(-tpl.free_count // steps)  # ceil division
    over_threshold = int((confidence[masked_idx] > tau).sum())
    n_unmask = min(max(floor, over_threshold), masked_idx.size)

    order = np.lexsort((masked_idx, -confidence[masked_idx]))
    chosen = masked_idx[order[:n_unmask]]
    out = y_t.copy()
    out.ids[chosen] = pred_ids[chosen]
    out.masked[chosen] = False
    return out


def demask(
    model: MaskPredictor,
    scene: np.ndarray,
    context: np.ndarray,
    tpl: FixedPatternTemplate,
    config: DecodeConfig,
):
    """Run the demasking loop from a fresh template; returns (TokenSequence, DecodeTrace).

    Token-level entry point: the sequence is fully unmasked on return but not
    yet parsed, so callers can inspect traces even for unparseable outputs.
    """
    mask_id = tpl.vocab.mask_id
    scene = np.asarray(scene, dtype=model.config.np_dtype)
    context = np.asarray(context, dtype=np.int64)
    seq = codec.fresh_masked(tpl)
    trace = DecodeTrace(decoder="diffusion")
    cache = None

    start = time.perf_counter()
    step = 0
    while seq.any_masked():
        step += 1
        if config.cache_refresh is None:
            logits = model.forward_batch(scene[None], context[None], seq.ids[None])
        elif (step - 1) % config.cache_refresh == 0:
            logits, cache = model.build_prompt_cache(scene[None], context[None], seq.ids[None])
            trace.cache_refreshes += 1
        else:
            logits = model.forward_response_cached(cache, seq.ids[None])
            trace.cache_hits += model.config.prompt_len
        trace.model_calls += 1

        probs = softmax_rows(logits[0])
        pred_ids, conf = _argmax_without_mask(probs, mask_id)
        before = seq.masked.copy()
        seq = remask(seq, pred_ids, conf, tpl, config.steps, config.tau)
        newly = tuple(np.flatnonzero(before & ~seq.masked))
        trace.steps.append(StepRecord(step, pred_ids, conf, newly))
    trace.wallclock_s = time.perf_counter() - start
    return seq, trace


def decode_diffusion(
    model: MaskPredictor,
    scene: np.ndarray,
    context: np.ndarray,
    tpl: FixedPatternTemplate,
    config: DecodeConfig,
):
    """Iterative parallel demasking from a fresh template; returns (Trajectory, DecodeTrace).

    Alternates predict-all and remask until no masks remain; raises
    MalformedSequence if the final sequence fails to parse.
    """
    seq, trace = demask(model, scene, context, tpl, config)
    return codec.decode(seq, tpl), trace


def decode_autoregressive(
    model: MaskPredictor,
    scene: np.ndarray,
    context: np.ndarray,
    tpl: FixedPatternTemplate,
):
    """Left-to-right greedy baseline: one prefix-causal model call per free position."""
    mask_id = tpl.vocab.mask_id
    scene = np.asarray(scene, dtype=model.config.np_dtype)
    context = np.asarray(context, dtype=np.int64)
    seq = codec.fresh_masked(tpl)
    trace = DecodeTrace(decoder="ar")

    start = time.perf_counter()
    for step, pos in enumerate(tpl.free_positions, start=1):
        row = model.forward_ar(ModelInput(scene, context, seq), pos, tpl)
        ids, conf = _argmax_without_mask(row[None], mask_id)
        seq.ids[pos] = ids[0]
        seq.masked[pos] = False
        trace.model_calls += 1

        pred_full = np.full(tpl.length, mask_id, dtype=np.int64)
        conf_full = np.zeros(tpl.length)
        pred_full[pos] = ids[0]
        conf_full[pos] = conf[0]
        trace.steps.append(StepRecord(step, pred_full, conf_full, (int(pos),)))
    trace.wallclock_s = time.perf_counter() - start

    return codec.decode(seq, tpl), trace
