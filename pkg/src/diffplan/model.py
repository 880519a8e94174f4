"""Bidirectional mask predictor: patch encoder, connector, attention stack, token head.

Plain numpy with hand-written backward passes, so the training objective has
exact analytic gradients.  Shapes follow (B, T, D) = batch, positions, width;
attention uses (B, h, T, dh) with D = h * dh.  The same weights serve three
inference modes: full bidirectional attention over the whole window, a
prefix-truncated pass for the left-to-right baseline, and a response-only
pass against cached prompt keys/values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .codec import TokenSequence, default_vocabulary


class DimensionMismatch(ValueError):
    """Input raster or token shapes do not match the model configuration."""


class NoMaskedPositions(ValueError):
    """The loss has an empty mask set; the caller must resample the noise level."""


def softmax_rows(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class ModelConfig:
    """Toy dimensions; defaults train in minutes on a laptop CPU."""

    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 4
    d_ff: int = 128
    raster_size: int = 16
    raster_channels: int = 2
    patch_size: int = 4
    context_len: int = 6
    response_len: int = 79
    vocab_size: int = len(default_vocabulary())
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.raster_size % self.patch_size:
            raise ValueError("raster_size must be divisible by patch_size")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def n_patches(self) -> int:
        return (self.raster_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.raster_channels * self.patch_size**2

    @property
    def prompt_len(self) -> int:
        return self.n_patches + self.context_len

    @property
    def total_len(self) -> int:
        return self.prompt_len + self.response_len


@dataclass
class ModelInput:
    """One conditioning bundle; concatenation order is [scene patches, context, response]."""

    scene: np.ndarray
    context_tokens: np.ndarray
    response: TokenSequence


def _glorot(rng, d_in, d_out, dtype):
    std = np.sqrt(2.0 / (d_in + d_out))
    return rng.normal(0.0, std, size=(d_in, d_out)).astype(dtype)


class Linear:
    def __init__(self, d_in, d_out, rng, dtype, zero_init=False, bias=True):
        if zero_init:
            self.W = np.zeros((d_in, d_out), dtype=dtype)
        else:
            self.W = _glorot(rng, d_in, d_out, dtype)
        self.params = {"W": self.W}
        self.grads = {"W": np.zeros_like(self.W)}
        self.b = np.zeros(d_out, dtype=dtype) if bias else None
        if bias:
            self.params["b"] = self.b
            self.grads["b"] = np.zeros_like(self.b)
        self._x = None

    def forward(self, x, train=False):
        if train:
            self._x = x
        y = x @ self.W
        return y + self.b if self.b is not None else y

    def backward(self, dy):
        x = self._x
        d_in = x.shape[-1]
        d_out = dy.shape[-1]
        xf = x.reshape(-1, d_in)
        dyf = dy.reshape(-1, d_out)
        self.grads["W"] += xf.T @ dyf
        if self.b is not None:
            self.grads["b"] += dyf.sum(axis=0)
        return (dyf @ self.W.T).reshape(x.shape)


class LayerNorm:
    def __init__(self, d, dtype, eps=1e-5):
        self.gamma = np.ones(d, dtype=dtype)
        self.beta = np.zeros(d, dtype=dtype)
        self.eps = eps
        self.params = {"gamma": self.gamma, "beta": self.beta}
        self.grads = {"gamma": np.zeros_like(self.gamma), "beta": np.zeros_like(self.beta)}
        self._cache = None

    def forward(self, x, train=False):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        sigma = np.sqrt(var + self.eps)
        xhat = (x - mu) / sigma
        if train:
            self._cache = (xhat, sigma)
        return xhat * self.gamma + self.beta

    def backward(self, dy):
        xhat, sigma = self._cache
        sum_axes = tuple(range(dy.ndim - 1))
        self.grads["gamma"] += (dy * xhat).sum(axis=sum_axes)
        self.grads["beta"] += dy.sum(axis=sum_axes)
        ghat = dy * self.gamma
        m1 = ghat.mean(axis=-1, keepdims=True)
        m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
        return (ghat - m1 - xhat * m2) / sigma


class SelfAttention:
    """Full (non-causal by default) multi-head self-attention without biases."""

    def __init__(self, d_model, n_heads, rng, dtype):
        self.h = n_heads
        self.dh = d_model // n_heads
        self.wq = Linear(d_model, d_model, rng, dtype, bias=False)
        self.wk = Linear(d_model, d_model, rng, dtype, bias=False)
        self.wv = Linear(d_model, d_model, rng, dtype, bias=False)
        self.wo = Linear(d_model, d_model, rng, dtype, bias=False)
        self._cache = None

    def _split(self, x):
        B, T, D = x.shape
        return x.reshape(B, T, self.h, self.dh).transpose(0, 2, 1, 3)

    def _merge(self, x):
        B, h, T, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, T, h * dh)

    def forward(self, x, train=False, return_kv=False):
        q = self._split(self.wq.forward(x, train))
        k = self._split(self.wk.forward(x, train))
        v = self._split(self.wv.forward(x, train))
        scores = (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(self.dh)
        p = softmax_rows(scores)
        ctx = self._merge(p @ v)
        y = self.wo.forward(ctx, train)
        if train:
            self._cache = (q, k, v, p)
        if return_kv:
            return y, (k, v)
        return y

    def forward_cached(self, xr, k_prompt, v_prompt):
        """Response rows attend over cached prompt keys/values plus themselves."""
        q = self._split(self.wq.forward(xr))
        k = np.concatenate([k_prompt, self._split(self.wk.forward(xr))], axis=2)
        v = np.concatenate([v_prompt, self._split(self.wv.forward(xr))], axis=2)
        scores = (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(self.dh)
        return self.wo.forward(self._merge(softmax_rows(scores) @ v))

    def backward(self, dy):
        q, k, v, p = self._cache
        scale = 1.0 / np.sqrt(self.dh)
        dctx = self._split(self.wo.backward(dy))
        dp = dctx @ v.transpose(0, 1, 3, 2)
        dv = p.transpose(0, 1, 3, 2) @ dctx
        ds = (dp - (dp * p).sum(axis=-1, keepdims=True)) * p
        dq = (ds @ k) * scale
        dk = (ds.transpose(0, 1, 3, 2) @ q) * scale
        dx = self.wq.backward(self._merge(dq))
        dx += self.wk.backward(self._merge(dk))
        dx += self.wv.backward(self._merge(dv))
        return dx

    def sublayers(self):
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}


class FeedForward:
    """Two affine layers around a smooth tanh nonlinearity."""

    def __init__(self, d_model, d_ff, rng, dtype):
        self.fc1 = Linear(d_model, d_ff, rng, dtype)
        self.fc2 = Linear(d_ff, d_model, rng, dtype)
        self._act = None

    def forward(self, x, train=False):
        h = np.tanh(self.fc1.forward(x, train))
        if train:
            self._act = h
        return self.fc2.forward(h, train)

    def backward(self, dy):
        da = self.fc2.backward(dy) * (1.0 - self._act**2)
        return self.fc1.backward(da)

    def sublayers(self):
        return {"fc1": self.fc1, "fc2": self.fc2}


class TransformerBlock:
    """Pre-norm block: x + attn(ln1(x)); then x + ffn(ln2(x))."""

    def __init__(self, d_model, n_heads, d_ff, rng, dtype):
        self.ln1 = LayerNorm(d_model, dtype)
        self.attn = SelfAttention(d_model, n_heads, rng, dtype)
        self.ln2 = LayerNorm(d_model, dtype)
        self.ffn = FeedForward(d_model, d_ff, rng, dtype)

    def forward(self, x, train=False, return_kv=False):
        if return_kv:
            a, kv = self.attn.forward(self.ln1.forward(x), return_kv=True)
            x = x + a
            return x + self.ffn.forward(self.ln2.forward(x)), kv
        x = x + self.attn.forward(self.ln1.forward(x, train), train)
        return x + self.ffn.forward(self.ln2.forward(x, train), train)

    def forward_cached(self, xr, kv):
        xr = xr + self.attn.forward_cached(self.ln1.forward(xr), *kv)
        return xr + self.ffn.forward(self.ln2.forward(xr))

    def backward(self, dy):
        dx = dy + self.ln2.backward(self.ffn.backward(dy))
        return dx + self.ln1.backward(self.attn.backward(dx))

    def sublayers(self):
        layers = {"ln1": self.ln1, "ln2": self.ln2}
        layers.update({f"attn.{k}": v for k, v in self.attn.sublayers().items()})
        layers.update({f"ffn.{k}": v for k, v in self.ffn.sublayers().items()})
        return layers


class MaskPredictor:
    """Per-position token distributions over the response window, exact gradients."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        dtype = config.np_dtype
        rng = np.random.default_rng(seed)
        d = config.d_model

        self.tok_embed = rng.normal(0.0, 0.02, size=(config.vocab_size, d)).astype(dtype)
        self.pos_embed = rng.normal(0.0, 0.02, size=(config.total_len, d)).astype(dtype)
        self.patch_proj = Linear(config.patch_dim, d, rng, dtype)
        self.connector_fc1 = Linear(d, d, rng, dtype)
        self.connector_fc2 = Linear(d, d, rng, dtype)
        self.blocks = [
            TransformerBlock(d, config.n_heads, config.d_ff, rng, dtype)
            for _ in range(config.n_blocks)
        ]
        self.final_ln = LayerNorm(d, dtype)
        # zero head: an untrained model emits uniform rows
        self.head = Linear(d, config.vocab_size, rng, dtype, zero_init=True)

        self._grad_tok = np.zeros_like(self.tok_embed)
        self._grad_pos = np.zeros_like(self.pos_embed)
        self._fwd_cache = None

    # ---- parameter registry ----

    def _layer_registry(self):
        layers = {
            "patch_proj": self.patch_proj,
            "connector.fc1": self.connector_fc1,
            "connector.fc2": self.connector_fc2,
            "final_ln": self.final_ln,
            "head": self.head,
        }
        for i, blk in enumerate(self.blocks):
            layers.update({f"block{i}.{k}": v for k, v in blk.sublayers().items()})
        return layers

    def parameters(self) -> dict[str, np.ndarray]:
        out = {"tok_embed": self.tok_embed, "pos_embed": self.pos_embed}
        for name, layer in self._layer_registry().items():
            for pname, arr in layer.params.items():
                out[f"{name}.{pname}"] = arr
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out = {"tok_embed": self._grad_tok, "pos_embed": self._grad_pos}
        for name, layer in self._layer_registry().items():
            for pname, arr in layer.grads.items():
                out[f"{name}.{pname}"] = arr
        return out

    def zero_grads(self):
        for g in self.gradients().values():
            g.fill(0.0)

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    # ---- input validation and assembly ----

    def _check_batch(self, rasters, ctx_ids, resp_ids):
        cfg = self.config
        expected = (cfg.raster_channels, cfg.raster_size, cfg.raster_size)
        if rasters.ndim != 4 or rasters.shape[1:] != expected:
            raise DimensionMismatch(f"raster batch shape {rasters.shape}, expected (B,) + {expected}")
        if ctx_ids.shape[1] != cfg.context_len:
            raise DimensionMismatch(f"context length {ctx_ids.shape[1]} != {cfg.context_len}")
        if resp_ids.shape[1] != cfg.response_len:
            raise DimensionMismatch(f"response length {resp_ids.shape[1]} != {cfg.response_len}")
        for ids in (ctx_ids, resp_ids):
            if ids.min() < 0 or ids.max() >= cfg.vocab_size:
                raise DimensionMismatch("token id out of vocabulary range")

    def _patches(self, rasters):
        cfg = self.config
        B = rasters.shape[0]
        p, n_side = cfg.patch_size, cfg.raster_size // cfg.patch_size
        x = rasters.reshape(B, cfg.raster_channels, n_side, p, n_side, p)
        x = x.transpose(0, 2, 4, 1, 3, 5).reshape(B, n_side * n_side, cfg.patch_dim)
        return x.astype(cfg.np_dtype)

    def _assemble(self, rasters, ctx_ids, resp_ids, train=False):
        patches = self._patches(rasters)
        a = self.patch_proj.forward(patches, train)
        h = np.tanh(self.connector_fc1.forward(a, train))
        scene = self.connector_fc2.forward(h, train)
        ctx_emb = self.tok_embed[ctx_ids]
        resp_emb = self.tok_embed[resp_ids]
        x = np.concatenate([scene, ctx_emb, resp_emb], axis=1)
        x = x + self.pos_embed[None, : x.shape[1], :]
        if train:
            self._fwd_cache = {"h": h, "ctx_ids": ctx_ids, "resp_ids": resp_ids}
        return x

    # ---- forward / backward ----

    def forward_batch(self, rasters, ctx_ids, resp_ids, train=False):
        """Logits (B, L, |V|) over the response window."""
        self._check_batch(rasters, ctx_ids, resp_ids)
        x = self._assemble(rasters, ctx_ids, resp_ids, train)
        for blk in self.blocks:
            x = blk.forward(x, train=train)
        xr = self.final_ln.forward(x, train)[:, self.config.prompt_len :, :]
        return self.head.forward(xr, train)

    def backward_batch(self, dlogits):
        """Propagate d(loss)/d(logits) into every parameter gradient buffer."""
        cache = self._fwd_cache
        cfg = self.config
        dxr = self.head.backward(dlogits)
        dx_full = np.zeros(
            (dxr.shape[0], cfg.total_len, cfg.d_model), dtype=cfg.np_dtype
        )
        dx_full[:, cfg.prompt_len :, :] = dxr
        dx = self.final_ln.backward(dx_full)
        for blk in reversed(self.blocks):
            dx = blk.backward(dx)

        self._grad_pos += dx.sum(axis=0)
        P0 = cfg.n_patches
        d_scene = dx[:, :P0, :]
        d_ctx = dx[:, P0 : cfg.prompt_len, :]
        d_resp = dx[:, cfg.prompt_len :, :]
        np.add.at(self._grad_tok, cache["ctx_ids"], d_ctx)
        np.add.at(self._grad_tok, cache["resp_ids"], d_resp)
        dh = self.connector_fc2.backward(d_scene) * (1.0 - cache["h"] ** 2)
        self.patch_proj.backward(self.connector_fc1.backward(dh))

    def forward(self, inp: ModelInput) -> np.ndarray:
        """Probability rows (L, |V|); deterministic given parameters and input."""
        logits = self.forward_batch(
            np.asarray(inp.scene, dtype=self.config.np_dtype)[None],
            np.asarray(inp.context_tokens, dtype=np.int64)[None],
            inp.response.ids[None],
        )
        return softmax_rows(logits[0])

    def forward_ar(self, inp: ModelInput, position: int, tpl) -> np.ndarray:
        """Next-token probability row for the left-to-right baseline.

        Before the forward pass, every response position from ``position``
        onward is reset to its generation-start state (mask token at value
        slots, template token at frozen slots), so the prediction conditions
        on strictly earlier response tokens and nothing else, matching the
        sequential factorization.  Shares all weights with the bidirectional
        mode; one full forward per call.
        """
        cfg = self.config
        if not 0 <= position < cfg.response_len:
            raise DimensionMismatch(f"position {position} outside response window")
        resp = inp.response.ids.copy()
        free = np.fromiter(tpl.free_positions, dtype=np.int64)
        resp[free[free >= position]] = tpl.vocab.mask_id
        if tpl.frozen_positions:
            frozen = np.fromiter(tpl.frozen_positions, dtype=np.int64)
            frozen_ids = np.fromiter(tpl.frozen_ids, dtype=np.int64)
            keep = frozen >= position
            resp[frozen[keep]] = frozen_ids[keep]
        logits = self.forward_batch(
            np.asarray(inp.scene, dtype=cfg.np_dtype)[None],
            np.asarray(inp.context_tokens, dtype=np.int64)[None],
            resp[None],
        )
        return softmax_rows(logits[0, position])

    # ---- prompt cache ----

    def build_prompt_cache(self, rasters, ctx_ids, resp_ids):
        """Full forward that also captures per-block prompt keys/values."""
        self._check_batch(rasters, ctx_ids, resp_ids)
        P = self.config.prompt_len
        x = self._assemble(rasters, ctx_ids, resp_ids)
        cache = []
        for blk in self.blocks:
            x, (k, v) = blk.forward(x, return_kv=True)
            cache.append((k[:, :, :P, :].copy(), v[:, :, :P, :].copy()))
        xr = self.final_ln.forward(x)[:, P:, :]
        return self.head.forward(xr), cache

    def forward_response_cached(self, cache, resp_ids):
        """Recompute only response positions against cached prompt activations."""
        cfg = self.config
        if resp_ids.shape[1] != cfg.response_len:
            raise DimensionMismatch("response length mismatch")
        xr = self.tok_embed[resp_ids] + self.pos_embed[None, cfg.prompt_len :, :]
        for blk, kv in zip(self.blocks, cache):
            xr = blk.forward_cached(xr, kv)
        return self.head.forward(self.final_ln.forward(xr))

    # ---- loss ----

    @staticmethod
    def masked_cross_entropy(logits, target_ids, mask, t):
        """Per-sample loss sum_{masked} -log p(target) / t and d(mean loss)/d(logits)."""
        B, L, V = logits.shape
        t = np.asarray(t, dtype=np.float64).reshape(B)
        logp = log_softmax_rows(logits.astype(np.float64))
        tgt_logp = np.take_along_axis(logp, target_ids[..., None], axis=-1)[..., 0]
        per_sample = -np.where(mask, tgt_logp, 0.0).sum(axis=1) / t

        w = (mask / t[:, None]) / B
        dlogits = np.exp(logp) * w[..., None]
        flat = dlogits.reshape(B * L, V)
        flat[np.arange(B * L), target_ids.reshape(-1)] -= w.reshape(-1)
        return per_sample, dlogits.reshape(B, L, V).astype(logits.dtype)

    def loss_and_grad(self, inp: ModelInput, targets: TokenSequence, t: float):
        """Masked-token objective for one sample and its exact parameter gradients."""
        if t <= 0 or t > 1:
            raise ValueError("noise level t must lie in (0, 1]")
        mask = inp.response.masked[None, :]
        if not mask.any():
            raise NoMaskedPositions("input response has no masked positions")
        if targets.masked.any():
            raise ValueError("targets must be fully unmasked")

        self.zero_grads()
        logits = self.forward_batch(
            np.asarray(inp.scene, dtype=self.config.np_dtype)[None],
            np.asarray(inp.context_tokens, dtype=np.int64)[None],
            inp.response.ids[None],
            train=True,
        )
        per_sample, dlogits = self.masked_cross_entropy(
            logits, targets.ids[None], mask, np.array([t])
        )
        self.backward_batch(dlogits)
        grads = {name: g.copy() for name, g in self.gradients().items()}
        return float(per_sample[0]), grads

    def train_batch(self, rasters, ctx_ids, resp_ids, target_ids, mask, t):
        """Batched loss + backward into the live gradient buffers; returns per-sample losses."""
        if not mask.any(axis=1).all():
            raise NoMaskedPositions("every sample in a batch needs a masked position")
        self.zero_grads()
        logits = self.forward_batch(rasters, ctx_ids, resp_ids, train=True)
        per_sample, dlogits = self.masked_cross_entropy(logits, target_ids, mask, t)
        self.backward_batch(dlogits)
        return per_sample


# ---- checkpoints ----

CHECKPOINT_DTYPE = np.float32


def save_checkpoint(model: MaskPredictor, path, extra: dict | None = None) -> None:
    """Portable numeric container: float32 arrays plus a JSON manifest entry."""
    params = model.parameters()
    manifest = {
        "config": asdict(model.config),
        "names": sorted(params),
        "shapes": {k: list(v.shape) for k, v in params.items()},
        "dtype": "float32",
        "extra": extra or {},
    }
    arrays = {k: v.astype(CHECKPOINT_DTYPE) for k, v in params.items()}
    arrays["__manifest__"] = np.frombuffer(
        json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[MaskPredictor, dict]:
    """Rebuild a model from a checkpoint; returns (model, manifest extra)."""
    with np.load(path) as data:
        manifest = json.loads(bytes(data["__manifest__"]).decode())
        cfg = ModelConfig(**manifest["config"])
        model = MaskPredictor(cfg, seed=0)
        params = model.parameters()
        for name in manifest["names"]:
            loaded = data[name].astype(cfg.np_dtype)
            if params[name].shape != loaded.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            params[name][...] = loaded
    return model, manifest["extra"]
