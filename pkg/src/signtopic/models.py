"""The three sequence classifiers: bidirectional LSTM with attention
pooling, Transformer encoder over a downsampled sequence, and a
latent-array cross-attention model for long inputs.

Each family maps a T x D feature sequence (or a token-id column, routed
through a trainable embedding) to C class logits. Forward passes run on a
kernel tape so they are differentiable and FLOP-counted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import nnkernel as nk
from .errors import DataError

FAMILIES = ("lstm_attn", "transformer", "perceiver_io")

TEXT_EMBED_WIDTH = 256


@dataclass
class ModelConfig:
    """Architecture family plus everything needed to build, count, and
    train a classifier. Family-specific fields are ignored by the other
    families."""

    family: str
    input_width: int
    classes: int
    # lstm_attn
    hidden_size: int = 64
    num_layers: int = 1
    bidirectional: bool = True
    # transformer
    model_width: int = 64
    heads: int = 4
    ff_width: int = 128
    stride: int = 4
    max_positions: int = 4096
    # perceiver_io
    latent_len: int = 8
    latent_width: int = 64
    cross_heads: int = 1
    self_heads: int = 4
    self_blocks: int = 2
    # token inputs: vocab_size > 0 routes input ids through an embedding
    vocab_size: int = 0
    embed_width: int = TEXT_EMBED_WIDTH

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.family not in FAMILIES:
            raise DataError(f"unknown family {self.family!r}")
        if self.input_width < 1 or self.classes < 1:
            raise DataError("input width and class count must be positive")
        if self.family == "lstm_attn" and self.hidden_size < 1:
            raise DataError("hidden size must be positive")
        if self.family == "transformer":
            if self.model_width % self.heads != 0:
                raise DataError(
                    f"model width {self.model_width} not divisible by {self.heads} heads"
                )
            if self.stride < 1:
                raise DataError("stride must be >= 1")
        if self.family == "perceiver_io":
            if self.latent_len < 1:
                raise DataError("latent length must be >= 1")
            for h in (self.cross_heads, self.self_heads):
                if self.latent_width % h != 0:
                    raise DataError(
                        f"latent width {self.latent_width} not divisible by {h} heads"
                    )
        if self.vocab_size and self.input_width != self.embed_width:
            raise DataError("token models must use the embedding width as input width")

    def save(self, path):
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ModelConfig":
        path = Path(path)
        if not path.exists():
            raise DataError(f"missing file: {path}")
        values = {}
        for ln in path.read_text(encoding="utf-8").splitlines():
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            key, _, raw = ln.partition("=")
            values[key.strip()] = raw.strip()
        return cls.from_strings(values)

    @classmethod
    def from_strings(cls, values: dict) -> "ModelConfig":
        kwargs = {}
        valid = {f.name: f.type for f in fields(cls)}
        for key, raw in values.items():
            if key not in valid:
                raise DataError(f"unknown model config key {key!r}")
            if key == "family":
                kwargs[key] = raw
            elif key == "bidirectional":
                kwargs[key] = raw.lower() in ("1", "true", "yes")
            else:
                kwargs[key] = int(raw)
        missing = {"family", "input_width", "classes"} - set(kwargs)
        if missing:
            raise DataError(f"model config missing keys: {sorted(missing)}")
        return cls(**kwargs)


def tiny_config(family, input_width, classes, vocab_size=0) -> ModelConfig:
    """Small configs that train in seconds on one core; every family's
    documented example is runnable with these."""
    common = dict(family=family, input_width=input_width, classes=classes,
                  vocab_size=vocab_size)
    if family == "lstm_attn":
        return ModelConfig(hidden_size=24, num_layers=1, bidirectional=True, **common)
    if family == "transformer":
        return ModelConfig(model_width=32, heads=2, ff_width=64, stride=2,
                           max_positions=1024, **common)
    return ModelConfig(latent_len=6, latent_width=32, cross_heads=1, self_heads=2,
                       self_blocks=1, ff_width=64, max_positions=8192, **common)


def base_config(family, input_width, classes, vocab_size=0) -> ModelConfig:
    """Larger configs in the parameter regime of full-scale runs."""
    common = dict(family=family, input_width=input_width, classes=classes,
                  vocab_size=vocab_size)
    if family == "lstm_attn":
        return ModelConfig(hidden_size=768, num_layers=1, bidirectional=True, **common)
    if family == "transformer":
        return ModelConfig(model_width=256, heads=8, ff_width=1024, stride=4,
                           max_positions=8192, **common)
    return ModelConfig(latent_len=128, latent_width=128, cross_heads=1, self_heads=8,
                       self_blocks=2, ff_width=512, max_positions=65536, **common)


# ---------------------------------------------------------------------------
# parameter construction


def build_params(cfg: ModelConfig, seed=0, dtype=np.float32) -> nk.ParamStore:
    """Create and initialize every trainable tensor of a config.

    Creation order is fixed, so a given (config, seed) pair always yields
    the same parameters.
    """
    rng = np.random.default_rng(seed)
    params = nk.ParamStore(dtype)

    if cfg.vocab_size:
        params.add("embed.table", nk.normal_embed(rng, (cfg.vocab_size, cfg.embed_width)))

    if cfg.family == "lstm_attn":
        directions = ("fwd", "bwd") if cfg.bidirectional else ("fwd",)
        out_width = cfg.hidden_size * len(directions)
        d_in = cfg.input_width
        for layer in range(cfg.num_layers):
            for direction in directions:
                prefix = f"lstm{layer}.{direction}"
                params.add(prefix + ".w_x", nk.uniform_fan_in(rng, (d_in, 4 * cfg.hidden_size), d_in))
                params.add(prefix + ".w_h", nk.uniform_fan_in(rng, (cfg.hidden_size, 4 * cfg.hidden_size), cfg.hidden_size))
                params.add(prefix + ".b", np.zeros(4 * cfg.hidden_size))
            d_in = out_width
        params.add("attnpool.w", nk.uniform_fan_in(rng, (out_width, out_width), out_width))
        params.add("attnpool.b", np.zeros(out_width))
        params.add("attnpool.v", nk.uniform_fan_in(rng, (out_width, 1), out_width))
        head_in = out_width
    elif cfg.family == "transformer":
        d = cfg.model_width
        params.add("proj.w", nk.uniform_fan_in(rng, (cfg.input_width, d), cfg.input_width))
        params.add("proj.b", np.zeros(d))
        for i in range(cfg.num_layers):
            _add_block(params, rng, f"enc{i}", d, cfg.ff_width)
        head_in = d
    else:  # perceiver_io
        dl = cfg.latent_width
        params.add("latent", nk.normal_embed(rng, (cfg.latent_len, dl)))
        params.add("proj.w", nk.uniform_fan_in(rng, (cfg.input_width, dl), cfg.input_width))
        params.add("proj.b", np.zeros(dl))
        _add_cross(params, rng, "cross", dl, ffn=cfg.ff_width)
        for i in range(cfg.self_blocks):
            _add_block(params, rng, f"self{i}", dl, cfg.ff_width)
        params.add("query", nk.normal_embed(rng, (1, dl)))
        _add_cross(params, rng, "dec", dl, ffn=0)
        head_in = dl

    params.add("head.w", nk.uniform_fan_in(rng, (head_in, cfg.classes), head_in))
    params.add("head.b", np.zeros(cfg.classes))
    return params


def _add_attn(params, rng, prefix, d):
    for name in ("w_q", "w_k", "w_v", "w_o"):
        params.add(f"{prefix}.{name}", nk.uniform_fan_in(rng, (d, d), d))
    for name in ("b_q", "b_k", "b_v", "b_o"):
        params.add(f"{prefix}.{name}", np.zeros(d))


def _add_ln(params, prefix, d):
    params.add(prefix + ".gain", np.ones(d))
    params.add(prefix + ".bias", np.zeros(d))


def _add_ffn(params, rng, prefix, d, ff):
    params.add(prefix + ".w1", nk.uniform_fan_in(rng, (d, ff), d))
    params.add(prefix + ".b1", np.zeros(ff))
    params.add(prefix + ".w2", nk.uniform_fan_in(rng, (ff, d), ff))
    params.add(prefix + ".b2", np.zeros(d))


def _add_block(params, rng, prefix, d, ff):
    """Pre-norm self-attention block: LN, attention, LN, feed-forward."""
    _add_ln(params, prefix + ".ln1", d)
    _add_attn(params, rng, prefix + ".attn", d)
    _add_ln(params, prefix + ".ln2", d)
    _add_ffn(params, rng, prefix + ".ffn", d, ff)


def _add_cross(params, rng, prefix, d, ffn):
    """Cross-attention: separate norms for the query and key/value sides;
    a feed-forward stage only when ffn > 0 (the decoder omits it)."""
    _add_ln(params, prefix + ".ln_q", d)
    _add_ln(params, prefix + ".ln_kv", d)
    _add_attn(params, rng, prefix + ".attn", d)
    if ffn:
        _add_ln(params, prefix + ".ln_ff", d)
        _add_ffn(params, rng, prefix + ".ffn", d, ffn)


# ---------------------------------------------------------------------------
# forward passes


def sinusoidal_encoding(length, width, dtype=np.float64) -> np.ndarray:
    """Fixed position encoding: interleaved sines and cosines over a
    geometric frequency ladder."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(width, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (idx // 2)) / width)
    enc = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return enc.astype(dtype)


def _as_node(x, dtype):
    if isinstance(x, nk.Node):
        return x
    return nk.constant(np.asarray(x, dtype=dtype))


def text_frontend(tape, token_ids, cfg: ModelConfig, params) -> nk.Node:
    """Embed a token-id sequence into trainable vectors (one row per token)."""
    if not cfg.vocab_size:
        raise DataError("config has no vocabulary; text input not supported")
    ids = np.asarray(token_ids)
    if ids.ndim == 2 and ids.shape[1] == 1:
        ids = ids[:, 0]
    if not np.issubdtype(ids.dtype, np.integer):
        rounded = np.rint(ids)
        if np.abs(ids - rounded).max() > 1e-6:
            raise DataError("token ids must be integral")
        ids = rounded.astype(np.int64)
    return nk.embedding_lookup(tape, ids, params["embed.table"])


def _attn_kwargs(params, prefix):
    p = params
    return (p[f"{prefix}.w_q"], p[f"{prefix}.b_q"], p[f"{prefix}.w_k"], p[f"{prefix}.b_k"],
            p[f"{prefix}.w_v"], p[f"{prefix}.b_v"], p[f"{prefix}.w_o"], p[f"{prefix}.b_o"])


def _ffn(tape, x, params, prefix):
    h = nk.linear(tape, x, params[prefix + ".w1"], params[prefix + ".b1"])
    h = nk.gelu(tape, h)
    return nk.linear(tape, h, params[prefix + ".w2"], params[prefix + ".b2"])


def _encoder_block(tape, x, params, prefix, heads):
    normed = nk.layer_norm(tape, x, params[prefix + ".ln1.gain"], params[prefix + ".ln1.bias"])
    attended = nk.multi_head_attention(tape, normed, normed, heads, *_attn_kwargs(params, prefix + ".attn"))
    x = nk.add(tape, x, attended)
    normed = nk.layer_norm(tape, x, params[prefix + ".ln2.gain"], params[prefix + ".ln2.bias"])
    return nk.add(tape, x, _ffn(tape, normed, params, prefix + ".ffn"))


def lstm_attn_forward(tape, seq, cfg: ModelConfig, params) -> nk.Node:
    """Bidirectional LSTM over the frames, attention pooling over the
    per-step hidden states, linear head."""
    x = _as_node(seq, params.dtype)
    t_len = x.value.shape[0]
    directions = ("fwd", "bwd") if cfg.bidirectional else ("fwd",)
    h_width = cfg.hidden_size
    for layer in range(cfg.num_layers):
        outputs = []
        for direction in directions:
            prefix = f"lstm{layer}.{direction}"
            zx = nk.linear(tape, x, params[prefix + ".w_x"], params[prefix + ".b"])
            steps = range(t_len) if direction == "fwd" else range(t_len - 1, -1, -1)
            h = nk.constant(np.zeros((1, h_width), dtype=params.dtype))
            c = nk.constant(np.zeros((1, h_width), dtype=params.dtype))
            rows = [None] * t_len
            for t in steps:
                zx_t = nk.slice_rows(tape, zx, t, t + 1)
                hc = nk.lstm_core(tape, zx_t, h, c, params[prefix + ".w_h"])
                h = nk.slice_cols(tape, hc, 0, h_width)
                c = nk.slice_cols(tape, hc, h_width, 2 * h_width)
                rows[t] = h
            outputs.append(nk.concat_rows(tape, rows) if t_len > 1 else rows[0])
        x = nk.concat_cols(tape, outputs) if len(outputs) > 1 else outputs[0]

    # attention pooling: scores v^T tanh(W h + b), softmax over time
    scores = nk.tanh(tape, nk.linear(tape, x, params["attnpool.w"], params["attnpool.b"]))
    scores = nk.matmul(tape, scores, params["attnpool.v"])
    alpha = nk.softmax(tape, nk.transpose(tape, scores))
    context = nk.matmul(tape, alpha, x)
    return nk.linear(tape, context, params["head.w"], params["head.b"])


def transformer_forward(tape, seq, cfg: ModelConfig, params) -> nk.Node:
    """Mean-pool downsample by the stride, project, add positions, run the
    encoder stack, mean-pool over positions, linear head."""
    x = _as_node(seq, params.dtype)
    if cfg.stride > 1:
        x = nk.mean_pool_rows(tape, x, cfg.stride)
    t_len = x.value.shape[0]
    if t_len > cfg.max_positions:
        raise DataError(f"sequence length {t_len} exceeds max positions {cfg.max_positions}")
    x = nk.linear(tape, x, params["proj.w"], params["proj.b"])
    pos = nk.constant(sinusoidal_encoding(t_len, cfg.model_width, params.dtype))
    x = nk.add(tape, x, pos)
    for i in range(cfg.num_layers):
        x = _encoder_block(tape, x, params, f"enc{i}", cfg.heads)
    pooled = nk.mean_rows(tape, x)
    return nk.linear(tape, pooled, params["head.w"], params["head.b"])


def perceiver_forward(tape, seq, cfg: ModelConfig, params) -> nk.Node:
    """Cross-attend the projected input sequence into a short learned
    latent array, refine with self-attention blocks, then read out through
    a single learned query."""
    x = _as_node(seq, params.dtype)
    t_len = x.value.shape[0]
    if t_len > cfg.max_positions:
        raise DataError(f"sequence length {t_len} exceeds max positions {cfg.max_positions}")
    x = nk.linear(tape, x, params["proj.w"], params["proj.b"])
    pos = nk.constant(sinusoidal_encoding(t_len, cfg.latent_width, params.dtype))
    x = nk.add(tape, x, pos)

    latents = params["latent"]
    lq = nk.layer_norm(tape, latents, params["cross.ln_q.gain"], params["cross.ln_q.bias"])
    lkv = nk.layer_norm(tape, x, params["cross.ln_kv.gain"], params["cross.ln_kv.bias"])
    attended = nk.multi_head_attention(tape, lq, lkv, cfg.cross_heads, *_attn_kwargs(params, "cross.attn"))
    latents = nk.add(tape, latents, attended)
    normed = nk.layer_norm(tape, latents, params["cross.ln_ff.gain"], params["cross.ln_ff.bias"])
    latents = nk.add(tape, latents, _ffn(tape, normed, params, "cross.ffn"))

    for i in range(cfg.self_blocks):
        latents = _encoder_block(tape, latents, params, f"self{i}", cfg.self_heads)

    q = nk.layer_norm(tape, params["query"], params["dec.ln_q.gain"], params["dec.ln_q.bias"])
    kv = nk.layer_norm(tape, latents, params["dec.ln_kv.gain"], params["dec.ln_kv.bias"])
    out = nk.multi_head_attention(tape, q, kv, cfg.cross_heads, *_attn_kwargs(params, "dec.attn"))
    return nk.linear(tape, out, params["head.w"], params["head.b"])


_FORWARDS = {
    "lstm_attn": lstm_attn_forward,
    "transformer": transformer_forward,
    "perceiver_io": perceiver_forward,
}


def model_forward(tape, features, cfg: ModelConfig, params, mask=None) -> nk.Node:
    """Run the configured family on one sample; returns the 1 x C logits node.

    ``mask`` marks real frames of a padded sequence; padded rows are
    dropped before the forward pass, so outputs are identical whether a
    sample is evaluated alone or inside any padded batch.
    """
    feats = np.asarray(features)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        feats = feats[mask]
    if feats.shape[0] < 1:
        raise DataError("empty sequence")
    if cfg.vocab_size:
        x = text_frontend(tape, feats, cfg, params)
    else:
        if feats.shape[1] != cfg.input_width:
            raise DataError(
                f"width mismatch: features are {feats.shape[1]} wide, config wants {cfg.input_width}"
            )
        x = nk.constant(feats.astype(params.dtype))
    return _FORWARDS[cfg.family](tape, x, cfg, params)


def predict(logits) -> int:
    """Argmax class index; ties resolve to the lowest index."""
    v = logits.value if isinstance(logits, nk.Node) else np.asarray(logits)
    v = v.reshape(-1)
    if v.size < 1:
        raise DataError("empty logits")
    return int(np.argmax(v))
