"""A miniature pre-norm encoder-decoder transformer.

Parameters live in one ordered dict whose insertion order is the canonical
order: it fixes gradient flattening, bucket layout and checkpoint layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from seqforge.data import BOS, PAD, MiniBatch
from seqforge.numerics import ops
from seqforge.numerics.half import DType, round_to
from seqforge.numerics.rng import RngStream, derive_stream_id
from seqforge.numerics.tensor import Tape, Tensor
from seqforge.registry import REGISTRY, Config

MODEL_DEFAULTS = {
    "d_model": 64,
    "heads": 4,
    "encoder_layers": 2,
    "decoder_layers": 2,
    "d_ffn": 128,
    "max_positions": 256,
    "dropout": 0.0,
    "share_embeddings": True,
}


class CapacityError(ValueError):
    pass


class OverflowSignal(FloatingPointError):
    """Non-finite loss or gradient; consumed by the loss scaler."""


@dataclass(frozen=True)
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    d_model: int = 16
    heads: int = 2
    encoder_layers: int = 1
    decoder_layers: int = 1
    d_ffn: int = 32
    max_positions: int = 256
    dropout: float = 0.0
    share_embeddings: bool = True

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @classmethod
    def from_config(cls, cfg: Config, src_vocab: int, tgt_vocab: int) -> ModelConfig:
        return cls(src_vocab, tgt_vocab, **{k: cfg[k] for k in MODEL_DEFAULTS})


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    half = d // 2
    freq = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / max(half - 1, 1))
    ang = pos * freq[None, :]
    pe = np.zeros((n, d))
    pe[:, :half] = np.sin(ang)
    pe[:, half : 2 * half] = np.cos(ang)
    return pe


@dataclass
class EncoderOut:
    states: Tensor  # (B, S, d)
    pad_mask: np.ndarray  # (B, S) True at pad cells

    def select(self, order) -> EncoderOut:
        order = np.asarray(order, dtype=np.int64)
        return EncoderOut(Tensor(self.states.data[order], self.states.dtype, exact=True), self.pad_mask[order])


@dataclass
class IncrementalState:
    """Per decoder layer: cached self-attention K/V rows and static cross K/V."""

    self_k: list = field(default_factory=list)
    self_v: list = field(default_factory=list)
    cross_k: list = field(default_factory=list)
    cross_v: list = field(default_factory=list)
    enc_mask: Optional[np.ndarray] = None
    step: int = 0

    @property
    def rows(self) -> int:
        return 0 if self.enc_mask is None else self.enc_mask.shape[0]


def _rows(t: Tensor, order) -> Tensor:
    return Tensor(t.data[order], t.dtype, exact=True)


class TransformerModel:
    def __init__(self, cfg: ModelConfig, seed: int = 1, dtype: DType = DType.FP32):
        self.cfg = cfg
        self.seed = seed
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self.training = False
        # (step, sub-batch) key for dropout streams; set by the trainer
        self.dropout_key: Optional[tuple[int, ...]] = None
        self._pe = sinusoidal_positions(cfg.max_positions, cfg.d_model)
        self._build()

    # -- parameters -----------------------------------------------------
    def _add(self, name, shape, kind):
        rng = RngStream(self.seed, derive_stream_id(len(self.params), 0x5EED))
        n = int(np.prod(shape))
        if kind == "ones":
            data = np.ones(shape)
        elif kind == "zeros":
            data = np.zeros(shape)
        elif kind == "embed":
            data = rng.normal(n).reshape(shape) * self.cfg.d_model**-0.5
        else:
            fan_in, fan_out = shape
            data = rng.normal(n).reshape(shape) * math.sqrt(2.0 / (fan_in + fan_out))
        self.params[name] = Tensor(data, self.dtype, name)

    def _attn_params(self, prefix):
        d = self.cfg.d_model
        for p in ("q", "k", "v", "out"):
            self._add(f"{prefix}.{p}_proj.weight", (d, d), "linear")
            # A key bias shifts every score of a query row equally, so softmax
            # cancels it: its gradient is pure rounding noise, which Adam
            # would turn into full-size steps.
            if p != "k":
                self._add(f"{prefix}.{p}_proj.bias", (d,), "zeros")

    def _norm_params(self, prefix):
        self._add(f"{prefix}.weight", (self.cfg.d_model,), "ones")
        self._add(f"{prefix}.bias", (self.cfg.d_model,), "zeros")

    def _ffn_params(self, prefix):
        c = self.cfg
        self._add(f"{prefix}.fc1.weight", (c.d_model, c.d_ffn), "linear")
        self._add(f"{prefix}.fc1.bias", (c.d_ffn,), "zeros")
        self._add(f"{prefix}.fc2.weight", (c.d_ffn, c.d_model), "linear")
        self._add(f"{prefix}.fc2.bias", (c.d_model,), "zeros")

    def _build(self):
        c = self.cfg
        self._add("encoder.embed_tokens", (c.src_vocab, c.d_model), "embed")
        for i in range(c.encoder_layers):
            p = f"encoder.layers.{i}"
            self._norm_params(f"{p}.self_attn_norm")
            self._attn_params(f"{p}.self_attn")
            self._norm_params(f"{p}.ffn_norm")
            self._ffn_params(f"{p}.ffn")
        self._norm_params("encoder.final_norm")
        self._add("decoder.embed_tokens", (c.tgt_vocab, c.d_model), "embed")
        for i in range(c.decoder_layers):
            p = f"decoder.layers.{i}"
            self._norm_params(f"{p}.self_attn_norm")
            self._attn_params(f"{p}.self_attn")
            self._norm_params(f"{p}.cross_attn_norm")
            self._attn_params(f"{p}.cross_attn")
            self._norm_params(f"{p}.ffn_norm")
            self._ffn_params(f"{p}.ffn")
        self._norm_params("decoder.final_norm")
        if not c.share_embeddings:
            self._add("decoder.output_projection", (c.tgt_vocab, c.d_model), "embed")

    def manifest(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(name, shape, element offset) in canonical order."""
        out, off = [], 0
        for name, t in self.params.items():
            out.append((name, t.shape, off))
            off += t.data.size
        return out

    def sizes(self) -> list[int]:
        return [t.data.size for t in self.params.values()]

    def num_params(self) -> int:
        return sum(self.sizes())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self.params.values()])

    def load_flat(self, vec: np.ndarray) -> None:
        """Overwrite parameters, rounding onto this model's grid."""
        vec = round_to(self.dtype, vec)
        off = 0
        for name, t in self.params.items():
            n = t.data.size
            self.params[name] = Tensor(vec[off : off + n].reshape(t.shape), self.dtype, name, exact=True)
            off += n

    def clone(self, dtype: Optional[DType] = None) -> TransformerModel:
        other = TransformerModel.__new__(TransformerModel)
        other.cfg, other.seed = self.cfg, self.seed
        other.dtype = self.dtype if dtype is None else dtype
        other.training, other.dropout_key = self.training, None
        other._pe = self._pe
        other.params = {}
        for name, t in self.params.items():
            other.params[name] = Tensor(t.data.copy(), other.dtype, name)
        return other

    # -- building blocks ------------------------------------------------
    def _p(self, name) -> Tensor:
        return self.params[name]

    def _norm(self, x, prefix):
        return ops.layer_norm(x, self._p(f"{prefix}.weight"), self._p(f"{prefix}.bias"))

    def _proj(self, x, prefix):
        return ops.linear(x, self._p(f"{prefix}.weight"), self.params.get(f"{prefix}.bias"))

    def _ffn(self, x, prefix):
        h = ops.relu(self._proj(x, f"{prefix}.fc1"))
        return self._proj(h, f"{prefix}.fc2")

    def _dropout(self, x, site):
        p = self.cfg.dropout
        if not self.training or p == 0.0 or self.dropout_key is None:
            return x
        rng = RngStream(self.seed, derive_stream_id(*self.dropout_key, *site))
        keep = rng.uniform(x.data.size).reshape(x.shape) >= p
        return ops.dropout(x, keep, p)

    def _embed(self, ids, table, start=0):
        T = ids.shape[1]
        if start + T > self.cfg.max_positions:
            raise CapacityError(f"sequence length {start + T} exceeds max_positions={self.cfg.max_positions}")
        x = ops.scale(ops.embedding(ids, self._p(table)), math.sqrt(self.cfg.d_model))
        return ops.add_const(x, self._pe[start : start + T])

    def _kv(self, x, prefix):
        H = self.cfg.heads
        k = ops.split_heads(self._proj(x, f"{prefix}.k_proj"), H)
        v = ops.split_heads(self._proj(x, f"{prefix}.v_proj"), H)
        return k, v

    def _attend(self, x_q, k, v, prefix, key_pad=None, causal=False):
        q = ops.split_heads(self._proj(x_q, f"{prefix}.q_proj"), self.cfg.heads)
        o = ops.attention(q, k, v, key_pad, causal)
        return self._proj(ops.merge_heads(o), f"{prefix}.out_proj")

    # -- encoder / decoder ----------------------------------------------
    def forward_encoder(self, src_tokens: np.ndarray, pad_mask: Optional[np.ndarray] = None) -> EncoderOut:
        src_tokens = np.asarray(src_tokens, dtype=np.int64)
        if src_tokens.ndim != 2:
            raise ValueError(f"source tokens must be (B, S), got shape {src_tokens.shape}")
        if pad_mask is None:
            pad_mask = src_tokens == PAD
        if np.any(src_tokens >= self.cfg.src_vocab):
            raise ValueError("source id outside the source vocabulary")
        x = self._embed(src_tokens, "encoder.embed_tokens")
        for i in range(self.cfg.encoder_layers):
            p = f"encoder.layers.{i}"
            h = self._norm(x, f"{p}.self_attn_norm")
            k, v = self._kv(h, f"{p}.self_attn")
            x = ops.add(x, self._dropout(self._attend(h, k, v, f"{p}.self_attn", pad_mask), (0, i, 0)))
            h = self._norm(x, f"{p}.ffn_norm")
            x = ops.add(x, self._dropout(self._ffn(h, f"{p}.ffn"), (0, i, 1)))
        return EncoderOut(self._norm(x, "encoder.final_norm"), pad_mask)

    def _output(self, x):
        x = self._norm(x, "decoder.final_norm")
        table = "decoder.embed_tokens" if self.cfg.share_embeddings else "decoder.output_projection"
        return ops.linear_t(x, self._p(table))

    def forward_decoder_full(self, prev_tokens: np.ndarray, enc: EncoderOut) -> Tensor:
        """Logits (B, T, V) for every prefix position, causally masked."""
        prev_tokens = np.asarray(prev_tokens, dtype=np.int64)
        x = self._embed(prev_tokens, "decoder.embed_tokens")
        for i in range(self.cfg.decoder_layers):
            p = f"decoder.layers.{i}"
            h = self._norm(x, f"{p}.self_attn_norm")
            k, v = self._kv(h, f"{p}.self_attn")
            x = ops.add(x, self._dropout(self._attend(h, k, v, f"{p}.self_attn", causal=True), (1, i, 0)))
            h = self._norm(x, f"{p}.cross_attn_norm")
            ck, cv = self._kv(enc.states, f"{p}.cross_attn")
            x = ops.add(x, self._dropout(self._attend(h, ck, cv, f"{p}.cross_attn", enc.pad_mask), (1, i, 1)))
            h = self._norm(x, f"{p}.ffn_norm")
            x = ops.add(x, self._dropout(self._ffn(h, f"{p}.ffn"), (1, i, 2)))
        return self._output(x)

    def forward(self, batch: MiniBatch) -> Tensor:
        enc = self.forward_encoder(batch.source, batch.source_pad_mask())
        return self.forward_decoder_full(batch.target_in, enc)

    def init_incremental_state(self, enc: EncoderOut) -> IncrementalState:
        return IncrementalState(enc_mask=enc.pad_mask.copy())

    def forward_decoder_step(self, last_tokens, enc: EncoderOut, state: IncrementalState):
        """Logits (R, V) for the next position; the cache grows by one per layer."""
        last_tokens = np.asarray(last_tokens, dtype=np.int64).reshape(-1, 1)
        R = last_tokens.shape[0]
        if enc.states.shape[0] != R or (state.enc_mask is not None and state.rows != R):
            raise ValueError(
                f"row mismatch: {R} tokens, {enc.states.shape[0]} encoder rows, {state.rows} cached rows"
            )
        x = self._embed(last_tokens, "decoder.embed_tokens", start=state.step)
        first = state.step == 0 and not state.self_k
        for i in range(self.cfg.decoder_layers):
            p = f"decoder.layers.{i}"
            h = self._norm(x, f"{p}.self_attn_norm")
            k_new, v_new = self._kv(h, f"{p}.self_attn")
            if first:
                state.self_k.append(k_new)
                state.self_v.append(v_new)
            else:
                state.self_k[i] = ops.concat_time(state.self_k[i], k_new)
                state.self_v[i] = ops.concat_time(state.self_v[i], v_new)
            x = ops.add(x, self._attend(h, state.self_k[i], state.self_v[i], f"{p}.self_attn"))
            h = self._norm(x, f"{p}.cross_attn_norm")
            if len(state.cross_k) <= i:
                ck, cv = self._kv(enc.states, f"{p}.cross_attn")
                state.cross_k.append(ck)
                state.cross_v.append(cv)
            x = ops.add(x, self._attend(h, state.cross_k[i], state.cross_v[i], f"{p}.cross_attn", enc.pad_mask))
            h = self._norm(x, f"{p}.ffn_norm")
            x = ops.add(x, self._ffn(h, f"{p}.ffn"))
        state.step += 1
        logits = self._output(x)
        return Tensor(logits.data[:, 0, :], logits.dtype, exact=True), state

    def reorder_incremental_state(self, state: IncrementalState, order) -> IncrementalState:
        order = np.asarray(order, dtype=np.int64).reshape(-1)
        if order.size and (order.min() < 0 or order.max() >= state.rows):
            raise IndexError(f"reorder index out of range for {state.rows} rows")
        return IncrementalState(
            [_rows(t, order) for t in state.self_k],
            [_rows(t, order) for t in state.self_v],
            [_rows(t, order) for t in state.cross_k],
            [_rows(t, order) for t in state.cross_v],
            None if state.enc_mask is None else state.enc_mask[order],
            state.step,
        )

    # -- gradients ------------------------------------------------------
    def backward(self, tape: Tape, loss: Tensor, seed: float = 1.0) -> np.ndarray:
        """Flat gradient in canonical order; parameters never reached get 0."""
        if not np.all(np.isfinite(loss.data)):
            raise OverflowSignal(f"non-finite loss {loss.item()}")
        leaves = list(self.params.values())
        grads, finish = tape.backward(loss, seed, leaves)
        self.last_finish = [finish.get(id(t), -1) for t in leaves]
        parts = []
        for t in leaves:
            g = grads.get(id(t))
            parts.append(np.zeros(t.data.size) if g is None else g.reshape(-1))
        return np.concatenate(parts)


@REGISTRY.register("model", "transformer", defaults=MODEL_DEFAULTS)
def build_transformer(cfg: Config, src_vocab: int, tgt_vocab: int, seed: int = 1, dtype: DType = DType.FP32):
    return TransformerModel(ModelConfig.from_config(cfg, src_vocab, tgt_vocab), seed, dtype)


REGISTRY.register_architecture(
    "tiny_transformer",
    "transformer",
    {"d_model": 16, "heads": 2, "encoder_layers": 1, "decoder_layers": 1, "d_ffn": 32, "share_embeddings": True},
)
REGISTRY.register_architecture("transformer_small", "transformer", {})
