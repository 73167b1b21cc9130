"""Contextual transducer: toy self-attention encoder, stateless predictor,
joiner, shared BiLSTM context encoder and cross-attention biasing adapters.

Adapters can be attached after any encoder block and optionally to the
predictor output. Their output projections start at exactly zero, so a
freshly initialized contextual model reproduces the frozen base model
bit for bit; the no-bias context row is pinned to zeros for the same
reason at decode time.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import numkit
from .data import TokenizationError
from .numkit import (
    Tensor,
    add_rowvec,
    concat,
    layer_norm,
    log_softmax,
    matmul,
    outer_add,
    reshape,
    rows,
    softmax,
    tanh,
    transpose,
)

BLANK_ID = 0


class CheckpointError(RuntimeError):
    """Raised when a checkpoint disagrees with the model it is loaded into."""


@dataclass
class ModelConfig:
    vocab_size: int
    d_feat: int
    d_model: int = 48
    num_encoder_layers: int = 4
    num_heads: int = 4
    adapter_dim: int = 128
    injection_layers: tuple = ()
    bias_predictor: bool = False
    ctx_layers: int = 2
    predictor_context: int = 2
    ffn_dim: int = 0  # 0 means 2 * d_model

    def __post_init__(self):
        self.injection_layers = tuple(sorted(int(i) for i in self.injection_layers))
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2 (blank plus one label)")
        L = self.num_encoder_layers
        bad = [i for i in self.injection_layers if not 1 <= i <= L]
        if bad:
            raise ValueError(f"injection layers {bad} outside 1..{L}")
        if len(set(self.injection_layers)) != len(self.injection_layers):
            raise ValueError("injection layers must be distinct")
        if self.d_model % self.num_heads or self.adapter_dim % self.num_heads:
            raise ValueError("d_model and adapter_dim must divide num_heads")
        if not self.ffn_dim:
            self.ffn_dim = 2 * self.d_model

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, blob: str) -> "ModelConfig":
        return cls(**json.loads(blob))


@dataclass
class ContextEmbeddings:
    """Encoded biasing list: row 0 is the all-zero no-bias entry."""

    matrix: Tensor  # (N+1, D)

    def __post_init__(self):
        if self.matrix.data.ndim != 2:
            raise ValueError("context matrix must be 2-d")
        if np.any(self.matrix.data[0] != 0.0):
            raise ValueError("context row 0 must be exactly zero")

    @property
    def n_entries(self) -> int:
        return self.matrix.shape[0] - 1


@dataclass
class ParameterPartition:
    base: dict
    biasing: dict

    @property
    def biasing_fraction(self) -> float:
        nb = sum(t.size for t in self.biasing.values())
        total = nb + sum(t.size for t in self.base.values())
        return nb / total if total else 0.0


def is_biasing_param(name: str) -> bool:
    return name.startswith("ctx.") or name.startswith("adapter.")


def partition_parameters(params: dict) -> ParameterPartition:
    base = {k: v for k, v in params.items() if not is_biasing_param(k)}
    biasing = {k: v for k, v in params.items() if is_biasing_param(k)}
    return ParameterPartition(base=base, biasing=biasing)


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # Name-keyed streams keep shared parameters identical across configs
    # that differ only in which adapters exist.
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class ContextualTransducer:
    """Transducer with optional cross-attention context injection."""

    def __init__(self, config: ModelConfig, params: dict | None = None, seed: int = 0):
        self.config = config
        self.seed = seed
        self.params = params if params is not None else self._init_params(seed)

    # -- parameters -----------------------------------------------------------

    def _spec(self) -> dict:
        """name -> (shape, init) for every parameter of this configuration."""
        cfg = self.config
        d, V, D = cfg.d_model, cfg.vocab_size, cfg.adapter_dim
        dh = d // cfg.num_heads
        ah = D // cfg.num_heads
        spec = {}

        def w(name, shape, fan_in, zero=False):
            spec[name] = (shape, 0.0 if zero else 1.0 / math.sqrt(fan_in))

        def b(name, shape):
            spec[name] = (shape, 0.0)

        def ones(name, shape):
            spec[name] = (shape, "ones")

        w("enc.in.W", (2 * cfg.d_feat, d), 2 * cfg.d_feat)
        b("enc.in.b", (d,))
        for i in range(1, cfg.num_encoder_layers + 1):
            ones(f"enc.{i}.ln1.g", (d,))
            b(f"enc.{i}.ln1.b", (d,))
            for h in range(cfg.num_heads):
                w(f"enc.{i}.attn.q.{h}", (d, dh), d)
                w(f"enc.{i}.attn.k.{h}", (d, dh), d)
                w(f"enc.{i}.attn.v.{h}", (d, dh), d)
                w(f"enc.{i}.attn.o.{h}", (dh, d), dh)
            ones(f"enc.{i}.ln2.g", (d,))
            b(f"enc.{i}.ln2.b", (d,))
            w(f"enc.{i}.ffn.W1", (d, cfg.ffn_dim), d)
            b(f"enc.{i}.ffn.b1", (cfg.ffn_dim,))
            w(f"enc.{i}.ffn.W2", (cfg.ffn_dim, d), cfg.ffn_dim)
            b(f"enc.{i}.ffn.b2", (d,))
        ones("enc.out_ln.g", (d,))
        b("enc.out_ln.b", (d,))

        w("pred.emb", (V, d), d)
        w("pred.W", (cfg.predictor_context * d, d), cfg.predictor_context * d)
        b("pred.b", (d,))

        w("join.enc_W", (d, d), d)
        w("join.pred_W", (d, d), d)
        b("join.b", (d,))
        w("join.out_W", (d, V), d)
        b("join.out_b", (V,))

        if cfg.injection_layers or cfg.bias_predictor:
            w("ctx.emb", (V, D), D)
            for layer in range(1, cfg.ctx_layers + 1):
                d_in = D if layer == 1 else 2 * D
                for direction in ("fwd", "bwd"):
                    for gate in ("i", "f", "g", "o"):
                        w(f"ctx.l{layer}.{direction}.Wx_{gate}", (d_in, D), d_in)
                        w(f"ctx.l{layer}.{direction}.Wh_{gate}", (D, D), D)
                        b(f"ctx.l{layer}.{direction}.b_{gate}", (D,))
            w("ctx.proj.W", (2 * D, D), 2 * D)
            b("ctx.proj.b", (D,))

        locations = [f"enc{i}" for i in cfg.injection_layers]
        if cfg.bias_predictor:
            locations.append("pred")
        for loc in locations:
            for h in range(cfg.num_heads):
                w(f"adapter.{loc}.q.{h}", (d, ah), d)
                w(f"adapter.{loc}.k.{h}", (D, ah), D)
                w(f"adapter.{loc}.v.{h}", (D, ah), D)
                w(f"adapter.{loc}.o.{h}", (ah, d), ah, zero=True)
        return spec

    def _init_params(self, seed: int) -> dict:
        params = {}
        for name, (shape, scale) in self._spec().items():
            if scale == "ones":
                data = np.ones(shape)
            elif scale == 0.0:
                data = np.zeros(shape)
            else:
                data = _param_rng(seed, name).normal(size=shape) * scale
            params[name] = Tensor(data, requires_grad=True)
        return params

    def partition(self) -> ParameterPartition:
        return partition_parameters(self.params)

    # -- context encoder --------------------------------------------------------

    def encode_contexts(self, token_seqs: list) -> ContextEmbeddings:
        """Embed each biasing entry with the shared 2-layer BiLSTM; the final
        forward and backward states are concatenated and projected to D.
        Row 0 of the result is the zero no-bias entry."""
        cfg = self.config
        D = cfg.adapter_dim
        if not (cfg.injection_layers or cfg.bias_predictor):
            raise ValueError("model has no biasing modules; context encoding is undefined")
        if not token_seqs:
            return ContextEmbeddings(Tensor(np.zeros((1, D))))
        seqs = []
        for i, seq in enumerate(token_seqs):
            ids = np.asarray(seq, dtype=np.int64)
            if ids.size == 0:
                raise TokenizationError(f"biasing entry {i} is empty")
            if ids.min() < 1 or ids.max() >= cfg.vocab_size:
                raise TokenizationError(f"biasing entry {i} contains out-of-vocabulary tokens")
            seqs.append(ids)

        N = len(seqs)
        maxlen = max(len(s) for s in seqs)
        ids = np.zeros((N, maxlen), dtype=np.int64)
        valid = np.zeros((N, maxlen))
        for n, s in enumerate(seqs):
            ids[n, : len(s)] = s
            valid[n, : len(s)] = 1.0

        emb = self.params["ctx.emb"]
        inputs = [rows(emb, ids[:, t]) for t in range(maxlen)]
        final_fwd = final_bwd = None
        for layer in range(1, cfg.ctx_layers + 1):
            fwd = self._lstm_direction(layer, "fwd", inputs, valid, range(maxlen))
            bwd = self._lstm_direction(layer, "bwd", inputs, valid, range(maxlen - 1, -1, -1))
            inputs = [concat([fwd[t], bwd[t]], axis=1) for t in range(maxlen)]
            final_fwd, final_bwd = fwd[maxlen - 1], bwd[0]

        summary = concat([final_fwd, final_bwd], axis=1)
        proj = add_rowvec(matmul(summary, self.params["ctx.proj.W"]), self.params["ctx.proj.b"])
        matrix = concat([Tensor(np.zeros((1, D))), proj], axis=0)
        return ContextEmbeddings(matrix)

    def _lstm_direction(self, layer: int, direction: str, inputs: list, valid, order) -> list:
        cfg = self.config
        N = inputs[0].shape[0]
        D = cfg.adapter_dim
        p = self.params
        h = Tensor(np.zeros((N, D)))
        c = Tensor(np.zeros((N, D)))
        outputs = [None] * len(inputs)
        for t in order:
            x = inputs[t]
            # masked update freezes finished entries, which also parks the
            # final forward state at each entry's true length
            m = Tensor(np.repeat(valid[:, t : t + 1], D, axis=1))
            inv = Tensor(1.0 - np.repeat(valid[:, t : t + 1], D, axis=1))
            gates = {}
            for gate in ("i", "f", "g", "o"):
                pre = add_rowvec(
                    matmul(x, p[f"ctx.l{layer}.{direction}.Wx_{gate}"])
                    + matmul(h, p[f"ctx.l{layer}.{direction}.Wh_{gate}"]),
                    p[f"ctx.l{layer}.{direction}.b_{gate}"],
                )
                gates[gate] = tanh(pre) if gate == "g" else numkit.sigmoid(pre)
            c_new = gates["f"] * c + gates["i"] * gates["g"]
            h_new = gates["o"] * tanh(c_new)
            c = m * c_new + inv * c
            h = m * h_new + inv * h
            outputs[t] = h
        return outputs

    # -- adapters ----------------------------------------------------------------

    def apply_adapter(self, hidden: Tensor, ctx: ContextEmbeddings, location: str):
        """Cross-attention over the context rows; the projected attention
        output is added element-wise onto ``hidden``.

        Returns (edited hidden (T, d_model), head-averaged attention (T, N+1)).
        """
        cfg = self.config
        ah = cfg.adapter_dim // cfg.num_heads
        scale = 1.0 / math.sqrt(ah)
        p = self.params
        out = hidden
        attn_sum = None
        for h in range(cfg.num_heads):
            q = matmul(hidden, p[f"adapter.{location}.q.{h}"])
            k = matmul(ctx.matrix, p[f"adapter.{location}.k.{h}"])
            v = matmul(ctx.matrix, p[f"adapter.{location}.v.{h}"])
            weights = softmax(matmul(q, transpose(k)) * scale)
            head = matmul(matmul(weights, v), p[f"adapter.{location}.o.{h}"])
            out = out + head
            attn_sum = weights if attn_sum is None else attn_sum + weights
        return out, attn_sum * (1.0 / cfg.num_heads)

    # -- encoder -------------------------------------------------------------------

    def encode(self, features, ctx: ContextEmbeddings | None = None, return_attn: bool = False):
        """features (T, d_feat) -> hidden states (ceil(T/2), d_model).

        ``ctx=None`` skips adapter work entirely; by the zero no-bias row this
        equals running with an empty context.
        """
        cfg = self.config
        x = features if isinstance(features, Tensor) else Tensor(features)
        T = x.shape[0]
        if x.data.ndim != 2 or x.shape[1] != cfg.d_feat:
            raise numkit.ShapeError(f"features must be (T, {cfg.d_feat}), got {x.shape}")
        if T == 0:
            raise ValueError("cannot encode an empty feature sequence")
        if T % 2:
            x = concat([x, Tensor(np.zeros((1, cfg.d_feat)))], axis=0)
            T += 1
        x = reshape(x, (T // 2, 2 * cfg.d_feat))
        h = add_rowvec(matmul(x, self.params["enc.in.W"]), self.params["enc.in.b"])

        attn_maps = {}
        p = self.params
        for i in range(1, cfg.num_encoder_layers + 1):
            a_in = layer_norm(h, p[f"enc.{i}.ln1.g"], p[f"enc.{i}.ln1.b"])
            h = h + self._self_attention(a_in, i)
            f_in = layer_norm(h, p[f"enc.{i}.ln2.g"], p[f"enc.{i}.ln2.b"])
            w1 = add_rowvec(matmul(f_in, p[f"enc.{i}.ffn.W1"]), p[f"enc.{i}.ffn.b1"])
            h = h + add_rowvec(matmul(tanh(w1), p[f"enc.{i}.ffn.W2"]), p[f"enc.{i}.ffn.b2"])
            if ctx is not None and i in cfg.injection_layers:
                h, attn = self.apply_adapter(h, ctx, f"enc{i}")
                attn_maps[i] = attn
        h = layer_norm(h, p["enc.out_ln.g"], p["enc.out_ln.b"])
        if return_attn:
            return h, attn_maps
        return h

    def _self_attention(self, x: Tensor, i: int) -> Tensor:
        cfg = self.config
        dh = cfg.d_model // cfg.num_heads
        scale = 1.0 / math.sqrt(dh)
        p = self.params
        out = None
        for h in range(cfg.num_heads):
            q = matmul(x, p[f"enc.{i}.attn.q.{h}"])
            k = matmul(x, p[f"enc.{i}.attn.k.{h}"])
            v = matmul(x, p[f"enc.{i}.attn.v.{h}"])
            weights = softmax(matmul(q, transpose(k)) * scale)
            head = matmul(matmul(weights, v), p[f"enc.{i}.attn.o.{h}"])
            out = head if out is None else out + head
        return out

    # -- predictor --------------------------------------------------------------

    def _context_windows(self, target_ids: np.ndarray) -> np.ndarray:
        """Window u holds the last predictor_context tokens before label u,
        blank-padded at the sequence start. Shape (U+1, predictor_context)."""
        n = self.config.predictor_context
        padded = np.concatenate([np.full(n, BLANK_ID, dtype=np.int64), target_ids])
        return np.stack([padded[u : u + n] for u in range(len(target_ids) + 1)])

    def predictor_states(self, target_ids, ctx: ContextEmbeddings | None = None):
        """All U+1 predictor outputs for a target sequence, shape (U+1, d_model)."""
        cfg = self.config
        target_ids = np.asarray(target_ids, dtype=np.int64)
        windows = self._context_windows(target_ids)
        emb = rows(self.params["pred.emb"], windows.reshape(-1))
        stacked = reshape(emb, (windows.shape[0], cfg.predictor_context * cfg.d_model))
        h = tanh(add_rowvec(matmul(stacked, self.params["pred.W"]), self.params["pred.b"]))
        if cfg.bias_predictor and ctx is not None:
            h, _ = self.apply_adapter(h, ctx, "pred")
        return h

    def predict(self, prefix, ctx: ContextEmbeddings | None = None) -> Tensor:
        """Predictor output for the next label given an emitted prefix.

        Only the last predictor_context tokens matter (statelessness)."""
        cfg = self.config
        n = cfg.predictor_context
        prefix = np.asarray(prefix, dtype=np.int64)
        window = np.concatenate([np.full(n, BLANK_ID, dtype=np.int64), prefix])[-n:]
        emb = rows(self.params["pred.emb"], window)
        stacked = reshape(emb, (1, n * cfg.d_model))
        h = tanh(add_rowvec(matmul(stacked, self.params["pred.W"]), self.params["pred.b"]))
        if cfg.bias_predictor and ctx is not None:
            h, _ = self.apply_adapter(h, ctx, "pred")
        return reshape(h, (cfg.d_model,))

    # -- joiner -------------------------------------------------------------------

    def _joint_pre(self, h_enc: Tensor, h_pred: Tensor):
        p = self.params
        e = add_rowvec(matmul(h_enc, p["join.enc_W"]), p["join.b"])
        q = matmul(h_pred, p["join.pred_W"])
        return e, q

    def joint_logits(self, h_enc: Tensor, h_pred: Tensor) -> Tensor:
        """Full lattice of joiner logits: h_enc (T, d), h_pred (U+1, d) ->
        (T, U+1, V). Consumers apply log_softmax."""
        cfg = self.config
        e, q = self._joint_pre(h_enc, h_pred)
        z = tanh(outer_add(e, q))
        T, U1 = e.shape[0], q.shape[0]
        flat = reshape(z, (T * U1, cfg.d_model))
        logits = add_rowvec(matmul(flat, self.params["join.out_W"]), self.params["join.out_b"])
        return reshape(logits, (T, U1, cfg.vocab_size))

    def joint_log_probs(self, h_enc: Tensor, h_pred: Tensor) -> Tensor:
        return log_softmax(self.joint_logits(h_enc, h_pred))

    def join(self, h_enc: Tensor, h_pred: Tensor) -> Tensor:
        """Single-step joiner logits (V,) for one encoder frame and one
        predictor state."""
        cfg = self.config
        e = reshape(h_enc, (1, cfg.d_model))
        q = reshape(h_pred, (1, cfg.d_model))
        return reshape(self.joint_logits(e, q), (cfg.vocab_size,))

    # -- checkpointing ---------------------------------------------------------------

    def save(self, path):
        arrays = {f"param:{k}": v.data for k, v in self.params.items()}
        np.savez(path, __config__=np.array(self.config.to_json()), **arrays)

    @classmethod
    def load(cls, path, seed: int = 0) -> "ContextualTransducer":
        with np.load(path, allow_pickle=False) as blob:
            if "__config__" not in blob:
                raise CheckpointError(f"{path}: missing model configuration record")
            config = ModelConfig.from_json(str(blob["__config__"]))
            stored = {k[len("param:") :]: blob[k] for k in blob.files if k.startswith("param:")}
        model = cls(config, seed=seed)
        expected = {k: v.data.shape for k, v in model.params.items()}
        got = {k: v.shape for k, v in stored.items()}
        if expected.keys() != got.keys():
            missing = sorted(expected.keys() - got.keys())
            extra = sorted(got.keys() - expected.keys())
            raise CheckpointError(f"{path}: parameter names differ (missing {missing}, extra {extra})")
        for k in expected:
            if expected[k] != got[k]:
                raise CheckpointError(
                    f"{path}: shape mismatch for {k}: checkpoint {got[k]} vs model {expected[k]}"
                )
        for k, v in stored.items():
            model.params[k] = Tensor(v, requires_grad=True)
        return model

    def load_base_from(self, path):
        """Copy base parameters from a base-model checkpoint, keeping this
        model's freshly initialized biasing modules. Fails loudly if the
        checkpoint's base does not line up."""
        other = ContextualTransducer.load(path)
        own_base = partition_parameters(self.params).base
        their = other.params
        their_base = partition_parameters(their).base
        if own_base.keys() != their_base.keys():
            raise CheckpointError(
                f"{path}: base parameters differ: "
                f"{sorted(own_base.keys() ^ their_base.keys())}"
            )
        for k in own_base:
            if their[k].data.shape != self.params[k].data.shape:
                raise CheckpointError(f"{path}: shape mismatch for base parameter {k}")
            self.params[k] = Tensor(their[k].data.copy(), requires_grad=True)
