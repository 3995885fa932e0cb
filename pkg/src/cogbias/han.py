"""Hierarchical attention network over windows of visits.

Action level: embedded actions -> bi-directional LSTM -> additive attention
gives one context vector per visit.  Visit level: the ``m`` visit vectors ->
LSTM -> additive attention gives the window context vector and the
visit-attention profile used for bias detection.  A teacher-forced LSTM
decoder, initialised from the window context, predicts the target visit.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Collection, Sequence

import numpy as np

from . import autodiff as ad
from .domain import DEFAULT_VISIT_LENGTH, DEFAULT_VOCAB_SIZE, DEFAULT_WINDOW, Window, windows_to_arrays
from .errors import InvalidVisit, NonFiniteError, ShapeError, TrainingDiverged

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = DEFAULT_VOCAB_SIZE
    embed_dim: int = 16
    action_hidden: int = 32     # published: 512
    visit_hidden: int = 64      # published: 2048
    decoder_hidden: int = 64    # published: 2048
    dropout_p: float = 0.2
    m: int = DEFAULT_WINDOW
    n: int = DEFAULT_VISIT_LENGTH
    decoder_context_concat: bool = True
    visit_encoder: str = "forward"   # or "bidirectional"
    visit_attention: str = "static"  # or "decoder": query is the decoder state at each target step

    def __post_init__(self):
        if self.visit_encoder not in ("forward", "bidirectional"):
            raise ValueError(f"visit_encoder must be 'forward' or 'bidirectional', got {self.visit_encoder!r}")
        if self.visit_attention not in ("static", "decoder"):
            raise ValueError(f"visit_attention must be 'static' or 'decoder', got {self.visit_attention!r}")
        for name in ("vocab_size", "embed_dim", "action_hidden", "visit_hidden", "decoder_hidden", "m", "n"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def pad_id(self) -> int:
        return self.vocab_size

    @classmethod
    def published_scale(cls, **overrides) -> "ModelConfig":
        return cls(**{"action_hidden": 512, "visit_hidden": 2048, "decoder_hidden": 2048, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], int]]:
    """name -> (shape, fan_in used for the init range)."""
    V, E = cfg.vocab_size, cfg.embed_dim
    Ha, Hv, Hd = cfg.action_hidden, cfg.visit_hidden, cfg.decoder_hidden
    Hb = 2 * Ha
    vis_dirs = ("fwd", "bwd") if cfg.visit_encoder == "bidirectional" else ("fwd",)
    Hvo = Hv * len(vis_dirs)
    dynamic = cfg.visit_attention == "decoder"
    dec_in = E + (Hvo if cfg.decoder_context_concat and not dynamic else 0)
    shapes = {"embedding": ((V + 1, E), E)}
    for d in ("fwd", "bwd"):
        shapes[f"act_{d}_W"] = ((E, 4 * Ha), E)
        shapes[f"act_{d}_U"] = ((Ha, 4 * Ha), Ha)
        shapes[f"act_{d}_b"] = ((4 * Ha,), Ha)
    for d in vis_dirs:
        shapes[f"vis_{d}_W"] = ((Hb, 4 * Hv), Hb)
        shapes[f"vis_{d}_U"] = ((Hv, 4 * Hv), Hv)
        shapes[f"vis_{d}_b"] = ((4 * Hv,), Hv)
    shapes.update({
        "act_att_W": ((Hb, Hb), Hb),
        "act_att_b": ((Hb,), Hb),
        "act_att_q": ((Hb,), Hb),
        "vis_att_W": ((Hvo, Hvo), Hvo),
        "vis_att_b": ((Hvo,), Hvo),
        "vis_att_q": ((Hvo,), Hvo),
        "dec_W": ((dec_in, 4 * Hd), dec_in),
        "dec_U": ((Hd, 4 * Hd), Hd),
        "dec_b": ((4 * Hd,), Hd),
    })
    if dynamic:
        shapes["vis_att_S"] = ((Hd, Hvo), Hd)
        shapes["out_W"] = ((Hd + Hvo, V), Hd + Hvo)
        shapes["out_b"] = ((V,), Hd + Hvo)
    else:
        shapes["dec_init_W"] = ((Hvo, Hd), Hvo)
        shapes["dec_init_b"] = ((Hd,), Hvo)
        shapes["out_W"] = ((Hd, V), Hd)
        shapes["out_b"] = ((V,), Hd)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform(-k, k) with k = 1/sqrt(fan_in), drawn in sorted-name order."""
    params = {}
    for name, (shape, fan_in) in sorted(param_shapes(cfg).items()):
        k = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-k, k, size=shape)
    return params


@dataclass
class ForwardTrace:
    action_attention: np.ndarray      # (B, m, n)
    visit_attention: np.ndarray       # (B, m)
    action_contexts: np.ndarray       # (B, m, 2*action_hidden)
    visit_context: np.ndarray         # (B, visit_hidden)
    decoder_distributions: np.ndarray  # (B, n, V)
    loss: float = float("nan")


def _additive_attention(h: ad.Node, W: ad.Node, b: ad.Node, q: ad.Node, mask=None):
    """score_j = q . tanh(W h_j + b); returns (weights, weighted sum of h)."""
    lead = h.shape[:-1]
    u = ad.tanh(ad.add(ad.matmul(h, W), b))
    scores = ad.reshape(ad.matmul(u, ad.reshape(q, (q.shape[0], 1))), lead)
    alpha = ad.softmax(scores, axis=-1, mask=mask)
    ctx = ad.sum_(ad.mul(ad.reshape(alpha, lead + (1,)), h), axis=-2)
    return alpha, ctx


class HierarchicalAttentionNetwork:
    """Holds a config and a name -> array parameter dict.

    Every forward pass wraps the arrays in fresh graph leaves, so a model
    object can be evaluated repeatedly; training returns new arrays rather
    than mutating shared ones.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        shapes = param_shapes(cfg)
        if set(params) != set(shapes):
            missing = sorted(set(shapes) - set(params))
            extra = sorted(set(params) - set(shapes))
            raise ShapeError(f"parameter names do not match config (missing={missing}, extra={extra})")
        for k, (shape, _) in shapes.items():
            if params[k].shape != shape:
                raise ShapeError(f"{k}: expected {shape}, got {params[k].shape}")
            if not np.isfinite(params[k]).all():
                raise NonFiniteError(f"{k} has non-finite entries")
        self.cfg = cfg
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int) -> "HierarchicalAttentionNetwork":
        return cls(cfg, init_params(cfg, np.random.default_rng(seed)))

    def clone(self) -> "HierarchicalAttentionNetwork":
        return HierarchicalAttentionNetwork(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def leaves(self) -> dict[str, ad.Node]:
        return {k: ad.parameter(v, name=k) for k, v in self.params.items()}

    # -- encoders ---------------------------------------------------------

    def encode_actions(self, P, ids: np.ndarray, mask: np.ndarray, train: bool = False, rng=None):
        """Encode ``(B, n)`` visits; returns (context ``(B, 2Ha)``, attention ``(B, n)``)."""
        mask = np.asarray(mask, dtype=bool)
        if ids.ndim != 2 or ids.shape != mask.shape:
            raise ShapeError(f"encode_actions: ids {ids.shape} / mask {mask.shape} must be equal 2-D shapes")
        if not mask.any(axis=1).all():
            raise InvalidVisit("visit with every position masked")
        x = ad.embedding_lookup(P["embedding"], ids)
        fwd = ad.lstm(x, P["act_fwd_W"], P["act_fwd_U"], P["act_fwd_b"], mask=mask)
        bwd = ad.lstm(x, P["act_bwd_W"], P["act_bwd_U"], P["act_bwd_b"], mask=mask, reverse=True)
        h = ad.dropout(ad.concat([fwd, bwd], axis=-1), self.cfg.dropout_p, train, rng)
        alpha, ctx = _additive_attention(h, P["act_att_W"], P["act_att_b"], P["act_att_q"], mask)
        return ctx, alpha

    def visit_states(self, P, contexts: ad.Node, train: bool = False, rng=None) -> ad.Node:
        """Visit-level LSTM over ``(B, m, 2Ha)`` visit vectors."""
        if contexts.value.ndim != 3 or contexts.shape[1] != self.cfg.m:
            raise ShapeError(f"encode_visits: expected (B, {self.cfg.m}, {2 * self.cfg.action_hidden}), "
                             f"got {contexts.shape}")
        hv = ad.lstm(contexts, P["vis_fwd_W"], P["vis_fwd_U"], P["vis_fwd_b"])
        if self.cfg.visit_encoder == "bidirectional":
            back = ad.lstm(contexts, P["vis_bwd_W"], P["vis_bwd_U"], P["vis_bwd_b"], reverse=True)
            hv = ad.concat([hv, back], axis=-1)
        return ad.dropout(hv, self.cfg.dropout_p, train, rng)

    def encode_visits(self, P, contexts: ad.Node, train: bool = False, rng=None):
        """Encode ``(B, m, 2Ha)`` visit vectors; returns (window context, visit attention ``(B, m)``).

        Static attention only; with decoder-state attention use :meth:`decode_attentive`.
        """
        if self.cfg.visit_attention != "static":
            raise ValueError("encode_visits needs visit_attention='static'")
        hv = self.visit_states(P, contexts, train, rng)
        alpha, ctx = _additive_attention(hv, P["vis_att_W"], P["vis_att_b"], P["vis_att_q"])
        return ctx, alpha

    def decode_attentive(self, P, hv: ad.Node, target: np.ndarray, train: bool = False, rng=None):
        """Teacher-forced decoder whose visit attention is queried by its own state.

        At step ``j`` the decoder state (which has read target actions
        ``1..j-1``) scores every visit state; the weighted visit state joins
        the decoder state in the output layer.  Returns (distributions
        ``(B, n, V)``, per-step attention ``(B, n, m)``, per-step contexts
        ``(B, n, H)``).
        """
        B, n = target.shape
        _, m, H = hv.shape
        prev = np.concatenate([np.full((B, 1), self.cfg.pad_id), target[:, :-1]], axis=1)
        s = ad.lstm(ad.embedding_lookup(P["embedding"], prev), P["dec_W"], P["dec_U"], P["dec_b"])
        s = ad.dropout(s, self.cfg.dropout_p, train, rng)
        keys = ad.reshape(ad.matmul(hv, P["vis_att_W"]), (B, 1, m, H))
        queries = ad.reshape(ad.add(ad.matmul(s, P["vis_att_S"]), P["vis_att_b"]), (B, n, 1, H))
        u = ad.tanh(ad.add(ad.broadcast_to(keys, (B, n, m, H)), ad.broadcast_to(queries, (B, n, m, H))))
        scores = ad.reshape(ad.matmul(u, ad.reshape(P["vis_att_q"], (H, 1))), (B, n, m))
        alpha = ad.softmax(scores, axis=-1)
        weighted = ad.mul(ad.broadcast_to(ad.reshape(alpha, (B, n, m, 1)), (B, n, m, H)),
                          ad.broadcast_to(ad.reshape(hv, (B, 1, m, H)), (B, n, m, H)))
        ctx = ad.sum_(weighted, axis=2)
        logits = ad.add(ad.matmul(ad.concat([s, ctx], axis=-1), P["out_W"]), P["out_b"])
        return ad.softmax(logits, axis=-1), alpha, ctx

    def decode(self, P, window_ctx: ad.Node, target: np.ndarray, teacher_forcing: bool = True,
               train: bool = False, rng=None) -> ad.Node:
        """Per-position distributions over the ``V`` actions for the target visit, ``(B, n, V)``.

        Step ``j`` sees the embedding of target action ``j-1`` (teacher forcing)
        or of the previous argmax prediction; step 1 sees the padding token.
        """
        if not teacher_forcing:
            return ad.constant(self._free_run(P, window_ctx.value, target.shape[1]))
        B, n = target.shape
        s0 = ad.tanh(ad.add(ad.matmul(window_ctx, P["dec_init_W"]), P["dec_init_b"]))
        prev = np.concatenate([np.full((B, 1), self.cfg.pad_id), target[:, :-1]], axis=1)
        x = ad.embedding_lookup(P["embedding"], prev)
        if self.cfg.decoder_context_concat:
            rep = ad.broadcast_to(ad.reshape(window_ctx, (B, 1, window_ctx.shape[1])), (B, n, window_ctx.shape[1]))
            x = ad.concat([x, rep], axis=-1)
        s = ad.lstm(x, P["dec_W"], P["dec_U"], P["dec_b"], h0=s0)
        s = ad.dropout(s, self.cfg.dropout_p, train, rng)
        logits = ad.add(ad.matmul(s, P["out_W"]), P["out_b"])
        return ad.softmax(logits, axis=-1)

    def _free_run(self, P, ctx: np.ndarray, n: int) -> np.ndarray:
        p = {k: v.value for k, v in P.items()}
        B = ctx.shape[0]
        H = self.cfg.decoder_hidden
        h = np.tanh(ctx @ p["dec_init_W"] + p["dec_init_b"])
        c = np.zeros((B, H))
        prev = np.full(B, self.cfg.pad_id)
        out = np.empty((B, n, self.cfg.vocab_size))
        for j in range(n):
            x = p["embedding"][prev]
            if self.cfg.decoder_context_concat:
                x = np.concatenate([x, ctx], axis=1)
            z = x @ p["dec_W"] + p["dec_b"] + h @ p["dec_U"]
            i, f = ad._sigmoid(z[:, :H]), ad._sigmoid(z[:, H:2 * H])
            o, g = ad._sigmoid(z[:, 2 * H:3 * H]), np.tanh(z[:, 3 * H:])
            c = f * c + i * g
            h = o * np.tanh(c)
            logits = h @ p["out_W"] + p["out_b"]
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            out[:, j] = e / e.sum(axis=1, keepdims=True)
            prev = out[:, j].argmax(axis=1)
        return out

    # -- full pass ---------------------------------------------------------

    def forward(self, batch: dict, P=None, train: bool = False, rng=None, teacher_forcing: bool = True):
        """Run the whole network on a stacked batch (see :func:`domain.windows_to_arrays`).

        Returns ``(loss_node, nodes)`` where ``nodes`` holds the attention and
        distribution nodes.
        """
        if P is None:
            P = self.leaves()
        ctx, ctx_mask = batch["ctx"], batch["ctx_mask"]
        tgt, tgt_mask = batch["tgt"], batch["tgt_mask"]
        B, m, n = ctx.shape
        if m != self.cfg.m:
            raise ShapeError(f"window has {m} context visits, model expects {self.cfg.m}")
        c, a_alpha = self.encode_actions(P, ctx.reshape(B * m, n), ctx_mask.reshape(B * m, n), train, rng)
        c = ad.reshape(c, (B, m, c.shape[-1]))
        if self.cfg.visit_attention == "static":
            wctx, v_alpha = self.encode_visits(P, c, train, rng)
            probs = self.decode(P, wctx, tgt, teacher_forcing, train, rng)
        else:
            if not teacher_forcing:
                raise ValueError("decoder-state visit attention supports teacher forcing only")
            hv = self.visit_states(P, c, train, rng)
            probs, step_alpha, step_ctx = self.decode_attentive(P, hv, tgt, train, rng)
            # one profile per window: mean of the step attentions over real target positions
            w = tgt_mask / np.maximum(tgt_mask.sum(axis=1, keepdims=True), 1)
            v_alpha = ad.sum_(ad.mul(step_alpha, ad.constant(w[:, :, None])), axis=1)
            wctx = ad.sum_(ad.mul(step_ctx, ad.constant(w[:, :, None])), axis=1)
        # padded targets: point at a real class, then mask the term out
        safe_tgt = np.where(tgt_mask, tgt, 0)
        logp = ad.log(ad.gather(probs, safe_tgt), floor=PROB_FLOOR)
        weight = tgt_mask.astype(np.float64) / max(tgt_mask.sum(), 1)
        loss = ad.mul(ad.sum_(ad.mul(logp, ad.constant(weight))), ad.constant(-1.0))
        nodes = {"action_attention": a_alpha, "visit_attention": v_alpha, "action_contexts": c,
                 "visit_context": wctx, "decoder_distributions": probs}
        return loss, nodes

    def loss(self, windows: Sequence[Window] | dict) -> float:
        batch = windows if isinstance(windows, dict) else windows_to_arrays(windows)
        loss, _ = self.forward(batch, P={k: ad.constant(v) for k, v in self.params.items()})
        return float(loss.value)

    def gradients(self, batch: dict, train: bool = False, rng=None) -> tuple[float, dict[str, np.ndarray]]:
        P = self.leaves()
        loss, _ = self.forward(batch, P=P, train=train, rng=rng)
        ad.backward(loss)
        return float(loss.value), {k: (v.grad if v.grad is not None else np.zeros_like(v.value))
                                   for k, v in P.items()}

    def trace(self, windows: Sequence[Window] | dict, teacher_forcing: bool = True) -> ForwardTrace:
        """Evaluation-mode (dropout off) pass exposing every attention vector."""
        batch = windows if isinstance(windows, dict) else windows_to_arrays(windows)
        P = {k: ad.constant(v) for k, v in self.params.items()}
        loss, nodes = self.forward(batch, P=P, train=False, teacher_forcing=teacher_forcing)
        B, m, n = batch["ctx"].shape
        return ForwardTrace(
            action_attention=nodes["action_attention"].value.reshape(B, m, n),
            visit_attention=nodes["visit_attention"].value,
            action_contexts=nodes["action_contexts"].value,
            visit_context=nodes["visit_context"].value,
            decoder_distributions=nodes["decoder_distributions"].value,
            loss=float(loss.value),
        )

    def visit_attention(self, windows: Sequence[Window], chunk: int = 256) -> np.ndarray:
        """``(W, m)`` visit-attention profiles, evaluation mode."""
        out = []
        for s in range(0, len(windows), chunk):
            batch = windows_to_arrays(windows[s:s + chunk])
            P = {k: ad.constant(v) for k, v in self.params.items()}
            if self.cfg.visit_attention != "static":
                _, nodes = self.forward(batch, P=P)
                out.append(nodes["visit_attention"].value)
                continue
            B, m, n = batch["ctx"].shape
            c, _ = self.encode_actions(P, batch["ctx"].reshape(B * m, n), batch["ctx_mask"].reshape(B * m, n))
            _, alpha = self.encode_visits(P, ad.reshape(c, (B, m, c.shape[-1])))
            out.append(alpha.value)
        return np.concatenate(out, axis=0)


@dataclass
class TrainResult:
    model: HierarchicalAttentionNetwork
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0
    stopped_early: bool = False
    simplex_error: float | None = None


def train(model: HierarchicalAttentionNetwork, windows: Sequence[Window], *, epochs: int = 25,
          lr: float = 1e-3, batch_size: int = 40, seed: int = 0, patience: int = 3,
          min_delta: float = 1e-4, trainable: Collection[str] | None = None) -> TrainResult:
    """Minimise the masked cross-entropy with Adam on shuffled mini-batches.

    Stops once the mean epoch loss has improved by less than ``min_delta``
    for ``patience`` consecutive epochs.  The input model is left untouched.
    ``trainable`` restricts updates to the named parameters (default: all).
    """
    if not windows:
        raise ValueError("no training windows")
    if trainable is not None:
        unknown = set(trainable) - set(model.params)
        if unknown:
            raise KeyError(f"unknown trainable parameters: {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    params = {k: v.copy() for k, v in model.params.items()}
    state = ad.adam_init(params)
    arrays = windows_to_arrays(windows)
    W = len(windows)
    result = TrainResult(model=HierarchicalAttentionNetwork(model.cfg, params))
    best, stale = np.inf, 0
    for epoch in range(epochs):
        order = rng.permutation(W)
        total = 0.0
        for s in range(0, W, batch_size):
            idx = order[s:s + batch_size]
            batch = {k: v[idx] for k, v in arrays.items()}
            current = HierarchicalAttentionNetwork(model.cfg, params)
            try:
                loss, grads = current.gradients(batch, train=True, rng=rng)
                if trainable is not None:
                    grads = {k: g for k, g in grads.items() if k in trainable}
                params, state = ad.adam_step(params, grads, state, lr=lr)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch + 1}, step {result.steps + 1}: {exc}") from exc
            total += loss * len(idx)
            result.steps += 1
        epoch_loss = total / W
        result.epoch_losses.append(epoch_loss)
        log.debug("epoch %d loss %.5f", epoch + 1, epoch_loss)
        if best - epoch_loss < min_delta:
            stale += 1
            if stale >= patience:
                result.stopped_early = True
                break
        else:
            stale = 0
        best = min(best, epoch_loss)
    result.model = HierarchicalAttentionNetwork(model.cfg, params)
    return result
