"""Multimodal architecture: patch embedding, frozen transformer encoder
over visual tokens, 4-token grouping, linear projection into the decoder
width, and a low-rank-adapted causal decoder.

Visual path shape law: an s x s image with patch size p gives n=(s/p)^2
tokens of width d_bev; grouping concatenates every 4 adjacent tokens into
n/4 tokens of width 4*d_bev; projection maps them to width d. The decoder
then runs over [visual][SEP][annotation][SEP][question][SEP][answer...].

All linear weights are stored out x in and applied as x @ W^T. Adapted
layers compute x @ W^T + (alpha/r) * x @ A^T @ B^T with B zero-initialized,
so a fresh adapter leaves the base model's function unchanged.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Matrix
from .vocab import EOS, SEP


@dataclass(frozen=True)
class ModelConfig:
    d: int = 128
    d_bev: int = 64
    patch: int = 32
    enc_layers: int = 2
    enc_heads: int = 4
    dec_layers: int = 2
    dec_heads: int = 4
    vocab_size: int = 512
    max_seq: int = 256
    lora_rank: int = 8
    lora_alpha: float = 16.0
    image_size: int = 448
    train_embeddings: bool = False

    def __post_init__(self):
        if self.image_size % self.patch != 0:
            raise ShapeError(f"patch {self.patch} does not tile {self.image_size}")
        n = (self.image_size // self.patch) ** 2
        if n % 4 != 0:
            raise ShapeError(f"patch grid gives {n} tokens, not divisible by 4")
        if self.lora_rank < 1:
            raise ShapeError("lora_rank must be >= 1")
        if self.d % self.dec_heads or self.d_bev % self.enc_heads:
            raise ShapeError("widths must divide evenly into heads")

    @property
    def n_patches(self):
        return (self.image_size // self.patch) ** 2

    @property
    def n_visual(self):
        return self.n_patches // 4

    def to_dict(self):
        return {k: getattr(self, k) for k in (
            "d", "d_bev", "patch", "enc_layers", "enc_heads", "dec_layers",
            "dec_heads", "vocab_size", "max_seq", "lora_rank", "lora_alpha",
            "image_size", "train_embeddings")}

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


STAGES = ("patched", "encoded", "grouped", "projected")


@dataclass
class VisualTokens:
    mat: Matrix
    stage: str

    @property
    def n(self):
        return self.mat.rows

    @property
    def width(self):
        return self.mat.cols


def expected_shapes(cfg: ModelConfig) -> dict:
    """Every parameter name with its exact shape."""
    db, d, r = cfg.d_bev, cfg.d, cfg.lora_rank
    shapes = {
        "patch.w": (db, 3 * cfg.patch * cfg.patch),
        "patch.b": (1, db),
        "patch.pos": (cfg.n_patches, db),
    }
    for i in range(cfg.enc_layers):
        p = f"enc.{i}."
        shapes.update({
            p + "ln1.g": (1, db), p + "ln1.b": (1, db),
            p + "attn.wq": (db, db), p + "attn.wk": (db, db),
            p + "attn.wv": (db, db), p + "attn.wo": (db, db),
            p + "ln2.g": (1, db), p + "ln2.b": (1, db),
            p + "mlp.w1": (4 * db, db), p + "mlp.b1": (1, 4 * db),
            p + "mlp.w2": (db, 4 * db), p + "mlp.b2": (1, db),
        })
    shapes.update({
        "enc.final_ln.g": (1, db), "enc.final_ln.b": (1, db),
        "proj.w": (d, 4 * db), "proj.b": (1, d),
        "dec.tok": (cfg.vocab_size, d), "dec.pos": (cfg.max_seq, d),
    })
    for i in range(cfg.dec_layers):
        p = f"dec.{i}."
        shapes.update({
            p + "ln1.g": (1, d), p + "ln1.b": (1, d),
            p + "attn.wq": (d, d), p + "attn.wk": (d, d),
            p + "attn.wv": (d, d), p + "attn.wo": (d, d),
            p + "attn.lora_q.a": (r, d), p + "attn.lora_q.b": (d, r),
            p + "attn.lora_v.a": (r, d), p + "attn.lora_v.b": (d, r),
            p + "ln2.g": (1, d), p + "ln2.b": (1, d),
            p + "mlp.w1": (4 * d, d), p + "mlp.b1": (1, 4 * d),
            p + "mlp.w2": (d, 4 * d), p + "mlp.b2": (1, d),
        })
    shapes.update({
        "dec.final_ln.g": (1, d), "dec.final_ln.b": (1, d),
        "dec.head": (cfg.vocab_size, d),
    })
    return shapes


def trainable_names(cfg: ModelConfig) -> set:
    """Projection and adapter factors; embeddings only behind the flag."""
    names = {"proj.w", "proj.b"}
    for i in range(cfg.dec_layers):
        for adapter in ("lora_q", "lora_v"):
            names.add(f"dec.{i}.attn.{adapter}.a")
            names.add(f"dec.{i}.attn.{adapter}.b")
    if cfg.train_embeddings:
        names.update({"patch.w", "patch.b", "patch.pos"})
    return names


def init_params(cfg: ModelConfig, rng: T.Rng) -> dict:
    """Fresh parameters: N(0, 0.02) weights, unit layer-norm gains, zero
    biases, zero adapter B factors."""
    params = {}
    for name, (rows, cols) in expected_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith("ln.g") or ".ln1.g" in name or ".ln2.g" in name:
            a = np.ones((rows, cols))
        elif leaf in ("b", "b1", "b2") and not name.endswith("lora_q.b") \
                and not name.endswith("lora_v.b"):
            a = np.zeros((rows, cols))
        elif name.endswith("lora_q.b") or name.endswith("lora_v.b"):
            a = np.zeros((rows, cols))
        else:
            a = rng.fork(name).normal(rows, cols, std=0.02)
        params[name] = T.parameter(a, name)
    mark_trainable(params, cfg)
    return params


def mark_trainable(params: dict, cfg: ModelConfig):
    allowed = trainable_names(cfg)
    for name, p in params.items():
        p.requires_grad = name in allowed


def frozen_digest(params: dict, cfg: ModelConfig) -> str:
    """SHA-256 over every frozen tensor, in name order."""
    allowed = trainable_names(cfg)
    h = hashlib.sha256()
    for name in sorted(params):
        if name in allowed:
            continue
        h.update(name.encode())
        h.update(params[name].a.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------

def _linear(x: Matrix, w: Matrix) -> Matrix:
    return T.matmul(x, T.transpose(w))


def lora_forward(x: Matrix, w: Matrix, a: Matrix, b: Matrix, alpha: float) -> Matrix:
    if a.cols != w.cols or b.rows != w.rows or a.rows != b.cols:
        raise ShapeError(
            f"adapter shapes A{a.shape} B{b.shape} do not fit W{w.shape}")
    base = _linear(x, w)
    low = _linear(_linear(x, a), b)
    return T.add(base, T.scale(low, alpha / a.rows))


def merge_lora(params: dict, cfg: ModelConfig) -> dict:
    """Fold every adapter into its base weight; adapters become zero."""
    merged = {}
    scale = cfg.lora_alpha / cfg.lora_rank
    for name, p in params.items():
        merged[name] = p.copy()
    for i in range(cfg.dec_layers):
        for which, base in (("lora_q", "wq"), ("lora_v", "wv")):
            prefix = f"dec.{i}.attn."
            a = params[prefix + which + ".a"].a
            b = params[prefix + which + ".b"].a
            merged[prefix + base].a = params[prefix + base].a + scale * (b @ a)
            merged[prefix + which + ".b"].a = np.zeros_like(b)
    return merged


def _attention(x, p, prefix, heads, mask=None, alpha=None):
    lq = (p.get(prefix + "lora_q.a"), p.get(prefix + "lora_q.b"))
    lv = (p.get(prefix + "lora_v.a"), p.get(prefix + "lora_v.b"))
    if lq[0] is not None:
        q = lora_forward(x, p[prefix + "wq"], lq[0], lq[1], alpha)
        v = lora_forward(x, p[prefix + "wv"], lv[0], lv[1], alpha)
    else:
        q = _linear(x, p[prefix + "wq"])
        v = _linear(x, p[prefix + "wv"])
    k = _linear(x, p[prefix + "wk"])
    dh = q.cols // heads
    outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh, kh, vh = (T.slice_cols(m, lo, hi) for m in (q, k, v))
        att = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(dh))
        if mask is not None:
            att = T.add_const(att, mask)
        outs.append(T.matmul(T.softmax_rows(att), vh))
    return _linear(T.concat_cols(outs), p[prefix + "wo"])


def _mlp(x, p, prefix):
    h = T.add_rowvec(_linear(x, p[prefix + "w1"]), p[prefix + "b1"])
    return T.add_rowvec(_linear(T.gelu(h), p[prefix + "w2"]), p[prefix + "b2"])


def _block(x, p, prefix, heads, mask=None, alpha=None):
    h = T.add(x, _attention(T.layer_norm(x, p[prefix + "ln1.g"], p[prefix + "ln1.b"]),
                            p, prefix + "attn.", heads, mask, alpha))
    return T.add(h, _mlp(T.layer_norm(h, p[prefix + "ln2.g"], p[prefix + "ln2.b"]),
                         p, prefix + "mlp."))


def _causal_mask(n):
    return np.triu(np.full((n, n), -1e30), k=1)


class Model:
    """Parameters plus the forward graph. Instances are cheap; all state
    lives in the ``params`` dict of named matrices."""

    def __init__(self, cfg: ModelConfig, params: dict):
        self.cfg = cfg
        self.params = params

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int = 0):
        return cls(cfg, init_params(cfg, T.Rng(seed).fork("init")))

    # -- visual path -----------------------------------------------------
    def patch_embed(self, pixels) -> VisualTokens:
        cfg = self.cfg
        s, p = cfg.image_size, cfg.patch
        px = np.asarray(pixels)
        if px.shape != (s, s, 3):
            raise ShapeError(f"expected {s}x{s}x3 image, got {px.shape}")
        g = s // p
        flat = (px.astype(np.float64) / 255.0
                ).reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, -1)
        x = T.add_rowvec(_linear(T.constant(flat), self.params["patch.w"]),
                         self.params["patch.b"])
        x = T.add(x, self.params["patch.pos"])
        return VisualTokens(x, "patched")

    def encode(self, vt: VisualTokens) -> VisualTokens:
        if vt.stage != "patched":
            raise ContractError(f"encode expects patched tokens, got {vt.stage}")
        x = vt.mat
        for i in range(self.cfg.enc_layers):
            x = _block(x, self.params, f"enc.{i}.", self.cfg.enc_heads)
        x = T.layer_norm(x, self.params["enc.final_ln.g"], self.params["enc.final_ln.b"])
        return VisualTokens(x, "encoded")

    def concat4(self, vt: VisualTokens) -> VisualTokens:
        if vt.stage != "encoded":
            raise ContractError(f"concat4 expects encoded tokens, got {vt.stage}")
        if vt.n % 4 != 0:
            raise ShapeError(f"{vt.n} tokens not divisible by 4")
        return VisualTokens(T.merge_rows(vt.mat, 4), "grouped")

    def project(self, vt: VisualTokens) -> VisualTokens:
        if vt.stage != "grouped":
            raise ContractError(f"project expects grouped tokens, got {vt.stage}")
        if vt.width != self.params["proj.w"].cols:
            raise ShapeError(
                f"projection expects width {self.params['proj.w'].cols}, got {vt.width}")
        x = T.add_rowvec(_linear(vt.mat, self.params["proj.w"]), self.params["proj.b"])
        return VisualTokens(x, "projected")

    def visual_grouped(self, pixels) -> VisualTokens:
        return self.concat4(self.encode(self.patch_embed(pixels)))

    # -- text path -------------------------------------------------------
    def embed_ids(self, ids) -> Matrix:
        return T.gather_rows(self.params["dec.tok"], list(ids))

    def context_ids(self, ann_ids, q_ids):
        return list(ann_ids) + [SEP] + list(q_ids) + [SEP]

    def _check_length(self, n_vis, ann_ids, q_ids, ans_ids):
        segments = (("visual", n_vis + 1), ("annotation", len(ann_ids) + 1),
                    ("question", len(q_ids) + 1), ("answer", len(ans_ids)))
        used = 0
        for name, length in segments:
            used += length
            if used > self.cfg.max_seq:
                raise ContractError(
                    f"sequence overflows max_seq={self.cfg.max_seq} "
                    f"inside the {name} segment")
        return used

    def decode_sequence(self, vis: VisualTokens, token_ids) -> Matrix:
        """Run the decoder over [visual][tokens...]; returns logits."""
        if vis.stage != "projected":
            raise ContractError(f"decoder expects projected tokens, got {vis.stage}")
        parts = [vis.mat]
        if token_ids:
            parts.append(self.embed_ids(token_ids))
        x = T.concat_rows(parts)
        n = x.rows
        if n > self.cfg.max_seq:
            raise ContractError(f"sequence length {n} exceeds {self.cfg.max_seq}")
        pos = T.gather_rows(self.params["dec.pos"], list(range(n)))
        x = T.add(x, pos)
        mask = _causal_mask(n)
        for i in range(self.cfg.dec_layers):
            x = _block(x, self.params, f"dec.{i}.", self.cfg.dec_heads,
                       mask, self.cfg.lora_alpha)
        x = T.layer_norm(x, self.params["dec.final_ln.g"], self.params["dec.final_ln.b"])
        return _linear(x, self.params["dec.head"])

    def sample_loss(self, vis_grouped: VisualTokens, ann_ids, q_ids, ans_ids) -> Matrix:
        """Teacher-forced cross entropy on the answer positions (the
        answer id list must already end with EOS)."""
        if not ans_ids:
            raise ContractError("empty answer")
        n_vis = vis_grouped.n
        self._check_length(n_vis, ann_ids, q_ids, ans_ids)
        vis = self.project(vis_grouped)
        ids = [SEP] + self.context_ids(ann_ids, q_ids) + list(ans_ids)
        logits = self.decode_sequence(vis, ids)
        ctx_len = n_vis + 1 + len(ann_ids) + 1 + len(q_ids) + 1
        rows = list(range(ctx_len - 1, ctx_len - 1 + len(ans_ids)))
        return T.cross_entropy(T.gather_rows(logits, rows), list(ans_ids))

    def generate(self, vis_grouped: VisualTokens, ann_ids, q_ids, max_new=32):
        """Greedy decoding; stops at EOS (not included in the output).
        max_new is capped to the remaining sequence budget."""
        n_vis = vis_grouped.n
        ctx_len = self._check_length(n_vis, ann_ids, q_ids, [])
        max_new = min(max_new, self.cfg.max_seq - ctx_len)
        vis = self.project(vis_grouped)
        ctx = [SEP] + self.context_ids(ann_ids, q_ids)
        out = []
        for _ in range(max_new):
            logits = self.decode_sequence(vis, ctx + out)
            nxt = int(np.argmax(logits.a[-1]))
            if nxt == EOS:
                break
            out.append(nxt)
        return out

    def answer_ids(self, vis_grouped, ann_ids, q_ids, ans_ids):
        """Teacher-forced argmax at each answer position (training-set
        accuracy oracle)."""
        vis = self.project(vis_grouped)
        ids = [SEP] + self.context_ids(ann_ids, q_ids) + list(ans_ids)
        logits = self.decode_sequence(vis, ids)
        ctx_len = vis_grouped.n + 1 + len(ann_ids) + 1 + len(q_ids) + 1
        rows = range(ctx_len - 1, ctx_len - 1 + len(ans_ids))
        return [int(np.argmax(logits.a[r])) for r in rows]
