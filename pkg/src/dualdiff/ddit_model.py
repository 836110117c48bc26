"""Dual-branch diffusion transformer over image patches and text tokens.

Two token streams with stream-specific projections share one joint attention
in every layer, so each modality conditions the other everywhere. The image
stream is modulated by the diffusion timestep through adaptive layer norm
(shift/scale/gate per sublayer, zero-initialized); the text stream carries
learned static modulation instead, since the fraction of masked tokens
already encodes how corrupted the text is. A small bidirectional text encoder
(no causal mask) sits in front of the text stream and shares the token
embedding table, whose mask row trains like any other.

Heads: a velocity prediction matching the input grid shape, and per-position
logits over the text vocabulary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, RangeError, ShapeError
from .tensor_core import Tensor

ATTENTION_BLOCK_BIAS = -1e9


@dataclass(frozen=True)
class DDiTConfig:
    depth: int = 4
    width: int = 128
    heads: int = 4
    patch: int = 4
    image_h: int = 16
    image_w: int = 16
    image_c: int = 3
    vocab: int = 32
    text_len: int = 20
    mlp_ratio: float = 2.0
    encoder_depth: int = 2
    time_embed_dim: int = 64

    def __post_init__(self):
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError(
                f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch}"
            )
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.time_embed_dim % 2:
            raise ConfigError(f"time_embed_dim must be even, got {self.time_embed_dim}")

    @property
    def n_img_tokens(self):
        return (self.image_h // self.patch) * (self.image_w // self.patch)

    @property
    def patch_dim(self):
        return self.patch * self.patch * self.image_c

    @property
    def mlp_hidden(self):
        return int(self.width * self.mlp_ratio)

    @property
    def head_dim(self):
        return self.width // self.heads


class ModelParams:
    """Flat named-parameter store; iteration order is the build order."""

    def __init__(self, tensors):
        self._tensors = dict(tensors)

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def values(self):
        return self._tensors.values()

    def n_params(self):
        return sum(t.data.size for t in self._tensors.values())

    def copy(self):
        return ModelParams(
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.items()}
        )

    def zero_grads(self):
        tc.zero_grads(self._tensors)


def param_shapes(cfg):
    """Every parameter path and its shape, in canonical order."""
    w, hid, n, length = cfg.width, cfg.mlp_hidden, cfg.vocab, cfg.text_len
    shapes = {"tok_emb": (n, w), "enc.pos": (length, w)}

    def stream(prefix):
        shapes[f"{prefix}.wqkv"] = (w, 3 * w)
        shapes[f"{prefix}.bqkv"] = (3 * w,)
        shapes[f"{prefix}.wo"] = (w, w)
        shapes[f"{prefix}.bo"] = (w,)
        shapes[f"{prefix}.mlp.w1"] = (w, hid)
        shapes[f"{prefix}.mlp.b1"] = (hid,)
        shapes[f"{prefix}.mlp.w2"] = (hid, w)
        shapes[f"{prefix}.mlp.b2"] = (w,)

    for i in range(cfg.encoder_depth):
        shapes[f"enc.{i}.ln1.g"] = (w,)
        shapes[f"enc.{i}.ln1.b"] = (w,)
        stream(f"enc.{i}")
        shapes[f"enc.{i}.ln2.g"] = (w,)
        shapes[f"enc.{i}.ln2.b"] = (w,)

    shapes["img.patch.w"] = (cfg.patch_dim, w)
    shapes["img.patch.b"] = (w,)
    shapes["img.pos"] = (cfg.n_img_tokens, w)
    shapes["txt.pos"] = (length, w)
    shapes["time.w1"] = (cfg.time_embed_dim, w)
    shapes["time.b1"] = (w,)
    shapes["time.w2"] = (w, w)
    shapes["time.b2"] = (w,)

    for i in range(cfg.depth):
        stream(f"blk.{i}.img")
        shapes[f"blk.{i}.img.ada.w"] = (w, 6 * w)
        shapes[f"blk.{i}.img.ada.b"] = (6 * w,)
        stream(f"blk.{i}.txt")
        shapes[f"blk.{i}.txt.mod"] = (6 * w,)

    shapes["head.img.ada.w"] = (w, 2 * w)
    shapes["head.img.ada.b"] = (2 * w,)
    shapes["head.img.w"] = (w, cfg.patch_dim)
    shapes["head.img.b"] = (cfg.patch_dim,)
    shapes["head.txt.ln.g"] = (w,)
    shapes["head.txt.ln.b"] = (w,)
    shapes["head.txt.w"] = (w, n)
    shapes["head.txt.b"] = (n,)
    return shapes


def closed_form_param_count(cfg):
    """Parameter count as an arithmetic function of the configuration."""
    w, hid, n, length = cfg.width, cfg.mlp_hidden, cfg.vocab, cfg.text_len
    stream = 3 * w * w + 3 * w + w * w + w + w * hid + hid + hid * w + w
    enc_block = stream + 4 * w  # two layer norms with gain and bias
    dual_block = (stream + 6 * w * w + 6 * w) + (stream + 6 * w)
    return (
        n * w
        + length * w  # encoder positions
        + cfg.encoder_depth * enc_block
        + cfg.patch_dim * w + w  # patch embed
        + cfg.n_img_tokens * w
        + length * w  # text-stream positions
        + cfg.time_embed_dim * w + w + w * w + w  # timestep mlp
        + cfg.depth * dual_block
        + w * 2 * w + 2 * w  # final image modulation
        + w * cfg.patch_dim + cfg.patch_dim  # velocity head
        + 2 * w  # text head norm
        + w * n + n  # text head
    )


_ZERO_AT_TRAIN_INIT = (".ada.w", ".ada.b", ".txt.mod", "head.img.w", "head.img.b",
                       "head.txt.w", "head.txt.b")


def init_params(cfg, rng, scheme="train"):
    """Parameter store for a fresh model.

    scheme="train": 0.02-normal weights, zero biases, unit layer-norm gains,
    and zeroed modulation tables plus output heads, so both heads start at
    exactly zero and the residual streams start as the identity.
    scheme="random": every tensor is randomized (gains near one) so that all
    cross-modal paths are active; used by reachability and gradient tests.
    """
    if scheme not in ("train", "random"):
        raise ConfigError(f"unknown init scheme {scheme!r}")
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if scheme == "random":
            data = rng.normal(0.0, 0.05, shape)
            if name.endswith((".g", "ln.g")):
                data = data + 1.0
        elif name.endswith((".g",)):
            data = np.ones(shape)
        elif name.endswith(_ZERO_AT_TRAIN_INIT) or name.endswith(".b") or name.startswith("head.txt.ln"):
            data = np.zeros(shape)
        elif name.endswith((".bqkv", ".bo", ".b1", ".b2")):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, shape)
        tensors[name] = Tensor(np.ascontiguousarray(data), requires_grad=True, name=name)
    params = ModelParams(tensors)
    assert params.n_params() == closed_form_param_count(cfg)
    return params


@dataclass
class DualOutput:
    velocity: Tensor  # same shape as the input grid batch
    text_logits: Tensor  # (batch, text_len, vocab)


# ---------------------------------------------------------------------------
# tokenization of grids
# ---------------------------------------------------------------------------


def patchify(img, patch):
    """(..., H, W, C) -> (..., H/p * W/p, p*p*C); lossless."""
    img = np.asarray(img)
    *lead, h, w, c = img.shape
    if h % patch or w % patch:
        raise ConfigError(f"grid {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = img.reshape(*lead, gh, patch, gw, patch, c)
    x = np.moveaxis(x, -4, -3)  # (..., gh, gw, patch, patch, c)
    return x.reshape(*lead, gh * gw, patch * patch * c)


def unpatchify(tokens, patch, h, w, c):
    tokens = np.asarray(tokens)
    *lead, n, d = tokens.shape
    gh, gw = h // patch, w // patch
    if n != gh * gw or d != patch * patch * c:
        raise ShapeError(f"unpatchify: got {tokens.shape}, expected (..., {gh * gw}, {patch * patch * c})")
    x = tokens.reshape(*lead, gh, gw, patch, patch, c)
    x = np.moveaxis(x, -3, -4)
    return x.reshape(*lead, h, w, c)


def _patchify_taped(img, cfg, batch):
    p = cfg.patch
    gh, gw = cfg.image_h // p, cfg.image_w // p
    x = tc.reshape(img, (batch, gh, p, gw, p, cfg.image_c))
    x = tc.transpose(x, (0, 1, 3, 2, 4, 5))
    return tc.reshape(x, (batch, gh * gw, cfg.patch_dim))


def _unpatchify_taped(tokens, cfg, batch):
    p = cfg.patch
    gh, gw = cfg.image_h // p, cfg.image_w // p
    x = tc.reshape(tokens, (batch, gh, gw, p, p, cfg.image_c))
    x = tc.transpose(x, (0, 1, 3, 2, 4, 5))
    return tc.reshape(x, (batch, cfg.image_h, cfg.image_w, cfg.image_c))


# ---------------------------------------------------------------------------
# taped building blocks
# ---------------------------------------------------------------------------


def _linear(x, w, b):
    *lead, d = x.shape
    flat = tc.reshape(x, (int(np.prod(lead)), d))
    y = tc.add(tc.matmul(flat, w), b)
    return tc.reshape(y, (*lead, w.shape[1]))


def _qkv(x, wqkv, bqkv, width):
    """Three projections from one packed (W, 3W) parameter.

    The packed weight is sliced (cheap to differentiate) rather than the
    activation, so the backward pass zero-fills three small weight-shaped
    buffers instead of three activation-shaped ones.
    """
    outs = []
    for j in range(3):
        w = tc.slice_(wqkv, (slice(None), slice(j * width, (j + 1) * width)))
        b = tc.slice_(bqkv, (slice(j * width, (j + 1) * width),))
        outs.append(_linear(x, w, b))
    return outs


def _heads(x, heads, head_dim):
    b, t, _ = x.shape
    return tc.transpose(tc.reshape(x, (b, t, heads, head_dim)), (0, 2, 1, 3))


def _attention(q, k, v, heads, head_dim, bias=None):
    b, t, width = q.shape
    qh = _heads(q, heads, head_dim)
    kh = _heads(k, heads, head_dim)
    vh = _heads(v, heads, head_dim)
    scores = tc.scale(tc.matmul(qh, tc.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
    if bias is not None:
        scores = tc.add(scores, bias)
    out = tc.matmul(tc.softmax(scores), vh)
    return tc.reshape(tc.transpose(out, (0, 2, 1, 3)), (b, t, width))


def _modulate(x, shift, scl):
    return tc.add(tc.multiply(x, tc.add(scl, tc.constant(1.0))), shift)


def time_embedding(t, dim):
    """Sinusoidal features of t in [0, 1], numpy side (no gradient to t)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * 1000.0 * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=-1)


def text_encode(tokens, params, cfg):
    """Bidirectional encoder over the full sequence; output feeds the text stream.

    Every position can see every other one (no causal mask), which the
    masked-token diffusion process requires.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None]
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise RangeError(f"token ids outside [0, {cfg.vocab})")
    w, hd = cfg.width, cfg.head_dim
    h = tc.add(tc.embedding_lookup(params["tok_emb"], tokens), params["enc.pos"])
    for i in range(cfg.encoder_depth):
        pre = f"enc.{i}"
        x = tc.layer_norm(h, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        q, k, v = _qkv(x, params[f"{pre}.wqkv"], params[f"{pre}.bqkv"], w)
        att = _attention(q, k, v, cfg.heads, hd)
        h = tc.add(h, _linear(att, params[f"{pre}.wo"], params[f"{pre}.bo"]))
        x = tc.layer_norm(h, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        m = tc.gelu(_linear(x, params[f"{pre}.mlp.w1"], params[f"{pre}.mlp.b1"]))
        h = tc.add(h, _linear(m, params[f"{pre}.mlp.w2"], params[f"{pre}.mlp.b2"]))
    if squeeze:
        h = tc.reshape(h, (cfg.text_len, w))
    return h


def _mod_slices(vec6, width, batched):
    """Six modulation signals from a (B, 6W) tensor or a (6W,) parameter."""
    outs = []
    for j in range(6):
        if batched:
            part = tc.slice_(vec6, (slice(None), slice(j * width, (j + 1) * width)))
            part = tc.reshape(part, (vec6.shape[0], 1, width))
        else:
            part = tc.slice_(vec6, (slice(j * width, (j + 1) * width),))
        outs.append(part)
    return outs


def forward(params, cfg, img, tokens, t, block_img_to_txt=False):
    """One pass of the dual transformer.

    img: (B, H, W, C) corrupted or clean grid; tokens: (B, L) ids (clean or
    masked); t: per-sample image diffusion time in [0, 1]. The text stream
    receives no timestep input. ``block_img_to_txt`` is a diagnostic mode
    that stops text queries from attending to image keys, isolating the text
    stream from the image pathway.
    """
    img = np.asarray(img, dtype=np.float64)
    tokens = np.asarray(tokens, dtype=np.int64)
    squeeze = img.ndim == 3
    if squeeze:
        img = img[None]
        tokens = tokens[None]
    batch = img.shape[0]
    t = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)), (batch,))
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise RangeError(f"timestep outside [0, 1]: {t}")
    if img.shape[1:] != (cfg.image_h, cfg.image_w, cfg.image_c):
        raise ShapeError(f"image shape {img.shape[1:]} != "
                         f"{(cfg.image_h, cfg.image_w, cfg.image_c)}")
    if tokens.shape != (batch, cfg.text_len):
        raise ShapeError(f"token shape {tokens.shape} != {(batch, cfg.text_len)}")

    w, hd, ti = cfg.width, cfg.head_dim, cfg.n_img_tokens
    ones_w = tc.constant(np.ones(w))
    zeros_w = tc.constant(np.zeros(w))

    txt_h = tc.add(text_encode(tokens, params, cfg), params["txt.pos"])

    pt = _patchify_taped(tc.constant(img), cfg, batch)
    img_h = tc.add(_linear(pt, params["img.patch.w"], params["img.patch.b"]), params["img.pos"])

    sin = tc.constant(time_embedding(t, cfg.time_embed_dim))
    temb = tc.add(tc.matmul(sin, params["time.w1"]), params["time.b1"])
    temb = tc.add(tc.matmul(tc.gelu(temb), params["time.w2"]), params["time.b2"])
    temb_act = tc.gelu(temb)

    bias = None
    if block_img_to_txt:
        total = ti + cfg.text_len
        mask = np.zeros((total, total))
        mask[ti:, :ti] = ATTENTION_BLOCK_BIAS
        bias = tc.constant(mask)

    for i in range(cfg.depth):
        ip, tp = f"blk.{i}.img", f"blk.{i}.txt"
        vec6 = tc.add(tc.matmul(temb_act, params[f"{ip}.ada.w"]), params[f"{ip}.ada.b"])
        i_sh1, i_sc1, i_g1, i_sh2, i_sc2, i_g2 = _mod_slices(vec6, w, batched=True)
        t_sh1, t_sc1, t_g1, t_sh2, t_sc2, t_g2 = _mod_slices(params[f"{tp}.mod"], w, batched=False)

        xi = _modulate(tc.layer_norm(img_h, ones_w, zeros_w), i_sh1, i_sc1)
        xt = _modulate(tc.layer_norm(txt_h, ones_w, zeros_w), t_sh1, t_sc1)
        qi, ki, vi = _qkv(xi, params[f"{ip}.wqkv"], params[f"{ip}.bqkv"], w)
        qt, kt, vt = _qkv(xt, params[f"{tp}.wqkv"], params[f"{tp}.bqkv"], w)
        att = _attention(
            tc.concat([qi, qt], axis=1),
            tc.concat([ki, kt], axis=1),
            tc.concat([vi, vt], axis=1),
            cfg.heads, hd, bias=bias,
        )
        ai = tc.slice_(att, (slice(None), slice(0, ti)))
        at = tc.slice_(att, (slice(None), slice(ti, ti + cfg.text_len)))
        img_h = tc.add(img_h, tc.multiply(i_g1, _linear(ai, params[f"{ip}.wo"], params[f"{ip}.bo"])))
        txt_h = tc.add(txt_h, tc.multiply(t_g1, _linear(at, params[f"{tp}.wo"], params[f"{tp}.bo"])))

        xi = _modulate(tc.layer_norm(img_h, ones_w, zeros_w), i_sh2, i_sc2)
        mi = tc.gelu(_linear(xi, params[f"{ip}.mlp.w1"], params[f"{ip}.mlp.b1"]))
        img_h = tc.add(img_h, tc.multiply(i_g2, _linear(mi, params[f"{ip}.mlp.w2"], params[f"{ip}.mlp.b2"])))
        xt = _modulate(tc.layer_norm(txt_h, ones_w, zeros_w), t_sh2, t_sc2)
        mt = tc.gelu(_linear(xt, params[f"{tp}.mlp.w1"], params[f"{tp}.mlp.b1"]))
        txt_h = tc.add(txt_h, tc.multiply(t_g2, _linear(mt, params[f"{tp}.mlp.w2"], params[f"{tp}.mlp.b2"])))

    fin = tc.add(tc.matmul(temb_act, params["head.img.ada.w"]), params["head.img.ada.b"])
    f_sh = tc.reshape(tc.slice_(fin, (slice(None), slice(0, w))), (batch, 1, w))
    f_sc = tc.reshape(tc.slice_(fin, (slice(None), slice(w, 2 * w))), (batch, 1, w))
    xi = _modulate(tc.layer_norm(img_h, ones_w, zeros_w), f_sh, f_sc)
    v_tokens = _linear(xi, params["head.img.w"], params["head.img.b"])
    velocity = _unpatchify_taped(v_tokens, cfg, batch)

    xt = tc.layer_norm(txt_h, params["head.txt.ln.g"], params["head.txt.ln.b"])
    logits = _linear(xt, params["head.txt.w"], params["head.txt.b"])

    if squeeze:
        velocity = tc.reshape(velocity, (cfg.image_h, cfg.image_w, cfg.image_c))
        logits = tc.reshape(logits, (cfg.text_len, cfg.vocab))
    return DualOutput(velocity=velocity, text_logits=logits)


# ---------------------------------------------------------------------------
# inference-mode conveniences (no tape, plain arrays out)
# ---------------------------------------------------------------------------


def predict_velocity(params, cfg, img_t, tokens, t):
    out = forward(params, cfg, img_t, tokens, t)
    return out.velocity.data


def predict_text_logits(params, cfg, img, tokens):
    # conditioning image is clean: its diffusion time is exactly zero
    out = forward(params, cfg, img, tokens, 0.0)
    return out.text_logits.data
