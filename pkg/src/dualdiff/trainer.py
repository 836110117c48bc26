"""Joint training loop: one corrupted modality per loss term, one backward.

Each step builds a single combined forward pass: the first half of the rows
carries interpolated images conditioned on clean captions (flow-matching
loss), the second half carries clean images conditioned on masked text (bound
loss). Conditioning is never corrupted; the image timestep is exactly zero for
every text-loss row, and captions conditioning the image loss contain no mask
tokens (both asserted every step). The two losses join as
total = image + lambda_text * text and a single backward pass fills every
gradient; AdamW with decoupled decay and linear warmup applies the update.

Checkpoints capture parameters, optimizer moments, and the generator state,
so a resumed run reproduces the uninterrupted loss sequence bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ddit_model as dm
from . import image_flow as fl
from . import synthetic_world as sw
from . import tensor_core as tc
from . import text_diffusion as td
from .errors import ConfigError, NumericError, RangeError

ADAM_EPS = 1e-8
CHECKPOINT_MAGIC = b"DDCP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lambda_text: float = 1.0
    lr: float = 3e-4
    warmup_iters: int = 200
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 64
    total_steps: int = 20000
    cond_dropout: float = 0.1
    seed: int = 0
    eval_every: int = 2000
    checkpoint_every: int = 1000
    grad_clip: float = 1.0
    qa_fraction: float = 0.5
    antithetic_k: int = 1
    antithetic_delta: float = 1e-3
    antithetic_mode: str = "batch"  # "batch": the batch forms the strata
    eval_examples: int = 96
    text_sample_steps: int = 16
    t2i_sample_steps: int = 28
    guidance_scale: float = 7.0

    def __post_init__(self):
        if self.lambda_text < 0:
            raise ConfigError(f"lambda_text must be >= 0, got {self.lambda_text}")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ConfigError(f"cond_dropout must lie in [0, 1), got {self.cond_dropout}")
        if self.warmup_iters > self.total_steps:
            raise ConfigError(
                f"warmup_iters {self.warmup_iters} exceeds total_steps {self.total_steps}"
            )
        if self.antithetic_mode not in ("batch", "example"):
            raise ConfigError(f"unknown antithetic_mode {self.antithetic_mode!r}")


class OptState:
    """AdamW first/second moments, aligned with the parameter store."""

    def __init__(self, params):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def effective_lr(cfg, step):
    if cfg.warmup_iters <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, step / cfg.warmup_iters)


def adamw_update(params, opt, step, cfg):
    """One decoupled-weight-decay Adam step; step counts from 1."""
    if step < 1:
        raise RangeError(f"optimizer step must be >= 1, got {step}")
    lr = effective_lr(cfg, step)
    c1 = 1.0 - cfg.beta1 ** step
    c2 = 1.0 - cfg.beta2 ** step
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise NumericError(f"adamw_update: missing gradient for {name}")
        m, v = opt.m[name], opt.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += ADAM_EPS
        p.data -= lr * ((m / c1) / denom + cfg.weight_decay * p.data)


def clip_gradients(params, max_norm):
    """Scale all gradients to the global-norm ball; returns the raw norm."""
    total = 0.0
    for p in params.values():
        total += float(np.dot(p.grad.reshape(-1), p.grad.reshape(-1)))
    norm = float(np.sqrt(total))
    if not np.isfinite(norm):
        raise NumericError(f"gradient norm is non-finite ({norm})")
    if max_norm and norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            p.grad = p.grad * factor
    return norm


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


def assemble_batch(examples, idx, rng, cfg, length):
    """Images plus caption conditioning plus text-loss targets for one step.

    Text targets are a caption/QA mixture; QA rows freeze the question
    prefix. The rng draw order is fixed so a restored generator reproduces
    the identical batch.
    """
    images = np.stack([examples[i].grid for i in idx])
    captions = np.stack([examples[i].caption for i in idx])
    b = len(idx)
    use_qa = rng.random(b) < cfg.qa_fraction
    pick = rng.random(b)
    text_ids = np.empty((b, length), dtype=np.int64)
    frozen = np.zeros((b, length), dtype=bool)
    for j, i in enumerate(idx):
        if use_qa[j] and examples[i].qa:
            qa_ids, qlen = examples[i].qa[int(pick[j] * len(examples[i].qa))]
            text_ids[j] = qa_ids
            frozen[j, :qlen] = True
        else:
            text_ids[j] = examples[i].caption
    return {"images": images, "captions": captions, "text_ids": text_ids, "frozen": frozen}


def _text_times(cfg, batch_size, rng):
    if cfg.antithetic_mode == "batch":
        # the batch is the stratification: one shared draw, batch_size strata
        u = rng.random()
        return td.antithetic_times(td.NelboConfig(k=batch_size, delta=cfg.antithetic_delta), u)
    times = np.empty(batch_size * cfg.antithetic_k)
    ncfg = td.NelboConfig(k=cfg.antithetic_k, delta=cfg.antithetic_delta)
    for j in range(batch_size):
        times[j * cfg.antithetic_k:(j + 1) * cfg.antithetic_k] = td.antithetic_times(
            ncfg, rng.random()
        )
    return times


def joint_step(batch, params, opt, step, cfg, mcfg, rng, include_text_loss=True,
               update=True):
    """One optimization step over both modalities; returns step metrics.

    ``include_text_loss=False`` keeps the identical rng draw sequence but
    leaves the text term out of the total entirely (for the lambda_text = 0
    equivalence check).
    """
    images = batch["images"]
    captions = batch["captions"]
    b = images.shape[0]
    k = 1 if cfg.antithetic_mode == "batch" else cfg.antithetic_k

    t_img = fl.sample_timestep(rng, b)
    noise = rng.standard_normal(images.shape)
    x_t = fl.interpolate(images, noise, t_img)
    cond = captions.copy()
    dropped = rng.random(b) < cfg.cond_dropout
    if dropped.any():
        cond[dropped] = sw.null_caption(mcfg.text_len).ids

    times = _text_times(cfg, b, rng)
    true_rows = np.repeat(batch["text_ids"], k, axis=0)
    frozen_rows = np.repeat(batch["frozen"], k, axis=0)
    corrupted = np.empty_like(true_rows)
    for j in range(true_rows.shape[0]):
        seq = td.TokenSequence(true_rows[j], frozen_rows[j])
        corrupted[j] = td.forward_mask(seq, times[j], rng, sw.VOCAB).ids

    # conditioning purity: clean captions on the image side, zero image
    # timestep on the text side
    assert not np.any(cond == sw.VOCAB.mask_id)
    imgs_in = np.concatenate([x_t, np.repeat(images, k, axis=0)])
    toks_in = np.concatenate([cond, corrupted])
    t_in = np.concatenate([t_img, np.zeros(true_rows.shape[0])])
    assert np.all(t_in[b:] == 0.0)

    info = {}
    with tc.validation_disabled():
        with tc.ComputationTape() as tape:
            out = dm.forward(params, mcfg, imgs_in, toks_in, t_in)
            vel = tc.slice_(out.velocity, (slice(0, b),))
            logits = tc.slice_(out.text_logits, (slice(b, b + true_rows.shape[0]),))
            loss_img = fl.fm_loss(vel, images, noise)
            loss_text = td.nelbo_terms(logits, true_rows, corrupted, times, sw.VOCAB, info=info)
            if include_text_loss:
                total = tc.add(loss_img, tc.scale(loss_text, cfg.lambda_text))
            else:
                total = tc.add(loss_img, tc.scale(loss_text, 0.0))
        if not np.isfinite(total.data):
            raise NumericError(f"non-finite loss at step {step}")
        tc.backward(tape, total, params=dict(params.items()))
        norm = clip_gradients(params, cfg.grad_clip)
        if update:
            adamw_update(params, opt, step, cfg)
        params.zero_grads()

    return {
        "step": step,
        "loss_total": float(total.data),
        "loss_image": float(loss_img.data),
        "loss_text": float(loss_text.data),
        "grad_norm": norm,
        "lr": effective_lr(cfg, step),
        "clamped": info.get("clamped", 0),
    }


# ---------------------------------------------------------------------------
# sampling-based evaluation against the world oracle
# ---------------------------------------------------------------------------


def _model_text_predictor(params, mcfg, cond_images):
    def predict(seq, _cond):
        logits = dm.predict_text_logits(params, mcfg, cond_images, seq.ids)
        return td.zero_mask_prob(logits, sw.VOCAB)

    return predict


def sample_captions(params, mcfg, images, steps, rng):
    n = images.shape[0]
    init = td.TokenSequence(
        np.full((n, mcfg.text_len), sw.VOCAB.mask_id, dtype=np.int64)
    )
    with tc.validation_disabled():
        out = td.ancestral_sample(
            _model_text_predictor(params, mcfg, images), None, init, steps, rng, sw.VOCAB
        )
    return out.ids


def sample_answers(params, mcfg, images, questions, steps, rng, on_step=None):
    """Infilling: frozen question prefixes, masked answers."""
    ids = np.stack([q.ids for q in questions])
    frozen = np.stack([q.frozen for q in questions])
    init_ids = np.where(frozen, ids, sw.VOCAB.mask_id)
    init = td.TokenSequence(init_ids, frozen)
    with tc.validation_disabled():
        out = td.ancestral_sample(
            _model_text_predictor(params, mcfg, images), None, init, steps, rng,
            sw.VOCAB, on_step=on_step,
        )
    return out.ids


def sample_images(params, mcfg, captions, steps, scale, rng):
    captions = np.atleast_2d(np.asarray(captions, dtype=np.int64))
    n = captions.shape[0]
    null = np.repeat(sw.null_caption(mcfg.text_len).ids[None], n, axis=0)

    def velocity(x, t, cond):
        return dm.predict_velocity(params, mcfg, x, cond, np.full(n, t))

    guidance = fl.GuidanceConfig(scale=scale, null_text=null)
    shape = (n, mcfg.image_h, mcfg.image_w, mcfg.image_c)
    with tc.validation_disabled():
        return fl.euler_sample(velocity, captions, shape, steps, guidance, rng)


def evaluate(params, mcfg, examples, cfg, seed, text_steps=None, t2i_steps=None):
    """Caption, QA, and text-to-image accuracy on a fixed example subset."""
    text_steps = text_steps or cfg.text_sample_steps
    t2i_steps = t2i_steps or cfg.t2i_sample_steps
    rng = np.random.default_rng([seed, 0xEVAL] if False else [seed, 58283])
    n = min(cfg.eval_examples, len(examples))
    subset = examples[:n]
    images = np.stack([ex.grid for ex in subset])
    scenes = [ex.scene for ex in subset]

    cap_ids = sample_captions(params, mcfg, images, text_steps, rng)
    cap_scores = sw.aggregate_scores(
        [sw.score_caption(cap_ids[i], scenes[i]) for i in range(n)]
    )

    questions, answers = [], []
    for ex in subset:
        ids, qlen = ex.qa[int(rng.random() * len(ex.qa))]
        questions.append(sw.qa_sequence(np.where(np.arange(len(ids)) < qlen, ids, sw.PAD_ID), qlen))
        answers.append((ids, qlen))
    qa_ids = sample_answers(params, mcfg, images, questions, text_steps, rng)
    qa_acc = float(
        np.mean([qa_ids[i, qlen] == ids[qlen] for i, (ids, qlen) in enumerate(answers)])
    )

    gen = sample_images(
        params, mcfg, np.stack([ex.caption for ex in subset]), t2i_steps,
        cfg.guidance_scale, rng,
    )
    t2i_scores = sw.aggregate_scores(
        [sw.score_scene(sw.decode_grid(gen[i])[0], scenes[i]) for i in range(n)]
    )

    return {
        "caption_attribute_acc": cap_scores["attribute_acc"],
        "caption_exact_match": cap_scores["exact_match"],
        "caption_unparseable": cap_scores["unparseable"],
        "qa_acc": qa_acc,
        "t2i_attribute_acc": t2i_scores["attribute_acc"],
        "t2i_count_acc": t2i_scores["count_acc"],
        "n_examples": n,
        "text_steps": text_steps,
        "t2i_steps": t2i_steps,
    }


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def run_config_hash(mcfg, cfg, dataset_hash=""):
    payload = json.dumps(
        {"model": asdict(mcfg), "train": asdict(cfg), "dataset": dataset_hash},
        sort_keys=True,
    ).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def save_checkpoint(path, params, opt, step, rng, config_hash, mcfg=None):
    """Binary checkpoint: magic, version, config hash, step, generator state,
    then named little-endian float64 parameter and moment arrays."""
    rng_blob = json.dumps(rng.bit_generator.state, sort_keys=True).encode()
    model_blob = json.dumps(asdict(mcfg), sort_keys=True).encode() if mcfg else b"{}"
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(bytes.fromhex(config_hash))
        f.write(struct.pack("<Q", step))
        f.write(struct.pack("<I", len(rng_blob)))
        f.write(rng_blob)
        f.write(struct.pack("<I", len(model_blob)))
        f.write(model_blob)
        names = params.names()
        f.write(struct.pack("<I", len(names)))
        for name in names:
            enc = name.encode()
            data = params[name].data
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
        f.write(struct.pack("<B", 1 if opt is not None else 0))
        if opt is not None:
            for store in (opt.m, opt.v):
                for name in names:
                    f.write(np.ascontiguousarray(store[name], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns a dict with params (name -> array), moments, step, rng state,
    config hash, and the embedded model config."""
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        config_hash = f.read(8).hex()
        (step,) = struct.unpack("<Q", f.read(8))
        (n,) = struct.unpack("<I", f.read(4))
        rng_state = json.loads(f.read(n))
        (n,) = struct.unpack("<I", f.read(4))
        model_cfg = json.loads(f.read(n))
        (count,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(count):
            (ln,) = struct.unpack("<H", f.read(2))
            name = f.read(ln).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(f.read(8 * size), dtype="<f8").reshape(shape).copy()
        (has_moments,) = struct.unpack("<B", f.read(1))
        moments = None
        if has_moments:
            moments = {"m": {}, "v": {}}
            for key in ("m", "v"):
                for name, arr in arrays.items():
                    moments[key][name] = (
                        np.frombuffer(f.read(8 * arr.size), dtype="<f8")
                        .reshape(arr.shape)
                        .copy()
                    )
    return {
        "params": arrays,
        "moments": moments,
        "step": step,
        "rng_state": rng_state,
        "config_hash": config_hash,
        "model_config": model_cfg,
    }


def restore_rng(state):
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


def run_training(cfg, mcfg, examples, out_dir, dataset_hash="", resume=None,
                 log=None):
    """Train to cfg.total_steps, logging one JSON record per step.

    Emits checkpoints at the configured cadence plus ``checkpoint_final``;
    refuses to resume from a checkpoint whose config hash disagrees. Returns
    the path of the final checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chash = run_config_hash(mcfg, cfg, dataset_hash)

    if resume is not None:
        state = load_checkpoint(resume)
        if state["config_hash"] != chash:
            raise ConfigError(
                f"resume refused: checkpoint hash {state['config_hash']} != run hash {chash}"
            )
        params = dm.init_params(mcfg, np.random.default_rng(0))
        for name, arr in state["params"].items():
            params[name].data = arr
        opt = OptState(params)
        for name in params.names():
            opt.m[name] = state["moments"]["m"][name]
            opt.v[name] = state["moments"]["v"][name]
        rng = restore_rng(state["rng_state"])
        start = state["step"]
    else:
        rng = np.random.default_rng(cfg.seed)
        params = dm.init_params(mcfg, rng)
        opt = OptState(params)
        start = 0

    metrics_path = out_dir / "metrics.jsonl"
    final_path = out_dir / "checkpoint_final.ddcp"
    t_start = time.time()
    with open(metrics_path, "a") as mf:
        for step in range(start + 1, cfg.total_steps + 1):
            idx = rng.integers(0, len(examples), cfg.batch_size)
            batch = assemble_batch(examples, idx, rng, cfg, mcfg.text_len)
            try:
                rec = joint_step(batch, params, opt, step, cfg, mcfg, rng)
            except NumericError:
                (out_dir / "abort.json").write_text(
                    json.dumps({"step": step, "example_indices": idx.tolist()})
                )
                raise
            rec["total"] = rec["loss_image"] + cfg.lambda_text * rec["loss_text"]
            mf.write(json.dumps(rec, sort_keys=True) + "\n")
            if log and (step % log == 0 or step == 1):
                print(
                    f"step {step}/{cfg.total_steps} "
                    f"loss {rec['loss_total']:.4f} (img {rec['loss_image']:.4f} "
                    f"text {rec['loss_text']:.4f}) {time.time() - t_start:.0f}s",
                    flush=True,
                )
            if cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.total_steps):
                ev = evaluate(params, mcfg, examples, cfg, cfg.seed)
                ev.update({"step": step, "type": "eval"})
                mf.write(json.dumps(ev, sort_keys=True) + "\n")
                mf.flush()
                if log:
                    print(f"eval @ {step}: {ev}", flush=True)
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(
                    out_dir / f"checkpoint_{step:07d}.ddcp", params, opt, step, rng,
                    chash, mcfg,
                )
            if step == cfg.total_steps:
                save_checkpoint(final_path, params, opt, step, rng, chash, mcfg)
    return final_path
