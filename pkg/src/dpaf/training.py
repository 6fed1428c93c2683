"""Optimization loop: hand-rolled Adam, warmup + cosine learning-rate
schedule, seeded patch batching, loss tracing, and resumable checkpoints.

Determinism contract: with a fixed seed and a single compute thread, two runs
of train() produce bitwise-identical loss traces, and a run interrupted at an
epoch boundary and resumed from its checkpoint matches an uninterrupted run
bitwise. Shuffle order is a pure function of (seed, epoch) and every patch
draw is a pure function of (seed, epoch, slot), so no RNG state needs to be
carried across epochs.
"""

import collections
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from . import losses, network, rain, serialization

TRAINER_MAGIC = b"DPAFTRS1"
TRAINER_VERSION = 1
RING_SIZE = 50

Pair = collections.namedtuple("Pair", "rainy clean")


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------

@dataclass
class Schedule:
    """Linear warmup to lr_init, then cosine decay to lr_final across the
    remaining steps of total_epochs."""

    lr_init: float = 2e-4
    lr_final: float = 1e-6
    total_epochs: int = 200
    warmup_steps: int = 500

    def validate(self):
        if self.lr_init <= 0:
            raise ValueError(f"lr_init must be positive, got {self.lr_init}")
        if not 0 <= self.lr_final <= self.lr_init:
            raise ValueError(f"need 0 <= lr_final <= lr_init, got {self}")
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if self.warmup_steps < 0:
            raise ValueError(f"warmup_steps must be >= 0, got {self.warmup_steps}")

    def to_dict(self):
        return {"lr_init": self.lr_init, "lr_final": self.lr_final,
                "total_epochs": self.total_epochs,
                "warmup_steps": self.warmup_steps}

    @classmethod
    def from_dict(cls, d):
        sched = cls(**d)
        sched.validate()
        return sched


def lr_at(schedule, step, steps_per_epoch):
    """Learning rate for 0-based optimization step `step`.

    Ramps linearly 0 -> lr_init over warmup_steps, is exactly lr_init at
    step == warmup_steps, decays along a half cosine to exactly lr_final at
    the last step of total_epochs, and stays at lr_final afterward.
    """
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if steps_per_epoch < 1:
        raise ValueError(f"steps_per_epoch must be >= 1, got {steps_per_epoch}")
    schedule.validate()
    warmup = schedule.warmup_steps
    if step < warmup:
        return schedule.lr_init * (step / warmup)
    last = schedule.total_epochs * steps_per_epoch - 1
    if step >= last:
        return schedule.lr_final
    if step == warmup:
        return schedule.lr_init
    progress = (step - warmup) / (last - warmup)
    return schedule.lr_final + (schedule.lr_init - schedule.lr_final) \
        * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected Adam moments, keyed by parameter name."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params, beta1=0.9, beta2=0.999, eps=1e-8):
    """Fresh zero-moment state for a named-parameter map."""
    return AdamState(m={n: torch.zeros_like(p) for n, p in params.items()},
                     v={n: torch.zeros_like(p) for n, p in params.items()},
                     step=0, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params, grads, state, lr):
    """One in-place bias-corrected Adam update over a named-parameter map."""
    for name, p in params.items():
        if name not in grads or grads[name] is None:
            raise ValueError(f"no gradient supplied for parameter {name!r}")
        if tuple(grads[name].shape) != tuple(p.shape):
            raise ValueError(f"gradient for {name!r} has shape "
                             f"{tuple(grads[name].shape)}, parameter has "
                             f"{tuple(p.shape)}")
        if tuple(state.m[name].shape) != tuple(p.shape):
            raise ValueError(f"Adam state for {name!r} has shape "
                             f"{tuple(state.m[name].shape)}, parameter has "
                             f"{tuple(p.shape)}")
    state.step += 1
    correct1 = 1.0 - state.beta1 ** state.step
    correct2 = 1.0 - state.beta2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m, v = state.m[name], state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            denom = (v / correct2).sqrt_().add_(state.eps)
            p.addcdiv_(m / correct1, denom, value=-lr)
    return params, state


# ---------------------------------------------------------------------------
# train state and checkpoints
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    """Everything needed to continue a run: model, optimizer moments,
    schedule, loss weights, counters, and a ring buffer of recent losses."""

    model: network.DPAFNet
    adam: AdamState
    schedule: Schedule
    weights: losses.LossWeights
    seed: int
    epoch: int = 0
    step: int = 0
    steps_per_epoch: int = 0
    recent_losses: collections.deque = field(
        default_factory=lambda: collections.deque(maxlen=RING_SIZE))


def init_train_state(model, schedule, weights, seed):
    schedule.validate()
    weights.validate()
    if seed < 0:
        raise ValueError(f"seed must be >= 0, got {seed}")
    adam = init_adam(dict(model.named_parameters()))
    return TrainState(model=model, adam=adam, schedule=schedule,
                      weights=weights, seed=int(seed))


def save_train_state(path, state):
    """Trainer checkpoint = magic, version, meta JSON, an embedded model
    checkpoint image, and the Adam moments in the parameter container
    format."""
    meta = {
        "seed": state.seed, "epoch": state.epoch, "step": state.step,
        "steps_per_epoch": state.steps_per_epoch,
        "schedule": state.schedule.to_dict(),
        "weights": {"w_mse": state.weights.w_mse,
                    "w_ssim": state.weights.w_ssim,
                    "w_perp": state.weights.w_perp},
        "adam": {"step": state.adam.step, "beta1": state.adam.beta1,
                 "beta2": state.adam.beta2, "eps": state.adam.eps},
        "recent_losses": list(state.recent_losses),
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    model_blob = network.checkpoint_bytes(state.model)
    moments = {}
    for name, t in state.adam.m.items():
        moments[f"adam.m.{name}"] = t.detach().cpu().numpy()
    for name, t in state.adam.v.items():
        moments[f"adam.v.{name}"] = t.detach().cpu().numpy()
    with open(path, "wb") as f:
        f.write(TRAINER_MAGIC)
        f.write(struct.pack("<HII", TRAINER_VERSION, len(blob), len(model_blob)))
        f.write(blob)
        f.write(model_blob)
        f.write(serialization.pack_arrays(moments))


def load_train_state(path):
    with open(path, "rb") as f:
        buf = f.read()
    head = len(TRAINER_MAGIC)
    if buf[:head] != TRAINER_MAGIC:
        raise ValueError(f"{path}: not a trainer checkpoint (bad magic)")
    version, blob_len, model_len = struct.unpack_from("<HII", buf, head)
    if version != TRAINER_VERSION:
        raise ValueError(f"{path}: unsupported trainer checkpoint version {version}")
    offset = head + struct.calcsize("<HII")
    meta = json.loads(buf[offset:offset + blob_len].decode("utf-8"))
    offset += blob_len
    model = network.parse_checkpoint(buf[offset:offset + model_len], label=str(path))
    arrays = serialization.unpack_arrays(buf[offset + model_len:], label=str(path))

    params = dict(model.named_parameters())
    adam_meta = meta["adam"]
    adam = AdamState(m={}, v={}, step=int(adam_meta["step"]),
                     beta1=adam_meta["beta1"], beta2=adam_meta["beta2"],
                     eps=adam_meta["eps"])
    for kind, dest in (("m", adam.m), ("v", adam.v)):
        for name, p in params.items():
            key = f"adam.{kind}.{name}"
            if key not in arrays:
                raise ValueError(f"{path}: missing optimizer entry {key!r}")
            if tuple(arrays[key].shape) != tuple(p.shape):
                raise ValueError(f"{path}: optimizer entry {key!r} has shape "
                                 f"{tuple(arrays[key].shape)}, parameter has "
                                 f"{tuple(p.shape)}")
            dest[name] = torch.from_numpy(arrays[key].copy())
    expected = {f"adam.{k}.{n}" for k in ("m", "v") for n in params}
    extras = sorted(set(arrays) - expected)
    if extras:
        raise ValueError(f"{path}: unexpected optimizer entry {extras[0]!r}")

    weights = losses.LossWeights(**meta["weights"])
    state = TrainState(model=model, adam=adam,
                       schedule=Schedule.from_dict(meta["schedule"]),
                       weights=weights, seed=int(meta["seed"]),
                       epoch=int(meta["epoch"]), step=int(meta["step"]),
                       steps_per_epoch=int(meta["steps_per_epoch"]))
    state.recent_losses.extend(meta["recent_losses"])
    return state


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def load_data(data):
    """Normalize a dataset argument to a list of Pair(rainy, clean).

    Accepts a manifest path, an iterable of (rainy, clean) arrays, an
    iterable of (index, rainy, clean) records as produced by
    rain.load_pairs, or objects with .rainy/.clean attributes.
    """
    if isinstance(data, (str, os.PathLike)):
        return [Pair(r, c) for _, r, c in rain.load_pairs(data)]
    pairs = []
    for item in data:
        if hasattr(item, "rainy") and hasattr(item, "clean"):
            pairs.append(Pair(np.asarray(item.rainy), np.asarray(item.clean)))
        elif len(item) == 3:
            _, r, c = item
            pairs.append(Pair(np.asarray(r), np.asarray(c)))
        else:
            r, c = item
            pairs.append(Pair(np.asarray(r), np.asarray(c)))
    return pairs


def _epoch_order(seed, epoch, n):
    """Shuffle order for one epoch; a pure function of (seed, epoch)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    return [int(i) for i in rng.permutation(n)]


def _slot_seed(seed, epoch, slot):
    """Patch/flip seed for one sample slot; pure in (seed, epoch, slot)."""
    return int(np.random.SeedSequence([seed, epoch, slot]).generate_state(1)[0])


def _sample(pair, patch, slot_seed, hflip):
    if patch is not None:
        return rain.sample_training_patch(pair, patch, slot_seed, hflip)
    rainy, clean = pair.rainy, pair.clean
    if hflip and np.random.default_rng(slot_seed).random() < 0.5:
        rainy, clean = rainy[:, ::-1], clean[:, ::-1]
    return np.ascontiguousarray(rainy), np.ascontiguousarray(clean)


def _to_batch(samples, dtype):
    arr = np.stack([s.transpose(2, 0, 1) for s in samples])
    return torch.from_numpy(arr).to(dtype)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train(state, data, epochs, batch=1, patch=None, hflip=True,
          extractor=None, ssim_cfg=None, grad_clip=None,
          checkpoint_dir=None, checkpoint_every=1, trace_path=None):
    """Run optimization until state.epoch == epochs; returns the trace.

    `epochs` is the target cumulative epoch count, so resuming a loaded
    state continues where it stopped. The final incomplete batch of each
    epoch is dropped so the step count is an exact function of the dataset
    size. Checkpoints are written at epoch boundaries. Trace records are
    appended to trace_path as JSON lines and returned as a list of dicts.
    """
    pairs = load_data(data)
    if not pairs:
        raise ValueError("dataset is empty")
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    steps_per_epoch = len(pairs) // batch
    if steps_per_epoch < 1:
        raise ValueError(f"dataset of {len(pairs)} pairs is smaller than "
                         f"batch size {batch}")
    if state.steps_per_epoch and state.steps_per_epoch != steps_per_epoch:
        raise ValueError(f"resume mismatch: checkpoint ran {state.steps_per_epoch} "
                         f"steps per epoch, this dataset/batch gives {steps_per_epoch}")
    state.steps_per_epoch = steps_per_epoch
    if state.weights.w_perp > 0 and extractor is None:
        raise ValueError("w_perp > 0 requires a perceptual extractor")

    torch.set_num_threads(1)
    model = state.model
    params = dict(model.named_parameters())
    dtype = next(iter(params.values())).dtype
    trace = []
    trace_file = open(trace_path, "a") if trace_path else None
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
    try:
        while state.epoch < epochs:
            epoch = state.epoch
            model.train()
            order = _epoch_order(state.seed, epoch, len(pairs))
            for b in range(steps_per_epoch):
                samples = []
                for j in range(batch):
                    slot = b * batch + j
                    rainy, clean = _sample(pairs[order[slot]], patch,
                                           _slot_seed(state.seed, epoch, slot),
                                           hflip)
                    samples.append((rainy, clean))
                rainy_t = _to_batch([s[0] for s in samples], dtype)
                clean_t = _to_batch([s[1] for s in samples], dtype)

                for p in params.values():
                    p.grad = None
                pred = model(rainy_t)
                total, parts = losses.combined_loss(pred, clean_t, state.weights,
                                                    ssim_cfg=ssim_cfg,
                                                    extractor=extractor)
                loss_value = float(total.detach())
                if not math.isfinite(loss_value):
                    raise FloatingPointError(
                        f"non-finite loss {loss_value} at step {state.step} "
                        f"(epoch {epoch}, batch {b})")
                total.backward()
                if grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(params.values(), grad_clip)
                lr = lr_at(state.schedule, state.step, steps_per_epoch)
                adam_step(params, {n: p.grad for n, p in params.items()},
                          state.adam, lr)

                record = {"step": state.step, "epoch": epoch, "lr": lr,
                          "loss_total": loss_value,
                          "loss_mse": float(parts["mse"].detach()),
                          "loss_ssim": float(parts["ssim"].detach()),
                          "loss_perp": float(parts["perp"].detach())}
                trace.append(record)
                state.recent_losses.append(loss_value)
                if trace_file:
                    trace_file.write(json.dumps(record) + "\n")
                    trace_file.flush()
                state.step += 1
            state.epoch += 1
            if checkpoint_dir and (state.epoch % checkpoint_every == 0
                                   or state.epoch == epochs):
                name = f"trainer_epoch{state.epoch:04d}.ckpt"
                save_train_state(os.path.join(checkpoint_dir, name), state)
                save_train_state(os.path.join(checkpoint_dir,
                                              "trainer_latest.ckpt"), state)
    finally:
        if trace_file:
            trace_file.close()
    return trace


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------

def infer_padded(model, image):
    """Derain one HWC float image of arbitrary size.

    Reflect-pads the right/bottom edges to the model's size multiple, runs
    the model in eval mode (clamped output), and crops back.
    """
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got {arr.shape}")
    h, w = arr.shape[:2]
    multiple = model.config.patch
    pad_h, pad_w = -h % multiple, -w % multiple
    if pad_h >= h or pad_w >= w:
        raise ValueError(f"image {h}x{w} too small to pad to a multiple "
                         f"of {multiple}")
    x = torch.from_numpy(arr.transpose(2, 0, 1))[None]
    if pad_h or pad_w:
        x = torch.nn.functional.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            y = model(x)
    finally:
        model.train(was_training)
    return y[0, :, :h, :w].numpy().transpose(1, 2, 0)


def evaluate(model, data, ssim_cfg=None):
    """Per-pair PSNR/SSIM plus mean/median aggregates.

    `model=None` scores the rainy inputs directly (identity passthrough),
    which doubles as the no-restoration baseline.
    """
    pairs = load_data(data)
    if not pairs:
        raise ValueError("dataset is empty")
    records = []
    for i, pair in enumerate(pairs):
        pred = pair.rainy if model is None else infer_padded(model, pair.rainy)
        records.append({"index": i,
                        "psnr": losses.psnr(pred, pair.clean),
                        "ssim": losses.ssim_image(pred, pair.clean, ssim_cfg)})
    report = {"count": len(records), "records": records}
    for key in ("psnr", "ssim"):
        values = [r[key] for r in records]
        report[key] = {"mean": float(np.mean(values)),
                       "median": float(np.median(values))}
    return report


def _sanitize(obj):
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def report_to_json(report):
    """JSON text for a metric report; non-finite floats become strings
    ('inf', '-inf', 'nan') so the output stays standard JSON."""
    return json.dumps(_sanitize(report), indent=2, sort_keys=True)
