"""Optimization loop: bias-corrected Adam with linear warmup/decay, global
gradient-norm clipping, parameter-group freezing by path prefix, a dropout
cutoff near the end of training, JSONL metrics, and bit-exact checkpoints.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, NumericError
from .model import ModelConfig, decoder_forward, encoder_forward, init_params, two_stream_forward
from .noise import new_rng
from .objectives import Batch, ObjectiveSpec, build_batch

CKPT_MAGIC = b"BRTL"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 1000
    batch_size: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    label_smoothing: float = 0.0
    dropout_off_fraction: float = 0.1
    grad_clip: float = 1.0
    frozen_groups: tuple = ()
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.total_steps > 0 and self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must be <= total_steps")
        if not 0.0 <= self.dropout_off_fraction <= 1.0:
            raise ValueError("dropout_off_fraction must be in [0, 1]")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        self.frozen_groups = tuple(self.frozen_groups)


# Large-scale recipe constants (batch 8000, 500k steps); kept as a named
# preset for reference, never run in tests.
LARGE_SCALE_PRESET = TrainConfig(
    lr=4e-4, warmup_steps=10000, total_steps=500000, batch_size=8000,
    dropout_off_fraction=0.1,
)


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict
    opt_state: OptimState | None = None
    rng_state: dict | None = None
    step: int = 0
    version: int = CKPT_VERSION


def is_frozen(path: str, frozen_groups) -> bool:
    return any(path.startswith(prefix) for prefix in frozen_groups)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to config.lr, then linear decay to 0 at total_steps."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step >= config.total_steps:
        return 0.0
    if step <= config.warmup_steps:
        return config.lr * step / config.warmup_steps
    return config.lr * (config.total_steps - step) / (config.total_steps - config.warmup_steps)


def adam_step(params: dict, grads: dict, state: OptimState, config: TrainConfig,
              lr: float | None = None) -> None:
    """In-place bias-corrected Adam update; frozen groups are untouched."""
    if lr is None:
        lr = config.lr
    t = state.step + 1
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for path in sorted(grads):
        g = grads[path]
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {path}")
        if is_frozen(path, config.frozen_groups):
            continue
        if path not in state.m:
            state.m[path] = np.zeros_like(g)
            state.v[path] = np.zeros_like(g)
        m = state.m[path]
        v = state.v[path]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[path].data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.step = t


def clip_grads(grads: dict, max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def collect_grads(params: dict) -> dict:
    return {path: p.grad for path, p in params.items() if p.grad is not None}


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.grad = None


def batch_loss(batch: Batch, params: dict, cfg: ModelConfig, mode: str = "inference",
               rng=None, smoothing: float = 0.0) -> Tensor:
    """Forward pass + label-smoothed cross entropy for one batch."""
    order = batch.meta.get("predict_order")
    if order:
        logits = two_stream_forward(batch.dec_tokens, order, params, cfg, mode, rng)
        targets = [batch.targets[p] for p in order]
        return ad.cross_entropy_smoothed(logits, targets, [1] * len(order), smoothing)
    enc_hidden = None
    if batch.enc_tokens:
        enc_hidden = encoder_forward(batch.enc_tokens, params, cfg, mode, rng)
    logits = decoder_forward(batch.dec_tokens, enc_hidden, params, cfg,
                             batch.dec_self_mask, mode, rng)
    return ad.cross_entropy_smoothed(logits, batch.targets, batch.loss_mask, smoothing)


def batch_token_accuracy(batch: Batch, params: dict, cfg: ModelConfig) -> tuple[int, int]:
    """(correct, supervised) argmax counts for one batch, inference mode."""
    with ad.no_grad():
        order = batch.meta.get("predict_order")
        if order:
            logits = two_stream_forward(batch.dec_tokens, order, params, cfg)
            targets = np.asarray([batch.targets[p] for p in order])
            mask = np.ones(len(order), dtype=bool)
        else:
            enc_hidden = (encoder_forward(batch.enc_tokens, params, cfg)
                          if batch.enc_tokens else None)
            logits = decoder_forward(batch.dec_tokens, enc_hidden, params, cfg,
                                     batch.dec_self_mask)
            targets = np.asarray(batch.targets)
            mask = np.asarray(batch.loss_mask, dtype=bool)
    pred = logits.data.argmax(axis=1)
    return int((pred[mask] == targets[mask]).sum()), int(mask.sum())


def token_accuracy(batches, params: dict, cfg: ModelConfig) -> float:
    correct = total = 0
    for batch in batches:
        c, n = batch_token_accuracy(batch, params, cfg)
        correct += c
        total += n
    return correct / max(total, 1)


class EpochCycler:
    """Yields items in seeded shuffled epochs, indefinitely."""

    def __init__(self, items, rng):
        self.items = list(items)
        self.rng = rng
        self.order = np.empty(0, dtype=np.int64)
        self.pos = 0

    def take(self, k: int) -> list:
        out = []
        while len(out) < k:
            if self.pos >= len(self.order):
                self.order = self.rng.permutation(len(self.items))
                self.pos = 0
            out.append(self.items[int(self.order[self.pos])])
            self.pos += 1
        return out


def optimize_loop(step_loss_fn, params: dict, train_cfg: TrainConfig,
                  rng: np.random.Generator, state: OptimState | None = None) -> tuple[OptimState, list[dict]]:
    """Generic training driver.

    step_loss_fn(step, rng, mode) returns (scalar loss Tensor, token count).
    Dropout mode switches off for the final dropout_off_fraction of steps.
    """
    if state is None:
        state = OptimState()
    dropout_until = train_cfg.total_steps * (1.0 - train_cfg.dropout_off_fraction)
    metrics: list[dict] = []
    t_start = time.perf_counter()
    tokens_done = 0
    for step in range(train_cfg.total_steps):
        mode = "train" if step < dropout_until else "inference"
        zero_grads(params)
        loss, n_tokens = step_loss_fn(step, rng, mode)
        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            raise NumericError(f"non-finite loss at step {step}")
        ad.backward(loss)
        grads = collect_grads(params)
        clip_grads(grads, train_cfg.grad_clip)
        lr = lr_at(state.step + 1, train_cfg)
        adam_step(params, grads, state, train_cfg, lr=lr)
        tokens_done += n_tokens
        if (step + 1) % train_cfg.log_every == 0 or step + 1 == train_cfg.total_steps:
            elapsed = max(time.perf_counter() - t_start, 1e-9)
            metrics.append({
                "step": step + 1,
                "lr": lr,
                "loss": loss_val,
                "ppl": float(math.exp(min(loss_val, 50.0))),
                "tok_per_s": tokens_done / elapsed,
            })
    return state, metrics


def mean_batch_loss(batches: list[Batch], params: dict, cfg: ModelConfig, mode: str,
                    rng, smoothing: float) -> tuple[Tensor, int]:
    total = None
    n_tokens = 0
    for batch in batches:
        loss = batch_loss(batch, params, cfg, mode, rng, smoothing)
        n_tokens += sum(batch.loss_mask)
        total = loss if total is None else ad.add(total, loss)
    return ad.scale(total, 1.0 / len(batches)), n_tokens


def train(corpus, objective: ObjectiveSpec, model_cfg: ModelConfig,
          train_cfg: TrainConfig, params: dict | None = None,
          metrics_path=None) -> tuple[Checkpoint, list[dict]]:
    """Pretrain on shuffled epochs of the corpus; deterministic per seed."""
    docs = list(corpus)
    if not docs:
        raise DataError("empty corpus")
    if params is None:
        params = init_params(model_cfg, train_cfg.seed)
    rng = new_rng(train_cfg.seed)
    cycler = EpochCycler(docs, rng)

    def step_loss(step, rng_, mode):
        batch_docs = cycler.take(train_cfg.batch_size)
        batches = [build_batch(doc, objective, rng_) for doc in batch_docs]
        return mean_batch_loss(batches, params, model_cfg, mode, rng_,
                               train_cfg.label_smoothing)

    state, metrics = optimize_loop(step_loss, params, train_cfg, rng)
    ckpt = Checkpoint(model_config=model_cfg, params=params, opt_state=state,
                      rng_state=rng.bit_generator.state, step=state.step)
    if metrics_path is not None:
        write_metrics(metrics, metrics_path)
    return ckpt, metrics


def write_metrics(metrics: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in metrics:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Layout: magic "BRTL", u32 version, u32 header length, JSON header
    (model config, step, rng state, sorted parameter manifest), then raw
    little-endian float64 payloads: parameters, then Adam m and v moments."""
    paths = sorted(ckpt.params)
    header = {
        "model_config": asdict(ckpt.model_config),
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "params": [[p, list(ckpt.params[p].data.shape)] for p in paths],
        "has_opt": ckpt.opt_state is not None,
        "opt_step": ckpt.opt_state.step if ckpt.opt_state else 0,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", ckpt.version))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for p in paths:
            f.write(ckpt.params[p].data.astype("<f8").tobytes())
        if ckpt.opt_state is not None:
            for moments in (ckpt.opt_state.m, ckpt.opt_state.v):
                for p in paths:
                    arr = moments.get(p)
                    if arr is None:
                        arr = np.zeros_like(ckpt.params[p].data)
                    f.write(arr.astype("<f8").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise DataError(f"truncated checkpoint: {what}")
    return data


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise DataError("not a checkpoint")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CKPT_VERSION:
            raise DataError(f"checkpoint version mismatch: {version} != {CKPT_VERSION}")
        (hlen,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        header = json.loads(_read_exact(f, hlen, "header"))
        model_cfg = ModelConfig(**header["model_config"])

        def read_arrays():
            out = {}
            for p, shape in header["params"]:
                size = int(np.prod(shape)) if shape else 1
                raw = _read_exact(f, size * 8, f"payload for {p}")
                out[p] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            return out

        params = {p: ad.param(a) for p, a in read_arrays().items()}
        opt_state = None
        if header["has_opt"]:
            opt_state = OptimState(m=read_arrays(), v=read_arrays(), step=header["opt_step"])
        if f.read(1):
            raise DataError("trailing bytes after checkpoint payload")
    return Checkpoint(model_config=model_cfg, params=params, opt_state=opt_state,
                      rng_state=header["rng_state"], step=header["step"], version=version)
