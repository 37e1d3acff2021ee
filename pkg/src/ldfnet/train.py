"""Optimizer, schedules, loss weighting, augmentation, and two-stage training.

Stage one trains the encoders alone: a temporary 1x1 classifier is attached
to the deepest post-fusion feature map and compared against labels
downsampled 8x by nearest neighbor. Stage two keeps those encoder weights
and trains the whole network end to end; the auxiliary head is discarded.

Reproducibility contract: with a fixed seed the loss curve is bit-identical
across runs. Sample order comes from a seeded per-epoch permutation and each
sample's augmentation stream is derived from (seed, epoch, sample index), so
pipeline layout cannot change results.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as F
from .blocks import Conv2d
from .data import IGNORE_INDEX, Sample, batch_labels, build_inputs
from .errors import ArgumentError, ConfigError, DivergenceError
from .metrics import ConfusionMatrix
from .model import init_named_parameter
from .tensor import no_grad

log = logging.getLogger("ldfnet")

STAGE_ENCODERS = "encoders_only"
STAGE_FULL = "full"


@dataclass
class TrainConfig:
    batch_size: int = 4
    base_lr: float = 5e-4
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    max_iters: int = 400
    dropout: float = 0.05
    class_weight_c: float = 1.1
    seed: int = 0
    stage: str = STAGE_FULL

    def validate(self):
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.batch_size < 1 or self.max_iters < 1:
            raise ConfigError("batch_size and max_iters must be positive")
        if self.stage not in (STAGE_ENCODERS, STAGE_FULL):
            raise ConfigError("stage must be %r or %r" % (STAGE_ENCODERS, STAGE_FULL))
        return self


@dataclass
class ClassWeightTable:
    weights: np.ndarray
    histogram: np.ndarray


def compute_class_weights(histogram, c=1.1):
    """w_k = 1 / ln(c + p_k) with p_k the class frequency in the histogram."""
    hist = np.asarray(histogram, dtype=np.float64)
    total = hist.sum()
    if total <= 0:
        raise ConfigError("class histogram is empty")
    p = hist / total
    if (c + p <= 1.0).any():
        raise ConfigError(
            "c=%.4g makes ln(c + p) non-positive for some class (need c + p > 1)" % c)
    weights = 1.0 / np.log(c + p)
    return ClassWeightTable(weights=weights, histogram=hist.astype(np.int64))


def label_histogram(samples, num_classes, ignore_index=IGNORE_INDEX):
    hist = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        flat = s.labels.reshape(-1)
        flat = flat[flat != ignore_index]
        hist += np.bincount(flat, minlength=num_classes)[:num_classes]
    return hist


def poly_lr(base, iteration, max_iters, power=0.9):
    """base * (1 - iter/max_iters) ** power, clamped to 0 past the end."""
    if iteration < 0:
        raise ArgumentError("iteration must be >= 0, got %d" % iteration)
    if iteration > max_iters:
        log.warning("poly_lr: iteration %d past max_iters %d, clamping to 0",
                    iteration, max_iters)
        return 0.0
    return base * (1.0 - iteration / max_iters) ** power


class Adam:
    """Adam with bias correction; weight decay enters as an additive L2
    gradient term (the decay acts through the optimizer, not on the update)."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise DivergenceError("non-finite gradient for parameter %r" % name)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def hflip_sample(sample):
    return Sample(rgb=sample.rgb[:, :, ::-1].copy(),
                  depth=sample.depth[:, :, ::-1].copy(),
                  luminance=sample.luminance[:, :, ::-1].copy(),
                  labels=sample.labels[:, ::-1].copy())


def _shift2d(plane, dr, dc, fill):
    out = np.full_like(plane, fill)
    h, w = plane.shape[-2:]
    src_r = slice(max(0, -dr), min(h, h - dr))
    dst_r = slice(max(0, dr), min(h, h + dr))
    src_c = slice(max(0, -dc), min(w, w - dc))
    dst_c = slice(max(0, dc), min(w, w + dc))
    out[..., dst_r, dst_c] = plane[..., src_r, src_c]
    return out


def translate_sample(sample, dr, dc):
    """Shift content by (dr, dc): output pixel (r, c) = input (r-dr, c-dc).

    Image planes fill exposed borders with zeros, labels with the ignore
    value so shifted-in pixels carry no loss."""
    return Sample(rgb=_shift2d(sample.rgb, dr, dc, 0.0),
                  depth=_shift2d(sample.depth, dr, dc, 0.0),
                  luminance=_shift2d(sample.luminance, dr, dc, 0.0),
                  labels=_shift2d(sample.labels, dr, dc, IGNORE_INDEX))


def augment(sample, rng):
    """Random horizontal flip then a signed 0..2 pixel translation per axis,
    applied identically to every plane."""
    if rng.random() < 0.5:
        sample = hflip_sample(sample)
    mag_r = int(rng.integers(0, 3))
    sign_r = 1 if rng.random() < 0.5 else -1
    mag_c = int(rng.integers(0, 3))
    sign_c = 1 if rng.random() < 0.5 else -1
    dr, dc = mag_r * sign_r, mag_c * sign_c
    if dr or dc:
        sample = translate_sample(sample, dr, dc)
    return sample


def downsample_labels(labels, factor):
    """Nearest-neighbor label downsampling (window-center convention)."""
    h, w = labels.shape[-2:]
    if h % factor or w % factor:
        raise ArgumentError("labels %dx%d not divisible by %d" % (h, w, factor))
    off = factor // 2
    return labels[..., off::factor, off::factor]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class LogRow:
    iteration: int
    lr: float
    loss: float
    wall_ms: float

    def line(self):
        return "iter=%d lr=%.8g loss=%.8g wall_ms=%.1f" % (
            self.iteration, self.lr, self.loss, self.wall_ms)


def _sample_rng(seed, epoch, index):
    return np.random.default_rng(np.random.SeedSequence((seed, epoch, index)))


class _BatchFeed:
    """Deterministic epoch-permuted batches with per-sample augmentation."""

    def __init__(self, samples, cfg, variant):
        self.samples = samples
        self.cfg = cfg
        self.variant = variant
        self.epoch = -1
        self.queue = []

    def next_batch(self):
        picked = []
        while len(picked) < self.cfg.batch_size:
            if not self.queue:
                self.epoch += 1
                order_rng = np.random.default_rng(
                    np.random.SeedSequence((self.cfg.seed, 7, self.epoch)))
                self.queue = list(order_rng.permutation(len(self.samples)))
            picked.append((self.epoch, int(self.queue.pop(0))))
        batch = [augment(self.samples[i], _sample_rng(self.cfg.seed, epoch, i))
                 for epoch, i in picked]
        return build_inputs(batch, self.variant), batch_labels(batch)


class Trainer:
    """One training stage over a model graph.

    ``run(iters)`` may be called repeatedly; the poly schedule always spans
    ``cfg.max_iters`` so chunked runs and single runs produce the same curve.
    """

    def __init__(self, graph, samples, cfg, class_weights=None):
        cfg.validate()
        self.graph = graph
        self.samples = samples
        self.cfg = cfg
        self.num_classes = graph.config.num_classes
        if class_weights is None:
            hist = label_histogram(samples, self.num_classes)
            class_weights = compute_class_weights(hist, cfg.class_weight_c)
        self.class_weights = class_weights
        self.feed = _BatchFeed(samples, cfg, graph.config.variant)
        self.iteration = 0
        self.first_loss = None
        self.rows = []

        self.aux_head = None
        if cfg.stage == STAGE_ENCODERS:
            self.aux_head = Conv2d(graph.config.deep_channels, self.num_classes, 1)
            for name, p in self.aux_head.named_parameters("aux.head"):
                init_named_parameter(name, p, graph.seed)
            params = {name: p for name, p in graph.named_parameters()
                      if not name.startswith("dec.")}
            params.update(dict(self.aux_head.named_parameters("aux.head")))
        else:
            params = dict(graph.named_parameters())
        self.optimizer = Adam(params, weight_decay=cfg.weight_decay)

    def run(self, iters=None, log_fh=None):
        remaining = self.cfg.max_iters - self.iteration
        todo = remaining if iters is None else min(iters, remaining)
        self.graph.train()
        if self.aux_head is not None:
            self.aux_head.train()
        for _ in range(todo):
            started = time.perf_counter()
            feeds, labels = self.feed.next_batch()
            if self.cfg.stage == STAGE_ENCODERS:
                feat = self.graph.forward(feeds, upto=self.graph.encoder_output)
                logits = self.aux_head(feat)
                target = downsample_labels(labels, 8)
            else:
                logits = self.graph.forward(feeds)
                target = labels
            loss = F.weighted_cross_entropy(
                logits, target, self.class_weights.weights.astype(logits.data.dtype))
            loss_value = loss.item()
            self._check_divergence(loss_value)
            loss.backward()
            lr = poly_lr(self.cfg.base_lr, self.iteration, self.cfg.max_iters,
                         self.cfg.poly_power)
            self.optimizer.step(lr)
            self.optimizer.zero_grad()
            self.iteration += 1
            row = LogRow(self.iteration, lr,  loss_value,
                         (time.perf_counter() - started) * 1e3)
            self.rows.append(row)
            if log_fh is not None:
                log_fh.write(row.line() + "\n")
        return self.rows

    def _check_divergence(self, loss_value):
        if not np.isfinite(loss_value):
            raise DivergenceError(
                "loss is not finite at iteration %d" % (self.iteration + 1))
        if self.first_loss is None:
            self.first_loss = loss_value
        elif loss_value > 10.0 * self.first_loss:
            raise DivergenceError(
                "loss diverged at iteration %d: %.6g exceeds 10x the initial %.6g"
                % (self.iteration + 1, loss_value, self.first_loss))


def train_two_stage(graph, samples, cfg, stage1_iters, log_fh=None,
                    run_stage2=True):
    """Encoders first on 8x-downsized labels, then the full network.

    Returns (stage-1 rows, stage-2 trainer). With ``run_stage2`` the second
    stage is run to completion; otherwise the caller drives it in chunks via
    ``trainer.run(n)`` (the poly schedule is unaffected by chunking).
    """
    stage1_cfg = replace(cfg, stage=STAGE_ENCODERS, max_iters=stage1_iters)
    stage1 = Trainer(graph, samples, stage1_cfg)
    rows1 = stage1.run(log_fh=log_fh)
    stage2_cfg = replace(cfg, stage=STAGE_FULL)
    stage2 = Trainer(graph, samples, stage2_cfg,
                     class_weights=stage1.class_weights)
    if run_stage2:
        stage2.run(log_fh=log_fh)
    return rows1, stage2


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def predict(graph, samples, batch_size=4):
    """Eval-mode argmax predictions for a list of samples."""
    graph.eval()
    out = []
    variant = graph.config.variant
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            logits = graph.forward(build_inputs(chunk, variant))
            out.append(np.argmax(logits.data, axis=1).astype(np.int32))
    return np.concatenate(out, axis=0)


def evaluate(graph, samples, batch_size=4):
    """Confusion matrix of eval-mode predictions against sample labels."""
    cm = ConfusionMatrix(graph.config.num_classes)
    preds = predict(graph, samples, batch_size=batch_size)
    labels = batch_labels(samples)
    cm.accumulate(preds, labels)
    return cm


def pixel_accuracy(graph, samples, batch_size=4):
    return evaluate(graph, samples, batch_size=batch_size).pixel_accuracy()
