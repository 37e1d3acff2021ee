"""Finite-difference checks for every primitive, run in float64."""

import numpy as np
import pytest

from ldfnet.gradcheck import check_gradients, random_tensor
from ldfnet.tensor import (
    RunningStats,
    avg_pool2d,
    batch_norm,
    concat_channels,
    conv2d,
    conv_transpose2d,
    dropout,
    elementwise_add,
    max_pool2d,
    relu,
    weighted_cross_entropy,
)

N_SHAPES = 20


def seeded(case, salt=0):
    return np.random.default_rng(10_000 * salt + case)


@pytest.mark.parametrize("case", range(N_SHAPES))
def test_conv2d_gradients(case):
    rng = seeded(case, 1)
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    dil = int(rng.integers(1, 3))
    h = dil * (kh - 1) + 1 + int(rng.integers(0, 4))
    wd = dil * (kw - 1) + 1 + int(rng.integers(0, 4))
    x = random_tensor(rng, (2, cin, h, wd))
    w = random_tensor(rng, (cout, cin, kh, kw))
    b = random_tensor(rng, (cout,))
    check_gradients(
        lambda: conv2d(x, w, b, stride=stride, padding=pad, dilation=dil).sum(),
        [x, w, b], rng=rng)


@pytest.mark.parametrize("case", range(N_SHAPES))
def test_conv_transpose2d_gradients(case):
    rng = seeded(case, 2)
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    op = int(rng.integers(0, stride))
    h, wd = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    if (h - 1) * stride - 2 * pad + k + op < 1:
        pad = 0
    x = random_tensor(rng, (2, cin, h, wd))
    w = random_tensor(rng, (cin, cout, k, k))
    b = random_tensor(rng, (cout,))
    check_gradients(
        lambda: conv_transpose2d(x, w, b, stride=stride, padding=pad,
                                 output_padding=op).sum(),
        [x, w, b], rng=rng)


@pytest.mark.parametrize("case", range(N_SHAPES))
def test_pooling_gradients(case):
    rng = seeded(case, 3)
    c = int(rng.integers(1, 4))
    h, wd = 2 * int(rng.integers(1, 5)), 2 * int(rng.integers(1, 5))
    x = random_tensor(rng, (2, c, h, wd))
    check_gradients(lambda: max_pool2d(x).sum(), [x], rng=rng)
    check_gradients(lambda: avg_pool2d(x).sum(), [x], rng=rng)


@pytest.mark.parametrize("case", range(N_SHAPES))
@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradients(case, training):
    rng = seeded(case, 4)
    c = int(rng.integers(1, 5))
    h, wd = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    x = random_tensor(rng, (2, c, h, wd))
    gamma = random_tensor(rng, (c,))
    beta = random_tensor(rng, (c,))
    stats = RunningStats(c, dtype=np.float64)
    stats.mean[:] = rng.uniform(-0.5, 0.5, c)
    stats.var[:] = rng.uniform(0.5, 2.0, c)

    def fn():
        fresh = RunningStats(c, dtype=np.float64)
        fresh.mean[:] = stats.mean
        fresh.var[:] = stats.var
        return batch_norm(x, gamma, beta, fresh, training=training).sum()

    check_gradients(fn, [x, gamma, beta], rng=rng)


@pytest.mark.parametrize("case", range(N_SHAPES))
def test_elementwise_gradients(case):
    rng = seeded(case, 5)
    shape = (2, int(rng.integers(1, 4)), int(rng.integers(2, 5)), int(rng.integers(2, 5)))
    a = random_tensor(rng, shape)
    b = random_tensor(rng, shape)
    check_gradients(lambda: elementwise_add(a, b).sum(), [a, b], rng=rng)
    check_gradients(lambda: relu(a).sum(), [a], rng=rng)


@pytest.mark.parametrize("case", range(N_SHAPES))
def test_concat_gradients(case):
    rng = seeded(case, 6)
    h, wd = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    parts = [random_tensor(rng, (2, int(rng.integers(1, 4)), h, wd))
             for _ in range(int(rng.integers(2, 4)))]
    check_gradients(lambda: concat_channels(parts).sum(), parts, rng=rng)


@pytest.mark.parametrize("case", range(N_SHAPES))
def test_cross_entropy_gradients(case):
    rng = seeded(case, 7)
    k = int(rng.integers(2, 6))
    h, wd = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    logits = random_tensor(rng, (2, k, h, wd))
    labels = rng.integers(0, k, size=(2, h, wd))
    if case % 3 == 0:
        labels[0, 0, 0] = 255
    weights = rng.uniform(0.5, 3.0, size=k)
    check_gradients(
        lambda: weighted_cross_entropy(logits, labels, weights), [logits], rng=rng)


def test_dropout_gradient_with_fixed_mask():
    # A frozen mask turns dropout into a deterministic scaling, which the
    # finite-difference harness can then verify.
    rng = np.random.default_rng(8)
    x = random_tensor(rng, (2, 3, 4, 4))

    class ReplayRng:
        def __init__(self, seed):
            self.seed = seed

        def random(self, shape):
            return np.random.default_rng(self.seed).random(shape)

    check_gradients(
        lambda: dropout(x, 0.3, training=True, rng=ReplayRng(5)).sum(), [x], rng=rng)


def test_composite_conv_relu_sum_gradient():
    rng = np.random.default_rng(9)
    x = random_tensor(rng, (1, 2, 6, 6))
    w = random_tensor(rng, (3, 2, 3, 3))
    b = random_tensor(rng, (3,))
    check_gradients(
        lambda: relu(conv2d(x, w, b, padding=1)).sum(), [x, w, b], rng=rng)
