"""Central-finite-difference checking of recorded gradients.

The analytic gradient comes from one backward pass; the numerical one from
perturbing sampled coordinates of each differentiable input by +/-step and
re-running the forward function. Checks run in float64; callers are expected
to build their test tensors at that precision.

Piecewise-linear activations make central differences meaningless when a
perturbation crosses a kink (an activation within ``step`` of zero flips
sign between the two evaluations). Such crossings are detected by
re-estimating with a smaller step: a crossing is step-unstable and the
coordinate is skipped, while a genuine gradient bug gives a stable estimate
and still fails. The skipped fraction is capped so systematic errors cannot
hide behind the kink budget.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(fn, target, coord, step=1e-5):
    """Central difference of ``fn()`` w.r.t. ``target.data[coord]``."""
    original = target.data[coord]
    with no_grad():
        target.data[coord] = original + step
        hi = fn().item()
        target.data[coord] = original - step
        lo = fn().item()
    target.data[coord] = original
    return (hi - lo) / (2.0 * step)


def check_gradients(fn, inputs, step=1e-5, rtol=1e-4, atol=1e-6,
                    max_coords=24, rng=None, max_kink_fraction=0.25):
    """Compare analytic and numerical gradients of a scalar-valued ``fn``.

    ``fn`` must rebuild its graph on every call (backward consumes it).
    For each input with ``requires_grad`` up to ``max_coords`` coordinates
    are sampled. Returns the worst relative error over accepted coordinates;
    raises AssertionError on any stable coordinate that violates
    |a - n| <= atol + rtol * |n|.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.zero_grad()
    loss = fn()
    loss.backward()

    worst = 0.0
    checked = 0
    skipped = 0
    for t in inputs:
        if not t.requires_grad:
            continue
        assert t.grad is not None
        size = t.data.size
        count = size if max_coords is None else min(size, max_coords)
        flat = rng.choice(size, size=count, replace=False) if count < size else np.arange(size)
        for f in flat:
            coord = np.unravel_index(int(f), t.data.shape)
            a = float(t.grad[coord])
            n = numerical_grad(fn, t, coord, step=step)
            err = abs(a - n)
            bound = atol + rtol * abs(n)
            checked += 1
            if err > bound:
                n_small = numerical_grad(fn, t, coord, step=step / 8.0)
                if abs(n_small - n) > 8.0 * bound:
                    skipped += 1  # step-unstable: a kink crossing, not a bug
                    continue
                err_small = abs(a - n_small)
                assert err_small <= atol + rtol * abs(n_small), (
                    "gradient mismatch at %r%s: analytic %.8g vs numerical %.8g "
                    "(stable under step refinement; |diff| %.3g > %.3g)"
                    % (type(t).__name__, coord, a, n_small, err_small,
                       atol + rtol * abs(n_small)))
                n = n_small
            rel = abs(a - n) / max(abs(n), abs(a), 1.0)
            worst = max(worst, rel)
    assert skipped <= max_kink_fraction * max(1, checked), (
        "%d of %d sampled coordinates sat on kinks; inputs are too close to "
        "activation boundaries for a meaningful check" % (skipped, checked))
    return worst


def random_tensor(rng, shape, dtype=np.float64, requires_grad=True, margin=0.1):
    """Tensor of values bounded away from ReLU/max kinks for stable checks."""
    data = rng.uniform(-1.0, 1.0, size=shape)
    data = np.where(np.abs(data) < margin, data + np.sign(data + 1e-12) * margin, data)
    return Tensor(data.astype(dtype), requires_grad=requires_grad)


def randomize_parameters(module, rng):
    """Move a module's parameters to a generic point before checking.

    Freshly built blocks carry zero biases, which align convolution outputs
    exactly with ReLU kinks wherever a receptive field is fully clamped
    (zero inputs times weights plus zero bias). At such a point the function
    is genuinely non-differentiable and central differences measure the
    one-sided average instead of the recorded subgradient. Nonzero biases
    and jittered affine parameters make those alignments measure-zero.
    """
    for name, p in module.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bias", "beta"):
            signs = np.where(rng.random(p.data.shape) < 0.5, -1.0, 1.0)
            p.data[...] = (rng.uniform(0.1, 0.4, p.data.shape) * signs
                           ).astype(p.data.dtype)
        elif leaf == "gamma":
            p.data[...] = rng.uniform(0.7, 1.3, p.data.shape).astype(p.data.dtype)
