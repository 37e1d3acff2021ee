"""Static and dynamic architecture reporting.

``shape_trace`` propagates symbolic shapes through the same node list the
executed forward walks, so the two cannot drift apart. ``flops_estimate``
counts convolution multiply-accumulates only (Cout*Cin*Kh*Kw*H'*W' per
sample); pooling, normalization, and activations count zero by convention.
``benchmark`` times eval-mode forwards with a fixed seeded input, reporting
single-thread and multi-thread figures separately.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .model import ModelGraph, Variant
from .tensor import no_grad

# Reference totals (millions) the parameter gate and ordering check run
# against; structure-sharing variants intentionally repeat a value.
REFERENCE_PARAMS_M = {
    Variant.ERFNET_DEPTH: 1.97,
    Variant.ERFNET_RGB: 1.97,
    Variant.ERFNET_STACK: 1.97,
    Variant.LDF_NON_DENSE: 2.95,
    Variant.LDF_WO_SHALLOW: 2.20,
    Variant.LDF_58_WO_SHALLOW: 2.42,
    Variant.LDF_WO_Y: 2.31,
    Variant.LDF_RGB_RGB: 2.31,
    Variant.LDFNET: 2.31,
}

# Variants whose totals are gated absolutely (+-10%); the rest participate
# in the ordering check only.
GATED_VARIANTS = (Variant.LDFNET, Variant.ERFNET_RGB)
PARAM_TOLERANCE = 0.10


@dataclass
class LayerReport:
    name: str
    input_shapes: tuple
    output_shape: tuple
    params: int
    macs: int


def shape_trace(graph: ModelGraph, resolution, batch=1):
    """Symbolic per-node shape propagation; returns ordered LayerReports."""
    h, w = resolution
    if h % 8 or w % 8:
        raise ArgumentError("resolution %dx%d is not divisible by 8" % (h, w))
    shapes = {slot: (batch, c, h, w) for slot, c in graph.input_channels.items()}
    reports = []
    for node in graph.nodes:
        in_shapes = tuple(shapes[src] for src in node.inputs)
        arg = in_shapes[0] if len(in_shapes) == 1 else list(in_shapes)
        out_shape = node.op.output_shape(arg)
        macs = node.op.macs(arg)
        shapes[node.name] = out_shape
        reports.append(LayerReport(node.name, in_shapes, out_shape,
                                   node.op.param_count(), macs))
    return reports


def runtime_shapes(graph: ModelGraph, resolution, batch=1, rng=None):
    """Actually execute the forward and record every node's output shape."""
    from .tensor import Tensor
    rng = rng or np.random.default_rng(0)
    h, w = resolution
    tensors = {slot: Tensor(rng.random((batch, c, h, w), dtype=np.float32))
               for slot, c in graph.input_channels.items()}
    shapes = {}
    graph.eval()
    with no_grad():
        for node in graph.nodes:
            out = node.op(*[tensors[src] for src in node.inputs])
            tensors[node.name] = out
            shapes[node.name] = out.shape
    return shapes


def flops_estimate(graph: ModelGraph, resolution, batch=1):
    """Total conv MACs for one forward pass, plus the per-node breakdown."""
    reports = shape_trace(graph, resolution, batch=batch)
    per_node = {r.name: r.macs for r in reports}
    return sum(per_node.values()), per_node


def _thread_cap(requested=None):
    env = os.environ.get("LDFNET_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    if requested:
        cap = min(cap, requested)
    return max(1, cap)


def benchmark(graph: ModelGraph, resolution, iterations=10, warmup=2,
              threads=None, batch=1, seed=0):
    """Throughput of eval-mode forwards on a fixed input.

    Single-thread mode times each forward and reports fps percentiles over
    the iterations. Multi-thread mode runs the same forward concurrently on
    a frozen graph (safe: inference mutates nothing) and reports aggregate
    throughput over three repeats.
    """
    rng = np.random.default_rng(seed)
    h, w = resolution
    feeds = {slot: rng.random((batch, c, h, w), dtype=np.float32)
             for slot, c in graph.input_channels.items()}
    graph.eval()

    def one_forward():
        with no_grad():
            graph.forward(feeds)

    for _ in range(warmup):
        one_forward()

    times = []
    for _ in range(iterations):
        start = time.perf_counter()
        one_forward()
        times.append(time.perf_counter() - start)
    fps = np.sort(1.0 / np.asarray(times))
    single = {
        "fps_median": float(np.median(fps)),
        "fps_p5": float(np.percentile(fps, 5)),
        "fps_p95": float(np.percentile(fps, 95)),
        "iterations": iterations,
    }

    n_threads = _thread_cap(threads)
    aggregate = []
    per_worker = max(1, iterations // n_threads)
    for _ in range(3):
        start = time.perf_counter()
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            futures = [pool.submit(lambda: [one_forward() for _ in range(per_worker)])
                       for _ in range(n_threads)]
            for f in futures:
                f.result()
        elapsed = time.perf_counter() - start
        aggregate.append(n_threads * per_worker / elapsed)
    aggregate = np.sort(np.asarray(aggregate))
    multi = {
        "fps_median": float(np.median(aggregate)),
        "fps_p5": float(aggregate[0]),
        "fps_p95": float(aggregate[-1]),
        "threads": n_threads,
        "iterations_per_thread": per_worker,
    }
    return {"single": single, "multi": multi, "resolution": (h, w), "batch": batch}


# ---------------------------------------------------------------------------
# reference gates
# ---------------------------------------------------------------------------

def param_gate(variant, count):
    """(reference count, within-tolerance flag); gate applies to the two
    absolutely pinned variants, others return their reference for context."""
    ref = REFERENCE_PARAMS_M[variant] * 1e6
    ok = abs(count - ref) <= PARAM_TOLERANCE * ref
    return ref, ok


def check_reference_ordering(counts):
    """Verify the relative parameter ordering against the reference totals.

    ``counts`` maps Variant -> measured totals. Pairs the table separates
    must keep their strict order; pairs the table lists as equal (to its
    0.01 M granularity) must agree to the same granularity here.
    """
    violations = []
    variants = list(counts)
    for i, a in enumerate(variants):
        for b in variants[i + 1:]:
            ref_a = REFERENCE_PARAMS_M[a]
            ref_b = REFERENCE_PARAMS_M[b]
            if ref_a == ref_b:
                if abs(counts[a] - counts[b]) > 0.01e6:
                    violations.append(
                        "%s and %s share a reference total but differ by %d"
                        % (a.value, b.value, abs(counts[a] - counts[b])))
            elif (ref_a < ref_b) != (counts[a] < counts[b]):
                violations.append(
                    "%s (%d) vs %s (%d) contradicts reference %.2fM vs %.2fM"
                    % (a.value, counts[a], b.value, counts[b], ref_a, ref_b))
    return violations
