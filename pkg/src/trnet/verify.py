"""Self-check suites behind the ``verify`` CLI subcommand.

Each suite runs seeded randomized checks of one equivalence or law:
ring decomposition roundtrip, factored-vs-dense layer forwards,
tape-vs-finite-difference gradients, and the initializer variance
calibration.  Checks return observed error plus the tolerance so the
CLI can print one line each and dump witnesses on failure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .layers import TRConv2d, TRFullyConnected
from .ring import ALSOptions, InitSpec, TRFactorSet, construct, decomp, merge, random_init
from .tensor import ConvSpec

__all__ = ["CheckResult", "SUITES", "run_suite", "random_fc_layer", "random_conv_layer"]


@dataclass
class CheckResult:
    name: str
    observed: float
    tolerance: float
    passed: bool
    detail: str = ""
    witness: dict = field(default_factory=dict)


def _result(name, observed, tolerance, detail="", witness=None, lower=None):
    ok = observed <= tolerance if lower is None else lower <= observed <= tolerance
    return CheckResult(name=name, observed=float(observed), tolerance=float(tolerance),
                       passed=bool(ok), detail=detail, witness=witness or {})


# --- randomized case generators (shared with the test suite) -----------------

def random_fc_layer(rng, max_modes: int = 4, max_rank: int = 3):
    """A small random fully connected layer plus a matching input batch."""
    d_in = int(rng.integers(1, 4))
    d_out = int(rng.integers(1, 4))
    in_shape = tuple(int(rng.integers(1, max_modes + 1)) for _ in range(d_in))
    out_shape = tuple(int(rng.integers(1, max_modes + 1)) for _ in range(d_out))
    rank = int(rng.integers(1, max_rank + 1))
    seed = int(rng.integers(0, 2 ** 31))
    layer = TRFullyConnected(in_shape, out_shape, rank=rank, seed=seed, target_std=1.0)
    batch = int(rng.integers(1, 5))
    x = rng.standard_normal((batch, layer.in_size))
    return layer, x


def random_conv_layer(rng, max_rank: int = 3):
    """A small random conv layer (both spatial modes, strides, paddings)."""
    d = int(rng.choice([1, 3, 5]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.choice([0, 1]))
    h = int(rng.integers(max(d - 2 * pad, 1), 9))
    w = int(rng.integers(max(d - 2 * pad, 1), 9))
    in_shape = [(), (2,), (3,), (2, 2)][int(rng.integers(0, 4))]
    out_shape = [(2,), (3,), (2, 2)][int(rng.integers(0, 3))]
    mode = "merged" if rng.integers(0, 2) else "split"
    rank = int(rng.integers(1, max_rank + 1))
    seed = int(rng.integers(0, 2 ** 31))
    spec = ConvSpec(height=h, width=w, in_channels=math.prod(in_shape) if in_shape else 1,
                    out_channels=math.prod(out_shape), filter_size=d,
                    stride=stride, padding=pad)
    layer = TRConv2d(spec, in_shape, out_shape, spatial_mode=mode, rank=rank,
                     seed=seed, target_std=1.0)
    batch = int(rng.integers(1, 4))
    x = rng.standard_normal((batch, h, w, spec.in_channels))
    return layer, x


# --- suites ------------------------------------------------------------------

def suite_roundtrip(seed: int) -> list:
    """Plant a ring, densify, re-fit at the true rank, check recovery."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(3):
        d = int(rng.integers(2, 5))
        shape = tuple(int(rng.integers(2, 5)) for _ in range(d))
        rank = int(rng.integers(1, 4))
        planted = random_init(shape, rank,
                              InitSpec(math.prod(shape), d, rank, target_std=1.0),
                              seed=int(rng.integers(0, 2 ** 31)))
        target = construct(planted)
        res = decomp(target, rank, opts=ALSOptions(max_sweeps=200, seed=i))
        out.append(_result(
            f"roundtrip-{i} shape={shape} rank={rank}", res.final_error, 1e-6,
            detail=f"{len(res.sweep_errors)} sweeps",
            witness={"target": target.array}))
    return out


def suite_fc_equiv(seed: int, cases: int = 25) -> list:
    """Factored forward against the materialized dense matrix."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_case = None
    for _ in range(cases):
        layer, x = random_fc_layer(rng)
        got = layer.forward(x)
        want = x @ layer.dense_matrix()
        err = np.linalg.norm(got - want) / (np.linalg.norm(want) + 1e-300)
        if err > worst:
            worst = err
            worst_case = {"input": x, "dense": want, "factored": got}
    return [_result(f"fc-equiv ({cases} layers)", worst, 1e-10,
                    witness=worst_case or {})]


def suite_conv_equiv(seed: int, cases: int = 25) -> list:
    """Three-step conv against direct conv on the constructed kernel."""
    from .tensor import DenseTensor, conv2d_reference
    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_case = None
    for _ in range(cases):
        layer, x = random_conv_layer(rng)
        got = layer.forward(x)
        kernel = DenseTensor(layer.dense_kernel())
        want = np.stack([
            conv2d_reference(DenseTensor(sample), kernel, layer.spec).array
            for sample in x])
        err = np.linalg.norm(got - want) / (np.linalg.norm(want) + 1e-300)
        if err > worst:
            worst = err
            worst_case = {"input": x, "dense": want, "factored": got}
    return [_result(f"conv-equiv ({cases} layers)", worst, 1e-10,
                    witness=worst_case or {})]


def suite_grad(seed: int) -> list:
    """Finite-difference gradient probes through both layer types."""
    rng = np.random.default_rng(seed)
    out = []

    fc = TRFullyConnected((2, 3), (2, 2), rank=2, seed=seed, target_std=1.0,
                          name="g-fc")
    x = rng.standard_normal((4, 6))
    labels = rng.integers(0, 4, size=4)
    rep = ad.finite_diff_check(lambda: ad.softmax_xent(fc.forward_tape(ad.constant(x)),
                                                       labels),
                               fc.params(), sample_count=30, seed=seed)
    out.append(_result("grad-fc", rep.max_rel_err, 1e-5,
                       detail=f"{rep.checks} coords, worst {rep.worst[0]}"))

    spec = ConvSpec(height=5, width=5, in_channels=2, out_channels=4, filter_size=3,
                    stride=2, padding=1)
    conv = TRConv2d(spec, (2,), (2, 2), spatial_mode="split", rank=2,
                    seed=seed + 1, target_std=1.0, name="g-conv")
    xc = rng.standard_normal((3, 5, 5, 2))
    labc = rng.integers(0, 4, size=3)
    # random class projection: a constant one would collapse the logits
    # to equal values and zero every gradient, checking nothing
    flat_dim = spec.out_height * spec.out_width * spec.out_channels
    proj = rng.standard_normal((flat_dim, 4)) / np.sqrt(flat_dim)

    def conv_loss():
        y = conv.forward_tape(ad.constant(xc))
        flat = ad.reshape(y, (3, -1))
        pooled = ad.tensordot(flat, ad.constant(proj), [1], [0])
        return ad.softmax_xent(pooled, labc)

    rep = ad.finite_diff_check(conv_loss, conv.params(), sample_count=30, seed=seed)
    out.append(_result("grad-conv", rep.max_rel_err, 1e-5,
                       detail=f"{rep.checks} coords, worst {rep.worst[0]}"))
    return out


def suite_init_variance(seed: int) -> list:
    """Monte Carlo check of the constructed-entry variance law.

    Cores i.i.d. N(0, sigma^2) must give constructed entries variance
    rank^d * sigma^(2d); with the calibrated sigma the observed/target
    ratio must sit within [0.85, 1.15].
    """
    out = []
    base = np.random.SeedSequence(seed)
    for d, rank in [(2, 2), (2, 4), (4, 2), (4, 4)]:
        mode = 16 if d == 2 else 4
        shape = (mode,) * d
        n_uncompressed = mode ** d
        spec = InitSpec(n_uncompressed, d, rank)
        instances = 500
        streams = base.spawn(instances)
        total_sq = 0.0
        count = 0
        for stream in streams:
            ring = random_init(shape, rank, spec,
                               seed=int(stream.generate_state(1)[0]))
            arr = construct(ring).array
            total_sq += float((arr * arr).sum())
            count += arr.size
        observed = total_sq / count
        predicted = rank ** d * spec.sigma ** (2 * d)
        target = 2.0 / n_uncompressed
        out.append(_result(f"init-variance-law d={d} rank={rank}",
                           observed / predicted, 1.15, lower=0.85,
                           detail=f"{count} entries"))
        out.append(_result(f"init-variance-target d={d} rank={rank}",
                           observed / target, 1.15, lower=0.85,
                           detail=f"target 2/N with N={n_uncompressed}"))
    return out


def suite_merge_variance(seed: int) -> list:
    """Open-chain merge law: d cores sum d-1 bonds, variance R^(d-1) sigma^(2d)."""
    out = []
    base = np.random.SeedSequence(seed)
    for d, rank, sigma in [(2, 4, 0.7), (3, 3, 0.8)]:
        mode = 6
        instances = 400
        total_sq = 0.0
        count = 0
        for stream in base.spawn(instances):
            rng = np.random.default_rng(stream)
            cores = [rng.normal(0.0, sigma, (rank, mode, rank)) for _ in range(d)]
            m = merge(TRFactorSet(cores), 1, d).array if d > 1 else cores[0]
            total_sq += float((m * m).sum())
            count += m.size
        observed = total_sq / count
        predicted = rank ** (d - 1) * sigma ** (2 * d)
        out.append(_result(f"merge-variance-law d={d} rank={rank}",
                           observed / predicted, 1.15, lower=0.85,
                           detail=f"{count} entries"))
    return out


SUITES = {
    "roundtrip": suite_roundtrip,
    "fc-equiv": suite_fc_equiv,
    "conv-equiv": suite_conv_equiv,
    "grad": suite_grad,
    "init-variance": suite_init_variance,
    "merge-variance": suite_merge_variance,
}


def run_suite(name: str, seed: int = 0) -> list:
    if name == "all":
        results = []
        for key in SUITES:
            results.extend(SUITES[key](seed))
        return results
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)} or 'all'")
    return SUITES[name](seed)
