"""Neural-net layers that keep their weights in ring-factored form.

A fully connected layer factors its (I, O) matrix over d input cores
and d-hat output cores of one ring; the forward pass contracts the
input against the two merged halves and never forms the dense matrix.
A conv layer factors its (D, D, I, O) kernel over spatial cores plus
input/output channel cores and runs in three steps: a pointwise map
into bond space, one small spatial convolution carrying all striding
and padding, and a pointwise map out.

Each layer offers a cached numeric ``forward`` (merges reused until
``invalidate``) and a ``forward_tape`` that re-merges through autodiff
ops so gradients reach the cores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels, autodiff as ad
from .planner import balanced_plan
from .ring import InitSpec, TRFactorSet, merge_chain, random_init, construct
from .tensor import ConvSpec, DenseTensor, as_ndarray, tensordot_counted

__all__ = [
    "TRFullyConnected",
    "TRConv2d",
    "DenseFullyConnected",
    "DenseConv2d",
    "ConvIntermediates",
    "fc_forward",
    "conv_forward",
    "dense_fc_forward",
    "dense_conv_forward",
]


def _shape_tuple(shape, what):
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ValueError(f"{what} needs at least one factor")
    if any(s < 1 for s in shape):
        raise ValueError(f"{what} factors must be >= 1, got {shape}")
    return shape


def _merge_vars(core_vars, rank):
    """Merge a segment of core Vars into one (left, product, right) Var.

    Follows the same balanced tree as the numeric path and the cost
    model, so metered MACs match the closed-form coefficients exactly.
    """
    if not core_vars:
        eye = np.eye(rank).reshape(rank, 1, rank)
        return ad.constant(eye, name="bond-identity")
    if len(core_vars) == 1:
        return core_vars[0]
    tree = balanced_plan(1, len(core_vars)).tree

    def ev(t):
        if isinstance(t, int):
            return core_vars[t - 1]
        left = ev(t[0])
        right = ev(t[1])
        return ad.tensordot(left, right, [left.value.ndim - 1], [0])

    node = ev(tree)
    prod = math.prod(node.value.shape[1:-1])
    return ad.reshape(node, (node.value.shape[0], prod, node.value.shape[-1]))


def _merge_arrays(arrays, rank):
    """Numeric twin of _merge_vars (balanced order, same MAC count)."""
    if not arrays:
        return np.eye(rank).reshape(rank, 1, rank)
    m = merge_chain(arrays)
    return m.reshape(m.shape[0], -1, m.shape[-1])


class TRFullyConnected:
    """Matrix-free fully connected layer over one ring.

    Ring order is the d input cores then the d-hat output cores; the
    closure bond ties the last output core back to the first input
    core.  ``in_shape`` must multiply to the layer's input size I and
    ``out_shape`` to its output size O.
    """

    def __init__(self, in_shape, out_shape, ring: TRFactorSet | None = None, *,
                 rank: int | None = None, seed: int = 0,
                 target_std: float | None = None, name: str = "fc"):
        self.in_shape = _shape_tuple(in_shape, "in_shape")
        self.out_shape = _shape_tuple(out_shape, "out_shape")
        self.name = name
        full = self.in_shape + self.out_shape
        if ring is None:
            if rank is None:
                raise ValueError("give either a ring or a rank")
            init = InitSpec(
                uncompressed_param_count=self.in_size * self.out_size,
                num_cores=len(full), rank=rank, target_std=target_std)
            ring = random_init(full, rank, init, seed)
        if ring.shape() != full:
            raise ValueError(
                f"ring modes {ring.shape()} do not match factors {full}")
        d = len(self.in_shape)
        cores = [c.data.array.copy() for c in ring]
        self.in_cores = [ad.parameter(cores[i], name=f"{name}.in{i}") for i in range(d)]
        self.out_cores = [ad.parameter(cores[d + j], name=f"{name}.out{j}")
                          for j in range(len(self.out_shape))]
        self._cache = None

    @property
    def in_size(self) -> int:
        return math.prod(self.in_shape)

    @property
    def out_size(self) -> int:
        return math.prod(self.out_shape)

    def params(self) -> list:
        return self.in_cores + self.out_cores

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params())

    def ring(self) -> TRFactorSet:
        """Snapshot of the current core values as a ring."""
        return TRFactorSet([p.value for p in self.params()])

    def dense_matrix(self) -> np.ndarray:
        """Materialize the (I, O) matrix the ring represents (oracle path)."""
        return construct(self.ring()).array.reshape(self.in_size, self.out_size)

    def invalidate(self) -> None:
        self._cache = None

    def _merged(self):
        if self._cache is None:
            f_in = _merge_arrays([p.value for p in self.in_cores], 0)
            f_out = _merge_arrays([p.value for p in self.out_cores], 0)
            self._cache = (f_in, f_out)
        return self._cache

    def _apply(self, x2, f_in, f_out, td):
        z = td(x2, f_in, [1], [1])          # (B, closure bond, mid bond)
        return td(z, f_out, [1, 2], [2, 0])  # (B, O)

    def forward(self, x) -> np.ndarray:
        """Numeric forward over cached merges.

        Accepts (B, I), (B, *in_shape) or one unbatched sample; returns
        (B, O) (or (O,) for an unbatched sample).
        """
        xa = as_ndarray(x)
        unbatched = xa.shape in (self.in_shape, (self.in_size,))
        if unbatched:
            xa = xa.reshape(1, self.in_size)
        else:
            xa = xa.reshape(xa.shape[0], self.in_size)
        f_in, f_out = self._merged()
        y = self._apply(xa, f_in, f_out, tensordot_counted)
        return y[0] if unbatched else y

    def forward_tape(self, xv: ad.Var) -> ad.Var:
        """Differentiable forward; re-merges cores so gradients reach them."""
        x2 = ad.reshape(xv, (xv.value.shape[0], self.in_size))
        f_in = _merge_vars(self.in_cores, 0)
        f_out = _merge_vars(self.out_cores, 0)
        return self._apply(x2, f_in, f_out, ad.tensordot)


@dataclass
class ConvIntermediates:
    """Single-sample stage outputs of the three-step conv path."""

    bond_input: np.ndarray   # (H, W, R, R): input mapped into bond space
    bond_spatial: np.ndarray  # (H', W', R, R): after the spatial convolution
    output: np.ndarray       # (H', W', O)


class TRConv2d:
    """Three-step convolution over a ring-factored kernel.

    Ring order: spatial core(s) (one (R, D*D, R) core in "merged" mode,
    two (R, D, R) cores in "split" mode), then input-channel cores,
    then output-channel cores.  ``in_shape`` may be empty when the
    layer has a single input channel; that end of the ring closes with
    a bond identity and carries no parameters.  All striding and
    padding happen in the spatial step.
    """

    def __init__(self, spec: ConvSpec, in_shape=(), out_shape=(), *,
                 spatial_mode: str = "merged", ring: TRFactorSet | None = None,
                 rank: int | None = None, seed: int = 0,
                 target_std: float | None = None, name: str = "conv"):
        if spatial_mode not in ("merged", "split"):
            raise ValueError(f"spatial_mode must be 'merged' or 'split', got {spatial_mode!r}")
        self.spec = spec
        self.spatial_mode = spatial_mode
        self.name = name
        self.in_shape = tuple(int(s) for s in in_shape)
        self.out_shape = tuple(int(s) for s in out_shape)
        if any(s < 1 for s in self.in_shape + self.out_shape):
            raise ValueError("channel factors must be >= 1")
        if math.prod(self.in_shape) != spec.in_channels:
            raise ValueError(
                f"in_shape {self.in_shape} multiplies to {math.prod(self.in_shape)}, "
                f"spec wants {spec.in_channels} input channels")
        if math.prod(self.out_shape) != spec.out_channels:
            raise ValueError(
                f"out_shape {self.out_shape} multiplies to {math.prod(self.out_shape)}, "
                f"spec wants {spec.out_channels} output channels")
        d = spec.filter_size
        spatial_shape = (d * d,) if spatial_mode == "merged" else (d, d)
        ring_modes = spatial_shape + self.in_shape + self.out_shape
        if ring is None:
            if rank is None:
                raise ValueError("give either a ring or a rank")
            init = InitSpec(
                uncompressed_param_count=d * d * spec.in_channels * spec.out_channels,
                num_cores=len(ring_modes), rank=rank, target_std=target_std)
            ring = random_init(ring_modes, rank, init, seed)
        if ring.shape() != ring_modes:
            raise ValueError(f"ring modes {ring.shape()} do not match {ring_modes}")
        arrays = [c.data.array.copy() for c in ring]
        n_sp = len(spatial_shape)
        if spatial_mode == "merged":
            r_l, _, r_r = arrays[0].shape
            self.spatial_cores = [ad.parameter(
                arrays[0].reshape(r_l, d, d, r_r), name=f"{name}.spatial0")]
        else:
            self.spatial_cores = [ad.parameter(arrays[i], name=f"{name}.spatial{i}")
                                  for i in range(2)]
        self.in_cores = [ad.parameter(arrays[n_sp + i], name=f"{name}.in{i}")
                         for i in range(len(self.in_shape))]
        off = n_sp + len(self.in_shape)
        self.out_cores = [ad.parameter(arrays[off + j], name=f"{name}.out{j}")
                          for j in range(len(self.out_shape))]
        # bond rank entering the channel segments (uniform in practice)
        self._rank_in = self.spatial_cores[-1].value.shape[-1]
        self._rank_out = self.spatial_cores[0].value.shape[0]
        self._cache = None

    def params(self) -> list:
        return self.spatial_cores + self.in_cores + self.out_cores

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params())

    def ring(self) -> TRFactorSet:
        arrays = []
        for p in self.spatial_cores:
            a = p.value
            if a.ndim == 4:
                a = a.reshape(a.shape[0], -1, a.shape[-1])
            arrays.append(a)
        arrays += [p.value for p in self.in_cores]
        arrays += [p.value for p in self.out_cores]
        return TRFactorSet(arrays)

    def dense_kernel(self) -> np.ndarray:
        """Materialize the (D, D, I, O) kernel the ring represents."""
        d = self.spec.filter_size
        return construct(self.ring()).array.reshape(
            d, d, self.spec.in_channels, self.spec.out_channels)

    def invalidate(self) -> None:
        self._cache = None

    def _merged(self):
        if self._cache is None:
            if self.spatial_mode == "merged":
                v = self.spatial_cores[0].value
            else:
                v1, v2 = (p.value for p in self.spatial_cores)
                v = tensordot_counted(v1, v2, [2], [0])
            u_in = _merge_arrays([p.value for p in self.in_cores], self._rank_in)
            u_out = _merge_arrays([p.value for p in self.out_cores], self._rank_out)
            self._cache = (v, u_in, u_out)
        return self._cache

    def forward(self, x) -> np.ndarray:
        """Numeric forward: (B, H, W, I) -> (B, H', W', O); unbatched OK."""
        xa = as_ndarray(x)
        spec = self.spec
        unbatched = xa.ndim == 3
        if unbatched:
            xa = xa[None]
        if xa.shape[1:] != (spec.height, spec.width, spec.in_channels):
            raise ValueError(
                f"input shape {xa.shape[1:]} does not match spec "
                f"{(spec.height, spec.width, spec.in_channels)}")
        v, u_in, u_out = self._merged()
        y = self._three_step(xa, v, u_in, u_out)[-1]
        return y[0] if unbatched else y

    def _three_step(self, xa, v, u_in, u_out):
        spec = self.spec
        b = xa.shape[0]
        r3 = u_in.shape[-1]
        # 1: pointwise into bond space
        p = tensordot_counted(xa, u_in, [3], [1])          # (B, H, W, r2, r3)
        # 2: the only spatial step; fold the trailing bond into the batch
        pf = p.transpose(0, 4, 1, 2, 3).reshape(b * r3, spec.height, spec.width, -1)
        k2 = v.transpose(1, 2, 3, 0)                        # (D, D, r2, r1)
        qf = _kernels.conv2d(pf, k2, stride=spec.stride, pad=spec.padding)
        q = qf.reshape(b, r3, spec.out_height, spec.out_width, -1).transpose(0, 2, 3, 1, 4)
        # 3: pointwise out of bond space
        z = tensordot_counted(q, u_out, [3, 4], [0, 2])
        return p, q, z

    def intermediates(self, x) -> ConvIntermediates:
        """Stage outputs for one sample (verification hook)."""
        xa = as_ndarray(x)
        if xa.ndim != 3:
            raise ValueError(f"expected one sample (H, W, I), got shape {xa.shape}")
        v, u_in, u_out = self._merged()
        p, q, z = self._three_step(xa[None], v, u_in, u_out)
        return ConvIntermediates(bond_input=p[0], bond_spatial=q[0], output=z[0])

    def forward_tape(self, xv: ad.Var) -> ad.Var:
        spec = self.spec
        b = xv.value.shape[0]
        if self.spatial_mode == "merged":
            v = self.spatial_cores[0]
        else:
            v = ad.tensordot(self.spatial_cores[0], self.spatial_cores[1], [2], [0])
        u_in = _merge_vars(self.in_cores, self._rank_in)
        u_out = _merge_vars(self.out_cores, self._rank_out)
        r3 = u_in.value.shape[-1]
        r2 = u_in.value.shape[0]
        p = ad.tensordot(xv, u_in, [3], [1])
        pf = ad.reshape(ad.transpose(p, (0, 4, 1, 2, 3)),
                        (b * r3, spec.height, spec.width, r2))
        k2 = ad.transpose(v, (1, 2, 3, 0))
        qf = ad.conv2d(pf, k2, stride=spec.stride, pad=spec.padding)
        r1 = k2.value.shape[-1]
        q = ad.transpose(ad.reshape(qf, (b, r3, spec.out_height, spec.out_width, r1)),
                         (0, 2, 3, 1, 4))
        return ad.tensordot(q, u_out, [3, 4], [0, 2])


class DenseFullyConnected:
    """Plain matrix layer; the uncompressed twin of TRFullyConnected."""

    def __init__(self, in_size: int, out_size: int, *, seed: int = 0, name: str = "fc"):
        self.in_size = int(in_size)
        self.out_size = int(out_size)
        self.name = name
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        w = rng.normal(0.0, np.sqrt(2.0 / self.in_size), (self.in_size, self.out_size))
        self.weight = ad.parameter(w, name=f"{name}.weight")

    def params(self) -> list:
        return [self.weight]

    def param_count(self) -> int:
        return self.weight.value.size

    def invalidate(self) -> None:
        pass

    def forward(self, x) -> np.ndarray:
        xa = as_ndarray(x).reshape(-1, self.in_size)
        return tensordot_counted(xa, self.weight.value, [1], [0])

    def forward_tape(self, xv: ad.Var) -> ad.Var:
        x2 = ad.reshape(xv, (xv.value.shape[0], self.in_size))
        return ad.tensordot(x2, self.weight, [1], [0])


class DenseConv2d:
    """Plain convolution layer; the uncompressed twin of TRConv2d."""

    def __init__(self, spec: ConvSpec, *, seed: int = 0, name: str = "conv"):
        self.spec = spec
        self.name = name
        d = spec.filter_size
        fan_in = d * d * spec.in_channels
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        k = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                       (d, d, spec.in_channels, spec.out_channels))
        self.kernel = ad.parameter(k, name=f"{name}.kernel")

    def params(self) -> list:
        return [self.kernel]

    def param_count(self) -> int:
        return self.kernel.value.size

    def invalidate(self) -> None:
        pass

    def forward(self, x) -> np.ndarray:
        xa = as_ndarray(x)
        unbatched = xa.ndim == 3
        if unbatched:
            xa = xa[None]
        y = _kernels.conv2d(xa, self.kernel.value, stride=self.spec.stride,
                            pad=self.spec.padding)
        return y[0] if unbatched else y

    def forward_tape(self, xv: ad.Var) -> ad.Var:
        return ad.conv2d(xv, self.kernel, stride=self.spec.stride, pad=self.spec.padding)


# --- operation-style entry points -------------------------------------------

def fc_forward(layer: TRFullyConnected, x) -> np.ndarray:
    """Apply a ring-factored fully connected layer (cached numeric path)."""
    return layer.forward(x)


def conv_forward(layer: TRConv2d, x, return_intermediates: bool = False):
    """Apply a ring-factored conv layer; optionally give stage outputs."""
    if return_intermediates:
        inter = layer.intermediates(x)
        return inter.output, inter
    return layer.forward(x)


def dense_fc_forward(weight, x) -> np.ndarray:
    """Reference dense layer: y[b, o] = sum_i x[b, i] * w[i, o]."""
    wa = as_ndarray(weight)
    xa = as_ndarray(x).reshape(-1, wa.shape[0])
    return tensordot_counted(xa, wa, [1], [0])


def dense_conv_forward(kernel, x, spec: ConvSpec):
    """Reference dense convolution (single sample), the layer-level oracle."""
    from .tensor import conv2d_reference
    return conv2d_reference(
        x if isinstance(x, DenseTensor) else DenseTensor(as_ndarray(x)),
        kernel if isinstance(kernel, DenseTensor) else DenseTensor(as_ndarray(kernel)),
        spec)
