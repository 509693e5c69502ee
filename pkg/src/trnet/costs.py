"""Symbolic and numeric cost accounting for ring-factored layers.

Coefficients are exact integers in the bond rank r: parameters are
(coefficient) * r^2, forward MACs split into a merge/spatial part times
r^3 and a pointwise part times r^2.  Conventions, which instrumented
forwards reproduce exactly:

* one MAC = one multiply-accumulate; the 2x flop view is elsewhere;
* merges follow the balanced plan and happen once per weight update,
  so their cost is counted once per batch, not per sample;
* the conv spatial step counts nominal padded work B*H'*W'*D^2 * r^3;
* pointwise work is per sample: B*(H*W*I + H'*W'*O) * r^2 for conv,
  B*(I + O) * r^2 for fc.

Derived coefficients are compared against any published ``reference``
values carried by the arch file; mismatches are flagged, never adopted.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

from .archspec import ArchSpec, ConvGeom, LayerDef
from .planner import merge_mac_coefficient

__all__ = ["CostReport", "ArchCost", "fc_cost", "conv_cost", "resblock_cost",
           "layer_cost", "arch_cost"]


@dataclass(frozen=True)
class CostReport:
    """Exact cost coefficients for one layer row (already times ``repeat``)."""

    name: str
    kind: str
    repeat: int
    batch: int
    params_uncompressed: int
    params_r2: int
    macs_uncompressed: int
    macs_r3: int
    macs_r2: int
    reference_mismatches: tuple = ()

    def params_tr(self, rank: int) -> int:
        return self.params_r2 * rank * rank

    def macs_tr(self, rank: int) -> int:
        return self.macs_r3 * rank ** 3 + self.macs_r2 * rank ** 2

    def compression(self, rank: int) -> float:
        tr = self.params_tr(rank)
        return self.params_uncompressed / tr if tr else float("inf")

    def macs_ratio(self, rank: int) -> float:
        tr = self.macs_tr(rank)
        return self.macs_uncompressed / tr if tr else float("inf")

    def speedup_bound(self, rank: int):
        """Closed-form speedup estimate (flops_2x, batch folded in).

        fc:   2 B I O / ((4 r^3 + 2 B r^2) (I + O))
        conv: B I O D^2 / (4 r^3 (I+O) + B r^2 (I+O) + B r^3 D^2)
        Only defined for fc and conv rows.
        """
        return None

    def symbolic_params(self) -> str:
        return f"{self.params_r2} r^2"

    def symbolic_macs(self) -> str:
        return f"{self.macs_r3} r^3 + {self.macs_r2} r^2"


@dataclass(frozen=True)
class FcCostReport(CostReport):
    in_size: int = 0
    out_size: int = 0

    def speedup_bound(self, rank: int):
        r = rank
        b = self.batch
        i, o = self.in_size, self.out_size
        return (2.0 * b * i * o) / ((4.0 * r ** 3 + 2.0 * b * r * r) * (i + o))


@dataclass(frozen=True)
class ConvCostReport(CostReport):
    in_size: int = 0
    out_size: int = 0
    filter_size: int = 0

    def speedup_bound(self, rank: int):
        r = rank
        b = self.batch
        i, o, d2 = self.in_size, self.out_size, self.filter_size ** 2
        denom = 4.0 * r ** 3 * (i + o) + b * r * r * (i + o) + b * r ** 3 * d2
        return (b * i * o * d2) / denom


@dataclass(frozen=True)
class ArchCost:
    arch_name: str
    batch: int
    rows: tuple
    total_params_uncompressed: int
    total_params_r2: int
    total_macs_uncompressed: int
    total_macs_r3: int
    total_macs_r2: int

    def total_params_tr(self, rank: int) -> int:
        return self.total_params_r2 * rank * rank

    def total_macs_tr(self, rank: int) -> int:
        return self.total_macs_r3 * rank ** 3 + self.total_macs_r2 * rank ** 2

    def total_compression(self, rank: int) -> float:
        return self.total_params_uncompressed / self.total_params_tr(rank)

    def total_macs_ratio(self, rank: int) -> float:
        return self.total_macs_uncompressed / self.total_macs_tr(rank)


def _prod(shape) -> int:
    return math.prod(shape) if shape else 1


def _check_reference(report: CostReport, reference: dict) -> CostReport:
    """Record any disagreement between derived and published coefficients."""
    mismatches = []
    derived = {"params_r2": report.params_r2, "macs_r3": report.macs_r3,
               "macs_r2": report.macs_r2}
    for key, published in reference.items():
        if derived[key] != published:
            mismatches.append((key, published, derived[key]))
    if not mismatches:
        return report
    return dataclasses.replace(report, reference_mismatches=tuple(mismatches))


def fc_cost(in_shape, out_shape, *, batch: int = 1, name: str = "fc",
            repeat: int = 1, reference: dict | None = None) -> FcCostReport:
    """Coefficients for one ring-factored fully connected layer."""
    i = _prod(in_shape)
    o = _prod(out_shape)
    merge_r3 = merge_mac_coefficient(in_shape) + merge_mac_coefficient(out_shape)
    report = FcCostReport(
        name=name, kind="fc", repeat=repeat, batch=batch,
        params_uncompressed=repeat * i * o,
        params_r2=repeat * (sum(in_shape) + sum(out_shape)),
        macs_uncompressed=repeat * batch * i * o,
        macs_r3=repeat * merge_r3,
        macs_r2=repeat * batch * (i + o),
        in_size=i, out_size=o)
    return _check_reference(report, reference or {})


def _single_conv(geom: ConvGeom, in_shape, out_shape, spatial_mode: str, batch: int):
    d = geom.filter_size
    i = _prod(in_shape)
    o = _prod(out_shape)
    hw = geom.height * geom.width
    ohw = geom.out_height * geom.out_width
    spatial_params = d * d if spatial_mode == "merged" else 2 * d
    spatial_merge = 0 if spatial_mode == "merged" else merge_mac_coefficient([d, d])
    params_r2 = spatial_params + sum(in_shape) + sum(out_shape)
    merge_r3 = (spatial_merge + merge_mac_coefficient(in_shape)
                + merge_mac_coefficient(out_shape))
    return {
        "params_uncompressed": d * d * i * o,
        "params_r2": params_r2,
        "macs_uncompressed": batch * ohw * d * d * i * o,
        "macs_r3": merge_r3 + batch * ohw * d * d,
        "macs_r2": batch * (hw * i + ohw * o),
        "in_size": i,
        "out_size": o,
    }


def conv_cost(geom: ConvGeom, in_shape, out_shape, *, spatial_mode: str = "merged",
              batch: int = 1, name: str = "conv", repeat: int = 1,
              reference: dict | None = None) -> ConvCostReport:
    """Coefficients for one ring-factored conv layer."""
    c = _single_conv(geom, in_shape, out_shape, spatial_mode, batch)
    report = ConvCostReport(
        name=name, kind="conv", repeat=repeat, batch=batch,
        params_uncompressed=repeat * c["params_uncompressed"],
        params_r2=repeat * c["params_r2"],
        macs_uncompressed=repeat * c["macs_uncompressed"],
        macs_r3=repeat * c["macs_r3"],
        macs_r2=repeat * c["macs_r2"],
        in_size=c["in_size"], out_size=c["out_size"], filter_size=geom.filter_size)
    return _check_reference(report, reference or {})


def resblock_cost(geom: ConvGeom, in_shape, out_shape, *, spatial_mode: str = "merged",
                  batch: int = 1, name: str = "resblock", repeat: int = 1,
                  reference: dict | None = None) -> CostReport:
    """Two stacked convs: in->out at the given stride, then out->out at 1.

    Only the conv kernels are counted (normalization and shortcut terms
    carry no ring parameters).
    """
    first = _single_conv(geom, in_shape, out_shape, spatial_mode, batch)
    second_geom = ConvGeom(filter_size=geom.filter_size, stride=1,
                           padding=geom.padding, height=geom.out_height,
                           width=geom.out_width)
    second = _single_conv(second_geom, out_shape, out_shape, spatial_mode, batch)
    report = CostReport(
        name=name, kind="resblock", repeat=repeat, batch=batch,
        params_uncompressed=repeat * (first["params_uncompressed"]
                                      + second["params_uncompressed"]),
        params_r2=repeat * (first["params_r2"] + second["params_r2"]),
        macs_uncompressed=repeat * (first["macs_uncompressed"]
                                    + second["macs_uncompressed"]),
        macs_r3=repeat * (first["macs_r3"] + second["macs_r3"]),
        macs_r2=repeat * (first["macs_r2"] + second["macs_r2"]))
    return _check_reference(report, reference or {})


def layer_cost(layer: LayerDef, *, batch: int = 1) -> CostReport:
    if layer.kind == "fc":
        return fc_cost(layer.in_shape, layer.out_shape, batch=batch, name=layer.name,
                       repeat=layer.repeat, reference=layer.reference)
    if layer.kind == "conv":
        return conv_cost(layer.geom, layer.in_shape, layer.out_shape,
                         spatial_mode=layer.spatial_mode, batch=batch,
                         name=layer.name, repeat=layer.repeat,
                         reference=layer.reference)
    if layer.kind == "resblock":
        return resblock_cost(layer.geom, layer.in_shape, layer.out_shape,
                             spatial_mode=layer.spatial_mode, batch=batch,
                             name=layer.name, repeat=layer.repeat,
                             reference=layer.reference)
    if layer.kind == "maxpool":
        return _check_reference(CostReport(
            name=layer.name, kind="maxpool", repeat=layer.repeat, batch=batch,
            params_uncompressed=0, params_r2=0, macs_uncompressed=0,
            macs_r3=0, macs_r2=0), layer.reference)
    raise ValueError(f"unknown layer kind {layer.kind!r}")


def arch_cost(arch: ArchSpec, *, batch: int = 1) -> ArchCost:
    """Per-row and total coefficients for a whole architecture."""
    rows = tuple(layer_cost(layer, batch=batch) for layer in arch.layers)
    return ArchCost(
        arch_name=arch.name, batch=batch, rows=rows,
        total_params_uncompressed=sum(r.params_uncompressed for r in rows),
        total_params_r2=sum(r.params_r2 for r in rows),
        total_macs_uncompressed=sum(r.macs_uncompressed for r in rows),
        total_macs_r3=sum(r.macs_r3 for r in rows),
        total_macs_r2=sum(r.macs_r2 for r in rows))
