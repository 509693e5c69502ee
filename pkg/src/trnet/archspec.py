"""Architecture description files: schema, validation, loading.

An arch file is JSON: a name plus an ordered layer list.  Layer kinds:

* ``fc``: in_shape/out_shape are the factorizations of the layer's
  input and output sizes (the ring's physical modes).
* ``conv``: filter/stride/padding plus the input spatial dims; in_shape
  may be empty for a single input channel (that ring end closes with a
  parameter-free bond identity).
* ``resblock``: two stacked convs (in->out with the given stride, then
  out->out at stride 1), the standard residual-stage unit; ``repeat``
  counts identical blocks.
* ``maxpool``: spatial pooling marker, no parameters, no MACs.

A layer may carry a ``reference`` object of published coefficient
values; the analyzer compares them against derived ones and flags
mismatches rather than trusting either side.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import jsonschema

__all__ = ["ArchError", "ConvGeom", "LayerDef", "ArchSpec", "ARCH_SCHEMA", "load_arch"]


class ArchError(ValueError):
    """Schema or consistency failure; ``pointer`` locates the bad field."""

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(message)
        self.pointer = pointer


_SHAPE = {"type": "array", "items": {"type": "integer", "minimum": 1}}

_REFERENCE = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "params_r2": {"type": "integer", "minimum": 0},
        "macs_r3": {"type": "integer", "minimum": 0},
        "macs_r2": {"type": "integer", "minimum": 0},
    },
}

_LAYER = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["fc", "conv", "resblock", "maxpool"]},
        "name": {"type": "string"},
        "in_shape": _SHAPE,
        "out_shape": _SHAPE,
        "filter": {"type": "integer", "minimum": 1},
        "stride": {"type": "integer", "minimum": 1},
        "padding": {"type": "integer", "minimum": 0},
        "height": {"type": "integer", "minimum": 1},
        "width": {"type": "integer", "minimum": 1},
        "spatial_mode": {"enum": ["merged", "split"]},
        "repeat": {"type": "integer", "minimum": 1},
        "pool": {"type": "integer", "minimum": 2},
        "reference": _REFERENCE,
    },
}

ARCH_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["name", "layers"],
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "default_rank": {"type": "integer", "minimum": 1},
        "layers": {"type": "array", "items": _LAYER},
    },
}


@dataclass(frozen=True)
class ConvGeom:
    filter_size: int
    stride: int
    padding: int
    height: int
    width: int

    @property
    def out_height(self) -> int:
        return (self.height + 2 * self.padding - self.filter_size) // self.stride + 1

    @property
    def out_width(self) -> int:
        return (self.width + 2 * self.padding - self.filter_size) // self.stride + 1


@dataclass(frozen=True)
class LayerDef:
    kind: str
    name: str
    in_shape: tuple = ()
    out_shape: tuple = ()
    geom: ConvGeom | None = None
    spatial_mode: str = "merged"
    repeat: int = 1
    pool: int = 2
    reference: dict = field(default_factory=dict)

    @property
    def in_size(self) -> int:
        return math.prod(self.in_shape) if self.in_shape else 1

    @property
    def out_size(self) -> int:
        return math.prod(self.out_shape) if self.out_shape else 1


@dataclass(frozen=True)
class ArchSpec:
    name: str
    layers: tuple
    default_rank: int | None = None
    description: str = ""


def _pointer(error: jsonschema.ValidationError) -> str:
    return "/" + "/".join(str(p) for p in error.absolute_path)


def _semantic(idx, layer, msg, field_name=None):
    ptr = f"/layers/{idx}" + (f"/{field_name}" if field_name else "")
    raise ArchError(f"layer {idx}: {msg}", pointer=ptr)


def load_arch(source) -> ArchSpec:
    """Load and validate an arch description.

    ``source`` is a path or an already-parsed dict.  Raises ArchError
    with a JSON pointer on any schema or consistency violation.
    """
    if isinstance(source, dict):
        doc = source
    else:
        with open(source, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ArchError(f"not valid JSON: {exc}") from exc
    validator = jsonschema.Draft202012Validator(ARCH_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ArchError(f"schema violation at {_pointer(err) or '/'}: {err.message}",
                        pointer=_pointer(err))

    layers = []
    for idx, raw in enumerate(doc["layers"]):
        kind = raw["kind"]
        name = raw.get("name", f"layer{idx}")
        in_shape = tuple(raw.get("in_shape", ()))
        out_shape = tuple(raw.get("out_shape", ()))
        geom = None
        if kind in ("conv", "resblock"):
            for key in ("filter", "height", "width"):
                if key not in raw:
                    _semantic(idx, raw, f"{kind} layers need '{key}'", key)
            geom = ConvGeom(filter_size=raw["filter"], stride=raw.get("stride", 1),
                            padding=raw.get("padding", 0), height=raw["height"],
                            width=raw["width"])
            if geom.out_height < 1 or geom.out_width < 1:
                _semantic(idx, raw, "filter/stride/padding give an empty output map",
                          "filter")
            if not out_shape:
                _semantic(idx, raw, f"{kind} layers need a non-empty out_shape",
                          "out_shape")
            if kind == "resblock" and not in_shape:
                _semantic(idx, raw, "resblock layers need a non-empty in_shape",
                          "in_shape")
        elif kind == "fc":
            if not in_shape or not out_shape:
                _semantic(idx, raw, "fc layers need non-empty in_shape and out_shape",
                          "in_shape" if not in_shape else "out_shape")
        layers.append(LayerDef(
            kind=kind, name=name, in_shape=in_shape, out_shape=out_shape,
            geom=geom, spatial_mode=raw.get("spatial_mode", "merged"),
            repeat=raw.get("repeat", 1), pool=raw.get("pool", 2),
            reference=dict(raw.get("reference", {}))))
    return ArchSpec(name=doc["name"], layers=tuple(layers),
                    default_rank=doc.get("default_rank"),
                    description=doc.get("description", ""))
