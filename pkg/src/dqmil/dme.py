"""Dynamic meta-embedding: fuse frozen per-source instance features through trainable projections."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import AlignmentError, ConfigError, SchemaError
from .layers import Linear, Module


@dataclass(frozen=True)
class SourceSpec:
    source_id: str
    width: int
    d_proj: int = 256

    def __post_init__(self):
        if self.width < 1 or self.d_proj < 1:
            raise ConfigError(f"source {self.source_id!r}: width and d_proj must be >= 1")

    def to_dict(self):
        return asdict(self)


def check_sources(sources: Sequence[np.ndarray], specs: Sequence[SourceSpec]) -> int:
    """Validate a per-source embedding set against its manifest; return the instance count N."""
    if len(sources) == 0:
        raise SchemaError("embedding set has no sources")
    if len(sources) != len(specs):
        raise SchemaError(f"got {len(sources)} sources, manifest declares {len(specs)}")
    n = None
    for arr, spec in zip(sources, specs):
        if arr.ndim != 2 or arr.shape[1] != spec.width:
            raise SchemaError(f"source {spec.source_id!r}: expected width {spec.width}, got shape {arr.shape}")
        if n is None:
            n = arr.shape[0]
        elif arr.shape[0] != n:
            raise AlignmentError(f"source {spec.source_id!r} has {arr.shape[0]} instances, expected {n}")
    return n


class DynamicMetaEmbedder(Module):
    """One affine projection per source; outputs are concatenated in manifest order."""

    def __init__(self, specs: Sequence[SourceSpec], rng, select: str | None = None):
        self.specs = tuple(specs)
        if not self.specs:
            raise ConfigError("at least one source is required")
        ids = [s.source_id for s in self.specs]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate source ids in {ids}")
        if select is not None and select not in ids:
            raise KeyError(f"unknown source id {select!r}; known: {ids}")
        self.select = select
        self.projections = [Linear(s.width, s.d_proj, rng) for s in self.specs]

    @property
    def out_width(self):
        if self.select is not None:
            return self._spec(self.select)[1].d_proj
        return sum(s.d_proj for s in self.specs)

    def _spec(self, source_id):
        for i, s in enumerate(self.specs):
            if s.source_id == source_id:
                return i, s
        raise KeyError(f"unknown source id {source_id!r}; known: {[s.source_id for s in self.specs]}")

    def fuse(self, sources: Sequence[np.ndarray]):
        check_sources(sources, self.specs)
        parts = [proj(nx.Tensor(arr)) for proj, arr in zip(self.projections, sources)]
        return parts[0] if len(parts) == 1 else nx.concat(parts, axis=-1)

    def single_source(self, sources: Sequence[np.ndarray], source_id: str):
        check_sources(sources, self.specs)
        i, _ = self._spec(source_id)
        return self.projections[i](nx.Tensor(sources[i]))

    def __call__(self, sources):
        if self.select is not None:
            return self.single_source(sources, self.select)
        return self.fuse(sources)
