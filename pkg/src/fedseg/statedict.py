"""State dictionaries, layer matching and asymmetric federated averaging.

A state dict maps structural layer names ("enc.3.conv.weight", "head.bias")
to parameter tensors. Matching compares (name, dims) so models of different
depths share their common prefix; aggregation averages each compatible layer
over its holders in ascending node id order, which makes results bit-exactly
reproducible and invariant under permutation of the input list.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import InternalError, UsageError
from .tensor import Tensor

_LAYER_RE = re.compile(
    r"^(?:(enc|dec)\.(\d+)\.conv\.(weight|bias)|head\.(weight|bias))$")

_PREFIX_RANK = {"enc": 0, "dec": 1, "head": 2}
_KIND_RANK = {"weight": 0, "bias": 1}


def layer_sort_key(name: str):
    """Canonical order: enc < dec < head, then stage, then weight < bias."""
    m = _LAYER_RE.match(name)
    if m is None:
        raise UsageError(f"invalid layer name: {name!r}")
    if m.group(4) is not None:
        return (_PREFIX_RANK["head"], 0, _KIND_RANK[m.group(4)])
    return (_PREFIX_RANK[m.group(1)], int(m.group(2)), _KIND_RANK[m.group(3)])


class StateDict:
    """Ordered mapping layer name -> Tensor, tagged with node id and round."""

    def __init__(self, entries, node_id: int = 0, round: int = 0):
        if node_id < 0 or round < 0:
            raise UsageError("node_id and round must be non-negative")
        items = list(entries.items()) if isinstance(entries, dict) else list(entries)
        names = [n for n, _ in items]
        if len(set(names)) != len(names):
            raise UsageError("duplicate layer name in state dict")
        for n in names:
            layer_sort_key(n)  # validates the grammar
        self._entries = {n: t for n, t in
                         sorted(items, key=lambda kv: layer_sort_key(kv[0]))}
        self.node_id = node_id
        self.round = round

    def __contains__(self, name):
        return name in self._entries

    def __getitem__(self, name) -> Tensor:
        return self._entries[name]

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return list(self._entries.items())

    def tensors(self):
        return list(self._entries.values())

    def dims(self, name):
        return tuple(self._entries[name].data.shape)

    def copy(self) -> "StateDict":
        return StateDict({n: t.detach() for n, t in self._entries.items()},
                         node_id=self.node_id, round=self.round)

    def allclose(self, other: "StateDict", exact: bool = True) -> bool:
        if self.names() != other.names():
            return False
        for n, t in self.items():
            o = other[n].data
            if exact:
                if t.data.shape != o.shape or not np.array_equal(t.data, o):
                    return False
            elif not np.allclose(t.data, o):
                return False
        return True

    def __repr__(self):
        return (f"StateDict(node={self.node_id}, round={self.round}, "
                f"layers={len(self._entries)})")


@dataclass
class CompatibleSet:
    """Layers eligible for averaging, with agreed dims and holder sets."""

    layers: dict = field(default_factory=dict)   # name -> dims tuple
    holders: dict = field(default_factory=dict)  # name -> sorted node_id list

    def __contains__(self, name):
        return name in self.layers

    def __len__(self):
        return len(self.layers)

    def names(self):
        return sorted(self.layers, key=layer_sort_key)


def match_layers(dicts, mode: str = "strict") -> CompatibleSet:
    """Find layers shared (by name and dims) across the federation.

    strict: a layer qualifies only if every node holds it with identical dims.
    subset: a layer qualifies if held with identical dims by >= 2 nodes; the
    holder set records exactly those nodes.
    """
    if not dicts:
        raise UsageError("match_layers needs at least one state dict")
    if mode not in ("strict", "subset"):
        raise UsageError(f"unknown matching mode: {mode!r}")
    by_node = sorted(dicts, key=lambda d: d.node_id)
    if len({d.node_id for d in by_node}) != len(by_node):
        raise UsageError("duplicate node_id among state dicts")

    compat = CompatibleSet()
    all_names = sorted({n for d in by_node for n in d.names()},
                       key=layer_sort_key)
    node_ids = [d.node_id for d in by_node]
    for name in all_names:
        holders = [(d.node_id, d.dims(name)) for d in by_node if name in d]
        if mode == "strict":
            if len(holders) != len(by_node):
                continue
            dims = holders[0][1]
            if any(dm != dims for _, dm in holders):
                continue
            compat.layers[name] = dims
            compat.holders[name] = list(node_ids)
        else:
            groups = {}
            for nid, dm in holders:
                groups.setdefault(dm, []).append(nid)
            eligible = [(dm, nids) for dm, nids in groups.items()
                        if len(nids) >= 2]
            if not eligible:
                continue
            # Largest dim-consistent group wins; ties go to the group
            # containing the smallest node id.
            eligible.sort(key=lambda g: (-len(g[1]), min(g[1])))
            dims, nids = eligible[0]
            compat.layers[name] = dims
            compat.holders[name] = sorted(nids)
    return compat


def aggregate_asym(dicts, compat: CompatibleSet, weights=None) -> StateDict:
    """Average each compatible layer over its holders (ascending node id).

    The result contains exactly the compatible layers. Sums are accumulated
    sequentially in 64-bit so the output is bit-reproducible. ``weights``
    (node_id -> float) switches to a weighted mean; the default is the
    plain arithmetic mean.
    """
    by_id = {d.node_id: d for d in dicts}
    entries = []
    for name in compat.names():
        acc = None
        wsum = 0.0
        holders = compat.holders[name]
        for nid in holders:
            if nid not in by_id or name not in by_id[nid]:
                raise InternalError(
                    f"compatible set references missing layer {name!r} "
                    f"on node {nid}")
            v = by_id[nid][name].data
            if tuple(v.shape) != tuple(compat.layers[name]):
                raise InternalError(
                    f"holder {nid} dims {v.shape} disagree with compatible "
                    f"set for {name!r}")
            if weights is not None:
                wk = float(weights[nid])
                v = v * wk
                wsum += wk
            acc = v.copy() if acc is None else acc + v
        denom = wsum if weights is not None else len(holders)
        entries.append((name, Tensor(acc / denom)))
    max_round = max((d.round for d in dicts), default=0)
    return StateDict(entries, node_id=0, round=max_round)


def apply_update(local: StateDict, aggregated: StateDict) -> StateDict:
    """Overwrite layers matched by name and dims; keep the rest bit-identical.

    Compatibility is keyed on (name, dims), so a local layer whose dims
    disagree with the aggregate (possible under subset matching, where the
    node lost the dim vote) stays local. Layers the aggregate carries but
    this model lacks are ignored (the update rule ranges over the local
    model's layers). Round advances by 1.
    """
    entries = []
    for name, t in local.items():
        if name in aggregated and \
                aggregated[name].data.shape == t.data.shape:
            entries.append((name, Tensor(aggregated[name].data.copy())))
        else:
            entries.append((name, t.detach()))
    return StateDict(entries, node_id=local.node_id, round=local.round + 1)
