"""Continuous scene graph: local-to-global aggregation and change detection.

Nodes carry two unit features: a *scene* feature describing the object in
its current spatial context, and an *identity* feature describing the
instance itself. Directed edges carry relationship features. Matching
uses only these features; simulator handles stored alongside a local
graph are for actions and evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .numerics import DegenerateFeatureError, cos_matrix, cos_sim, max_assignment, normalize

GRAPH_VERSION = 1
NODE_THRESHOLD = 0.5
OBJECT_THRESHOLD = 0.4
MOVED_THRESHOLD = 0.8


class GraphError(ValueError):
    pass


@dataclass
class LocalNode:
    index: int
    scene: np.ndarray
    identity: np.ndarray


@dataclass
class LocalGraph:
    """Graph extracted from a single observation: n nodes and n*n - n edges."""

    nodes: list[LocalNode]
    edges: dict[tuple[int, int], np.ndarray]
    detections: tuple = ()  # world.Detection per node, same order

    def __len__(self):
        return len(self.nodes)


@dataclass
class NodeRecord:
    scene: np.ndarray
    identity: np.ndarray
    count: int = 1


@dataclass
class EdgeRecord:
    feature: np.ndarray
    count: int = 1


@dataclass
class CsrGraph:
    prefix: str = "n"
    nodes: dict[str, NodeRecord] = field(default_factory=dict)
    edges: dict[tuple[str, str], EdgeRecord] = field(default_factory=dict)
    next_id: int = 0

    def _new_id(self) -> str:
        nid = f"{self.prefix}{self.next_id}"
        self.next_id += 1
        return nid

    @property
    def dim(self) -> int | None:
        for rec in self.nodes.values():
            return len(rec.scene)
        return None

    def __len__(self):
        return len(self.nodes)


@dataclass
class MatchReport:
    matched: list[tuple[int, str, float]]
    new_nodes: list[int]
    mapping: dict[int, str]  # local index -> node id, for every local node


@dataclass
class ChangeReport:
    correspondences: list[tuple[str, str, float]]
    moved: list[tuple[str, str, float]]
    unmatched_walk: list[str]
    unmatched_un: list[str]


def merge_feature(old: np.ndarray, count: int, new: np.ndarray) -> np.ndarray:
    """Count-weighted running mean of unit features, renormalized."""
    if count < 1:
        raise ValueError("merge count must be at least 1")
    mean = (count * np.asarray(old, dtype=np.float64) + np.asarray(new, dtype=np.float64)) / (count + 1)
    try:
        return normalize(mean)
    except DegenerateFeatureError as exc:
        raise DegenerateFeatureError("merging antiparallel features gives a zero mean") from exc


def check_graph(graph: CsrGraph, atol: float = 1e-9) -> None:
    """Raise :class:`GraphError` if any structural invariant fails."""
    dim = graph.dim
    for nid, rec in graph.nodes.items():
        for name, vec in (("scene", rec.scene), ("identity", rec.identity)):
            if len(vec) != dim:
                raise GraphError(f"node {nid} {name} feature has wrong length")
            if abs(np.linalg.norm(vec) - 1.0) > atol:
                raise GraphError(f"node {nid} {name} feature is not unit norm")
        if rec.count < 1:
            raise GraphError(f"node {nid} has count {rec.count}")
    for (a, b), rec in graph.edges.items():
        if a == b:
            raise GraphError(f"self-loop edge on {a}")
        if a not in graph.nodes or b not in graph.nodes:
            raise GraphError(f"edge ({a}, {b}) references a missing node")
        if abs(np.linalg.norm(rec.feature) - 1.0) > atol:
            raise GraphError(f"edge ({a}, {b}) feature is not unit norm")
        if rec.count < 1:
            raise GraphError(f"edge ({a}, {b}) has count {rec.count}")


def ingest(
    graph: CsrGraph,
    local: LocalGraph,
    node_threshold: float = NODE_THRESHOLD,
    forced: Mapping[int, str] | None = None,
) -> tuple[CsrGraph, MatchReport]:
    """Fold a local graph into ``graph`` (updated in place and returned).

    Global and local scene node features are compared by cosine, assigned
    one-to-one by maximal linear assignment, and pairs scoring above
    ``node_threshold`` merge. Everything else becomes a new node. Local
    edges follow the node correspondence: existing edges merge, unseen
    ones are added.

    ``forced`` replaces the feature matching with a given local-index ->
    node-id correspondence (ground-truth matching ablation).
    """
    if not -1.0 <= node_threshold <= 1.0:
        raise ValueError("node threshold must lie in [-1, 1]")
    dim = graph.dim
    for node in local.nodes:
        if dim is not None and (len(node.scene) != dim or len(node.identity) != dim):
            raise GraphError(f"local feature length {len(node.scene)} does not match graph length {dim}")

    ids = list(graph.nodes)
    matched: list[tuple[int, str, float]] = []
    if forced is not None:
        for li, nid in sorted(forced.items()):
            if nid not in graph.nodes:
                raise GraphError(f"forced match to unknown node {nid}")
            matched.append((li, nid, cos_sim(graph.nodes[nid].scene, local.nodes[li].scene)))
    elif ids and local.nodes:
        scores = cos_matrix([graph.nodes[n].scene for n in ids], [n.scene for n in local.nodes])
        for row, col in max_assignment(scores).pairs:
            s = float(scores[row, col])
            if s > node_threshold:
                matched.append((col, ids[row], s))
        matched.sort()

    mapping: dict[int, str] = {}
    for li, nid, _ in matched:
        rec = graph.nodes[nid]
        node = local.nodes[li]
        rec.scene = merge_feature(rec.scene, rec.count, node.scene)
        rec.identity = merge_feature(rec.identity, rec.count, node.identity)
        rec.count += 1
        mapping[li] = nid
    new_nodes = [n.index for n in local.nodes if n.index not in mapping]
    for li in new_nodes:
        node = local.nodes[li]
        nid = graph._new_id()
        graph.nodes[nid] = NodeRecord(node.scene.copy(), node.identity.copy(), 1)
        mapping[li] = nid

    for (i, j), feat in sorted(local.edges.items()):
        key = (mapping[i], mapping[j])
        rec = graph.edges.get(key)
        if rec is None:
            graph.edges[key] = EdgeRecord(np.array(feat, dtype=np.float64), 1)
        else:
            rec.feature = merge_feature(rec.feature, rec.count, feat)
            rec.count += 1
    return graph, MatchReport(matched, new_nodes, mapping)


def detect_changes(
    walk: CsrGraph,
    un: CsrGraph,
    obj_threshold: float = OBJECT_THRESHOLD,
    moved_threshold: float = MOVED_THRESHOLD,
    forced: Sequence[tuple[str, str]] | None = None,
) -> ChangeReport:
    """Match instances across two trajectories by identity features, then flag
    correspondences whose scene features disagree as moved.

    ``forced`` supplies (walk id, unshuffle id) correspondences directly,
    bypassing identity matching.
    """
    for t in (obj_threshold, moved_threshold):
        if not -1.0 <= t <= 1.0:
            raise ValueError("thresholds must lie in [-1, 1]")
    w_ids = list(walk.nodes)
    u_ids = list(un.nodes)
    corr: list[tuple[str, str, float]] = []
    if forced is not None:
        for a, b in forced:
            corr.append((a, b, cos_sim(walk.nodes[a].identity, un.nodes[b].identity)))
    elif w_ids and u_ids:
        scores = cos_matrix([walk.nodes[n].identity for n in w_ids], [un.nodes[n].identity for n in u_ids])
        for r, c in max_assignment(scores).pairs:
            if scores[r, c] > obj_threshold:
                corr.append((w_ids[r], u_ids[c], float(scores[r, c])))
    moved = [
        (a, b, s) for a, b, s in corr if cos_sim(walk.nodes[a].scene, un.nodes[b].scene) < moved_threshold
    ]
    seen_w = {a for a, _, _ in corr}
    seen_u = {b for _, b, _ in corr}
    return ChangeReport(
        correspondences=corr,
        moved=moved,
        unmatched_walk=[n for n in w_ids if n not in seen_w],
        unmatched_un=[n for n in u_ids if n not in seen_u],
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def graph_to_dict(graph: CsrGraph) -> dict:
    return {
        "version": GRAPH_VERSION,
        "prefix": graph.prefix,
        "next_id": graph.next_id,
        "nodes": [
            {"id": nid, "scene": rec.scene.tolist(), "identity": rec.identity.tolist(), "count": rec.count}
            for nid, rec in graph.nodes.items()
        ],
        "edges": [
            {"src": a, "dst": b, "feature": rec.feature.tolist(), "count": rec.count}
            for (a, b), rec in graph.edges.items()
        ],
    }


def graph_from_dict(doc: Mapping) -> CsrGraph:
    if doc.get("version") != GRAPH_VERSION:
        raise GraphError(f"unsupported graph version {doc.get('version')!r}")
    graph = CsrGraph(prefix=doc["prefix"], next_id=int(doc["next_id"]))
    for n in doc["nodes"]:
        graph.nodes[n["id"]] = NodeRecord(np.array(n["scene"]), np.array(n["identity"]), int(n["count"]))
    for e in doc["edges"]:
        graph.edges[(e["src"], e["dst"])] = EdgeRecord(np.array(e["feature"]), int(e["count"]))
    check_graph(graph)
    return graph


def graph_to_json(graph: CsrGraph) -> str:
    return json.dumps(graph_to_dict(graph))


def graph_from_json(text: str) -> CsrGraph:
    return graph_from_dict(json.loads(text))
