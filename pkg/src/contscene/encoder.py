"""Seeded relational encoder for detection pairs.

A pair feature is the normalized sum of three random directions: one for
the pair's discrete relation bucket and one for each instance, through
separate projections for the first and second slot::

    y = normalize(R e_b + P u_i + Q u_j)

Because nothing depends on the viewpoint, two views of an unchanged
layout give identical features, while moving an object changes its
bucket. Optional view noise of scale ``sigma`` is added to the unit
signal before renormalizing, so ``cos(noisy, clean) ~ 1/sqrt(1+sigma^2)``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .csr import LocalGraph, LocalNode
from .numerics import DEFAULT_DIM, normalize
from .world import Detection, Observation, Scene

CLAMP = 3

NODE_CONTEXT = "node-context"
I_SUPPORTS_J = "i-supports-j"
J_SUPPORTS_I = "j-supports-i"
SIBLING = "sibling"
CROSS = "cross-receptacle"
KINDS = (NODE_CONTEXT, I_SUPPORTS_J, J_SUPPORTS_I, SIBLING, CROSS)


def _stable_ints(*parts) -> list[int]:
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def keyed_rng(*parts) -> np.random.Generator:
    """Generator seeded from an arbitrary tuple of ints/strings, stable across runs."""
    return np.random.default_rng(_stable_ints(*parts))


@dataclass(frozen=True)
class RelationBucket:
    kind: str
    delta: tuple[int, int] = (0, 0)
    anchor: tuple = ()  # node buckets: (receptacle id, offset)


@dataclass
class EncoderParams:
    dim: int = DEFAULT_DIM
    sigma: float = 0.0
    seed: int = 0
    _proj: dict = field(default_factory=dict, repr=False, compare=False)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("feature dimension must be positive")
        if self.sigma < 0 or not math.isfinite(self.sigma):
            raise ValueError("sigma must be a finite non-negative number")

    def projection(self, name: str) -> np.ndarray:
        """P or Q: dim x dim, standard normal entries scaled by 1/sqrt(dim)."""
        if name not in self._proj:
            rng = keyed_rng("proj", self.seed, name)
            self._proj[name] = rng.standard_normal((self.dim, self.dim)) / math.sqrt(self.dim)
        return self._proj[name]

    def bucket_column(self, bucket: RelationBucket) -> np.ndarray:
        """Column of R for ``bucket``; R is materialized lazily, one column per bucket seen."""
        key = ("R", bucket)
        if key not in self._cache:
            rng = keyed_rng("R", self.seed, bucket.kind, bucket.delta, bucket.anchor)
            self._cache[key] = rng.standard_normal(self.dim) / math.sqrt(self.dim)
        return self._cache[key]

    def base_identity(self, instance_id: str) -> np.ndarray:
        key = ("u", instance_id)
        if key not in self._cache:
            self._cache[key] = normalize(keyed_rng("id", self.seed, instance_id).standard_normal(self.dim))
        return self._cache[key]

    def slot_term(self, slot: str, instance_id: str) -> np.ndarray:
        key = (slot, instance_id)
        if key not in self._cache:
            self._cache[key] = self.projection(slot) @ self.base_identity(instance_id)
        return self._cache[key]


def _clamp(v: int) -> int:
    return max(-CLAMP, min(CLAMP, v))


def _support_of(scene: Scene, iid: str) -> str:
    """Receptacle an item rests on; a receptacle counts as its own support."""
    if iid in {r.rid for r in scene.receptacles}:
        return iid
    rid = scene.placement(iid).receptacle
    if rid is None:
        raise ValueError(f"{iid} is held and cannot be encoded")
    return rid


def relation_bucket(scene: Scene, i: str, j: str) -> RelationBucket:
    """Ground-truth relation bucket of the ordered pair (i, j)."""
    rids = {r.rid for r in scene.receptacles}
    if i == j:
        if i in rids:
            return RelationBucket(NODE_CONTEXT, anchor=(i, -1))
        p = scene.placement(i)
        return RelationBucket(NODE_CONTEXT, anchor=(p.receptacle, p.offset))
    si, sj = _support_of(scene, i), _support_of(scene, j)
    ci, cj = scene.receptacle(si).cell, scene.receptacle(sj).cell
    delta = (_clamp(cj[0] - ci[0]), _clamp(cj[1] - ci[1]))
    if i in rids and j not in rids and sj == i:
        kind = I_SUPPORTS_J
    elif j in rids and i not in rids and si == j:
        kind = J_SUPPORTS_I
    elif i not in rids and j not in rids and si == sj:
        kind = SIBLING
    else:
        kind = CROSS
    return RelationBucket(kind, delta)


def add_view_noise(
    params: EncoderParams,
    clean: np.ndarray,
    rng: np.random.Generator | None = None,
    draw: np.ndarray | None = None,
) -> np.ndarray:
    """normalize(clean + sigma * g / sqrt(L)) with g standard normal.

    ``g`` comes from ``draw`` if given, else from ``rng``; without either,
    or with sigma 0, ``clean`` is returned unchanged.
    """
    if params.sigma == 0 or (rng is None and draw is None):
        return clean
    g = draw if draw is not None else rng.standard_normal(params.dim)
    return normalize(clean + params.sigma * g / math.sqrt(params.dim))


def clean_pair_feature(params: EncoderParams, scene: Scene, i: str, j: str) -> np.ndarray:
    bucket = relation_bucket(scene, i, j)
    return normalize(params.bucket_column(bucket) + params.slot_term("P", i) + params.slot_term("Q", j))


def scene_feature(
    params: EncoderParams,
    scene: Scene,
    det_i: Detection,
    det_j: Detection,
    noise_rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Feature of the ordered detection pair; ``det_i is det_j`` gives the node feature."""
    if det_i.view != det_j.view:
        raise ValueError("detections come from different observations")
    return add_view_noise(params, clean_pair_feature(params, scene, det_i.instance_id, det_j.instance_id), noise_rng)


def identity_feature(
    params: EncoderParams, instance_id: str, noise_rng: np.random.Generator | None = None
) -> np.ndarray:
    """Layout-independent instance feature, optionally with per-view noise."""
    return add_view_noise(params, params.base_identity(instance_id), noise_rng)


def encode_observation(params: EncoderParams, scene: Scene, obs: Observation, noise_key=None) -> LocalGraph:
    """Local graph of one observation: node, identity and directed edge features.

    Noise comes from a stream keyed by ``(seed, noise_key)`` and is indexed
    by instance, so feature values do not depend on detection order. ``noise_key`` should
    differ between views; it defaults to the pose.
    """
    dets: Sequence[Detection] = obs.detections
    n = len(dets)
    if noise_key is None:
        noise_key = obs.pose.key
    pair_noise = id_noise = None
    if params.sigma > 0 and n:
        # one block per view, indexed by canonical (sorted) instance order
        rng = keyed_rng("noise", params.seed, noise_key)
        id_noise = rng.standard_normal((n, params.dim))
        pair_noise = rng.standard_normal((n, n, params.dim))
    rank = {iid: k for k, iid in enumerate(sorted(d.instance_id for d in dets))}

    def pair(da, db):
        draw = None if pair_noise is None else pair_noise[rank[da.instance_id], rank[db.instance_id]]
        return add_view_noise(params, clean_pair_feature(params, scene, da.instance_id, db.instance_id), draw=draw)

    nodes = []
    for idx, d in enumerate(dets):
        draw = None if id_noise is None else id_noise[rank[d.instance_id]]
        nodes.append(LocalNode(idx, pair(d, d), add_view_noise(params, params.base_identity(d.instance_id), draw=draw)))
    edges = {(a, b): pair(da, db) for a, da in enumerate(dets) for b, db in enumerate(dets) if a != b}
    return LocalGraph(nodes, edges, tuple(dets))
