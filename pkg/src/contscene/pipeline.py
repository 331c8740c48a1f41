"""End-to-end tasks and their metrics.

* two-phase rearrangement (walkthrough, shuffle, unshuffle, restore)
* tracking posed as online clustering, scored by ARI
* triplet retrieval of layout-consistent views
* linear-probe datasets for support / sibling relations
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import csr as csr_mod
from .csr import ChangeReport, CsrGraph, detect_changes, ingest, merge_feature
from .embodied import PlanningError, StateGraph, fuse, plan_to_node, record
from .encoder import (
    I_SUPPORTS_J,
    J_SUPPORTS_I,
    SIBLING,
    EncoderParams,
    add_view_noise,
    clean_pair_feature,
    encode_observation,
    identity_feature,
    keyed_rng,
    relation_bucket,
    scene_feature,
)
from .numerics import (
    DEFAULT_DIM,
    adjusted_rand_index,
    cos_matrix,
    cos_sim,
    max_assignment,
    normalize,
    probe_accuracy,
    train_probe,
)
from .world import (
    Action,
    AgentPose,
    Detection,
    PickUp,
    Place,
    Scene,
    SceneConfig,
    WorldError,
    coverage_explore,
    default_start,
    generate_scene,
    heuristic_explore,
    observe,
    shuffle,
    step,
)


class MetricError(ValueError):
    pass


def derive_seed(*parts) -> int:
    """Stable 31-bit seed derived from a tuple of ints/strings."""
    return int(keyed_rng("seed", *parts).integers(2**31))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _check_ids(*scenes: Scene) -> None:
    ids = set(scenes[0].object_ids)
    for s in scenes[1:]:
        if set(s.object_ids) != ids:
            raise MetricError("scenes do not share the same object ids")


def success_metric(final: Scene, target: Scene, touched: Iterable[str] = ()) -> int:
    """1 iff every object rests on its target receptacle."""
    _check_ids(final, target)
    unknown = set(touched) - set(target.object_ids)
    if unknown:
        raise MetricError(f"touched ids not in scene: {sorted(unknown)}")
    goal = target.receptacle_map()
    return int(all(goal[o] == r for o, r in final.receptacle_map().items()))


def fixed_strict_metric(final: Scene, target: Scene, shuffled: Iterable[str], touched: Iterable[str] = ()) -> float:
    """Fraction of shuffled objects restored; 0 if any other object ends displaced."""
    _check_ids(final, target)
    shuffled = set(shuffled)
    if not shuffled:
        raise MetricError("shuffled set is empty")
    unknown = (shuffled | set(touched)) - set(target.object_ids)
    if unknown:
        raise MetricError(f"ids not in scene: {sorted(unknown)}")
    goal = target.receptacle_map()
    now = final.receptacle_map()
    if any(now[o] != goal[o] for o in goal if o not in shuffled):
        return 0.0
    return sum(now[o] == goal[o] for o in shuffled) / len(shuffled)


def _distance(scene: Scene, target: Scene, oid: str) -> int | None:
    """Manhattan distance from the object's receptacle to its target; None if held."""
    here = scene.object_cell(oid)
    goal = target.object_cell(oid)
    if here is None or goal is None:
        return None
    return abs(here[0] - goal[0]) + abs(here[1] - goal[1])


def _energy(state: Scene, initial: Scene, target: Scene) -> float:
    goal = target.receptacle_map()
    total = 0.0
    for oid, rid in state.receptacle_map().items():
        if rid == goal[oid]:
            continue
        d = _distance(state, target, oid)
        d0 = _distance(initial, target, oid)
        if d is None:
            total += 1.0
        elif d0:
            total += min(1.0, d / d0)
        else:
            total += min(1.0, float(d))
    return total


def energy_metric(initial: Scene, final: Scene, target: Scene) -> float:
    """Ratio of displacement energy after vs before: 0 restored, 1 unchanged, >1 worse."""
    _check_ids(initial, final, target)
    e0 = _energy(initial, initial, target)
    if e0 == 0:
        return 0.0
    return _energy(final, initial, target) / e0


# ---------------------------------------------------------------------------
# Rearrangement
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeConfig:
    scene: SceneConfig = SceneConfig()
    k: int | None = None  # None draws k uniformly from [1, 5] per episode
    dim: int = DEFAULT_DIM
    sigma: float = 0.0
    encoder_seed: int = 0
    node_threshold: float = csr_mod.NODE_THRESHOLD
    object_threshold: float = csr_mod.OBJECT_THRESHOLD
    moved_threshold: float = csr_mod.MOVED_THRESHOLD
    gt_matching: bool = False
    gt_boxes: bool = True
    heuristic_trajectory: bool = True
    seed: int = 0

    def validate(self) -> None:
        for name in ("node_threshold", "object_threshold", "moved_threshold"):
            v = getattr(self, name)
            if not -1.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [-1, 1], got {v}")
        if self.k is not None and not 1 <= self.k <= 5:
            raise ValueError(f"shuffle count k must lie in [1, 5], got {self.k}")
        if not self.gt_boxes:
            raise ValueError("only ground-truth boxes are available in this world")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        self.scene.check()

    def encoder(self) -> EncoderParams:
        return EncoderParams(self.dim, self.sigma, self.encoder_seed)


@dataclass
class EpisodeMetrics:
    success: int
    fixed_strict: float
    energy_ratio: float
    moved_detected: set[str]
    moved_truth: set[str]
    action_count: int
    seed: int = 0
    k: int = 0

    def as_row(self) -> dict:
        return {
            "seed": self.seed,
            "k": self.k,
            "success": self.success,
            "fixed_strict": self.fixed_strict,
            "energy_ratio": self.energy_ratio,
            "moved_detected": " ".join(sorted(self.moved_detected)),
            "moved_truth": " ".join(sorted(self.moved_truth)),
            "action_count": self.action_count,
        }


@dataclass
class PhaseRecord:
    """Everything one trajectory produced."""

    csr: CsrGraph
    states: StateGraph
    end_pose: AgentPose
    # (state id, node id) -> viewer-relative region where the node was seen
    regions: dict[tuple[str, str], tuple[int, int, int]] = field(default_factory=dict)
    # evaluator-only: node id -> simulator instance ids merged into it
    truth: dict[str, set[str]] = field(default_factory=dict)


def build_phase(
    scene: Scene,
    start: AgentPose,
    actions: Sequence[Action],
    params: EncoderParams,
    node_threshold: float,
    prefix: str,
    gt_matching: bool = False,
) -> PhaseRecord:
    """Walk ``actions`` from ``start``, building the CSR and state graph."""
    phase = PhaseRecord(CsrGraph(prefix=prefix), StateGraph(), start)
    by_instance: dict[str, str] = {}
    pose = start
    prev_state = None
    prev_action = None
    for t in range(len(actions) + 1):
        if t > 0:
            prev_action = actions[t - 1]
            pose, scene, ok = step(scene, pose, prev_action)
            if not ok:
                raise WorldError(f"exploration action {prev_action} failed at step {t}")
        obs = observe(scene, pose)
        local = encode_observation(params, scene, obs, noise_key=(prefix, t))
        forced = None
        if gt_matching:
            forced = {
                i: by_instance[d.instance_id] for i, d in enumerate(local.detections) if d.instance_id in by_instance
            }
        _, report = ingest(phase.csr, local, node_threshold, forced)
        for i, d in enumerate(local.detections):
            nid = report.mapping[i]
            by_instance.setdefault(d.instance_id, nid)
            phase.truth.setdefault(nid, set()).add(d.instance_id)
        _, sid = record(phase.states, prev_state, prev_action if t > 0 else None, pose, report.mapping.values())
        for i, d in enumerate(local.detections):
            phase.regions.setdefault((sid, report.mapping[i]), d.region)
        prev_state = sid
    phase.end_pose = pose
    return phase


def _gt_correspondences(walk: PhaseRecord, un: PhaseRecord) -> list[tuple[str, str]]:
    owner = {}
    for nid, insts in un.truth.items():
        for inst in insts:
            owner.setdefault(inst, nid)
    pairs = []
    for nid, insts in walk.truth.items():
        for inst in sorted(insts):
            if inst in owner:
                pairs.append((nid, owner[inst]))
                break
    return pairs


@dataclass
class EpisodeOutcome:
    metrics: EpisodeMetrics
    target: Scene
    initial: Scene
    final: Scene
    walk: PhaseRecord
    un: PhaseRecord
    fused: StateGraph
    changes: ChangeReport


class _Restorer:
    """Executes pick-and-place plans over the fused state graph."""

    def __init__(self, scene, pose, fused, params, walk, un, gt_matching):
        self.scene = scene
        self.pose = pose
        self.fused = fused
        self.params = params
        self.walk = walk
        self.un = un
        self.gt = gt_matching
        self.touched: set[str] = set()
        self.actions = 0
        self._views = 0

    def _act(self, action: Action) -> bool:
        self.pose, self.scene, ok = step(self.scene, self.pose, action)
        self.actions += 1
        return ok

    def goto(self, node: str) -> str | None:
        try:
            plan = plan_to_node(self.fused, self.pose.key, node)
        except PlanningError:
            return None
        for a in plan.actions:
            if not self._act(a):
                return None
        return plan.goal_state

    def _pick_handle(self, node: str) -> str | None:
        dets = observe(self.scene, self.pose).detections
        if not dets:
            return None
        if self.gt:
            want = self.un.truth.get(node, set())
            for d in dets:
                if d.instance_id in want:
                    return d.instance_id
            return None
        self._views += 1
        local = encode_observation(self.params, self.scene, observe(self.scene, self.pose), ("exec", self._views))
        target = self.un.csr.nodes[node].identity
        scores = [cos_sim(n.identity, target) for n in local.nodes]
        return local.detections[int(np.argmax(scores))].instance_id

    def _surface_at(self, region) -> str | None:
        for d in observe(self.scene, self.pose).detections:
            if d.region[:2] == region[:2] and d.region[2] == -1:
                return d.instance_id
        return None

    def place_as_seen(self, phase: PhaseRecord, node: str, state: str) -> bool:
        region = phase.regions.get((state, node))
        if region is None:
            return False
        rid = self._surface_at(region)
        return rid is not None and self._act(Place(rid))

    def restore(self, walk_node: str, un_node: str) -> str:
        """Returns 'done', 'skipped' or 'blocked' (destination full, object returned)."""
        source_state = self.goto(un_node)
        if source_state is None:
            return "skipped"
        handle = self._pick_handle(un_node)
        if handle is None or not self._act(PickUp(handle)):
            return "skipped"
        self.touched.add(handle)
        dest_state = self.goto(walk_node)
        if dest_state is not None and self.place_as_seen(self.walk, walk_node, dest_state):
            return "done"
        # destination unusable: put the object back where it was found
        back = self.goto(un_node)
        if back is not None and self.place_as_seen(self.un, un_node, back):
            return "blocked"
        return "skipped"


def _episode_k(cfg: EpisodeConfig) -> int:
    if cfg.k is not None:
        return cfg.k
    return int(keyed_rng("k", cfg.seed).integers(1, 6))


def run_episode(cfg: EpisodeConfig) -> EpisodeOutcome:
    """Full two-phase rearrangement episode, with every intermediate kept."""
    cfg.validate()
    params = cfg.encoder()
    target = generate_scene(cfg.scene, derive_seed("scene", cfg.seed))
    start = default_start(target)
    k = min(_episode_k(cfg), len(target.objects))
    initial, moved = shuffle(target, k, derive_seed("shuffle", cfg.seed))

    if cfg.heuristic_trajectory:
        walk_actions = heuristic_explore(target, moved, start, "walkthrough")
        un_actions = heuristic_explore(initial, moved, start, "unshuffle")
    else:
        walk_actions = coverage_explore(target, start)
        un_actions = coverage_explore(initial, start)

    walk = build_phase(target, start, walk_actions, params, cfg.node_threshold, "w", cfg.gt_matching)
    un = build_phase(initial, start, un_actions, params, cfg.node_threshold, "u", cfg.gt_matching)
    fused = fuse(walk.states, un.states)

    forced = _gt_correspondences(walk, un) if cfg.gt_matching else None
    changes = detect_changes(walk.csr, un.csr, cfg.object_threshold, cfg.moved_threshold, forced)

    restorer = _Restorer(initial, un.end_pose, fused, params, walk, un, cfg.gt_matching)
    queue = sorted(changes.moved, key=lambda c: (-c[2], c[0], c[1]))
    deferred = []
    for w, u, _ in queue:
        if restorer.restore(w, u) == "blocked":
            deferred.append((w, u))
    for w, u in deferred:
        restorer.restore(w, u)

    final = restorer.scene
    detected = set()
    for w, _, _ in changes.moved:
        detected |= {i for i in walk.truth.get(w, ()) if i in set(target.object_ids)}
    metrics = EpisodeMetrics(
        success=success_metric(final, target, restorer.touched),
        fixed_strict=fixed_strict_metric(final, target, moved, restorer.touched),
        energy_ratio=energy_metric(initial, final, target),
        moved_detected=detected,
        moved_truth=set(moved),
        action_count=len(walk_actions) + len(un_actions) + restorer.actions,
        seed=cfg.seed,
        k=k,
    )
    return EpisodeOutcome(metrics, target, initial, final, walk, un, fused, changes)


def run_rearrangement(cfg: EpisodeConfig) -> EpisodeMetrics:
    return run_episode(cfg).metrics


def run_many(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """Map ``fn`` over ``items`` in order, optionally across worker processes."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def bootstrap_ci(values: Sequence[float], n_boot: int = 2000, level: float = 0.95, seed: int = 0):
    """Percentile bootstrap interval for the mean."""
    vals = np.asarray(values, dtype=np.float64)
    if len(vals) == 0:
        raise ValueError("no values to bootstrap")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(vals), size=(n_boot, len(vals)))
    means = vals[idx].mean(axis=1)
    alpha = (1.0 - level) / 2
    return float(np.quantile(means, alpha)), float(np.quantile(means, 1 - alpha))


def summarize_episodes(metrics: Sequence[EpisodeMetrics], seed: int = 0) -> dict:
    """Aggregate with the three rearrangement columns (percentages for the first two)."""
    if not metrics:
        return {"episodes": 0}
    succ = [m.success for m in metrics]
    fixed = [m.fixed_strict for m in metrics]
    energy = [m.energy_ratio for m in metrics]
    lo, hi = bootstrap_ci(succ, seed=seed)
    return {
        "episodes": len(metrics),
        "success_pct": 100.0 * float(np.mean(succ)),
        "success_pct_ci95": [100.0 * lo, 100.0 * hi],
        "fixed_strict_pct": 100.0 * float(np.mean(fixed)),
        "energy_ratio_mean": float(np.mean(energy)),
        "moved_detection_exact_pct": 100.0 * float(np.mean([m.moved_detected == m.moved_truth for m in metrics])),
    }


# ---------------------------------------------------------------------------
# Tracking
# ---------------------------------------------------------------------------


@dataclass
class TrackStream:
    frames: list[list[np.ndarray]]
    labels: list[list] | None = None  # hidden from clustering; None for unlabeled streams

    def flat_labels(self) -> list:
        if self.labels is None:
            raise ValueError("stream has no truth labels")
        return [lab for frame in self.labels for lab in frame]


def make_track_stream(
    params: EncoderParams, seed: int = 0, scene_config: SceneConfig = SceneConfig()
) -> TrackStream:
    """Identity features of every detection along a room-covering trajectory."""
    scene = generate_scene(scene_config, derive_seed("track-scene", seed))
    start = default_start(scene)
    frames, labels = [], []
    pose = start
    actions = [None] + coverage_explore(scene, start)
    for t, a in enumerate(actions):
        if a is not None:
            pose, scene, _ = step(scene, pose, a)
        dets = observe(scene, pose).detections
        if not dets:
            continue
        feats = [
            identity_feature(params, d.instance_id, keyed_rng("track", params.seed, seed, t, d.instance_id) if params.sigma else None)
            for d in dets
        ]
        frames.append(feats)
        labels.append([d.instance_id for d in dets])
    return TrackStream(frames, labels)


def cluster_stream(stream: TrackStream, node_threshold: float = csr_mod.NODE_THRESHOLD, update: bool = True) -> list[int]:
    """Online clustering: each frame is matched to existing clusters by maximal assignment."""
    centers: list[np.ndarray] = []
    counts: list[int] = []
    out: list[int] = []
    for feats in stream.frames:
        assigned = [-1] * len(feats)
        if centers and feats:
            scores = cos_matrix(centers, feats)
            for r, c in max_assignment(scores).pairs:
                if scores[r, c] > node_threshold:
                    assigned[c] = r
        for c, f in enumerate(feats):
            r = assigned[c]
            if r < 0:
                centers.append(np.asarray(f, dtype=np.float64))
                counts.append(1)
                assigned[c] = len(centers) - 1
            else:
                if update:
                    centers[r] = merge_feature(centers[r], counts[r], f)
                counts[r] += 1
        out.extend(assigned)
    return out


def run_tracking(stream: TrackStream, node_threshold: float = csr_mod.NODE_THRESHOLD, update: bool = True):
    """Cluster the stream; returns (assignments, ARI against truth or None if unlabeled)."""
    if not stream.frames:
        raise ValueError("empty track stream")
    assignments = cluster_stream(stream, node_threshold, update)
    if stream.labels is None or len(assignments) < 2:
        return assignments, (1.0 if stream.labels is not None else None)
    return assignments, adjusted_rand_index(assignments, stream.flat_labels())


def threshold_sweep(streams: Sequence[TrackStream], thresholds: Sequence[float], update: bool = True) -> dict[float, float]:
    """Mean ARI per matching threshold (the oracle-tuned operating point is the max)."""
    return {t: float(np.mean([run_tracking(s, t, update)[1] for s in streams])) for t in thresholds}


def save_track_stream(stream: TrackStream, path) -> None:
    """JSON lines, one frame per line: {"detections": [{"feature": [...], "label": ...}]}"""
    with open(path, "w", encoding="utf-8") as fh:
        for i, feats in enumerate(stream.frames):
            dets = []
            for j, f in enumerate(feats):
                d = {"feature": np.asarray(f).tolist()}
                if stream.labels is not None:
                    d["label"] = stream.labels[i][j]
                dets.append(d)
            fh.write(json.dumps({"frame": i, "detections": dets}) + "\n")


def load_track_stream(path) -> TrackStream:
    frames, labels = [], []
    labelled = True
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            doc = json.loads(line)
            try:
                dets = doc["detections"]
                frames.append([normalize(d["feature"]) for d in dets])
            except (KeyError, TypeError) as exc:
                raise ValueError(f"line {lineno}: malformed frame") from exc
            labels.append([d.get("label") for d in dets])
            labelled &= all("label" in d for d in dets)
    return TrackStream(frames, labels if labelled else None)


# ---------------------------------------------------------------------------
# Triplet retrieval
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairContext:
    """An 'image' of a pair: the layout, the camera pose and the ordered pair."""

    scene: Scene
    pose: AgentPose
    pair: tuple[str, str]

    def detections(self) -> tuple[Detection, Detection]:
        found = {d.instance_id: d for d in observe(self.scene, self.pose).detections}
        try:
            return found[self.pair[0]], found[self.pair[1]]
        except KeyError as exc:
            raise ValueError(f"pair {self.pair} not visible from {self.pose.key}") from exc


Triplet = tuple[PairContext, PairContext, PairContext]


def check_triplet(tri: Triplet) -> None:
    q, p, n = tri
    if not (q.pair == p.pair == n.pair):
        raise ValueError("triplet contexts refer to different pairs")
    if q.scene != p.scene:
        raise ValueError("query and positive must share a layout")
    if p.pose != n.pose:
        raise ValueError("negative must be taken from the positive's pose")
    before, after = p.scene.receptacle_map(), n.scene.receptacle_map()
    if before.keys() != after.keys():
        raise ValueError("negative layout has different objects")
    diff = [o for o in before if before[o] != after[o]]
    if len(diff) != 1 or diff[0] not in q.pair:
        raise ValueError("negative must relocate exactly one object of the pair")
    for ctx in tri:
        ctx.detections()


def make_triplets(n: int, seed: int = 0, scene_config: SceneConfig = SceneConfig()) -> list[Triplet]:
    """Seeded query/positive/negative contexts.

    The negative relocates one object of the pair to another receptacle
    visible from the positive pose; relocations that leave the pair's
    relation bucket unchanged are rejected, since they are invisible to a
    bucketed encoder.
    """
    out: list[Triplet] = []
    scene_idx = 0
    rng = np.random.default_rng(derive_seed("triplets", seed))
    while len(out) < n:
        scene = generate_scene(scene_config, derive_seed("triplet-scene", seed, scene_idx))
        scene_idx += 1
        start = default_start(scene)
        route = [start]
        for a in coverage_explore(scene, start):
            route.append(step(scene, route[-1], a)[0])
        poses = sorted(set(route))
        seen: dict[tuple[str, str], list[AgentPose]] = {}
        for pose in poses:
            objs = [d.instance_id for d in observe(scene, pose).detections if d.region[2] >= 0]
            for i in objs:
                for j in objs:
                    if i != j:
                        seen.setdefault((i, j), []).append(pose)
        candidates = sorted(pair for pair, ps in seen.items() if len(ps) >= 2)
        per_scene = 0
        for _ in range(4 * len(candidates)):
            if not candidates or len(out) >= n or per_scene >= 20:
                break
            pair = candidates[int(rng.integers(len(candidates)))]
            p1, p2 = [seen[pair][i] for i in rng.choice(len(seen[pair]), 2, replace=False)]
            mover = pair[int(rng.integers(2))]
            src = scene.placement(mover).receptacle
            visible = {d.instance_id for d in observe(scene, p2).detections if d.region[2] == -1}
            options = [r for r in sorted(visible) if r != src and scene.free_offsets(r)]
            if not options:
                continue
            dst = options[int(rng.integers(len(options)))]
            moved = scene.with_placement(mover, dst, scene.free_offsets(dst)[0])
            if relation_bucket(moved, *pair) == relation_bucket(scene, *pair):
                continue
            tri = (PairContext(scene, p1, pair), PairContext(scene, p2, pair), PairContext(moved, p2, pair))
            check_triplet(tri)
            out.append(tri)
            per_scene += 1
    return out


def run_retrieval(triplets: Sequence[Triplet], params: EncoderParams, noise_seed: int = 0) -> float:
    """Fraction of triplets where the query is strictly closer to the positive."""
    if not triplets:
        raise ValueError("no triplets")
    correct = 0
    for t, tri in enumerate(triplets):
        check_triplet(tri)
        feats = []
        for role, ctx in zip("qpn", tri):
            di, dj = ctx.detections()
            rng = keyed_rng("retrieval", params.seed, noise_seed, t, role) if params.sigma else None
            feats.append(scene_feature(params, ctx.scene, di, dj, rng))
        q, p, n = feats
        correct += cos_sim(q, p) > cos_sim(q, n)
    return correct / len(triplets)


def random_feature_retrieval(triplets: Sequence[Triplet], dim: int = DEFAULT_DIM, seed: int = 0) -> float:
    """Chance baseline: every context gets an independent random unit feature."""
    if not triplets:
        raise ValueError("no triplets")
    rng = np.random.default_rng(seed)
    correct = 0
    for _ in triplets:
        q, p, n = (normalize(rng.standard_normal(dim)) for _ in range(3))
        correct += cos_sim(q, p) > cos_sim(q, n)
    return correct / len(triplets)


# ---------------------------------------------------------------------------
# Linear probes
# ---------------------------------------------------------------------------

SUPPORT_CLASSES = ("i-supports-j", "j-supports-i", "none")
SIBLING_CLASSES = ("not-sibling", "sibling")


@dataclass
class ProbeDataset:
    task: str
    class_names: tuple[str, ...]
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    train_pairs: list = field(default_factory=list)
    test_pairs: list = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def _covisible_pairs(scene: Scene) -> list[tuple[str, str]]:
    start = default_start(scene)
    pose = start
    pairs = set()
    for a in [None] + coverage_explore(scene, start):
        if a is not None:
            pose, scene, _ = step(scene, pose, a)
        ids = [d.instance_id for d in observe(scene, pose).detections]
        pairs.update((i, j) for i in ids for j in ids if i != j)
    return sorted(pairs)


def pair_label(scene: Scene, pair: tuple[str, str], task: str) -> int | None:
    kind = relation_bucket(scene, *pair).kind
    if task == "support":
        return {I_SUPPORTS_J: 0, J_SUPPORTS_I: 1}.get(kind, 2)
    if task == "sibling":
        rids = {r.rid for r in scene.receptacles}
        if pair[0] in rids or pair[1] in rids:
            return None
        return int(kind == SIBLING)
    raise ValueError(f"unknown probe task {task!r}")


def build_probe_dataset(
    scenes: Sequence[Scene],
    task: str,
    params: EncoderParams | None = None,
    seed: int = 0,
    train_fraction: float = 0.8,
) -> ProbeDataset:
    """Balanced edge-feature dataset, split by scene so no scene is in both halves."""
    if task not in ("support", "sibling"):
        raise ValueError(f"unknown probe task {task!r}")
    if len(scenes) < 2:
        raise ValueError("need at least two scenes for a scene-level split")
    params = params or EncoderParams()
    names = SUPPORT_CLASSES if task == "support" else SIBLING_CLASSES
    n_train = min(len(scenes) - 1, max(1, round(train_fraction * len(scenes))))
    rng = np.random.default_rng(derive_seed("probe", seed, task))

    def collect(subset, offset):
        by_class: list[list] = [[] for _ in names]
        for s_idx, scene in enumerate(subset, start=offset):
            for pair in _covisible_pairs(scene):
                label = pair_label(scene, pair, task)
                if label is None:
                    continue
                noise = keyed_rng("probe-noise", params.seed, seed, s_idx, pair) if params.sigma else None
                feat = add_view_noise(params, clean_pair_feature(params, scene, *pair), noise)
                by_class[label].append((feat, label, (s_idx, pair)))
        for c, items in enumerate(by_class):
            if not items:
                raise ValueError(f"probe class {names[c]!r} is empty")
        m = min(len(items) for items in by_class)
        chosen = []
        for items in by_class:
            idx = np.sort(rng.choice(len(items), m, replace=False))
            chosen += [items[i] for i in idx]
        x = np.vstack([c[0] for c in chosen])
        y = np.array([c[1] for c in chosen], dtype=np.int64)
        return x, y, [c[2] for c in chosen]

    tr_x, tr_y, tr_p = collect(scenes[:n_train], 0)
    te_x, te_y, te_p = collect(scenes[n_train:], n_train)
    return ProbeDataset(task, names, tr_x, tr_y, te_x, te_y, tr_p, te_p)


def run_probe(ds: ProbeDataset, lr: float = 0.5, epochs: int = 500, shuffle_seed: int | None = None) -> float:
    """Held-out accuracy of a linear probe; ``shuffle_seed`` permutes training labels (control)."""
    y = ds.train_y
    if shuffle_seed is not None:
        y = np.random.default_rng(shuffle_seed).permutation(y)
    model = train_probe(ds.train_x, y, ds.num_classes, lr=lr, epochs=epochs)
    return probe_accuracy(model, ds.test_x, ds.test_y)
