"""Deterministic 2D gridworld: rooms, receptacles, movable objects and an agent.

Coordinates are integer ``(x, y)`` cells with ``N`` pointing toward +y.
Receptacles occupy one cell each and hold up to ``capacity`` objects at
integer offsets. Walls and receptacle cells are not traversable. Walls
block line of sight; receptacles and objects do not.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, replace
from typing import Iterable, Mapping

import numpy as np

SCENE_VERSION = 1

Cell = tuple[int, int]

HEADINGS = ("N", "E", "S", "W")
_DIRS = {"N": (0, 1), "E": (1, 0), "S": (0, -1), "W": (-1, 0)}

NAV_TAGS = ("MoveForward", "MoveBack", "MoveLeft", "MoveRight", "RotateLeft", "RotateRight")
MANIP_TAGS = ("PickUp", "Place")
ACTION_TAGS = NAV_TAGS + MANIP_TAGS

VIEW_DEPTH = 5
VIEW_HALF_WIDTH = 2


class WorldError(ValueError):
    """Invalid world construction or request (not an in-world action failure)."""


class MalformedActionError(WorldError):
    pass


class UnreachableError(WorldError):
    pass


@dataclass(frozen=True)
class Action:
    tag: str
    target: str | None = None

    def __post_init__(self):
        if self.tag not in ACTION_TAGS:
            raise MalformedActionError(f"unknown action tag {self.tag!r}")
        if self.tag in MANIP_TAGS and not self.target:
            raise MalformedActionError(f"{self.tag} needs a target id")
        if self.tag in NAV_TAGS and self.target is not None:
            raise MalformedActionError(f"{self.tag} takes no target")

    @property
    def is_navigation(self) -> bool:
        return self.tag in NAV_TAGS

    def __str__(self):
        return self.tag if self.target is None else f"{self.tag}({self.target})"


MoveForward = Action("MoveForward")
MoveBack = Action("MoveBack")
MoveLeft = Action("MoveLeft")
MoveRight = Action("MoveRight")
RotateLeft = Action("RotateLeft")
RotateRight = Action("RotateRight")
NAV_ACTIONS = (MoveForward, MoveBack, MoveLeft, MoveRight, RotateLeft, RotateRight)

INVERSE = {
    MoveForward: MoveBack,
    MoveBack: MoveForward,
    MoveLeft: MoveRight,
    MoveRight: MoveLeft,
    RotateLeft: RotateRight,
    RotateRight: RotateLeft,
}


def PickUp(instance_id: str) -> Action:
    return Action("PickUp", instance_id)


def Place(receptacle_id: str) -> Action:
    return Action("Place", receptacle_id)


def action_from_str(text: str) -> Action:
    if "(" in text and text.endswith(")"):
        tag, arg = text[:-1].split("(", 1)
        return Action(tag, arg)
    return Action(text)


@dataclass(frozen=True, order=True)
class AgentPose:
    cell: Cell
    heading: str = "N"

    def __post_init__(self):
        if self.heading not in HEADINGS:
            raise WorldError(f"bad heading {self.heading!r}")

    @property
    def key(self) -> str:
        return f"{self.cell[0]},{self.cell[1]},{self.heading}"

    @classmethod
    def from_key(cls, key: str) -> "AgentPose":
        x, y, h = key.split(",")
        return cls((int(x), int(y)), h)


@dataclass(frozen=True)
class Receptacle:
    rid: str
    cell: Cell
    capacity: int


@dataclass(frozen=True)
class Placement:
    oid: str
    receptacle: str | None  # None while held by the agent
    offset: int = -1


@dataclass(frozen=True)
class Scene:
    width: int
    height: int
    receptacles: tuple[Receptacle, ...]
    objects: tuple[Placement, ...]
    walls: frozenset = frozenset()
    seed: int = 0

    def __post_init__(self):
        validate_scene(self)

    # lookups are small linear scans; scenes hold tens of items
    def receptacle(self, rid: str) -> Receptacle:
        for r in self.receptacles:
            if r.rid == rid:
                return r
        raise WorldError(f"no receptacle {rid!r}")

    def placement(self, oid: str) -> Placement:
        for p in self.objects:
            if p.oid == oid:
                return p
        raise WorldError(f"no object {oid!r}")

    @property
    def object_ids(self) -> list[str]:
        return [p.oid for p in self.objects]

    @property
    def held(self) -> str | None:
        for p in self.objects:
            if p.receptacle is None:
                return p.oid
        return None

    def object_cell(self, oid: str) -> Cell | None:
        rid = self.placement(oid).receptacle
        return None if rid is None else self.receptacle(rid).cell

    def receptacle_map(self) -> dict[str, str | None]:
        return {p.oid: p.receptacle for p in self.objects}

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def blocked_cells(self) -> set[Cell]:
        return set(self.walls) | {r.cell for r in self.receptacles}

    def traversable(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and cell not in self.walls and all(r.cell != cell for r in self.receptacles)

    def free_offsets(self, rid: str) -> list[int]:
        rec = self.receptacle(rid)
        taken = {p.offset for p in self.objects if p.receptacle == rid}
        return [o for o in range(rec.capacity) if o not in taken]

    def with_placement(self, oid: str, rid: str | None, offset: int = -1) -> "Scene":
        objects = tuple(
            Placement(oid, rid, offset if rid is not None else -1) if p.oid == oid else p for p in self.objects
        )
        return replace(self, objects=objects)


def validate_scene(scene: Scene) -> None:
    if scene.width <= 0 or scene.height <= 0:
        raise WorldError("scene dimensions must be positive")
    rids = [r.rid for r in scene.receptacles]
    if len(set(rids)) != len(rids):
        raise WorldError("duplicate receptacle id")
    cells = [r.cell for r in scene.receptacles]
    if len(set(cells)) != len(cells):
        raise WorldError("two receptacles share a cell")
    for c in list(cells) + list(scene.walls):
        if not scene.in_bounds(c):
            raise WorldError(f"cell {c} out of bounds")
    if set(cells) & set(scene.walls):
        raise WorldError("receptacle cell overlaps a wall")
    oids = [p.oid for p in scene.objects]
    if len(set(oids)) != len(oids):
        raise WorldError("duplicate object id")
    if set(oids) & set(rids):
        raise WorldError("object and receptacle ids collide")
    caps = {r.rid: r.capacity for r in scene.receptacles}
    slots = set()
    held = 0
    for p in scene.objects:
        if p.receptacle is None:
            held += 1
            continue
        if p.receptacle not in caps:
            raise WorldError(f"object {p.oid} on unknown receptacle {p.receptacle}")
        if not 0 <= p.offset < caps[p.receptacle]:
            raise WorldError(f"object {p.oid} offset {p.offset} outside receptacle capacity")
        if (p.receptacle, p.offset) in slots:
            raise WorldError(f"slot {(p.receptacle, p.offset)} holds two objects")
        slots.add((p.receptacle, p.offset))
    if held > 1:
        raise WorldError("agent can hold at most one object")


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneConfig:
    width: int = 9
    height: int = 9
    n_receptacles: int = 5
    n_objects: int = 8
    capacity: int = 3
    n_walls: int = 6

    def check(self) -> None:
        if self.width < 2 or self.height < 2:
            raise WorldError("grid must be at least 2x2")
        if min(self.n_receptacles, self.n_objects, self.n_walls) < 0 or self.capacity < 1:
            raise WorldError("counts must be non-negative and capacity positive")
        if self.n_objects > self.n_receptacles * self.capacity:
            raise WorldError(
                f"{self.n_objects} objects do not fit on {self.n_receptacles} receptacles of capacity {self.capacity}"
            )
        if self.n_receptacles + self.n_walls + 1 > self.width * self.height:
            raise WorldError("receptacles and walls do not fit in the grid")


def _neighbors(cell: Cell):
    x, y = cell
    return ((x, y + 1), (x + 1, y), (x, y - 1), (x - 1, y))


def _reachable(start: Cell, traversable) -> dict[Cell, int]:
    dist = {start: 0}
    queue = deque([start])
    while queue:
        c = queue.popleft()
        for n in _neighbors(c):
            if n not in dist and traversable(n):
                dist[n] = dist[c] + 1
                queue.append(n)
    return dist


def generate_scene(config: SceneConfig = SceneConfig(), seed: int = 0) -> Scene:
    """Random room for ``(config, seed)``; identical inputs give identical scenes.

    Layouts are resampled until the free floor is connected and every
    receptacle touches free floor (so it can be viewed from an adjacent cell).
    """
    config.check()
    rng = np.random.default_rng(seed)
    all_cells = [(x, y) for y in range(config.height) for x in range(config.width)]
    for _ in range(1000):
        order = rng.permutation(len(all_cells))
        picked = [all_cells[i] for i in order[: config.n_receptacles + config.n_walls]]
        rec_cells = picked[: config.n_receptacles]
        walls = frozenset(picked[config.n_receptacles :])
        blocked = set(rec_cells) | walls
        free = [c for c in all_cells if c not in blocked]
        if not free:
            continue

        def ok(c, blocked=blocked):
            return 0 <= c[0] < config.width and 0 <= c[1] < config.height and c not in blocked

        if len(_reachable(free[0], ok)) != len(free):
            continue
        if not all(any(ok(n) for n in _neighbors(c)) for c in rec_cells):
            continue
        break
    else:
        raise WorldError("could not generate a connected layout; reduce walls or receptacles")

    receptacles = tuple(Receptacle(f"R{i}", rec_cells[i], config.capacity) for i in range(config.n_receptacles))
    slots = [(r.rid, o) for r in receptacles for o in range(config.capacity)]
    chosen = rng.choice(len(slots), size=config.n_objects, replace=False) if config.n_objects else []
    objects = tuple(Placement(f"O{i}", *slots[int(s)]) for i, s in enumerate(chosen))
    return Scene(config.width, config.height, receptacles, objects, walls, seed)


def default_start(scene: Scene) -> AgentPose:
    """The room entrance: first free cell in row-major order, facing N."""
    for y in range(scene.height):
        for x in range(scene.width):
            if scene.traversable((x, y)):
                return AgentPose((x, y), "N")
    raise WorldError("scene has no free cell")


# ---------------------------------------------------------------------------
# Visibility
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Detection:
    """One visible item. ``region`` is ``(forward, lateral, slot)`` relative to the
    viewer, with ``slot = -1`` for a receptacle surface. ``instance_id`` is the
    simulator handle: used for actions and by evaluators, never for matching."""

    instance_id: str
    region: tuple[int, int, int]
    view: AgentPose


@dataclass(frozen=True)
class Observation:
    pose: AgentPose
    detections: tuple[Detection, ...]


def _frame(pose: AgentPose, cell: Cell) -> tuple[int, int]:
    dx, dy = _DIRS[pose.heading]
    rx, ry = cell[0] - pose.cell[0], cell[1] - pose.cell[1]
    return rx * dx + ry * dy, rx * dy - ry * dx


def line_of_sight(scene: Scene, a: Cell, b: Cell) -> bool:
    """True unless the segment between cell centres crosses a wall's interior."""
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    for wx, wy in scene.walls:
        if not (min(ax, bx) - 1 < wx < max(ax, bx) + 1 and min(ay, by) - 1 < wy < max(ay, by) + 1):
            continue
        lo, hi = 0.0, 1.0
        hit = True
        for p, d, c in ((ax, dx, wx), (ay, dy, wy)):
            if d == 0:
                if abs(p - c) >= 0.5:
                    hit = False
                    break
                continue
            t1 = (c - 0.5 - p) / d
            t2 = (c + 0.5 - p) / d
            lo = max(lo, min(t1, t2))
            hi = min(hi, max(t1, t2))
        if hit and lo < hi:
            return False
    return True


def visible_cell(scene: Scene, pose: AgentPose, cell: Cell, depth=VIEW_DEPTH, half_width=VIEW_HALF_WIDTH) -> bool:
    forward, lateral = _frame(pose, cell)
    if not (1 <= forward <= depth and abs(lateral) <= half_width):
        return False
    return line_of_sight(scene, pose.cell, cell)


def observe(scene: Scene, pose: AgentPose, depth: int = VIEW_DEPTH, half_width: int = VIEW_HALF_WIDTH) -> Observation:
    """Ground-truth detections: every receptacle in the view frustum and the
    objects resting on it."""
    dets = []
    for rec in scene.receptacles:
        if not visible_cell(scene, pose, rec.cell, depth, half_width):
            continue
        f, lat = _frame(pose, rec.cell)
        dets.append(Detection(rec.rid, (f, lat, -1), pose))
        for p in scene.objects:
            if p.receptacle == rec.rid:
                dets.append(Detection(p.oid, (f, lat, p.offset), pose))
    dets.sort(key=lambda d: (d.region, d.instance_id))
    return Observation(pose, tuple(dets))


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------


def _rotate(heading: str, steps: int) -> str:
    return HEADINGS[(HEADINGS.index(heading) + steps) % 4]


def _move_delta(heading: str, tag: str) -> Cell:
    dx, dy = _DIRS[heading]
    return {
        "MoveForward": (dx, dy),
        "MoveBack": (-dx, -dy),
        "MoveRight": (dy, -dx),
        "MoveLeft": (-dy, dx),
    }[tag]


def step(scene: Scene, pose: AgentPose, action: Action) -> tuple[AgentPose, Scene, bool]:
    """Apply one action. Failed actions return the inputs unchanged with ``False``."""
    if not isinstance(action, Action):
        raise MalformedActionError(f"not an action: {action!r}")
    tag = action.tag
    if tag == "RotateLeft":
        return AgentPose(pose.cell, _rotate(pose.heading, -1)), scene, True
    if tag == "RotateRight":
        return AgentPose(pose.cell, _rotate(pose.heading, 1)), scene, True
    if tag in NAV_TAGS:
        dx, dy = _move_delta(pose.heading, tag)
        cell = (pose.cell[0] + dx, pose.cell[1] + dy)
        if not scene.traversable(cell):
            return pose, scene, False
        return AgentPose(cell, pose.heading), scene, True

    visible = {d.instance_id for d in observe(scene, pose).detections}
    rids = {r.rid for r in scene.receptacles}
    if tag == "PickUp":
        oid = action.target
        if scene.held is not None or oid in rids or oid not in visible:
            return pose, scene, False
        return pose, scene.with_placement(oid, None), True
    # Place
    held = scene.held
    rid = action.target
    if held is None or rid not in rids or rid not in visible:
        return pose, scene, False
    free = scene.free_offsets(rid)
    if not free:
        return pose, scene, False
    return pose, scene.with_placement(held, rid, free[0]), True


# ---------------------------------------------------------------------------
# Shuffling
# ---------------------------------------------------------------------------


def shuffle(scene: Scene, k: int, seed: int = 0) -> tuple[Scene, dict[str, tuple[str, str]]]:
    """Move ``k`` distinct objects to receptacles other than their current ones.

    Returns the new scene and ``{object id: (from receptacle, to receptacle)}``.
    """
    placed = sorted(p.oid for p in scene.objects if p.receptacle is not None)
    if not 1 <= k <= len(placed):
        raise WorldError(f"cannot shuffle {k} of {len(placed)} objects")
    if len(scene.receptacles) < 2:
        raise WorldError("shuffle needs at least two receptacles")
    rng = np.random.default_rng(seed)
    chosen = [placed[i] for i in sorted(rng.choice(len(placed), size=k, replace=False))]
    moved = {}
    for oid in chosen:
        src = scene.placement(oid).receptacle
        options = [r.rid for r in scene.receptacles if r.rid != src and scene.free_offsets(r.rid)]
        if not options:
            raise WorldError(f"no free receptacle to move {oid} to")
        dst = options[int(rng.integers(len(options)))]
        scene = scene.with_placement(oid, dst, scene.free_offsets(dst)[0])
        moved[oid] = (src, dst)
    return scene, moved


# ---------------------------------------------------------------------------
# Exploration
# ---------------------------------------------------------------------------


def viewpoint(scene: Scene, target: Cell, reachable: Iterable[Cell]) -> AgentPose | None:
    """Closest (Euclidean) reachable cell and heading from which ``target`` is visible."""
    best = None
    for cell in reachable:
        for h in HEADINGS:
            pose = AgentPose(cell, h)
            if visible_cell(scene, pose, target):
                d2 = (cell[0] - target[0]) ** 2 + (cell[1] - target[1]) ** 2
                key = (d2, cell[1], cell[0], HEADINGS.index(h))
                if best is None or key < best[0]:
                    best = (key, pose)
                break
    return None if best is None else best[1]


def _cell_path(scene: Scene, start: Cell, goal: Cell) -> list[Cell] | None:
    prev = {start: None}
    queue = deque([start])
    while queue:
        c = queue.popleft()
        if c == goal:
            break
        for n in _neighbors(c):
            if n not in prev and scene.traversable(n):
                prev[n] = c
                queue.append(n)
    if goal not in prev:
        return None
    path = [goal]
    while prev[path[-1]] is not None:
        path.append(prev[path[-1]])
    return path[::-1]


def path_actions(scene: Scene, start: AgentPose, goal: AgentPose) -> list[Action]:
    """Grid-shortest action sequence: strafe along a BFS path, then turn."""
    cells = _cell_path(scene, start.cell, goal.cell)
    if cells is None:
        raise UnreachableError(f"{goal.cell} unreachable from {start.cell}")
    actions = []
    for a, b in zip(cells, cells[1:]):
        delta = (b[0] - a[0], b[1] - a[1])
        for tag in ("MoveForward", "MoveRight", "MoveLeft", "MoveBack"):
            if _move_delta(start.heading, tag) == delta:
                actions.append(Action(tag))
                break
    turn = (HEADINGS.index(goal.heading) - HEADINGS.index(start.heading)) % 4
    actions += {0: [], 1: [RotateRight], 2: [RotateRight, RotateRight], 3: [RotateLeft]}[turn]
    return actions


def _tour(scene: Scene, start: AgentPose, waypoints: list[AgentPose]) -> list[AgentPose]:
    """Greedy nearest-first (by path length) visiting order."""
    remaining = list(waypoints)
    order = []
    here = start.cell
    while remaining:
        dist = _reachable(here, scene.traversable)
        best = min(range(len(remaining)), key=lambda i: (dist[remaining[i].cell], i))
        nxt = remaining.pop(best)
        order.append(nxt)
        here = nxt.cell
    return order


def _route(scene: Scene, start: AgentPose, order: list[AgentPose]) -> list[Action]:
    actions = []
    pose = start
    for wp in order:
        actions += path_actions(scene, pose, wp)
        pose = wp
    return actions


def heuristic_waypoints(
    scene: Scene,
    moved: Mapping[str, tuple[str, str]],
    start: AgentPose,
    phase: str = "walkthrough",
) -> list[AgentPose]:
    """Viewpoints of every shuffled object's source and destination receptacle,
    in visiting order: greedy nearest-first for the walkthrough, reversed for
    the unshuffle phase."""
    if phase not in ("walkthrough", "unshuffle"):
        raise WorldError(f"unknown phase {phase!r}")
    reach = _reachable(start.cell, scene.traversable)
    waypoints: list[AgentPose] = []
    for oid in sorted(moved):
        for rid in moved[oid]:
            vp = viewpoint(scene, scene.receptacle(rid).cell, reach)
            if vp is None:
                raise UnreachableError(f"no reachable viewpoint for object {oid} on {rid}")
            if vp not in waypoints:
                waypoints.append(vp)
    order = _tour(scene, start, waypoints)
    return order[::-1] if phase == "unshuffle" else order


def heuristic_explore(
    scene: Scene,
    moved: Mapping[str, tuple[str, str]],
    start: AgentPose,
    phase: str = "walkthrough",
) -> list[Action]:
    """Privileged exploration policy: shortest paths through :func:`heuristic_waypoints`."""
    return _route(scene, start, heuristic_waypoints(scene, moved, start, phase))


def coverage_explore(scene: Scene, start: AgentPose) -> list[Action]:
    """Non-privileged exploration: view every receptacle, nearest-first."""
    reach = _reachable(start.cell, scene.traversable)
    waypoints: list[AgentPose] = []
    for rec in scene.receptacles:
        vp = viewpoint(scene, rec.cell, reach)
        if vp is None:
            raise UnreachableError(f"receptacle {rec.rid} cannot be viewed")
        if vp not in waypoints:
            waypoints.append(vp)
    return _route(scene, start, _tour(scene, start, waypoints))


def rollout(scene: Scene, start: AgentPose, actions: Iterable[Action]):
    """Replay actions, yielding ``(action, pose, scene, ok)`` after each step."""
    pose = start
    for a in actions:
        pose, scene, ok = step(scene, pose, a)
        yield a, pose, scene, ok


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def scene_to_dict(scene: Scene) -> dict:
    return {
        "version": SCENE_VERSION,
        "dims": {"width": scene.width, "height": scene.height},
        "walls": sorted([list(c) for c in scene.walls]),
        "receptacles": [{"id": r.rid, "cell": list(r.cell), "capacity": r.capacity} for r in scene.receptacles],
        "objects": [{"id": p.oid, "receptacle": p.receptacle, "offset": p.offset} for p in scene.objects],
        "seed": scene.seed,
    }


def scene_from_dict(doc: Mapping) -> Scene:
    if doc.get("version") != SCENE_VERSION:
        raise WorldError(f"unsupported scene version {doc.get('version')!r}")
    missing = {"dims", "walls", "receptacles", "objects", "seed"} - set(doc)
    if missing:
        raise WorldError(f"scene document missing {sorted(missing)}")
    return Scene(
        width=int(doc["dims"]["width"]),
        height=int(doc["dims"]["height"]),
        receptacles=tuple(Receptacle(r["id"], tuple(r["cell"]), int(r["capacity"])) for r in doc["receptacles"]),
        objects=tuple(Placement(o["id"], o["receptacle"], int(o["offset"])) for o in doc["objects"]),
        walls=frozenset(tuple(c) for c in doc["walls"]),
        seed=int(doc["seed"]),
    )


def scene_to_json(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), indent=2, sort_keys=True)


def scene_from_json(text: str) -> Scene:
    return scene_from_dict(json.loads(text))
