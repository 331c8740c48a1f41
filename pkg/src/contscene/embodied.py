"""Embodied state graph: agent poses linked by actions, each pointing at the
CSR nodes visible from it, plus breadth-first planning over it."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .world import INVERSE, NAV_ACTIONS, Action, AgentPose, action_from_str

STATE_GRAPH_VERSION = 1


class StateGraphError(ValueError):
    pass


class PlanningError(RuntimeError):
    pass


class TargetNotObserved(PlanningError):
    """No state in the graph observes the requested node."""


class TargetUnreachable(PlanningError):
    """The target is observed somewhere, but not from any state reachable from start."""


@dataclass
class StateRecord:
    pose: AgentPose
    observed: set[str] = field(default_factory=set)


@dataclass
class StateGraph:
    states: dict[str, StateRecord] = field(default_factory=dict)
    transitions: dict[tuple[str, Action], str] = field(default_factory=dict)
    initial: str | None = None

    def __len__(self):
        return len(self.states)

    def state_of(self, pose: AgentPose) -> str:
        return pose.key

    def _add_transition(self, src: str, action: Action, dst: str) -> None:
        old = self.transitions.get((src, action))
        if old is not None and old != dst:
            raise StateGraphError(f"transition {src} --{action}--> {old} conflicts with new endpoint {dst}")
        self.transitions[(src, action)] = dst


@dataclass
class Plan:
    actions: list[Action]
    goal_state: str


def record(
    graph: StateGraph,
    prev_state: str | None,
    action: Action | None,
    pose: AgentPose,
    observed: Iterable[str] = (),
    add_inverse: bool = True,
) -> tuple[StateGraph, str]:
    """Register arrival at ``pose`` (updated in place and returned with the state id).

    States are keyed by pose. With ``add_inverse`` a successful move also
    records its exact inverse, since every navigation action in this world
    is reversible.
    """
    sid = graph.state_of(pose)
    if prev_state is None:
        if graph.states and action is not None:
            raise StateGraphError("a transition needs a previous state")
    elif prev_state not in graph.states:
        raise StateGraphError(f"unknown previous state {prev_state}")

    rec = graph.states.setdefault(sid, StateRecord(pose))
    rec.observed.update(observed)
    if graph.initial is None:
        graph.initial = sid
    if prev_state is not None and action is not None:
        if not action.is_navigation:
            raise StateGraphError(f"{action} is not a navigation action")
        graph._add_transition(prev_state, action, sid)
        if add_inverse and prev_state != sid:
            graph._add_transition(sid, INVERSE[action], prev_state)
    return graph, sid


def check_state_graph(graph: StateGraph) -> None:
    if graph.states and graph.initial not in graph.states:
        raise StateGraphError("initial state missing")
    for (src, action), dst in graph.transitions.items():
        if src not in graph.states or dst not in graph.states:
            raise StateGraphError(f"transition {src} --{action}--> {dst} has a missing endpoint")
    for sid, rec in graph.states.items():
        if rec.pose.key != sid:
            raise StateGraphError(f"state {sid} does not match its pose {rec.pose}")


def fuse(walk: StateGraph, un: StateGraph) -> StateGraph:
    """Union of two state graphs joined at their shared initial state.

    States are keyed by pose relative to a common start, so identical keys
    denote the same place and merge; their observed node sets are unioned.
    """
    if not walk.states or not un.states:
        raise StateGraphError("cannot fuse an empty state graph")
    if walk.initial != un.initial:
        raise StateGraphError(f"initial poses differ: {walk.initial} vs {un.initial}")
    fused = StateGraph(initial=walk.initial)
    for g in (walk, un):
        for sid, rec in g.states.items():
            fused.states.setdefault(sid, StateRecord(rec.pose)).observed.update(rec.observed)
        for (src, action), dst in g.transitions.items():
            fused._add_transition(src, action, dst)
    return fused


def _adjacency(graph: StateGraph) -> dict[str, list[tuple[Action, str]]]:
    order = {a: i for i, a in enumerate(NAV_ACTIONS)}
    adj: dict[str, list[tuple[Action, str]]] = {sid: [] for sid in graph.states}
    for (src, action), dst in graph.transitions.items():
        adj[src].append((action, dst))
    for edges in adj.values():
        edges.sort(key=lambda e: order.get(e[0], len(order)))
    return adj


def shortest_paths(graph: StateGraph, start: str) -> dict[str, tuple[str, Action] | None]:
    """BFS parent pointers from ``start``; levels are expanded in state-id order."""
    adj = _adjacency(graph)
    parent: dict[str, tuple[str, Action] | None] = {start: None}
    frontier = [start]
    while frontier:
        nxt = []
        for sid in sorted(frontier):
            for action, dst in adj[sid]:
                if dst not in parent:
                    parent[dst] = (sid, action)
                    nxt.append(dst)
        frontier = nxt
    return parent


def plan_to_node(graph: StateGraph, start: str, target: str) -> Plan:
    """Fewest-action plan from ``start`` to any state observing CSR node ``target``."""
    if start not in graph.states:
        raise StateGraphError(f"unknown start state {start}")
    goals = {sid for sid, rec in graph.states.items() if target in rec.observed}
    if not goals:
        raise TargetNotObserved(f"no state observes node {target}")
    parent = shortest_paths(graph, start)
    reachable = [g for g in goals if g in parent]
    if not reachable:
        raise TargetUnreachable(f"node {target} is not observed from any state reachable from {start}")

    def depth_of(sid):
        d = 0
        while parent[sid] is not None:
            sid = parent[sid][0]
            d += 1
        return d

    goal = min(reachable, key=lambda g: (depth_of(g), g))
    actions = []
    cur = goal
    while parent[cur] is not None:
        prev, action = parent[cur]
        actions.append(action)
        cur = prev
    return Plan(actions[::-1], goal)


def replay(graph: StateGraph, start: str, actions: Iterable[Action]) -> str:
    """Follow recorded transitions; raises KeyError on a missing one."""
    cur = start
    for a in actions:
        cur = graph.transitions[(cur, a)]
    return cur


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def state_graph_to_dict(graph: StateGraph) -> dict:
    return {
        "version": STATE_GRAPH_VERSION,
        "initial": graph.initial,
        "states": [
            {"id": sid, "pose": [rec.pose.cell[0], rec.pose.cell[1], rec.pose.heading], "observed": sorted(rec.observed)}
            for sid, rec in graph.states.items()
        ],
        "transitions": [[src, str(action), dst] for (src, action), dst in graph.transitions.items()],
    }


def state_graph_from_dict(doc: Mapping) -> StateGraph:
    if doc.get("version") != STATE_GRAPH_VERSION:
        raise StateGraphError(f"unsupported state graph version {doc.get('version')!r}")
    graph = StateGraph(initial=doc["initial"])
    for s in doc["states"]:
        x, y, h = s["pose"]
        graph.states[s["id"]] = StateRecord(AgentPose((int(x), int(y)), h), set(s["observed"]))
    for src, action, dst in doc["transitions"]:
        graph._add_transition(src, action_from_str(action), dst)
    check_state_graph(graph)
    return graph


def state_graph_to_json(graph: StateGraph) -> str:
    return json.dumps(state_graph_to_dict(graph), sort_keys=True)


def state_graph_from_json(text: str) -> StateGraph:
    return state_graph_from_dict(json.loads(text))
