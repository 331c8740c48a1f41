"""Command-line harness: scene generation and batch experiments.

Every command reads an optional TOML/JSON config (``--config``); explicit
flags override file values. Configs are validated before anything is
written, and all outputs are deterministic given (config, seed) apart from
the ``timestamp`` field of summary files.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import traceback
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from . import csr as csr_mod
from .csr import graph_to_json
from .embodied import state_graph_to_json
from .encoder import EncoderParams
from .pipeline import (
    EpisodeConfig,
    EpisodeMetrics,
    build_probe_dataset,
    derive_seed,
    load_track_stream,
    make_track_stream,
    make_triplets,
    random_feature_retrieval,
    run_episode,
    run_many,
    run_probe,
    run_retrieval,
    run_tracking,
    summarize_episodes,
    threshold_sweep,
)
from .world import SceneConfig, generate_scene, scene_to_json

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

# Ablation rows: (gt_matching, heuristic_trajectory). Boxes are always ground truth.
ROWS = {
    "gt-mbt": (True, True),
    "gt-bt": (False, True),
    "gt-mb": (True, False),
    "gt-b": (False, False),
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    workers: int = 1
    episodes: int = 10
    sigmas: list = field(default_factory=lambda: [0.0])
    # scene
    width: int = 9
    height: int = 9
    n_receptacles: int = 5
    n_objects: int = 8
    capacity: int = 3
    n_walls: int = 6
    # encoder
    dim: int = 512
    encoder_seed: int = 0
    # rearrangement
    k: int | None = None
    rows: list = field(default_factory=lambda: list(ROWS))
    node_threshold: float = csr_mod.NODE_THRESHOLD
    object_threshold: float = csr_mod.OBJECT_THRESHOLD
    moved_threshold: float = csr_mod.MOVED_THRESHOLD
    save_graphs: bool = False
    # tracking
    stream: str | None = None
    sweep: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(1, 10)])
    # retrieval
    triplets: int = 1000
    # probes
    tasks: list = field(default_factory=lambda: ["support", "sibling"])
    probe_lr: float = 0.5
    probe_epochs: int = 500

    def scene_config(self) -> SceneConfig:
        return SceneConfig(self.width, self.height, self.n_receptacles, self.n_objects, self.capacity, self.n_walls)

    def validate(self) -> None:
        for name in ("node_threshold", "object_threshold", "moved_threshold"):
            v = getattr(self, name)
            if not -1.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [-1, 1], got {v}")
        if self.k is not None and not 1 <= self.k <= 5:
            raise ConfigError(f"k must lie in [1, 5], got {self.k}")
        if self.episodes < 0:
            raise ConfigError("episodes must be non-negative")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if not self.sigmas or any(s < 0 for s in self.sigmas):
            raise ConfigError("sigma values must be non-negative and at least one is required")
        if self.dim < 1:
            raise ConfigError("dim must be positive")
        unknown = [r for r in self.rows if r not in ROWS]
        if unknown:
            raise ConfigError(f"unknown ablation rows {unknown}; choose from {list(ROWS)}")
        bad_tasks = [t for t in self.tasks if t not in ("support", "sibling")]
        if bad_tasks:
            raise ConfigError(f"unknown probe tasks {bad_tasks}")
        if self.triplets < 1:
            raise ConfigError("triplets must be positive")
        if self.stream is not None and not Path(self.stream).is_file():
            raise ConfigError(f"track stream {self.stream} does not exist")
        try:
            self.scene_config().check()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def episode_config(self, row: str, sigma: float, seed: int) -> EpisodeConfig:
        gt_m, heur = ROWS[row]
        return EpisodeConfig(
            scene=self.scene_config(),
            k=self.k,
            dim=self.dim,
            sigma=sigma,
            encoder_seed=self.encoder_seed,
            node_threshold=self.node_threshold,
            object_threshold=self.object_threshold,
            moved_threshold=self.moved_threshold,
            gt_matching=gt_m,
            heuristic_trajectory=heur,
            seed=seed,
        )

    def public(self) -> dict:
        """Config echo written next to results (output location excluded)."""
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("out", "workers")}


def load_config_file(path: str) -> dict:
    p = Path(path)
    text = p.read_bytes()
    if p.suffix == ".json":
        doc = json.loads(text)
    else:
        doc = tomllib.loads(text.decode("utf-8"))
    if not isinstance(doc, dict):
        raise ConfigError("config must be a table/object")
    return doc


def build_config(args: argparse.Namespace) -> RunConfig:
    values: dict[str, Any] = {}
    if args.config:
        values.update(load_config_file(args.config))
    names = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    overrides = {
        "seed": args.seed,
        "out": args.out,
        "workers": args.workers,
        "episodes": args.episodes,
        "sigmas": args.sigma,
    }
    for key in ("k", "rows", "stream", "triplets", "tasks"):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    if getattr(args, "save_graphs", False):
        overrides["save_graphs"] = True
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if isinstance(cfg.sigmas, (int, float)):
        cfg.sigmas = [cfg.sigmas]
    cfg.sigmas = [float(s) for s in cfg.sigmas]
    cfg.validate()
    return cfg


class Writer:
    """Single point through which every output file is written."""

    def __init__(self, root: str):
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {root}: {exc}") from exc

    def text(self, rel: str, content: str) -> Path:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(content)
        return path

    def json(self, rel: str, doc) -> Path:
        return self.text(rel, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_scenes(cfg: RunConfig, out: Writer) -> int:
    manifest = {"version": 1, "config": cfg.public(), "scenes": []}
    for i in range(cfg.episodes):
        seed = derive_seed("gen-scenes", cfg.seed, i)
        scene = generate_scene(cfg.scene_config(), seed)
        name = f"scenes/scene_{i:04d}.json"
        out.text(name, scene_to_json(scene) + "\n")
        manifest["scenes"].append({"file": name, "seed": seed})
    out.json("manifest.json", manifest)
    return 0


@dataclass
class _Job:
    row: str
    sigma: float
    index: int
    episode: EpisodeConfig
    save_graphs: bool


def _run_job(job: _Job):
    """Worker body: never raises, so one bad episode cannot sink the batch."""
    try:
        outcome = run_episode(job.episode)
    except Exception:  # recorded as a failed episode
        return job, None, traceback.format_exc(limit=3), None
    graphs = None
    if job.save_graphs:
        graphs = {
            "walkthrough_csr": graph_to_json(outcome.walk.csr),
            "unshuffle_csr": graph_to_json(outcome.un.csr),
            "fused_states": state_graph_to_json(outcome.fused),
        }
    return job, outcome.metrics, None, graphs


def cmd_rearrange(cfg: RunConfig, out: Writer) -> int:
    jobs = [
        _Job(row, sigma, i, cfg.episode_config(row, sigma, derive_seed("episode", cfg.seed, i)), cfg.save_graphs)
        for row in cfg.rows
        for sigma in cfg.sigmas
        for i in range(cfg.episodes)
    ]
    results = run_many(_run_job, jobs, cfg.workers)

    buf = io.StringIO()
    cols = ["row", "sigma", "episode", "status"] + list(EpisodeMetrics(0, 0, 0, set(), set(), 0).as_row())
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    groups: dict[tuple[str, float], list[EpisodeMetrics]] = {}
    failures = []
    for job, metrics, err, graphs in results:
        row = {"row": job.row, "sigma": job.sigma, "episode": job.index}
        if metrics is None:
            failures.append({"row": job.row, "sigma": job.sigma, "episode": job.index, "error": err})
            row.update(status="failed", seed=job.episode.seed)
        else:
            row.update(status="ok", **metrics.as_row())
            groups.setdefault((job.row, job.sigma), []).append(metrics)
        writer.writerow(row)
        if graphs:
            for name, text in graphs.items():
                out.text(f"graphs/{job.row}_s{job.sigma:g}_{job.index:04d}_{name}.json", text + "\n")
    out.text("episodes.csv", buf.getvalue())

    summary = {
        "config": cfg.public(),
        "rows": [
            {"row": row, "sigma": sigma, **summarize_episodes(groups.get((row, sigma), []), seed=cfg.seed)}
            for row in cfg.rows
            for sigma in cfg.sigmas
        ],
        "failed": failures,
        "timestamp": _timestamp(),
    }
    out.json("summary.json", summary)
    for r in summary["rows"]:
        if r["episodes"]:
            print(
                f"{r['row']:7s} sigma={r['sigma']:<4g} success={r['success_pct']:.1f}% "
                f"fixed_strict={r['fixed_strict_pct']:.1f}% energy={r['energy_ratio_mean']:.3f}"
            )
    return 0 if not failures else 1


def _track_one(args):
    sigma, seed, dim, enc_seed, scene_cfg, sweep = args
    stream = make_track_stream(EncoderParams(dim, sigma, enc_seed), seed, scene_cfg)
    return (
        run_tracking(stream, update=True)[1],
        run_tracking(stream, update=False)[1],
        threshold_sweep([stream], sweep, update=True),
    )


def cmd_track(cfg: RunConfig, out: Writer) -> int:
    doc: dict[str, Any] = {"config": cfg.public(), "timestamp": _timestamp()}
    if cfg.stream:
        stream = load_track_stream(cfg.stream)
        doc["stream"] = {
            "frames": len(stream.frames),
            "ari_update": run_tracking(stream, update=True)[1],
            "ari_no_update": run_tracking(stream, update=False)[1],
        }
    else:
        per_sigma = []
        for sigma in cfg.sigmas:
            items = [
                (sigma, derive_seed("track", cfg.seed, i), cfg.dim, cfg.encoder_seed, cfg.scene_config(), cfg.sweep)
                for i in range(cfg.episodes)
            ]
            res = run_many(_track_one, items, cfg.workers)
            if not res:
                per_sigma.append({"sigma": sigma, "streams": 0})
                continue
            sweep = {t: float(np.mean([r[2][t] for r in res])) for t in cfg.sweep}
            best = max(sweep, key=lambda t: (sweep[t], -t))
            per_sigma.append(
                {
                    "sigma": sigma,
                    "streams": len(res),
                    "ari_update": float(np.mean([r[0] for r in res])),
                    "ari_no_update": float(np.mean([r[1] for r in res])),
                    "sweep": {f"{t:g}": v for t, v in sweep.items()},
                    "best_threshold": best,
                    "ari_best": sweep[best],
                }
            )
            print(f"sigma={sigma:<4g} ARI update={per_sigma[-1]['ari_update']:.4f} no-update={per_sigma[-1]['ari_no_update']:.4f}")
        doc["sigmas"] = per_sigma
    out.json("track.json", doc)
    return 0


def cmd_retrieve(cfg: RunConfig, out: Writer) -> int:
    triplets = make_triplets(cfg.triplets, cfg.seed, cfg.scene_config())
    rows = []
    for sigma in cfg.sigmas:
        acc = run_retrieval(triplets, EncoderParams(cfg.dim, sigma, cfg.encoder_seed), noise_seed=cfg.seed)
        rows.append({"sigma": sigma, "accuracy_pct": 100.0 * acc})
        print(f"sigma={sigma:<4g} retrieval accuracy={100.0 * acc:.1f}%")
    baseline = 100.0 * random_feature_retrieval(triplets, cfg.dim, cfg.seed)
    out.json(
        "retrieve.json",
        {"config": cfg.public(), "triplets": len(triplets), "sigmas": rows, "random_baseline_pct": baseline, "timestamp": _timestamp()},
    )
    return 0


def cmd_probe(cfg: RunConfig, out: Writer) -> int:
    n_scenes = max(cfg.episodes, 2)
    scenes = [generate_scene(cfg.scene_config(), derive_seed("probe-scene", cfg.seed, i)) for i in range(n_scenes)]
    rows = []
    for sigma in cfg.sigmas:
        params = EncoderParams(cfg.dim, sigma, cfg.encoder_seed)
        accs = {}
        for task in cfg.tasks:
            ds = build_probe_dataset(scenes, task, params, seed=cfg.seed)
            accs[task] = 100.0 * run_probe(ds, cfg.probe_lr, cfg.probe_epochs)
        rows.append({"sigma": sigma, "accuracy_pct": accs, "mean_accuracy_pct": float(np.mean(list(accs.values())))})
        print(f"sigma={sigma:<4g} " + " ".join(f"{t}={a:.1f}%" for t, a in accs.items()))
    out.json("probe.json", {"config": cfg.public(), "scenes": n_scenes, "sigmas": rows, "timestamp": _timestamp()})
    return 0


COMMANDS = {
    "gen-scenes": cmd_gen_scenes,
    "rearrange": cmd_rearrange,
    "track": cmd_track,
    "retrieve": cmd_retrieve,
    "probe": cmd_probe,
}


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON file with RunConfig keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int)
    common.add_argument("--sigma", type=float, action="append", help="view-noise level; repeat for a sweep")
    common.add_argument("--episodes", type=int, help="episodes, scenes or streams, depending on the command")

    parser = argparse.ArgumentParser(prog="contscene", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-scenes", parents=[common], help="write seeded scene files and a manifest")
    p = sub.add_parser("rearrange", parents=[common], help="two-phase rearrangement over ablation rows")
    p.add_argument("--k", type=int, help="objects shuffled per episode (default: drawn from 1..5)")
    p.add_argument("--row", dest="rows", action="append", choices=list(ROWS))
    p.add_argument("--save-graphs", action="store_true")
    p = sub.add_parser("track", parents=[common], help="tracking as online clustering (ARI)")
    p.add_argument("--stream", help="JSON-lines detection stream to cluster instead of synthetic ones")
    p = sub.add_parser("retrieve", parents=[common], help="triplet retrieval accuracy")
    p.add_argument("--triplets", type=int)
    p = sub.add_parser("probe", parents=[common], help="linear probes for support / sibling relations")
    p.add_argument("--task", dest="tasks", action="append", choices=["support", "sibling"])
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = build_config(args)
        out = Writer(cfg.out)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg, out)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
