import csv
import json
from pathlib import Path

import pytest

from contscene.cli import ROWS, main
from contscene.world import scene_from_json, validate_scene


def run(out, *args):
    return main([args[0], "--out", str(out), *args[1:]])


def read_tree(root: Path, drop_timestamp=True):
    """Map relative path -> bytes, with the timestamp field of JSON files removed."""
    files = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            if drop_timestamp and p.suffix == ".json":
                doc = json.loads(data)
                if isinstance(doc, dict):
                    doc.pop("timestamp", None)
                data = json.dumps(doc, sort_keys=True).encode()
            files[str(p.relative_to(root))] = data
    return files


class TestGenScenes:
    def test_zero_scenes_manifest_only(self, tmp_path):
        assert run(tmp_path, "gen-scenes", "--episodes", "0") == 0
        assert [p.name for p in tmp_path.rglob("*") if p.is_file()] == ["manifest.json"]
        assert json.loads((tmp_path / "manifest.json").read_text())["scenes"] == []

    def test_byte_identical_reruns(self, tmp_path):
        for d in ("a", "b"):
            assert run(tmp_path / d, "gen-scenes", "--episodes", "4", "--seed", "7") == 0
        assert read_tree(tmp_path / "a", False) == read_tree(tmp_path / "b", False)

    def test_seed_changes_output(self, tmp_path):
        run(tmp_path / "a", "gen-scenes", "--episodes", "2", "--seed", "1")
        run(tmp_path / "b", "gen-scenes", "--episodes", "2", "--seed", "2")
        assert read_tree(tmp_path / "a") != read_tree(tmp_path / "b")

    def test_files_validate(self, tmp_path):
        run(tmp_path, "gen-scenes", "--episodes", "5")
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["version"] == 1 and len(manifest["scenes"]) == 5
        for entry in manifest["scenes"]:
            text = (tmp_path / entry["file"]).read_text(encoding="utf-8")
            assert json.loads(text)["version"] == 1
            validate_scene(scene_from_json(text))

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert run(blocker / "sub", "gen-scenes", "--episodes", "1") == 2


class TestConfig:
    @pytest.mark.parametrize(
        "extra",
        [
            ["--k", "0"],
            ["--k", "6"],
            ["--sigma", "-0.1"],
            ["--episodes", "-1"],
            ["--workers", "0"],
        ],
    )
    def test_invalid_flags_exit_2_without_side_effects(self, tmp_path, extra):
        out = tmp_path / "out"
        assert run(out, "rearrange", "--episodes", "1", *extra) == 2
        assert not out.exists()

    @pytest.mark.parametrize("key,value", [("node_threshold", 1.5), ("moved_threshold", -2.0), ("object_threshold", 3)])
    def test_invalid_threshold_in_file(self, tmp_path, key, value):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({key: value}))
        out = tmp_path / "out"
        assert run(out, "rearrange", "--config", str(cfg)) == 2
        assert not out.exists()

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text("episodes = 1\nbogus_key = 3\n")
        assert run(tmp_path / "out", "gen-scenes", "--config", str(cfg)) == 2
        assert "bogus_key" in capsys.readouterr().err

    def test_unknown_row_in_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"rows": ["gt-xyz"]}))
        assert run(tmp_path / "out", "rearrange", "--config", str(cfg)) == 2

    def test_bad_scene_config(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n_objects": 100, "n_receptacles": 1, "capacity": 1}))
        assert run(tmp_path / "out", "gen-scenes", "--config", str(cfg)) == 2

    @pytest.mark.parametrize("fmt", ["toml", "json"])
    def test_flags_override_file(self, tmp_path, fmt):
        cfg = tmp_path / f"c.{fmt}"
        if fmt == "toml":
            cfg.write_text("episodes = 3\nseed = 5\n")
        else:
            cfg.write_text(json.dumps({"episodes": 3, "seed": 5}))
        run(tmp_path / "file", "gen-scenes", "--config", str(cfg))
        run(tmp_path / "flag", "gen-scenes", "--config", str(cfg), "--episodes", "1")
        a = json.loads((tmp_path / "file" / "manifest.json").read_text())
        b = json.loads((tmp_path / "flag" / "manifest.json").read_text())
        assert len(a["scenes"]) == 3 and len(b["scenes"]) == 1
        assert a["config"]["seed"] == b["config"]["seed"] == 5
        assert a["scenes"][0] == b["scenes"][0]


class TestRearrange:
    def test_outputs_and_oracle_row(self, tmp_path, capsys):
        assert run(tmp_path, "rearrange", "--episodes", "4", "--row", "gt-mbt", "--row", "gt-b") == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["failed"] == []
        rows = {r["row"]: r for r in summary["rows"]}
        assert set(rows) == {"gt-mbt", "gt-b"}
        for r in rows.values():
            assert {"success_pct", "fixed_strict_pct", "energy_ratio_mean"} <= set(r)
            assert r["episodes"] == 4
        assert rows["gt-mbt"]["success_pct"] == 100.0
        assert rows["gt-mbt"]["fixed_strict_pct"] == 100.0
        assert rows["gt-mbt"]["energy_ratio_mean"] == 0.0
        with open(tmp_path / "episodes.csv", newline="") as fh:
            recs = list(csv.DictReader(fh))
        assert len(recs) == 8 and all(r["status"] == "ok" for r in recs)
        assert "gt-mbt" in capsys.readouterr().out

    def test_default_rows(self, tmp_path):
        run(tmp_path, "rearrange", "--episodes", "1")
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert [r["row"] for r in summary["rows"]] == list(ROWS)

    def test_deterministic(self, tmp_path):
        args = ["rearrange", "--episodes", "3", "--sigma", "0.3", "--row", "gt-bt", "--save-graphs", "--seed", "4"]
        run(tmp_path / "a", *args)
        run(tmp_path / "b", *args, "--workers", "2")
        ta, tb = read_tree(tmp_path / "a"), read_tree(tmp_path / "b")
        assert ta == tb
        assert any(k.startswith("graphs") for k in ta)

    def test_failed_episode_recorded(self, tmp_path, monkeypatch):
        import contscene.cli as cli

        real = cli.run_episode

        def flaky(cfg):
            if cfg.seed % 2:
                raise RuntimeError("boom")
            return real(cfg)

        monkeypatch.setattr(cli, "run_episode", flaky)
        code = run(tmp_path, "rearrange", "--episodes", "6", "--row", "gt-mbt")
        summary = json.loads((tmp_path / "summary.json").read_text())
        n_failed = len(summary["failed"])
        assert 0 < n_failed < 6
        assert code == 1
        assert summary["rows"][0]["episodes"] == 6 - n_failed
        assert "boom" in summary["failed"][0]["error"]


class TestOtherCommands:
    def test_track_zero_noise(self, tmp_path):
        assert run(tmp_path, "track", "--episodes", "2") == 0
        doc = json.loads((tmp_path / "track.json").read_text())
        row = doc["sigmas"][0]
        assert row["ari_update"] == 1.0 and row["ari_no_update"] == 1.0
        assert row["ari_best"] >= row["sweep"]["0.5"]

    def test_track_external_stream(self, tmp_path):
        stream = tmp_path / "s.jsonl"
        lines = [
            {"frame": 0, "detections": [{"feature": [1, 0, 0], "label": "a"}, {"feature": [0, 1, 0], "label": "b"}]},
            {"frame": 1, "detections": [{"feature": [0, 1, 0.1], "label": "b"}]},
        ]
        stream.write_text("".join(json.dumps(l) + "\n" for l in lines))
        assert run(tmp_path / "out", "track", "--stream", str(stream)) == 0
        doc = json.loads((tmp_path / "out" / "track.json").read_text())
        assert doc["stream"]["ari_update"] == 1.0

    def test_track_missing_stream(self, tmp_path):
        out = tmp_path / "out"
        assert run(out, "track", "--stream", str(tmp_path / "nope.jsonl")) == 2
        assert not out.exists()

    def test_retrieve_zero_noise(self, tmp_path):
        assert run(tmp_path, "retrieve", "--triplets", "50", "--sigma", "0", "--sigma", "0.2") == 0
        doc = json.loads((tmp_path / "retrieve.json").read_text())
        assert doc["sigmas"][0]["accuracy_pct"] == 100.0
        assert 0.0 <= doc["random_baseline_pct"] <= 100.0

    def test_probe_zero_noise(self, tmp_path):
        assert run(tmp_path, "probe", "--episodes", "8") == 0
        doc = json.loads((tmp_path / "probe.json").read_text())
        accs = doc["sigmas"][0]["accuracy_pct"]
        assert accs["support"] >= 90.0
        assert doc["sigmas"][0]["mean_accuracy_pct"] == pytest.approx((accs["support"] + accs["sibling"]) / 2)

    @pytest.mark.parametrize(
        "args",
        [
            ["track", "--episodes", "2", "--sigma", "0.4"],
            ["retrieve", "--triplets", "40", "--sigma", "0.3"],
            ["probe", "--episodes", "4", "--task", "sibling", "--sigma", "0.2"],
        ],
    )
    def test_deterministic(self, tmp_path, args):
        run(tmp_path / "a", *args)
        run(tmp_path / "b", *args)
        assert read_tree(tmp_path / "a") == read_tree(tmp_path / "b")

    def test_track_malformed_stream(self, tmp_path):
        stream = tmp_path / "bad.jsonl"
        stream.write_text("not json\n")
        assert run(tmp_path / "out", "track", "--stream", str(stream)) == 1
