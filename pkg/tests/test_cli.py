"""CLI: scenario artifacts, headless batches, serve session plumbing."""

import json
import signal
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from hapticfence.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    SCENARIO_FILES,
    build_serve_session,
    load_scenario_dir,
    main,
    resolve_ui_assets,
)
from hapticfence.errors import ConfigError
from hapticfence.geometry import mesh_to_bytes
from hapticfence.scenario import ControllerParams, ResectionReport, ScenarioConfig
from hapticfence.tracker import MotionScript, NoiseModel
from hapticfence.wire import MSG_FORCE, MSG_MESH, MSG_TRANSFORM, WireClient


def fast_config(**overrides) -> ScenarioConfig:
    base = dict(
        noise=NoiseModel(pos_sigma=0.0, rot_sigma_deg=0.0, dropout_rate=0.0),
        motion=MotionScript(kind="static"),
        radial_jitter_mm=0.0,
        tumor_center_mm=(0.0, 0.0, 0.0),
        controller=ControllerParams(compliant_targets=40, aggressive_targets=100),
    )
    base.update(overrides)
    return ScenarioConfig(**base)


def write_config(tmp_path: Path, cfg: ScenarioConfig, name="config.json") -> Path:
    p = tmp_path / name
    p.write_text(cfg.to_json())
    return p


def read_tree(root: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(root.iterdir())}


# -- scenario ------------------------------------------------------------------


class TestScenarioCommand:
    def test_default_writes_all_artifacts(self, tmp_path):
        out = tmp_path / "scen"
        assert main(["scenario", "--out", str(out), "--seed", "5"]) == EXIT_OK
        for name in SCENARIO_FILES:
            assert (out / name).is_file(), name
        cfg = json.loads((out / "config.json").read_text())
        assert cfg["seed"] == 5
        tumor = json.loads((out / "tumor.json").read_text())
        assert len(tumor["rotation"]) == 9
        contours = json.loads((out / "contours.json").read_text())
        assert len(contours["contours"]) == cfg["slice_count"]

    def test_rerun_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["scenario", "--out", str(a), "--seed", "3"]) == EXIT_OK
        assert main(["scenario", "--out", str(b), "--seed", "3"]) == EXIT_OK
        assert read_tree(a) == read_tree(b)

    def test_reload_reproduces_meshes(self, tmp_path):
        out = tmp_path / "scen"
        assert main(["scenario", "--out", str(out), "--seed", "11"]) == EXIT_OK
        scenario = load_scenario_dir(out)
        assert mesh_to_bytes(scenario.planned_hull) == (out / "planned_hull.bin").read_bytes()
        assert mesh_to_bytes(scenario.true_mesh) == (out / "tumor_mesh.bin").read_bytes()

    def test_distinct_seeds_distinct_scenarios(self, tmp_path):
        tumors = set()
        for seed in range(10):
            out = tmp_path / f"s{seed}"
            assert main(["scenario", "--out", str(out), "--seed", str(seed)]) == EXIT_OK
            tumors.add((out / "tumor.json").read_bytes())
        assert len(tumors) == 10

    def test_oversize_tumor_rejected_citing_bounds(self, tmp_path, capsys):
        cfg_path = tmp_path / "bad.json"
        d = json.loads(ScenarioConfig().to_json())
        d["tumor_semi_axes_mm"] = [30.0, 30.0, 30.0]  # 60 mm diameter
        cfg_path.write_text(json.dumps(d))
        assert main(["scenario", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        err = capsys.readouterr().err
        assert "[20, 50]" in err

    def test_missing_config_is_config_error(self, tmp_path, capsys):
        code = main(["scenario", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)])
        assert code == EXIT_CONFIG
        assert "not found" in capsys.readouterr().err

    def test_center_outside_phantom_is_config_error(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, fast_config(tumor_center_mm=(55.0, 0.0, 0.0)))
        assert main(["scenario", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        assert "clearance" in capsys.readouterr().err


# -- run -----------------------------------------------------------------------


class TestRunCommand:
    def test_single_seed_guided(self, tmp_path):
        cfg_path = write_config(tmp_path, fast_config())
        out = tmp_path / "out"
        code = main(
            ["run", "--config", str(cfg_path), "--seed", "2", "--guided", "--out", str(out)]
        )
        assert code == EXIT_OK
        report = json.loads((out / "report_s2_guided.json").read_text())
        assert report["positive_margin"] is False
        assert (out / "trajectory_s2_guided.csv").is_file()
        agg = (out / "aggregate.csv").read_text().splitlines()
        assert agg[0] == "seed,arm," + ResectionReport.csv_header()
        assert len(agg) == 2
        assert agg[1].startswith("2,guided,")

    def test_rerun_reports_byte_identical(self, tmp_path):
        cfg_path = write_config(tmp_path, fast_config())
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert (
                main(["run", "--config", str(cfg_path), "--seed", "4", "--guided", "--out", str(out)])
                == EXIT_OK
            )
        assert read_tree(a) == read_tree(b)

    def test_both_arms_two_seeds(self, tmp_path):
        cfg_path = write_config(tmp_path, fast_config())
        out = tmp_path / "out"
        code = main(
            ["run", "--config", str(cfg_path), "--seed", "0", "--seeds", "2", "--both", "--out", str(out)]
        )
        assert code == EXIT_OK
        names = {p.name for p in out.iterdir()}
        for seed in (0, 1):
            for arm in ("guided", "unguided"):
                assert f"report_s{seed}_{arm}.json" in names
                assert f"trajectory_s{seed}_{arm}.csv" in names
        rows = (out / "aggregate.csv").read_text().splitlines()
        assert len(rows) == 5
        assert rows[1].split(",")[:2] == ["0", "guided"]
        assert rows[2].split(",")[:2] == ["0", "unguided"]

    def test_zero_seeds_rejected(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, fast_config())
        code = main(["run", "--config", str(cfg_path), "--seeds", "0", "--out", str(tmp_path / "o")])
        assert code == EXIT_CONFIG
        assert "--seeds" in capsys.readouterr().err

    def test_missing_config_nonzero_exit(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "gone.json"), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_virtual_clock_flag_accepted(self, tmp_path):
        cfg_path = write_config(tmp_path, fast_config())
        out = tmp_path / "out"
        code = main(
            [
                "run", "--config", str(cfg_path), "--seed", "1", "--guided",
                "--virtual-clock", "--out", str(out),
            ]
        )
        assert code == EXIT_OK


# -- serve ---------------------------------------------------------------------


class TestServeSession:
    def test_wire_streams_flow(self):
        session = build_serve_session(fast_config(), port=0, ui_port=0, servo_rate_hz=500.0)
        session.start()
        client = WireClient("127.0.0.1", session.wire_port, connect_attempts=3)
        try:
            client.connect()
            deadline = time.monotonic() + 3.0
            while time.monotonic() < deadline:
                if all(
                    client.latest(n, t) is not None
                    for n, t in [
                        ("Fixture", MSG_MESH),
                        ("Tumor", MSG_TRANSFORM),
                        ("CauteryTip", MSG_TRANSFORM),
                        ("Force", MSG_FORCE),
                    ]
                ):
                    break
                time.sleep(0.02)
            mesh = client.latest("Fixture", MSG_MESH)
            assert mesh is not None and len(mesh.payload.vertices) >= 4
            tip = client.latest("CauteryTip", MSG_TRANSFORM)
            assert tip is not None
            # parked above the fixture: no force
            force = client.latest("Force", MSG_FORCE)
            assert force is not None and np.allclose(force.payload.force, 0.0)
            assert client.decode_errors == 0
        finally:
            client.close()
            session.shutdown()

    def test_force_stream_responds_to_goal_and_vf(self):
        session = build_serve_session(fast_config(), port=0, ui_port=0, servo_rate_hz=500.0)
        session.start()
        client = WireClient("127.0.0.1", session.wire_port, connect_attempts=3)
        try:
            client.connect()
            session.hub.goal_box.put(np.zeros(3), time.monotonic_ns())

            def force_norm_settles(pred, timeout_s=3.0):
                deadline = time.monotonic() + timeout_s
                while time.monotonic() < deadline:
                    msg = client.latest("Force", MSG_FORCE)
                    if msg is not None and pred(float(np.linalg.norm(msg.payload.force))):
                        return True
                    time.sleep(0.02)
                return False

            assert force_norm_settles(lambda f: f > 0.5)
            # guidance off: forces drop to zero even though the goal sits inside
            from hapticfence.bridge import handle_command

            assert handle_command(session.hub, '{"type":"vf","enabled":false}') is None
            assert force_norm_settles(lambda f: f == 0.0)
        finally:
            client.close()
            session.shutdown()

    def test_vf_disabled_config_streams_zero_force(self):
        import dataclasses

        cfg = fast_config()
        cfg = dataclasses.replace(cfg, vf=dataclasses.replace(cfg.vf, enabled=False))
        session = build_serve_session(cfg, port=0, ui_port=0, servo_rate_hz=500.0)
        session.start()
        client = WireClient("127.0.0.1", session.wire_port, connect_attempts=3)
        try:
            client.connect()
            session.hub.goal_box.put(np.zeros(3), time.monotonic_ns())
            time.sleep(1.0)
            msg = client.latest("Force", MSG_FORCE)
            assert msg is not None
            assert np.array_equal(msg.payload.force, np.zeros(3))
        finally:
            client.close()
            session.shutdown()


class TestServeProcess:
    def test_sigint_clean_shutdown_with_stats(self):
        proc = subprocess.Popen(
            [sys.executable, "-m", "hapticfence", "serve", "--port", "0", "--ui-port", "0"],
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            text=True,
        )
        try:
            banner = proc.stdout.readline()
            assert "serving:" in banner
            time.sleep(1.5)
            proc.send_signal(signal.SIGINT)
            out, _ = proc.communicate(timeout=15)
        finally:
            if proc.poll() is None:
                proc.kill()
        assert proc.returncode == 0
        assert "tick_count" in out
        assert "overrun_count" in out


class TestUiAssetDiscovery:
    def test_explicit_dir_must_contain_index(self, tmp_path):
        with pytest.raises(ConfigError):
            resolve_ui_assets(str(tmp_path))
        (tmp_path / "index.html").write_text("<html></html>")
        assert resolve_ui_assets(str(tmp_path)) == tmp_path

    def test_default_discovers_frontend_dist(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert resolve_ui_assets(None) is None
        dist = tmp_path / "frontend" / "dist"
        dist.mkdir(parents=True)
        (dist / "index.html").write_text("<html></html>")
        assert resolve_ui_assets(None) == Path("frontend") / "dist"


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2  # argparse's own usage error
