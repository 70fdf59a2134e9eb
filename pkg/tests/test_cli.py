"""Command-line surface: keygen, synth, daemons, submit, report."""

import json
import os
import signal
import socket
import stat
import subprocess
import sys
import time
from pathlib import Path

import pytest
from click.testing import CliRunner

from phtlink.cli import main
from phtlink.encoding import canonical_json_bytes


def run_cli(*args):
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)


class TestKeygen:
    def test_writes_six_key_files(self, tmp_path):
        result = run_cli("keygen", tmp_path / "keys")
        assert result.exit_code == 0
        files = sorted(p.name for p in (tmp_path / "keys").iterdir())
        assert files == [
            "anchor_private.pem", "anchor_verify.pem",
            "enc_private.pem", "enc_public.pem",
            "sign_private.pem", "sign_verify.pem",
        ]

    def test_private_files_restricted(self, tmp_path):
        run_cli("keygen", tmp_path / "keys")
        for name in ("enc_private.pem", "sign_private.pem", "anchor_private.pem"):
            mode = stat.S_IMODE((tmp_path / "keys" / name).stat().st_mode)
            assert mode == 0o600

    def test_refuses_overwrite_without_force(self, tmp_path):
        run_cli("keygen", tmp_path / "keys")
        marker = (tmp_path / "keys" / "enc_private.pem").read_bytes()
        refused = CliRunner().invoke(main, ["keygen", str(tmp_path / "keys")])
        assert refused.exit_code != 0
        assert "KeyFilesExist" in refused.output
        assert (tmp_path / "keys" / "enc_private.pem").read_bytes() == marker
        forced = run_cli("keygen", tmp_path / "keys", "--force")
        assert forced.exit_code == 0
        assert (tmp_path / "keys" / "enc_private.pem").read_bytes() != marker

    def test_generated_keys_roundtrip_a_seal_open(self, tmp_path):
        from phtlink.cli import _load_encryption_keys, _load_signing_keys
        from phtlink.envelope import open_package, seal

        run_cli("keygen", tmp_path / "keys")
        enc = _load_encryption_keys(tmp_path / "keys" / "enc_private.pem")
        sign = _load_signing_keys(tmp_path / "keys" / "sign_private.pem")
        pkg = seal(b"round trip", "run-z", "A", enc.public_only(), sign)
        assert open_package(pkg, enc, sign.verification_key) == b"round trip"


class TestSynth:
    def spec_file(self, tmp_path, **overrides):
        doc = dict(
            n_large=60, n_small=20, overlap_fraction=0.8,
            perturbation_rate=0.05, seed=5,
        )
        doc.update(overrides)
        path = tmp_path / "spec.json"
        path.write_text(json.dumps(doc))
        return path

    def test_population_files(self, tmp_path):
        result = run_cli("synth", self.spec_file(tmp_path), "--out", tmp_path / "data")
        assert result.exit_code == 0
        names = sorted(p.name for p in (tmp_path / "data").iterdir())
        assert names == [
            "ground_truth.json",
            "large.csv", "large.descriptor.json",
            "small.csv", "small.descriptor.json",
        ]
        truth = json.loads((tmp_path / "data" / "ground_truth.json").read_text())
        assert len(truth["pairs"]) == 16

    def test_seed_repetition_identical_files(self, tmp_path):
        run_cli("synth", self.spec_file(tmp_path), "--out", tmp_path / "one")
        run_cli("synth", self.spec_file(tmp_path), "--out", tmp_path / "two")
        for name in ("large.csv", "small.csv", "ground_truth.json"):
            assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()

    def test_vertical_demo_variant(self, tmp_path):
        spec = self.spec_file(tmp_path, variant="vertical_demo", n_large=50, n_small=10)
        result = run_cli("synth", spec, "--out", tmp_path / "demo")
        assert result.exit_code == 0
        assert (tmp_path / "demo" / "station_a.csv").exists()
        assert (tmp_path / "demo" / "station_b.csv").exists()
        truth = json.loads((tmp_path / "demo" / "ground_truth.json").read_text())
        assert len(truth["pairs"]) == 10

    def test_invalid_spec_fails_with_reason(self, tmp_path):
        spec = self.spec_file(tmp_path, n_large=5, n_small=50, overlap_fraction=1.0)
        result = CliRunner().invoke(main, ["synth", str(spec)])
        assert result.exit_code != 0
        assert "InvalidSpec" in result.output


# ---------------------------------------------------------------------------
# Full TCP deployment
# ---------------------------------------------------------------------------

def _wait_listening(proc) -> str:
    line = proc.stdout.readline().decode()
    assert "listening on" in line, line
    return line.strip().rsplit(" ", 1)[-1]


@pytest.fixture
def deployment(tmp_path):
    """keygen for every party, synthetic data, configs, running daemons."""
    runner = CliRunner()
    for party in ("a", "b", "tse", "researcher"):
        assert runner.invoke(main, ["keygen", str(tmp_path / "keys" / party)]).exit_code == 0
    anchor_dir = tmp_path / "keys" / "researcher"

    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(dict(
        n_large=400, n_small=120, variant="vertical_demo", seed=12,
    )))
    assert runner.invoke(
        main, ["synth", str(spec), "--out", str(tmp_path / "data")]
    ).exit_code == 0

    def config(name, doc):
        path = tmp_path / f"{name}.json"
        path.write_bytes(canonical_json_bytes(doc))
        return path

    cfg_a = config("station_a", {
        "station_id": "A", "role": "data", "listen": "127.0.0.1:0",
        "dataset_csv": "data/station_a.csv",
        "allow_variables": ["age"],
        "trust_anchor_verify_key": "keys/researcher/anchor_verify.pem",
        "encryption_private_key": "keys/a/enc_private.pem",
        "signing_private_key": "keys/a/sign_private.pem",
        "peer_encryption_public_keys": {"B": "keys/b/enc_public.pem"},
        "audit_log": "audit_a.jsonl",
    })
    cfg_b = config("station_b", {
        "station_id": "B", "role": "data", "listen": "127.0.0.1:0",
        "dataset_csv": "data/station_b.csv",
        "allow_variables": ["income"],
        "trust_anchor_verify_key": "keys/researcher/anchor_verify.pem",
        "encryption_private_key": "keys/b/enc_private.pem",
        "signing_private_key": "keys/b/sign_private.pem",
        "peer_encryption_public_keys": {"A": "keys/a/enc_public.pem"},
        "audit_log": "audit_b.jsonl",
    })
    cfg_tse = config("tse", {
        "station_id": "TSE", "role": "tse", "listen": "127.0.0.1:0",
        "trust_anchor_verify_key": "keys/researcher/anchor_verify.pem",
        "encryption_private_key": "keys/tse/enc_private.pem",
        "audit_log": "audit_tse.jsonl",
        "timeout_s": 30,
    })

    procs = []

    def spawn(command, cfg):
        proc = subprocess.Popen(
            [sys.executable, "-m", "phtlink.cli", command, "--config", str(cfg)],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, cwd=tmp_path,
        )
        procs.append(proc)
        return _wait_listening(proc)

    endpoints = {
        "A": spawn("station", cfg_a),
        "B": spawn("station", cfg_b),
        "TSE": spawn("tse", cfg_tse),
    }
    yield dict(tmp_path=tmp_path, endpoints=endpoints, anchor_dir=anchor_dir, procs=procs)
    for proc in procs:
        if proc.poll() is None:
            proc.terminate()
    for proc in procs:
        try:
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            proc.kill()


def _draft(deploy, run_id, **overrides):
    doc = {
        "train_id": "train-cli",
        "run_id": run_id,
        "researcher_id": "researcher",
        "tse_station_id": "TSE",
        "data_requests": [
            {"station_id": "A", "variables": ["age"],
             "pool": {"age_min": 40, "age_max": 75, "as_of": "2026-01-01"}},
            {"station_id": "B", "variables": ["income"]},
        ],
        "analysis": {"kind": "binned_association", "variables": ["age", "income"],
                     "bin_width": 10},
        "disclosure": {"k_min": 5},
        "linkage": {"mode": "exact"},
        "expiry": "2099-01-01T00:00:00Z",
        "tse_public_encryption_key_file": "keys/tse/enc_public.pem",
        "station_verification_key_files": {
            "A": "keys/a/sign_verify.pem",
            "B": "keys/b/sign_verify.pem",
        },
        "endpoints": deploy["endpoints"],
    }
    doc.update(overrides)
    path = deploy["tmp_path"] / f"draft_{run_id}.json"
    path.write_text(json.dumps(doc))
    return path


class TestSubmitEndToEnd:
    def test_demo_run_produces_result_tables(self, deployment):
        draft = _draft(deployment, "run-cli-1")
        out_dir = deployment["tmp_path"] / "out"
        result = CliRunner().invoke(main, [
            "submit", str(draft),
            "--anchor-key", str(deployment["anchor_dir"] / "anchor_private.pem"),
            "--out", str(out_dir), "--timeout", "30",
        ])
        assert result.exit_code == 0, result.output
        assert "completed" in result.output
        assert "PRIVATE KEY" not in result.output

        report = json.loads((out_dir / "run_report.json").read_text())
        assert report["outcome"] == "Completed"
        assert report["audit_summary"]["records_linked"] == 120

        result_doc = json.loads((out_dir / "result.json").read_text())
        table = result_doc["tables"][0]
        assert table["key_fields"] == ["bin"]
        assert "mean_income" in table["value_fields"]
        csvs = list(out_dir.glob("*.csv"))
        assert csvs, "expected a plot-ready table csv"
        for path in out_dir.iterdir():
            assert b"PRIVATE KEY" not in path.read_bytes()

        # report command renders the run report
        shown = CliRunner().invoke(main, ["report", str(out_dir / "run_report.json")])
        assert shown.exit_code == 0
        assert "run-cli-1" in shown.output and "Completed" in shown.output

    def test_expired_manifest_exits_nonzero(self, deployment):
        draft = _draft(deployment, "run-cli-2", expiry="2000-01-01T00:00:00Z")
        result = CliRunner().invoke(main, [
            "submit", str(draft),
            "--anchor-key", str(deployment["anchor_dir"] / "anchor_private.pem"),
            "--out", str(deployment["tmp_path"] / "out2"), "--timeout", "20",
        ])
        assert result.exit_code == 1
        assert "aborted: Expired" in result.output
        report = json.loads(
            (deployment["tmp_path"] / "out2" / "run_report.json").read_text()
        )
        assert report["outcome"] == "Aborted" and report["reason"] == "Expired"

    def test_unauthorized_variable_exits_nonzero(self, deployment):
        draft = _draft(deployment, "run-cli-3", data_requests=[
            {"station_id": "A", "variables": ["age", "blood_pressure"]},
            {"station_id": "B", "variables": ["income"]},
        ])
        result = CliRunner().invoke(main, [
            "submit", str(draft),
            "--anchor-key", str(deployment["anchor_dir"] / "anchor_private.pem"),
            "--out", str(deployment["tmp_path"] / "out3"), "--timeout", "20",
        ])
        assert result.exit_code == 1
        assert "aborted: UnauthorizedVariable" in result.output


class TestDaemonLifecycle:
    def test_station_repeats_runs(self, deployment):
        for run_id in ("run-multi-1", "run-multi-2"):
            result = CliRunner().invoke(main, [
                "submit", str(_draft(deployment, run_id)),
                "--anchor-key", str(deployment["anchor_dir"] / "anchor_private.pem"),
                "--out", str(deployment["tmp_path"] / f"out_{run_id}"),
                "--timeout", "30",
            ])
            assert result.exit_code == 0, result.output

    def test_sigterm_wipes_active_run_before_exit(self, deployment):
        # park a run at the TSE (dispatch only, no data), then terminate it
        from phtlink.manifest import manifest_from_dict
        from phtlink.cli import _load_signing_keys, _manifest_from_draft
        from phtlink.manifest import sign_manifest
        from phtlink.wire import TrainDispatch, encode

        draft_path = _draft(deployment, "run-sigterm")
        doc = json.loads(draft_path.read_text())
        anchor = _load_signing_keys(deployment["anchor_dir"] / "anchor_private.pem")
        manifest = sign_manifest(
            _manifest_from_draft(doc, deployment["tmp_path"]), anchor
        )
        dispatch = TrainDispatch(
            manifest.run_id, 1, "researcher", manifest,
            tuple(sorted({**deployment["endpoints"],
                          "researcher": "127.0.0.1:9"}.items())),
        )
        host, port = deployment["endpoints"]["TSE"].rsplit(":", 1)
        with socket.create_connection((host, int(port))) as conn:
            conn.sendall(encode(dispatch))
        audit_path = deployment["tmp_path"] / "audit_tse.jsonl"
        deadline = time.monotonic() + 10.0
        while time.monotonic() < deadline:
            if audit_path.exists() and "awaiting_data" in audit_path.read_text():
                break
            time.sleep(0.05)

        tse_proc = deployment["procs"][2]
        tse_proc.send_signal(signal.SIGTERM)
        tse_proc.wait(timeout=10)
        audit = (deployment["tmp_path"] / "audit_tse.jsonl").read_text().splitlines()
        events = [json.loads(line) for line in audit]
        assert any(e["event"] == "awaiting_data" for e in events)
        assert any(
            e["event"] == "wiped" and e["detail"] == "terminated" for e in events
        )


class TestLogging:
    def test_pht_log_env_sets_verbosity(self, tmp_path, monkeypatch):
        import logging

        monkeypatch.setenv("PHT_LOG", "DEBUG")
        logging.root.handlers.clear()
        result = run_cli("keygen", tmp_path / "keys")
        assert result.exit_code == 0
        assert logging.root.level == logging.DEBUG
        logging.root.handlers.clear()
        logging.root.setLevel(logging.WARNING)


class TestDaemonConfigErrors:
    def test_missing_anchor_key_refuses_to_start(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({
            "station_id": "A", "role": "data", "listen": "127.0.0.1:0",
            "dataset_csv": "nope.csv",
            "trust_anchor_verify_key": "missing.pem",
            "encryption_private_key": "missing.pem",
            "signing_private_key": "missing.pem",
        }))
        result = CliRunner().invoke(main, ["station", "--config", str(cfg)])
        assert result.exit_code == 2
        assert "BadConfig" in result.output

    def test_busy_port_is_bind_error(self, tmp_path):
        blocker = socket.create_server(("127.0.0.1", 0))
        port = blocker.getsockname()[1]
        runner = CliRunner()
        assert runner.invoke(main, ["keygen", str(tmp_path / "k")]).exit_code == 0
        cfg = tmp_path / "tse.json"
        cfg.write_text(json.dumps({
            "station_id": "TSE", "role": "tse", "listen": f"127.0.0.1:{port}",
            "trust_anchor_verify_key": "k/anchor_verify.pem",
            "encryption_private_key": "k/enc_private.pem",
        }))
        result = runner.invoke(main, ["tse", "--config", str(cfg)])
        blocker.close()
        assert result.exit_code == 2
        assert "BindError" in result.output
