import json
import subprocess
import sys
import time

import pytest

from perturbfl.cli import main

BASE = {
    "dataset": {"kind": "synthetic_classification", "n_features": 5, "n_classes": 3, "n_samples": 120, "seed": 0},
    "hidden": [6],
    "clients": 2,
    "rounds": 3,
    "lr": 0.05,
    "init_std": 0.1,
}


@pytest.fixture
def config(tmp_path):
    def write(**extra):
        p = tmp_path / "run.json"
        p.write_text(json.dumps({**BASE, **extra}), encoding="utf-8")
        return str(p)
    return write


def last_json(out):
    return json.loads(out.strip().splitlines()[-1])


def test_train_writes_outputs(config, tmp_path, capsys):
    csv_path, man_path = tmp_path / "m.csv", tmp_path / "man.json"
    assert main(["train", "--config", config(), "--metrics-csv", str(csv_path), "--manifest", str(man_path)]) == 0
    summary = last_json(capsys.readouterr().out)
    assert summary["rounds_completed"] == 3 and summary["dims"] == [5, 6, 3]
    assert len(csv_path.read_text().splitlines()) == 4
    assert json.loads(man_path.read_text())["mode"] == "perturbed"


def test_plain_and_perturbed_agree(config, tmp_path, capsys):
    hashes = []
    for mode in ("plain", "perturbed"):
        man = tmp_path / f"{mode}.json"
        assert main(["train", "--config", config(), "--mode", mode, "--manifest", str(man)]) == 0
        hashes.append(json.loads(man.read_text())["final_param_hash"])
    assert hashes[0] == hashes[1]


def test_zero_rounds_header_only(config, tmp_path):
    csv_path = tmp_path / "m.csv"
    assert main(["train", "--config", config(), "--rounds", "0", "--metrics-csv", str(csv_path)]) == 0
    assert csv_path.read_text().count("\n") == 1


def test_usage_errors(config):
    assert main(["train", "--config", config(), "--lr", "-1"]) == 5
    with pytest.raises(SystemExit) as exc:
        main(["train", "--config", config(), "--mode", "fancy"])
    assert exc.value.code == 5


def test_missing_dataset_is_ingestion_error(config, tmp_path):
    cfg = config(dataset={"kind": "csv", "path": str(tmp_path / "nope.csv"), "features": ["a"], "targets": ["y"]})
    assert main(["train", "--config", cfg]) == 2


def test_missing_config_and_bad_command(tmp_path):
    assert main(["train", "--config", str(tmp_path / "none.json")]) == 5
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 5


def test_train_rejects_tcp(config):
    assert main(["train", "--config", config(transport={"kind": "tcp"})]) == 5


def test_verify_exit_codes(tmp_path, capsys):
    out = tmp_path / "v.json"
    assert main(["verify", "--count", "12", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["ok"] is True
    assert main(["verify", "--count", "12", "--inject-bug"]) == 1
    assert "offending instance seeds" in capsys.readouterr().err


def test_verify_sizes(capsys):
    assert main(["verify", "--count", "2", "--sizes", "17,32,16,1", "--sizes", "20,64,32,10"]) == 0
    with pytest.raises(SystemExit):
        main(["verify", "--sizes", "17,x"])


def test_attack_reports(capsys):
    assert main(["attack", "argmax", "--trials", "500", "--m", "2"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert set(rep) >= {"m", "nL", "trials", "strategy", "success_rate", "ci95"} and rep["m"] == 2
    assert main(["attack", "argmax", "--nl", "1", "--trials", "10"]) == 0
    assert json.loads(capsys.readouterr().out)["result"] == "not-applicable"
    assert main(["attack", "argmax", "--trials", "200", "--strategy", "all"]) == 0
    assert len(json.loads(capsys.readouterr().out)["reports"]) == 3
    assert main(["attack", "ambiguity", "--count", "5", "--dims", "4,6,3"]) == 0
    assert json.loads(capsys.readouterr().out)["valid"] is True
    assert main(["attack", "grad-ambiguity", "--count", "3", "--dims", "4,6,3"]) == 0
    assert json.loads(capsys.readouterr().out)["ambiguous"] is True
    assert main(["attack", "ambiguity", "--m", "4", "--dims", "4,6,3"]) == 5


def spawn(*args):
    return subprocess.Popen([sys.executable, "-m", "perturbfl", *args],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)


def wait_port(port_file, proc, limit=20.0):
    end = time.monotonic() + limit
    while time.monotonic() < end:
        if port_file.exists() and port_file.read_text().strip():
            return port_file.read_text().strip()
        if proc.poll() is not None:
            raise AssertionError(proc.stderr.read())
        time.sleep(0.05)
    raise AssertionError("server never wrote its port")


def serve(cfg, tmp_path, *extra):
    port_file = tmp_path / "port"
    srv = spawn("serve", "--config", cfg, "--port", "0", "--port-file", str(port_file), *extra)
    return srv, wait_port(port_file, srv)


def test_tcp_serve_and_join_match_train(config, tmp_path, capsys):
    cfg = config(rounds=4)
    srv, port = serve(cfg, tmp_path, "--timeout", "20")
    joins = [spawn("join", "--config", cfg, "--port", port, "--client-id", str(k)) for k in range(2)]
    for p in joins:
        assert p.wait(60) == 0, p.stderr.read()
    assert srv.wait(60) == 0, srv.stderr.read()
    tcp_hash = last_json(srv.stdout.read())["final_param_hash"]
    assert main(["train", "--config", cfg]) == 0
    assert last_json(capsys.readouterr().out)["final_param_hash"] == tcp_hash


def test_tcp_version_mismatch_exits_3(config, tmp_path):
    cfg = config(clients=1)
    srv, port = serve(cfg, tmp_path, "--timeout", "20")
    join = spawn("join", "--config", cfg, "--port", port, "--client-id", "0", "--proto-version", "99")
    assert join.wait(60) == 3
    assert srv.wait(60) == 3


def test_tcp_missing_client_exits_4(config, tmp_path):
    cfg = config()
    srv, port = serve(cfg, tmp_path, "--timeout", "1")
    join = spawn("join", "--config", cfg, "--port", port, "--client-id", "0", "--timeout", "10")
    assert srv.wait(60) == 4
    join.wait(60)


def test_join_rejects_bad_client_id(config):
    assert main(["join", "--config", config(), "--client-id", "7"]) == 5
