from __future__ import annotations

import json
import subprocess
import sys

import pytest

from conftest import BOB, DEPLOYER
from contracts import SEL_SET_A, call, counter_runtime, wrap_constructor
from evmport.chain import EmbeddedChain
from evmport.cli import main
from evmport.migrate import Manifest


def hx(b: bytes) -> str:
    return "0x" + b.hex()


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_chain_init_and_send(tmp_path, capsys):
    path = tmp_path / "c.json"
    assert run(capsys, "chain", "init", path)[0] == 0
    code, _, err = run(capsys, "chain", "init", path)
    assert code == 2 and "exists" in err
    deploy = wrap_constructor(counter_runtime()).hex()
    code, out, _ = run(capsys, "chain", "send", path, "--from", hx(BOB), "--data", deploy, "--gas", 200_000, "--compact")
    receipt = json.loads(out)
    assert code == 0 and receipt["status"] == 1 and "\n" not in out.strip()
    assert EmbeddedChain.open(path).get_code(bytes.fromhex(receipt["contract_address"][2:])) == counter_runtime()


def test_replay_from_source(linked_file, tmp_path, capsys):
    src = linked_file
    code, out, _ = run(capsys, "replay", "--source", f"embedded:{src.chain.path}", "--contract", hx(src.simple),
                       "--index-dir", tmp_path / "idx")
    assert code == 0
    doc = json.loads(out)
    assert doc["root"] == hx(src.chain.get_storage_root(src.simple))
    assert {int(k, 16): int(v, 16) for k, v in doc["storage"].items()} == dict(src.chain.get_storage(src.simple))


def test_replay_trace_file_errors(tmp_path, capsys):
    path = tmp_path / "t.json"
    path.write_text('[[{"key": "0x01", "value": "0xzz"}]]')
    code, _, err = run(capsys, "replay", "--trace-file", path)
    assert code == 2 and "NonHexValue" in err
    code, _, err = run(capsys, "replay")
    assert code == 2


def test_deploy_code(tmp_path, capsys):
    snap = tmp_path / "s.json"
    snap.write_text(json.dumps({"0x0": "0x2a"}))
    code, out, _ = run(capsys, "deploy-code", "--snapshot", snap, "--runtime", counter_runtime().hex())
    assert code == 0 and json.loads(out)["deploy_code"].startswith("0x608060405234801561001057600080fd5b50")
    code, _, err = run(capsys, "deploy-code", "--snapshot", snap, "--runtime", "00", "--strategy", "proxy")
    assert code == 2 and "--deployer" in err
    code, _, err = run(capsys, "deploy-code", "--snapshot", snap, "--runtime", "00", "--strategy", "proxy",
                       "--deployer", hx(DEPLOYER), "--gas-limit", 30_000)
    assert code == 2 and "ChunkingImpossible" in err


def test_plan(linked_file, tmp_path, capsys):
    src = linked_file
    code, out, _ = run(capsys, "plan", "--source", f"embedded:{src.chain.path}", "--contract", hx(src.simple),
                       "--gas-limit", 80_000)
    doc = json.loads(out)
    assert code == 0
    assert [n["address"] for n in doc["nodes"]] == [hx(src.referenced), hx(src.simple)]
    assert [n["strategy"] for n in doc["nodes"]] == ["single", "proxy"]


def test_plan_errors_carry_stage(linked_file, tmp_path, capsys):
    src = f"embedded:{linked_file.chain.path}"
    code, _, err = run(capsys, "plan", "--source", src, "--contract", hx(BOB))
    assert code == 2 and err.startswith("evmport: error [plan] NotAContract")
    code, _, err = run(capsys, "plan", "--source", "ftp://x", "--contract", hx(BOB))
    assert code == 2 and "[source]" in err
    code, _, err = run(capsys, "plan", "--source", "http://127.0.0.1:9", "--contract", hx(BOB), "--timeout", 1)
    assert code == 3 and "[source] TransportError" in err


def test_migrate_and_verify(linked_file, tmp_path, capsys):
    src = linked_file
    manifest = tmp_path / "m.json"
    args = ["migrate", "--source", f"embedded:{src.chain.path}", "--target", f"embedded:{tmp_path / 'target.json'}",
            "--contract", hx(src.simple), "--deployer", hx(DEPLOYER), "--manifest", manifest]
    code, out, _ = run(capsys, *args)
    assert code == 0
    doc = json.loads(out)
    assert doc["verdicts"][hx(src.simple)]["state"] == "ValueEqualModuloMap"

    code, _, err = run(capsys, *args)
    assert code == 2 and "--resume" in err
    code, _, _ = run(capsys, *args, "--resume")
    assert code == 0

    code, out, _ = run(capsys, "verify", "--manifest", manifest, "--json")
    assert code == 0
    assert json.loads(out) == Manifest.load(manifest).verdicts

    target = EmbeddedChain.open(tmp_path / "target.json")
    target.send_transaction(BOB, Manifest.load(manifest).node(src.simple).target_address, call(SEL_SET_A, 1), 100_000)
    code, out, _ = run(capsys, "verify", "--manifest", manifest)
    assert code == 1
    assert any(line.startswith(f"FAIL {hx(src.simple)}") and "slot 0x0" in line for line in out.splitlines())


def test_verify_missing_manifest(tmp_path, capsys):
    code, _, err = run(capsys, "verify", "--manifest", tmp_path / "none.json")
    assert code == 2 and "[manifest] ManifestCorrupt" in err


def test_required_arguments():
    with pytest.raises(SystemExit) as info:
        main(["migrate", "--contract", hx(BOB), "--deployer", hx(DEPLOYER), "--manifest", "m.json"])
    assert info.value.code == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "evmport", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "migrate" in proc.stdout
