import hashlib
import json
import os
import subprocess
import sys

import pytest

from cfrl import offpolicy as op
from cfrl.cli import main
from cfrl.envs import two_door, uniform_policy

FIX = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "fixtures"))


def write_cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def run(cmd, cfg, out, *extra):
    return main([cmd, "--config", cfg, "--out", str(out), *extra])


def manifest(out, cmd):
    with open(os.path.join(out, f"manifest-{cmd}.json")) as fh:
        return json.load(fh)


DOOR = "[run]\nseed = 1\n\n[env]\nkind = twodoor\nalpha = 0.8\n"


@pytest.fixture
def door_buffer(tmp_path):
    cfg = write_cfg(tmp_path, DOOR + "\n[data]\nepisodes = 400\nbuffer = buf.jsonl\n", "data.cfg")
    assert run("gen-data", cfg, tmp_path) == 0
    return tmp_path / "buf.jsonl"


# --- exit codes


def test_verify_pass_and_fail(tmp_path, capsys):
    good = write_cfg(tmp_path, f"[run]\nseed = 0\n[verify]\nrandom_scms = 2\nfixtures = {FIX}/chain.scm\n")
    assert run("verify", good, tmp_path / "a") == 0
    assert "PASS:" in capsys.readouterr().out
    bad = write_cfg(tmp_path, f"[run]\nseed = 0\n[verify]\nrandom_scms = 0\nfixtures = {FIX}/corrupted.scm\n",
                    "bad.cfg")
    assert run("verify", bad, tmp_path / "b") == 4
    assert manifest(tmp_path / "b", "verify")["status"] == "verify_failed"


def test_unknown_algo_is_config_error_with_line(tmp_path, capsys):
    cfg = write_cfg(tmp_path, DOOR + "\n[search]\nalgo = ppo\n")
    assert run("search", cfg, tmp_path / "o") == 2
    assert "line 9" in capsys.readouterr().err


def test_missing_seed_and_bad_workers(tmp_path):
    cfg = write_cfg(tmp_path, "[env]\nkind = twodoor\n[data]\nepisodes = 3\n")
    assert run("gen-data", cfg, tmp_path / "o") == 2
    assert run("gen-data", cfg, tmp_path / "o", "--seed", "1") == 0
    assert run("gen-data", cfg, tmp_path / "o", "--seed", "1", "--workers", "0") == 2


def test_runtime_error_exit_code(tmp_path):
    # a buffer from another environment is an input error at run time
    other = op.collect(two_door(0.6), uniform_policy(two_door(0.6)), 5, seed=0)
    (tmp_path / "other.jsonl").write_text(other.dumps())
    cfg = write_cfg(tmp_path, DOOR + "\n[eval]\nestimator = cf\nbuffer = other.jsonl\n")
    assert run("eval", cfg, tmp_path / "o") == 3
    assert manifest(tmp_path / "o", "eval")["status"] == "error"


def test_out_of_range_horizon_is_config_error(tmp_path, door_buffer):
    cfg = write_cfg(tmp_path, DOOR + f"\n[eval]\nestimator = sweep\nbuffer = {door_buffer}\nt_list = 0, 3\n")
    assert run("eval", cfg, tmp_path / "o") == 2


# --- outputs


def test_manifest_is_complete(tmp_path):
    cfg = write_cfg(tmp_path, DOOR + "\n[data]\nepisodes = 10\n")
    assert run("gen-data", cfg, tmp_path / "o") == 0
    m = manifest(tmp_path / "o", "gen-data")
    with open(cfg, "rb") as fh:
        assert m["config_hash"] == hashlib.sha256(fh.read()).hexdigest()
    assert m["status"] == "ok" and m["seed"] == 1 and m["workers"] == 1
    assert m["started"] <= m["finished"] and m["code_version"]
    assert m["outputs"] == ["buffer.jsonl"]


def test_empty_buffer(tmp_path):
    cfg = write_cfg(tmp_path, DOOR + "\n[data]\nepisodes = 0\n")
    assert run("gen-data", cfg, tmp_path) == 0
    assert len((tmp_path / "buffer.jsonl").read_text().splitlines()) == 1


def test_is_with_matching_policies_is_mean_return(tmp_path, door_buffer):
    cfg = write_cfg(tmp_path, DOOR + f"\n[eval]\nestimator = is\nbuffer = {door_buffer}\n"
                    "target = uniform\nbehavior = uniform\n")
    assert run("eval", cfg, tmp_path / "o") == 0
    row = (tmp_path / "o" / "eval.csv").read_text().splitlines()[1].split(",")
    mean = op.ReplayBuffer.load(str(door_buffer)).returns().mean()
    assert row[0] == "is" and float(row[2]) == pytest.approx(mean, abs=1e-12)


def test_sweep_writes_one_row_per_horizon(tmp_path):
    cfg = write_cfg(tmp_path, "[run]\nseed = 2\n[env]\nkind = file\npomdp = "
                    f"{FIX}/two_door.pomdp\n[data]\nepisodes = 200\n")
    assert run("gen-data", cfg, tmp_path) == 0
    ev = write_cfg(tmp_path, "[run]\nseed = 2\n[env]\nkind = file\npomdp = "
                   f"{FIX}/two_door.pomdp\n[eval]\nestimator = sweep\nbuffer = buffer.jsonl\n"
                   "target = follow_hint\nt_list = 0, 1, 2, 2, 1, 0, 2\n", "ev.cfg")
    assert run("eval", ev, tmp_path / "o") == 0
    lines = (tmp_path / "o" / "eval.csv").read_text().splitlines()
    assert len(lines) == 8
    assert [ln.split(",")[1] for ln in lines[1:]] == ["0", "1", "2", "2", "1", "0", "2"]


def test_search_zero_iterations(tmp_path):
    cfg = write_cfg(tmp_path, "[run]\nseed = 3\n[env]\nkind = grid\npreset = desk\n"
                    "[search]\nalgo = mbps\niterations = 0\n")
    assert run("search", cfg, tmp_path / "o") == 0
    out = tmp_path / "o"
    assert (out / "metrics.csv").read_text().count("\n") == 1
    assert (out / "policies" / "policy_00000.txt").exists()
    assert (out / "policy.txt").read_text() == (out / "policies" / "policy_00000.txt").read_text()


def test_search_outputs_worker_invariant(tmp_path):
    cfg = write_cfg(tmp_path, "[run]\nseed = 3\n[env]\nkind = grid\npreset = desk\n[model]\nepsilon = 0.5\n"
                    "[search]\nalgo = cfgps\niterations = 4\nn_rollouts = 20\nn_cf = 2\nn_eval = 30\n"
                    "chunk = 8\ncheckpoint_every = 2\nexpert = yes\nn_final = 50\n")
    assert run("search", cfg, tmp_path / "a", "--workers", "1") == 0
    assert run("search", cfg, tmp_path / "b", "--workers", "3") == 0
    for name in ("metrics.csv", "policy.txt", "final.csv", "policies/policy_00004.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert sorted(os.listdir(tmp_path / "a" / "policies")) == \
        ["policy_00000.txt", "policy_00002.txt", "policy_00004.txt"]


def test_console_script_entry_point(tmp_path):
    cfg = write_cfg(tmp_path, DOOR + "\n[data]\nepisodes = 2\n")
    proc = subprocess.run([sys.executable, "-m", "cfrl.cli", "gen-data", "--config", cfg,
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
