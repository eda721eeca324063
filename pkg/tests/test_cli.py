import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from hwnet.cli import main
from hwnet.config import apply_overrides, config_hash, load_config
from hwnet.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
FAST = ["--set", "run.horizon=400", "--set", "run.replications=2", "--set", "run.num_batches=16"]


@pytest.mark.parametrize("name", ["n_network", "m_network", "single_class"])
def test_shipped_configs_load(name):
    cfg = load_config(CONFIGS / f"{name}.ini")
    assert cfg.topo.num_edges == cfg.topo.I + cfg.topo.J - 1
    assert len(cfg.config_hash) == 64


def test_overrides_and_hash_change():
    a = load_config(CONFIGS / "n_network.ini")
    b = load_config(CONFIGS / "n_network.ini", ["run.n_list=50", "edge.0-1.mu=1"])
    assert b.n_list == [50]
    assert a.config_hash != b.config_hash
    assert apply_overrides({"x": {"a": "1"}}, ["x.a=2", "edge.0-1.mu=3"]) == {"x": {"a": "2"},
                                                                             "edge.0-1": {"mu": "3"}}
    assert config_hash({"a": {"b": "1"}}) == config_hash({"a": {"b": "1"}})


@pytest.mark.parametrize("override,key", [
    ("class.0.lam=-1", "class.0.lam"),
    ("cost.theta=0.4,0.4", "cost.theta"),
    ("cost.delta=0,1", "cost.delta"),
    ("policy.kind=greedy", "policy.kind"),
    ("policy.uc=0.9,0.3", "policy.uc"),
    ("run.n_list=", "run.n_list"),
    ("bogus.key=1", "bogus"),
    ("run.colour=red", "run.colour"),
])
def test_invalid_values_name_the_key(override, key):
    with pytest.raises(ConfigError) as info:
        load_config(CONFIGS / "n_network.ini", [override])
    assert info.value.key == key


def _copy_without(tmp_path, name, section, key):
    text = (CONFIGS / f"{name}.ini").read_text().splitlines()
    out, cur = [], None
    for line in text:
        s = line.strip()
        if s.startswith("["):
            cur = s[1:-1]
        if cur == section and s.split("=")[0].strip() == key:
            continue
        out.append(line)
    p = tmp_path / f"{name}.ini"
    p.write_text("\n".join(out) + "\n")
    return p


def test_missing_edge_rate_exits_2(tmp_path, capsys):
    path = _copy_without(tmp_path, "n_network", "edge.0-1", "mu")
    assert main(["fluid", str(path), "--out", str(tmp_path)]) == 2
    assert "edge.0-1.mu" in capsys.readouterr().err


def test_fluid_command(tmp_path):
    assert main(["fluid", str(CONFIGS / "n_network.ini"), "--out", str(tmp_path)]) == 0
    data = json.loads((tmp_path / "fluid.json").read_text())
    r = data["result"]
    assert np.allclose(r["xi_star"], [[1.0, 0.25], [0.0, 0.75]], atol=1e-9)
    assert np.allclose(r["x_star"], [1.5, 1.5], atol=1e-9)
    assert np.allclose(r["z_star"], [[1.0, 0.5], [0.0, 1.5]], atol=1e-9)
    assert data["config_hash"] == config_hash(data["config"])


def test_psi_command(tmp_path):
    assert main(["psi", str(CONFIGS / "n_network.ini"), "--alpha", "3,1", "--beta", "2,2",
                 "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "psi.json").read_text())["result"]["psi"] == [[2, 1], [0, 1]]
    assert main(["psi", str(CONFIGS / "n_network.ini"), "--alpha", "3,1", "--out", str(tmp_path)]) == 2


def test_bad_subcommand_exit_code():
    assert main(["nonsense"]) == 2


def test_runtime_failure_exit_3(tmp_path):
    # C_tilde far too large for the requested n cannot be realized: validation (2);
    # a tiny guard makes the run explode: runtime (3)
    args = ["simulate-ctmc", str(CONFIGS / "m_network.ini"), "--out", str(tmp_path), *FAST]
    assert main(args + ["--set", "run.n=4", "--set", "policy.C_tilde=100"]) == 2
    assert main(args + ["--set", "run.n=50", "--set", "run.replications=1", "--set", "run.num_batches=20",
                        "--set", "network.allow_zero_abandonment=true",
                        "--set", "class.1.gamma=0", "--set", "policy.kind=canonical"]) == 3


def test_convergence_single_row(tmp_path):
    args = ["convergence", str(CONFIGS / "single_class.ini"), "--set", "run.n_list=50", "--out", str(tmp_path),
            *FAST]
    assert main(args) == 0
    data = json.loads((tmp_path / "convergence.json").read_text())
    assert len(data["result"]["entries"]) == 1
    rows = (tmp_path / "convergence.csv").read_text().splitlines()
    assert rows[0] == "n,estimate,ci_lo,ci_hi,metric"
    assert sum(1 for r in rows if r.endswith(",J_ctmc")) == 1


@pytest.mark.parametrize("cmd,name", [
    ("simulate-ctmc", "n_network"),
    ("simulate-diffusion", "n_network"),
    ("verify-lyapunov", "m_network"),
    ("verify-moments", "n_network"),
])
def test_commands_are_byte_reproducible(tmp_path, cmd, name):
    extra = ["--set", "run.n_list=50", "--set", "lyapunov.samples=2000"]
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main([cmd, str(CONFIGS / f"{name}.ini"), "--out", str(out), *FAST, *extra]) == 0
    for f in a.iterdir():
        assert f.read_bytes() == (b / f.name).read_bytes()
    shutil.rmtree(tmp_path)
