import csv
import subprocess
import sys

import pytest

from qimarl import ConfigError, ResourceCapError
from qimarl import config as cfgmod
from qimarl.cli import main
from qimarl.metrics import read_csv

SMOKE = """\
[env]
horizon = 1
[run]
episodes = 1
agents = 1
seeds = 0
"""

TINY = """\
[env]
width = 8
height = 8
horizon = 3
[qaoa]
restarts = 1
max_iters = 20
[run]
episodes = 2
agents = 2
seeds = 0, 1
"""


def write(tmp_path, text, name="cfg.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_empty_config_fills_defaults():
    cfg = cfgmod.loads("")
    assert (cfg.marl.alpha, cfg.marl.beta) == (1.0, 0.3)
    assert (cfg.qaoa.p, cfg.qaoa.shots, cfg.qaoa.tau) == (2, 200, 0.1)
    assert cfg.marl.eta == 0.3 and cfg.marl.lambda_shape == 0.02
    assert cfg.marl.actor_lr == 3e-4 and cfg.marl.critic_lr == 1e-3 and cfg.marl.clip == 0.2
    assert cfg.gp.length_scale == 2.5 and cfg.gp.variance == 1.0


def test_empty_qaoa_section_defaults():
    cfg = cfgmod.loads("[qaoa]\n")
    assert (cfg.qaoa.p, cfg.qaoa.shots, cfg.qaoa.tau) == (2, 200, 0.1)


def test_explicit_keys_win():
    cfg = cfgmod.loads("[marl]\nbeta = 0.7\nkappa = 2\n[qaoa]\np = 3\n")
    assert cfg.marl.beta == 0.7 and cfg.marl.kappa == 2.0 and cfg.qaoa.p == 3
    assert cfg.marl.alpha == 1.0


def test_kappa_map_follows_kappa_unless_set():
    assert cfgmod.loads("[marl]\nkappa = 2\n").kappa_map == 2.0
    assert cfgmod.loads("[marl]\nkappa = 2\n[qaoa]\nkappa_map = 0\n").kappa_map == 0.0


def test_dumps_roundtrip():
    cfg = cfgmod.loads("[marl]\nhidden = 32, 16\n[sweep]\npreset = kappa_appendix\n")
    assert cfgmod.loads(cfgmod.dumps(cfg)) == cfg


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError, match="line 3"):
        cfgmod.loads("[marl]\nalpha = 1\nalpah = 2\n")
    with pytest.raises(ConfigError, match="line 1"):
        cfgmod.loads("[bogus]\n")


def test_bad_value_reports_line():
    with pytest.raises(ConfigError, match="line 2"):
        cfgmod.loads("[run]\nepisodes = many\n")


def test_qubit_cap():
    with pytest.raises(ResourceCapError, match="20"):
        cfgmod.loads("[qaoa]\nn = 25\nregion_radius = 3\n")
    cfg = cfgmod.loads("[qaoa]\nn = 25\nregion_radius = 3\nmode = mapping\n")
    assert cfg.qaoa.n == 25


def test_overrides_revalidate():
    cfg = cfgmod.loads("")
    assert cfgmod.with_overrides(cfg, {"marl.kappa": 0.5}).marl.kappa == 0.5
    with pytest.raises(ConfigError):
        cfgmod.with_overrides(cfg, {"marl.nope": 1})
    with pytest.raises(ConfigError):
        cfgmod.with_overrides(cfg, {"marl.variant": "dqn"})


def test_sweep_presets():
    cfg = cfgmod.loads("[sweep]\npreset = sensitivity\n")
    assert dict(cfg.sweep) == {"marl.alpha": (0.1, 1.0, 10.0), "marl.beta": (0.1, 1.0, 10.0),
                               "marl.kappa": (0.1, 1.0, 10.0)}
    with pytest.raises(ConfigError, match="line 2"):
        cfgmod.loads("[sweep]\npreset = nope\n")


def test_variant_gates_qaoa_coefficients():
    cfg = cfgmod.loads("[marl]\nvariant = ppo_baseline\n")
    assert not cfg.marl.qaoa_config.active
    assert cfgmod.loads("").marl.qaoa_config.active


# ---------------------------------------------------------------- CLI

def test_cli_exit_codes(tmp_path, capsys):
    assert main(["train", "--config", str(write(tmp_path, "[marl]\nalpah = 1\n"))]) == 1
    assert "line 2" in capsys.readouterr().err
    assert main(["train", "--config", str(write(tmp_path, "[qaoa]\nn = 25\nregion_radius = 3\n"))]) == 3
    assert "20" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.ini")]) == 1
    assert main(["frobnicate", "--config", "x"]) == 1


def test_cli_smoke_train(tmp_path):
    out = tmp_path / "out"
    assert main(["train", "--config", str(write(tmp_path, SMOKE)), "--out", str(out)]) == 0
    rows = read_csv(out / "seed_0" / "metrics.csv")
    assert len(rows) == 1 and rows[0].episode == 1
    for name in ("resolved_config.ini", "summary.json", "checkpoint.npz"):
        assert (out / "seed_0" / name).exists()
    assert (out / "aggregate.csv").exists()


def test_cli_reproduces_from_resolved_config(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(write(tmp_path, TINY)), "--seed", "1", "--out", str(a)]) == 0
    resolved = a / "seed_1" / "resolved_config.ini"
    assert main(["train", "--config", str(resolved), "--out", str(b)]) == 0
    assert (a / "seed_1" / "metrics.csv").read_bytes() == (b / "seed_1" / "metrics.csv").read_bytes()


def test_cli_sweep_directories(tmp_path):
    text = TINY.replace("seeds = 0, 1", "seeds = 0").replace("episodes = 2", "episodes = 1")
    text += "[sweep]\nmarl.kappa = 0.5, 1.0, 2.0\n"
    out = tmp_path / "sw"
    assert main(["sweep", "--config", str(write(tmp_path, text)), "--out", str(out)]) == 0
    dirs = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert dirs == ["marl.kappa=0.5", "marl.kappa=1.0", "marl.kappa=2.0"]
    for d in dirs:
        cfg = cfgmod.load(out / d / "seed_0" / "resolved_config.ini")
        assert cfg.marl.kappa == float(d.split("=")[1]) and cfg.sweep == ()
    with open(out / "sweep.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3 * 1


def test_cli_compare_paired_rows(tmp_path):
    text = TINY.replace("episodes = 2", "episodes = 1")
    text += "[experiment]\nvariants = qi_marl, ppo_baseline\n"
    out = tmp_path / "cmp"
    assert main(["compare", "--config", str(write(tmp_path, text)), "--out", str(out)]) == 0
    with open(out / "paired_deltas.csv") as fh:
        rows = list(csv.DictReader(fh))
    metrics = {r["metric"] for r in rows}
    assert len(metrics) == 5
    for m in metrics:
        sel = [r for r in rows if r["metric"] == m]
        assert len(sel) == 2 and {r["seed"] for r in sel} == {"0", "1"}
        for r in sel:
            assert float(r["delta"]) == pytest.approx(float(r["value"]) - float(r["reference_value"]))


def test_cli_ablate_and_scale(tmp_path):
    text = TINY.replace("seeds = 0, 1", "seeds = 0").replace("episodes = 2", "episodes = 1")
    text += "[experiment]\nablations = no_gp\nscale_agents = 1, 2\nscale_episodes = 1\n"
    cfg = write(tmp_path, text)
    assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path / "ab")]) == 0
    assert (tmp_path / "ab" / "no_gp" / "seed_0" / "metrics.csv").exists()
    resolved = cfgmod.load(tmp_path / "ab" / "no_gp" / "resolved_config.ini")
    assert resolved.gp.use_gp is False
    assert main(["scale", "--config", str(cfg), "--out", str(tmp_path / "sc")]) == 0
    with open(tmp_path / "sc" / "scale.csv") as fh:
        assert [r["agents"] for r in csv.DictReader(fh)] == ["1", "2"]


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "qimarl.cli", "train", "--config",
                           str(write(tmp_path, "[run]\nagents = 0\n"))], capture_output=True, text=True)
    assert proc.returncode == 1 and "agents" in proc.stderr
