import argparse
import json

import pytest

from switchrl.cli import main, parse_seeds, read_config
from switchrl.harness import CSV_FIELDS, rows_from_csv


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt") / "play.ckpt"
    code = main(["pretrain", "--env", "maze-play", "--tier", "medium", "--out", str(out),
                 "--dataset-size", "400", "--offline-iters", "500"])
    assert code == 0
    return out


def test_parse_seeds():
    assert parse_seeds("0..4") == [0, 1, 2, 3, 4]
    assert parse_seeds("3,7") == [3, 7]
    for bad in ("", "a..b", "1,x"):
        with pytest.raises(argparse.ArgumentTypeError):
            parse_seeds(bad)


def test_read_config(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('[run]\nrho = 0.2  # comment\nexplore-fixed-steps = "7"\n\n')
    assert read_config(path) == {"rho": "0.2", "explore_fixed_steps": "7"}
    path.write_text("rho 0.2\n")
    with pytest.raises(ValueError):
        read_config(path)


def test_pretrain_writes_artifacts(ckpt):
    side = json.loads(ckpt.with_name(ckpt.name + ".json").read_text())
    assert side["env"] == "maze-play" and side["tier"] == "medium"
    assert ckpt.with_name(ckpt.name + ".data").stat().st_size == 4 + 400 * 21


def test_run_and_plot(ckpt, tmp_path):
    out = tmp_path / "run"
    code = main(["run", "--pretrained", str(ckpt), "--controller", "nonmono", "--seeds", "0,1",
                 "--out", str(out), "--online-steps", "400", "--eval-interval", "200",
                 "--eval-episodes", "3", "--initial-collection-steps", "100", "--rho", "0.3"])
    assert code == 0
    for name in ("nonmono_seed0.csv", "nonmono_seed1.json", "nonmono.csv", "nonmono.json"):
        assert (out / name).exists()
    merged = (out / "nonmono.csv").read_text()
    assert merged.splitlines()[0] == ",".join(CSV_FIELDS)
    assert len(rows_from_csv(merged)) == 4
    svg = tmp_path / "plot.svg"
    assert main(["plot", "--in", str(out), "--out", str(svg)]) == 0
    assert svg.read_text().lstrip().startswith("<?xml")


def test_config_overrides_flags(ckpt, tmp_path):
    cfg = tmp_path / "cfg.toml"
    cfg.write_text("online_steps = 200\ncontroller = pex\n")
    out = tmp_path / "run"
    code = main(["run", "--ckpt", str(ckpt), "--controller", "buffer", "--seeds", "0", "--out", str(out),
                 "--online-steps", "1000", "--eval-interval", "200", "--eval-episodes", "2",
                 "--config", str(cfg)])
    assert code == 0
    rows = rows_from_csv((out / "pex.csv").read_text())
    assert [r.step for r in rows] == [200]
    assert not (out / "buffer.csv").exists()


def test_config_rejects_unknown_keys(ckpt, tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("warp_speed = 9\n")
    with pytest.raises(SystemExit):
        main(["run", "--ckpt", str(ckpt), "--controller", "pex", "--out", str(tmp_path), "--config", str(cfg)])
    cfg.write_text("value_source = mean\n")
    with pytest.raises(SystemExit):
        main(["run", "--ckpt", str(ckpt), "--controller", "pex", "--out", str(tmp_path), "--config", str(cfg)])


def test_errors_return_nonzero(tmp_path):
    assert main(["pretrain", "--env", "maze-nowhere", "--tier", "random", "--out", str(tmp_path / "x")]) == 2
    assert main(["run", "--ckpt", str(tmp_path / "missing.ckpt"), "--controller", "pex", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit):
        main(["run", "--ckpt", "x", "--controller", "greedy", "--out", "y"])


def test_bench_single_task(tmp_path, capsys):
    code = main(["bench", "--out", str(tmp_path), "--task", "corridor/medium", "--controllers", "offline,buffer",
                 "--seeds", "0", "--online-steps", "500"])
    assert code == 0
    assert (tmp_path / "corridor_medium.csv").exists() and (tmp_path / "corridor_medium.svg").exists()
    assert capsys.readouterr().out.startswith("corridor/medium offline=")
