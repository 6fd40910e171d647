import json
from pathlib import Path

import pytest

from lobdiff import config
from lobdiff.cli import main, read_triangle, UsageError


def small_config(**extra) -> dict:
    cfg = {
        "model": {"name": "example_1"},
        "initial": {"b0": 0.8, "kind": "linear", "slope": 1.0, "horizon": 6.0},
        "scaling": {"delta_x": 0.05, "delta_p": 0.2, "T": 0.1},
        "truncation": {"m": 2, "l_max": 1, "m_store": 3},
        "sde": {"delta": 0.01},
        "diagnostics": {"n_paths": 4},
        "seed": 11,
    }
    for k, v in extra.items():
        cfg[k] = v
    return cfg


def write_cfg(tmp_path: Path, data: dict, name="run.json") -> Path:
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


def tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# ---- config


def test_config_round_trip():
    cfg = config.from_dict(small_config(limit={"n_paths": 20, "model": {"eta": 1.0}}))
    again = config.loads(config.dumps(cfg))
    assert again == cfg
    assert again.limit.model == {"eta": 1.0}


def test_config_defaults_fill_missing_blocks():
    cfg = config.from_dict({"seed": 3})
    assert cfg.seed == 3
    assert cfg.truncation.m == 2
    assert cfg.limit is None


@pytest.mark.parametrize("data, where", [
    ({"model": {"nmae": "example_1"}}, "model.nmae"),
    ({"model": {"kernel": {"widht": 1.0}}}, "model.kernel.widht"),
    ({"bogus": 1}, "bogus"),
    ({"scaling": {"ladder": [[0.1]]}}, "scaling.ladder"),
    ({"sde": {"mode": "fancy"}}, "sde.mode"),
    ({"initial": {"kind": "cubic"}}, "initial.kind"),
    ({"limit": {"model": {"etaa": 2}}}, "limit.model.etaa"),
])
def test_config_errors_name_the_key(data, where):
    with pytest.raises(config.ConfigError, match=where.replace(".", r"\.")):
        config.from_dict(data)


def test_config_bad_json():
    with pytest.raises(config.ConfigError):
        config.loads("{not json")


def test_rungs_from_ladder():
    cfg = config.from_dict(small_config(scaling={"ladder": [[0.1, 0.2], [0.05, 0.1]], "T": 1.0}))
    assert [(r.delta_x, r.delta_p) for r in cfg.rungs()] == [(0.1, 0.2), (0.05, 0.1)]


# ---- determinism of each subcommand


@pytest.mark.parametrize("command, extra", [
    ("simulate-micro", {}),
    ("simulate-limit", {"limit": {"n_paths": 30}}),
    ("basis", {}),
    ("validate", {}),
    ("converge", {"limit": {"n_paths": 30},
                  "scaling": {"ladder": [[0.1, 0.2], [0.05, 0.2]], "T": 0.1},
                  "diagnostics": {"n_paths": 100, "n_bootstrap": 20}}),
])
def test_subcommand_rerun_is_byte_identical(tmp_path, command, extra):
    cfg = write_cfg(tmp_path, small_config(**extra))
    outs = []
    for k in range(2):
        out = tmp_path / f"out{k}"
        code = main([command, "--config", str(cfg), "--out", str(out)])
        assert code in (0, 1)
        outs.append(tree(out))
    assert outs[0].keys() == outs[1].keys()
    assert "manifest.json" in outs[0]
    assert outs[0] == outs[1]


def test_seed_flag_changes_micro_output(tmp_path):
    cfg = write_cfg(tmp_path, small_config())
    main(["simulate-micro", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["simulate-micro", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "12"])
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a["path_00000.csv"] != b["path_00000.csv"]
    assert json.loads(b["manifest.json"])["seed"] == 12


def test_simulate_micro_layout(tmp_path):
    cfg = write_cfg(tmp_path, small_config())
    assert main(["simulate-micro", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    lines = (tmp_path / "o" / "path_00000.csv").read_text().splitlines()
    assert lines[0] == "step,t,B,phi,omega,pi,V_1,V_2,V_3"
    assert lines[1].split(",")[:3] == ["0", "0.0", "0.8"]
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert len(man["files"]) == 4


def test_basis_output_values(tmp_path):
    cfg = write_cfg(tmp_path, small_config(truncation={"m": 1, "l_max": 1}))
    assert main(["basis", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = (tmp_path / "o" / "indices.csv").read_text().splitlines()
    assert rows[0] == "i,k,l,lo,hi"
    assert rows[1] == "1,0,-1,0.0,1.0"
    basis = (tmp_path / "o" / "basis.csv").read_text().splitlines()
    head = basis[0].split(",")
    first = dict(zip(head, basis[1].split(",")))
    # F_1 is the tail integral of the unit indicator on [0, 1]
    assert float(first["F_1"]) == 1.0


def test_validate_flags_bad_model(tmp_path):
    cfg = write_cfg(tmp_path, small_config())
    assert main(["validate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rep = json.loads((tmp_path / "o" / "validation.json").read_text())
    assert rep[0]["ok"] and rep[0]["violations"] == []


# ---- decompose


def test_decompose_example(tmp_path):
    src = tmp_path / "rho.csv"
    src.write_text("i,j,rho\n2,1,0.5\n")
    dst = tmp_path / "out.csv"
    assert main(["decompose", str(src), str(dst)]) == 0
    rows = {(r[0], r[1]): r for r in (x.split(",") for x in dst.read_text().splitlines()[1:])}
    assert float(rows[("2", "2")][2]) == pytest.approx(0.8660254037844386, abs=1e-15)
    assert float(rows[("2", "1")][3]) == pytest.approx(-0.5773502691896258, abs=1e-15)
    assert float(rows[("1", "1")][2]) == 1.0


def test_decompose_rejects_out_of_range(tmp_path, capsys):
    src = tmp_path / "rho.csv"
    src.write_text("i,j,rho\n2,1,1.5\n")
    assert main(["decompose", str(src), str(tmp_path / "o.csv")]) == 3
    assert not (tmp_path / "o.csv").exists()


def test_decompose_not_psd_names_row(tmp_path, capsys):
    src = tmp_path / "rho.csv"
    src.write_text("i,j,rho\n2,1,0.9\n3,1,0.9\n3,2,-0.9\n")
    assert main(["decompose", str(src), str(tmp_path / "o.csv")]) == 3
    assert "row 3" in capsys.readouterr().err


def test_read_triangle_header_and_shape():
    with pytest.raises(UsageError):
        read_triangle("a,b,c\n1,1,1\n")
    with pytest.raises(UsageError):
        read_triangle("i,j,rho\n1,2,0.1\n")
    tri = read_triangle("i,j,rho\n3,2,0.25\n")
    assert tri.values[2, 1] == 0.25 and tri.values[0, 0] == 1.0


# ---- exit codes


def test_converge_without_limit_block_is_usage_error(tmp_path):
    cfg = write_cfg(tmp_path, small_config())
    assert main(["converge", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_general_mode_needs_exploratory_for_converge(tmp_path, capsys):
    cfg = write_cfg(tmp_path, small_config(limit={"n_paths": 10}, sde={"delta": 0.01, "mode": "general"}))
    assert main(["converge", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "exploratory" in capsys.readouterr().err


def test_unknown_key_is_usage_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"model": {"nmae": "x"}})
    assert main(["basis", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "model.nmae" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["basis", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2


def test_off_grid_b0(tmp_path):
    cfg = write_cfg(tmp_path, small_config(initial={"b0": 0.83}))
    assert main(["simulate-micro", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_missing_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
