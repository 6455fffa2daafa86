import shutil
from unittest.mock import MagicMock, patch

import pytest

from app import main as cli
from configs.settings import write_config
from tools.selftest import CheckResult, SelftestReport


@pytest.fixture
def config_file(tmp_path, small_config):
    path = tmp_path / "small.cfg"
    write_config(small_config, path)
    return path


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# --- Argument handling ---

def test_unknown_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit) as info:
        cli.main(["paint"])
    assert info.value.code == 2


def test_eval_scene_needs_out():
    with pytest.raises(SystemExit) as info:
        cli.main(["eval", "--scene", "somewhere"])
    assert info.value.code == 2


def test_eval_sources_are_exclusive():
    with pytest.raises(SystemExit) as info:
        cli.main(["eval", "--scene", "a", "--run", "b"])
    assert info.value.code == 2


def test_threads_flag_reaches_the_config():
    handler = MagicMock(return_value=0)
    with patch.dict(cli.COMMANDS, {"selftest": handler}):
        assert cli.main(["selftest", "--threads", "3"]) == 0
    args, config = handler.call_args[0]
    assert config.threads == 3
    assert args.configs == 1000


def test_unknown_config_key_fails_cleanly(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("brightness=2\n")
    assert cli.main(["selftest", "--config", str(path)]) == 1
    err = capsys.readouterr().err
    assert "error: kind=ConfigError" in err
    assert "brightness" in err


def test_failed_selftest_reports_its_checks(capsys):
    report = SelftestReport(checks=[
        CheckResult(name="shading_gradients", passed=True, value=1e-7, threshold=1e-4),
        CheckResult(name="refine_gradients", passed=False, value=0.2, threshold=1e-4),
    ])
    with patch.object(cli, "run_selftest", return_value=report):
        assert cli.main(["selftest", "--configs", "5"]) == 1
    captured = capsys.readouterr()
    assert "FAIL refine_gradients" in captured.out
    assert 'error: kind=SelftestFailure message="failed checks: refine_gradients"' in captured.err


def test_weight_and_budget_flags_reach_the_config():
    handler = MagicMock(return_value=0)
    with patch.dict(cli.COMMANDS, {"selftest": handler}):
        assert cli.main(["selftest", "--lambda-s", "0.2", "--gn-iters", "7", "--w-con", "0",
                         "--passes", "2"]) == 0
    _, config = handler.call_args[0]
    assert config.lambda_s == 0.2
    assert config.gn_max_iters == 7
    assert config.w_con == 0.0
    assert config.block_passes == 2
    assert config.w_l == 10.0


def test_flags_win_over_the_config_file(config_file):
    handler = MagicMock(return_value=0)
    with patch.dict(cli.COMMANDS, {"selftest": handler}):
        assert cli.main(["selftest", "--config", str(config_file), "--adam-steps", "11"]) == 0
    _, config = handler.call_args[0]
    assert config.adam_steps_per_block == 11
    assert config.uv_resolution == 48


def test_unexpected_exception_is_one_error_line(capsys):
    handler = MagicMock(side_effect=KeyError(99))
    with patch.dict(cli.COMMANDS, {"selftest": handler}):
        assert cli.main(["selftest"]) == 1
    err = capsys.readouterr().err
    assert "error: kind=KeyError" in err
    assert "Traceback" not in err


@pytest.mark.parametrize("argv", [
    ["fit", "--out", "x"],
    ["fit", "--left", "l.png", "--right", "r.png", "--cameras", "c.txt", "--landmarks", "m.txt", "--out", "x"],
    ["fit", "in", "--left", "l.png", "--out", "x"],
])
def test_fit_inputs_are_a_directory_or_a_full_pair(argv):
    with pytest.raises(SystemExit) as info:
        cli.main(argv)
    assert info.value.code == 2


def test_model_flag_is_accepted_by_model_commands():
    parser = cli.build_parser()
    for argv in (["infer", "fit"], ["refine", "infer"], ["track", "in", "--infer", "i"], ["render", "fit"],
                 ["eval", "--run", "r"]):
        args = parser.parse_args(argv + ["--out", "o", "--model", "m.rcm"])
        assert args.model == "m.rcm"


# --- Scene generation ---

def test_gen_is_deterministic(tmp_path, config_file):
    for name in ("a", "b"):
        code = cli.main(["gen", "--seed", "4", "--frames", "1", "--noise", "1.5", "--config", str(config_file),
                         "--out", str(tmp_path / name)])
        assert code == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_gen_rejects_out_of_range_strength(tmp_path, config_file, capsys):
    code = cli.main(["gen", "--specular", "7", "--config", str(config_file), "--out", str(tmp_path / "s")])
    assert code == 1
    assert "error: kind=ParameterError" in capsys.readouterr().err


# --- Stages ---

def test_fit_without_cameras_names_the_file(tmp_path, scene_dir, config_file, capsys):
    broken = tmp_path / "broken"
    shutil.copytree(scene_dir, broken)
    (broken / "cameras.txt").unlink()
    code = cli.main(["fit", str(broken), "--config", str(config_file), "--out", str(tmp_path / "fit")])
    assert code == 1
    err = capsys.readouterr().err
    assert "error: kind=FileNotFoundError" in err
    assert "cameras.txt" in err


def test_render_sweep_needs_reflectance(tmp_path, scene_dir, config_file, capsys):
    fit_dir = tmp_path / "fit"
    assert cli.main(["fit", str(scene_dir), "--frames", "0", "--config", str(config_file),
                     "--out", str(fit_dir)]) == 0
    code = cli.main(["render", str(fit_dir), "--sweep", "3", "--config", str(config_file),
                     "--out", str(tmp_path / "sweep.png")])
    assert code == 1
    assert "error: kind=ParameterError" in capsys.readouterr().err


@pytest.mark.slow
def test_stage_commands_chain(tmp_path, scene_dir, config_file):
    cfg = ["--config", str(config_file)]
    fit, infer, refine = tmp_path / "fit", tmp_path / "infer", tmp_path / "refine"
    assert cli.main(["fit", str(scene_dir), "--out", str(fit), "--log", str(tmp_path / "fit.csv")] + cfg) == 0
    assert (fit / "state_0.rfs").is_file() and (fit / "state_1.rfs").is_file()
    assert (tmp_path / "fit.csv").is_file()
    assert cli.main(["infer", str(fit), "--out", str(infer)] + cfg) == 0
    assert (infer / "specular.frm").is_file()
    assert cli.main(["refine", str(infer), "--out", str(refine)] + cfg) == 0
    assert (refine / "mesh_1.mesh").is_file()
    assert cli.main(["render", str(fit), "--infer", str(infer), "--refine", str(refine), "--frame", "1",
                     "--out", str(tmp_path / "heldout.png")] + cfg) == 0
    assert (tmp_path / "heldout.png").is_file()
    assert cli.main(["render", str(fit), "--infer", str(infer), "--sweep", "2",
                     "--out", str(tmp_path / "orbit.png")] + cfg) == 0
    assert (tmp_path / "orbit_0.png").is_file() and (tmp_path / "orbit_1.png").is_file()


def test_fit_of_an_explicit_pair(tmp_path, scene_dir, config_file):
    out = tmp_path / "pair"
    code = cli.main(["fit", "--model", str(scene_dir / "model.rcm"),
                     "--left", str(scene_dir / "frames" / "0" / "left.png"),
                     "--right", str(scene_dir / "frames" / "0" / "right.png"),
                     "--cameras", str(scene_dir / "cameras.txt"),
                     "--landmarks", str(scene_dir / "landmarks" / "0.txt"),
                     "--gn-iters", "3", "--config", str(config_file), "--out", str(out)])
    assert code == 0
    assert (out / "state_0.rfs").is_file()
    assert cli.read_manifest(out)["inputs"]["left"].endswith("left.png")


def test_unfitted_frame_is_one_error_line(tmp_path, scene_dir, config_file, capsys):
    fit_dir = tmp_path / "fit"
    assert cli.main(["fit", str(scene_dir), "--frames", "0", "--config", str(config_file),
                     "--out", str(fit_dir)]) == 0
    capsys.readouterr()
    code = cli.main(["infer", str(fit_dir), "--frames", "99", "--config", str(config_file),
                     "--out", str(tmp_path / "infer")])
    assert code == 1
    err = capsys.readouterr().err
    assert "error: kind=ParameterError" in err
    assert "Traceback" not in err


@pytest.mark.slow
def test_thread_count_does_not_change_the_outputs(tmp_path, scene_dir, config_file):
    for threads in ("1", "3"):
        fit, infer = tmp_path / f"fit_{threads}", tmp_path / f"infer_{threads}"
        cfg = ["--config", str(config_file), "--threads", threads]
        assert cli.main(["fit", str(scene_dir), "--frames", "0", "--out", str(fit)] + cfg) == 0
        assert cli.main(["infer", str(fit), "--out", str(infer)] + cfg) == 0
    fits = [_tree(tmp_path / f"fit_{t}") for t in ("1", "3")]
    infers = [_tree(tmp_path / f"infer_{t}") for t in ("1", "3")]
    assert {k: v for k, v in fits[0].items() if k.endswith(".rfs") or k.endswith(".frm")} == \
        {k: v for k, v in fits[1].items() if k.endswith(".rfs") or k.endswith(".frm")}
    assert {k: v for k, v in infers[0].items() if k.endswith(".frm")} == \
        {k: v for k, v in infers[1].items() if k.endswith(".frm")}
