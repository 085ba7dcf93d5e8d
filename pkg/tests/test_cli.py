import numpy as np
import pytest

from localtrans.cli import MetricsReport, main
from localtrans.homography import Homography, make_synthetic_grid, psnr, read_pnm, write_pnm
from localtrans.network import LocalTrans, ModelConfig
from localtrans.train import save_model

TINY_DATA = ["--patch-size", "16", "--rho", "3", "--margin", "2"]
TINY_MODEL = ["--levels", "2", "--channels", "4"]


def key_values(text: str) -> dict[str, str]:
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


def run(capsys, *argv) -> tuple[int, dict[str, str]]:
    code = main([str(a) for a in argv])
    return code, key_values(capsys.readouterr().out)


def tree_bytes(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def zero_model(tmp_path):
    path = tmp_path / "zero.ltck"
    save_model(path, LocalTrans(ModelConfig(levels=2, channels=4, height=16, width=16)))
    return path


# --- gen-data ---------------------------------------------------------------------------------

def test_gen_data_is_byte_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        code, kv = run(capsys, "gen-data", "--n", 8, "--seed", 7, "--out", tmp_path / name, *TINY_DATA)
        assert code == 0
    assert kv["samples"] == "8" and kv["master_seed"] == "7"
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert len(a) == 24 and a == b


def test_gen_data_zero_rho_gives_identity(tmp_path, capsys):
    code, _ = run(capsys, "gen-data", "--n", 3, "--rho", 0, "--patch-size", 16, "--margin", 2, "--out", tmp_path)
    assert code == 0
    for gt in tmp_path.rglob("gt.txt"):
        h = Homography.from_text(gt.read_text().splitlines()[0])
        np.testing.assert_array_equal(h.m, np.eye(3))


def test_gen_data_records_cross_resolution(tmp_path, capsys):
    code, _ = run(capsys, "gen-data", "--n", 3, "--cross-res", 4, "--out", tmp_path, *TINY_DATA)
    assert code == 0
    for gt in tmp_path.rglob("gt.txt"):
        assert gt.read_text().splitlines()[2].split()[0] == "4"


def test_config_file_and_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text("n = 2\npatch-size = 16\nrho = 3\nmargin = 2\n")
    code, kv = run(capsys, "gen-data", "--config", cfg, "--out", tmp_path / "d")
    assert code == 0 and kv["samples"] == "2"
    cfg.write_text("n = 2\nwidth = 16\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "e")]) == 2
    assert "width" in capsys.readouterr().err


# --- exit codes -------------------------------------------------------------------------------

def test_missing_dataset_is_a_data_error(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 3


def test_missing_required_option_is_a_config_error(tmp_path, capsys):
    assert main(["gen-data"]) == 2


def test_corrupt_checkpoint_is_a_data_error(tmp_path, zero_model, capsys):
    zero_model.write_bytes(b"not a checkpoint")
    img = tmp_path / "i.ppm"
    write_pnm(img, np.zeros((3, 16, 16)))
    assert main(["align", "--checkpoint", str(zero_model), "--target", str(img), "--unaligned", str(img),
                 "--out", str(tmp_path / "o")]) == 3


def test_degenerate_estimate_is_a_numerical_failure(tmp_path, capsys):
    model = LocalTrans(ModelConfig(levels=2, channels=4, height=16, width=16))
    # every predicted corner lands on the image centre
    base = np.array([[0, 0], [15, 0], [15, 15], [0, 15]], dtype=float)
    model.head[1].fc.bias.data[...] = (7.5 - base).reshape(8) / model.head[1].stride
    save_model(tmp_path / "bad.ltck", model)
    img = tmp_path / "i.ppm"
    write_pnm(img, np.random.default_rng(0).random((3, 16, 16)))
    code = main(["align", "--checkpoint", str(tmp_path / "bad.ltck"), "--target", str(img),
                 "--unaligned", str(img), "--out", str(tmp_path / "o")])
    assert code == 4
    assert "level 1" in capsys.readouterr().err


# --- train / eval -----------------------------------------------------------------------------

@pytest.fixture
def tiny_dataset(tmp_path, capsys):
    root = tmp_path / "data"
    assert main(["gen-data", "--n", "6", "--seed", "1", "--no-augment", "--out", str(root), *TINY_DATA]) == 0
    capsys.readouterr()
    return root


def test_zero_steps_reports_identity_baseline(tmp_path, tiny_dataset, capsys):
    code, kv = run(capsys, "train", "--data", tiny_dataset, "--out", tmp_path / "run", "--overfit", 4,
                   "--steps", 0, *TINY_MODEL)
    assert code == 0
    assert float(kv["train_corner_error_mean"]) == float(kv["identity_baseline_mean"]) > 0
    assert (tmp_path / "run" / "best.ltck").exists()
    assert (tmp_path / "run" / "best.ltck.cfg").exists()


def test_eval_of_zero_model_on_identity_pairs(tmp_path, zero_model, capsys):
    data = tmp_path / "ident"
    assert main(["gen-data", "--n", "3", "--rho", "0", "--no-augment", "--patch-size", "16", "--margin", "2",
                 "--out", str(data)]) == 0
    capsys.readouterr()
    code, kv = run(capsys, "eval", "--checkpoint", zero_model, "--data", data)
    assert code == 0
    assert float(kv["corner_error_mean"]) == 0.0
    assert kv["psnr"] == "inf"


def test_eval_rejects_size_mismatch(tmp_path, zero_model, capsys):
    data = tmp_path / "big"
    main(["gen-data", "--n", "1", "--patch-size", "32", "--rho", "3", "--margin", "2", "--out", str(data)])
    assert main(["eval", "--checkpoint", str(zero_model), "--data", str(data)]) == 2


def test_training_prints_epoch_table(tmp_path, tiny_dataset, capsys):
    code = main(["train", "--data", str(tiny_dataset), "--out", str(tmp_path / "run"), "--steps", "6",
                 "--batch-size", "3", "--lr", "1e-3", *TINY_MODEL])
    out = capsys.readouterr().out
    assert code == 0
    lines = out.splitlines()
    assert lines[0].split() == ["epoch", "step", "train_loss"]
    assert [line.split()[:2] for line in lines[1:4]] == [["1", "2"], ["2", "4"], ["3", "6"]]
    assert key_values(out)["steps"] == "6"


def test_resume_continues_the_loss_curve(tmp_path, tiny_dataset, capsys):
    common = ["--data", tiny_dataset, "--batch-size", 2, "--lr", "1e-3", *TINY_MODEL]
    _, full = run(capsys, "train", "--out", tmp_path / "full", "--steps", 8, *common)
    run(capsys, "train", "--out", tmp_path / "part", "--steps", 4, *common)
    _, resumed = run(capsys, "train", "--out", tmp_path / "part", "--steps", 8,
                     "--resume", tmp_path / "part" / "last.ltck", *common)
    assert resumed["steps"] == "8"
    assert abs(float(resumed["final_loss"]) - float(full["final_loss"])) <= 0.05 * float(full["final_loss"])


# --- align / stitch / bench -------------------------------------------------------------------

def test_align_identity_output(tmp_path, zero_model, capsys):
    img = np.random.default_rng(3).integers(0, 256, (3, 16, 16)) / 255.0
    write_pnm(tmp_path / "t.ppm", img)
    code, _ = run(capsys, "align", "--checkpoint", zero_model, "--target", tmp_path / "t.ppm",
                  "--unaligned", tmp_path / "t.ppm", "--out", tmp_path / "out")
    assert code == 0
    out = tmp_path / "out"
    assert (out / "warped.ppm").read_bytes() == (tmp_path / "t.ppm").read_bytes()
    h = Homography.from_text((out / "homography.txt").read_text())
    np.testing.assert_array_equal(h.m, np.eye(3))
    mosaic = read_pnm(out / "mosaic.ppm")
    np.testing.assert_array_equal(mosaic, img)


def test_align_mosaic_mixes_channels(tmp_path, zero_model, capsys):
    t = np.zeros((3, 16, 16))
    u = np.ones((3, 16, 16))
    write_pnm(tmp_path / "t.ppm", t)
    write_pnm(tmp_path / "u.ppm", u)
    run(capsys, "align", "--checkpoint", zero_model, "--target", tmp_path / "t.ppm",
        "--unaligned", tmp_path / "u.ppm", "--out", tmp_path / "out")
    mosaic = read_pnm(tmp_path / "out" / "mosaic.ppm")
    assert np.all(mosaic[0] == 0) and np.all(mosaic[1:] == 1)


def test_stitch_synthetic_grid(tmp_path, zero_model, capsys):
    # without jitter the identity placement a zero-initialised model returns is the true one
    fx = make_synthetic_grid(seed=2, jitter=0.0)
    write_pnm(tmp_path / "global.ppm", fx.global_img)
    (tmp_path / "locals").mkdir()
    for img, (i, j) in fx.locals_:
        write_pnm(tmp_path / "locals" / f"{i}_{j}.ppm", img)
    code, kv = run(capsys, "stitch", "--checkpoint", zero_model, "--global", tmp_path / "global.ppm",
                   "--locals", tmp_path / "locals", "--grid", "3x3", "--out", tmp_path / "mosaic.ppm")
    assert code == 0 and kv["failed_cells"] == "0"
    assert psnr(read_pnm(tmp_path / "mosaic.ppm"), fx.global_img) >= 35.0
    assert main(["stitch", "--checkpoint", str(zero_model), "--global", str(tmp_path / "global.ppm"),
                 "--locals", str(tmp_path / "locals"), "--grid", "three", "--out", "x.ppm"]) == 2


def test_bench_reports_formula_ratio(capsys):
    code, kv = run(capsys, "bench", "--sizes", "8", "--radii", "1,2", "--channels", "4")
    assert code == 0
    assert float(kv["map_ratio_8_r1"]) == pytest.approx(9 / 64)
    assert float(kv["map_ratio_8_r2"]) == pytest.approx(25 / 64)
    assert int(kv["local_map_elements_total"]) < int(kv["global_map_elements_total"])


def test_bench_refuses_global_above_budget(capsys):
    code, kv = run(capsys, "bench", "--sizes", "16", "--radii", "1", "--channels", "2", "--budget", "100")
    assert code == 0
    assert kv["refused_global_16_r1"] == "budget=100"


def test_metrics_report_formats():
    rep = MetricsReport()
    rep.columns = ["a", "bb"]
    rep.rows = [[1, 0.5], [10, 2.25]]
    rep.add("x", 0.1)
    text = rep.render()
    assert text.splitlines()[0] == " a    bb"
    assert text.endswith("x=0.1\n")
