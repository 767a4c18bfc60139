import csv
import io
import subprocess
import sys

import numpy as np
import pytest

from irissr.cli import main
from irissr.image import save_image
from irissr.sae import SaeModel
from irissr.srcnn import DESK_INIT, SrcnnModel, build_default
from irissr.synth import texture_image


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, list(csv.reader(io.StringIO(out.out))), out.err


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out-dir", str(root), "--users", "4", "--captures", "2", "--seed", "2",
                 "--out", str(root / "synth.csv")]) == 0
    return root


def test_synth_writes_annotated_images(corpus):
    rows = list(csv.reader(open(corpus / "synth.csv")))
    assert rows[0] == ["annotations", "images"] and rows[1][1] == "8"
    assert len(list(corpus.glob("S*.png"))) == 8


def test_quality_bicubic(capsys, corpus, tmp_path):
    code, rows, _ = run(capsys, "quality", "--corpus", str(corpus), "--annotations", str(corpus / "annotations.csv"),
                        "--methods", "bicubic", "--factors", "2,4", "--train-fraction", "0.5",
                        "--deterministic", "--no-strips", "--rejects", str(tmp_path / "rej.csv"))
    assert code == 0
    assert rows[0] == ["method", "train_factor", "eval_factor", "metric", "value"]
    assert len(rows) == 1 + 2 * 3 and all(r[1] == "-" for r in rows[1:])
    assert list(csv.reader(open(tmp_path / "rej.csv"))) == [["image_id", "reason"]]


def test_verify_with_score_dump(capsys, corpus, tmp_path):
    code, rows, _ = run(capsys, "verify", "--corpus", str(corpus), "--annotations", str(corpus / "annotations.csv"),
                        "--methods", "bilinear", "--factors", "2", "--scenarios", "1", "--baseline",
                        "--train-fraction", "0.5", "--scores", str(tmp_path / "s.csv"))
    assert code == 0
    assert [r[:4] for r in rows[1:]] == [["original", "-", "1", "scenario1"], ["bilinear", "-", "2", "scenario1"]]
    scores = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert {s["label"] for s in scores} == {"genuine", "impostor"}


def test_missing_weights_exit_nonzero(capsys, corpus):
    code, _, err = run(capsys, "quality", "--corpus", str(corpus), "--annotations", str(corpus / "annotations.csv"),
                       "--methods", "srcnn-fs")
    assert code != 0 and "no weights" in err


@pytest.mark.parametrize("argv", [
    ["quality", "--corpus", ".", "--annotations", "missing.csv"],
    ["quality", "--corpus", ".", "--annotations", "x.csv", "--factors", "3"],
    ["quality", "--corpus", ".", "--annotations", "x.csv", "--weights", "nonsense"],
])
def test_validation_errors_exit_nonzero(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code != 0 and err.startswith("error:")


def test_unknown_subcommand_exits_nonzero():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code != 0


def test_train_then_sr(capsys, tmp_path):
    weights = tmp_path / "fs.nnw"
    code, rows, _ = run(capsys, "train", "--method", "srcnn-fs", "--textures", "2", "--iterations", "20",
                        "--seed", "1", "--out-weights", str(weights))
    assert code == 0 and rows[0] == ["iteration", "mean_mse"] and rows[-1][0] == "20"
    model = SrcnnModel.load(weights)
    assert model.provenance == "scratch" and model.trained_factor == 2

    save_image(texture_image(64, 0), tmp_path / "hr.png")
    code, rows, _ = run(capsys, "sr", "--input", str(tmp_path / "hr.png"), "--output", str(tmp_path / "sr.png"),
                        "--factor", "4", "--weights", str(weights), "--degrade")
    assert code == 0
    row = dict(zip(rows[0], rows[1]))
    assert row["passes"] == "2" and row["width"] == "64" and float(row["psnr"]) > 10


def test_transfer_and_fine_tune_via_cli(capsys, tmp_path):
    base = tmp_path / "base.nnw"
    build_default(2, seed=0, init_std=DESK_INIT).save(base)
    code, rows, _ = run(capsys, "train", "--method", "srcnn-tl", "--base-weights", f"2={base}",
                        "--out-weights", str(tmp_path / "tl.nnw"))
    assert code == 0 and rows == [["iteration", "mean_mse"]]
    assert SrcnnModel.load(tmp_path / "tl.nnw").provenance == "transfer"
    code, _, _ = run(capsys, "train", "--method", "srcnn-ft", "--base-weights", f"2={base}", "--textures", "1",
                     "--iterations", "3", "--out-weights", str(tmp_path / "ft.nnw"))
    assert code == 0 and SrcnnModel.load(tmp_path / "ft.nnw").provenance == "fine-tuned"
    code, _, err = run(capsys, "train", "--method", "srcnn-ft", "--textures", "1", "--out-weights",
                       str(tmp_path / "x.nnw"))
    assert code != 0 and "base weights" in err


def test_train_sae_from_image_directory(capsys, tmp_path):
    (tmp_path / "imgs").mkdir()
    save_image(texture_image(40, 1), tmp_path / "imgs" / "a.png")
    code, rows, _ = run(capsys, "train", "--method", "sae", "--images", str(tmp_path / "imgs"), "--epochs", "1",
                        "--out-weights", str(tmp_path / "sae.nnw"))
    assert code == 0 and len(rows) == 3  # header, initial loss, one epoch
    assert SaeModel.load(tmp_path / "sae.nnw").trained


def test_sr_plain_upscale(capsys, tmp_path):
    save_image(np.full((10, 12), 0.4), tmp_path / "lr.png")
    code, rows, _ = run(capsys, "sr", "--input", str(tmp_path / "lr.png"), "--output", str(tmp_path / "up.pgm"),
                        "--method", "bilinear", "--factor", "2")
    assert code == 0 and rows[1][5:7] == ["24", "20"]
    code, _, err = run(capsys, "sr", "--input", str(tmp_path / "lr.png"), "--output", str(tmp_path / "o.png"))
    assert code != 0 and "--weights" in err


def test_gradcheck_command(capsys):
    code, rows, _ = run(capsys, "gradcheck", "--samples", "50")
    assert code == 0
    assert [r[0] for r in rows[1:]] == ["srcnn", "sae"] and all(r[-1] == "pass" for r in rows[1:])


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "irissr.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("train", "sr", "quality", "verify", "synth", "gradcheck"):
        assert cmd in out.stdout
