import hashlib

import numpy as np
import pytest

from mapchange import cli
from mapchange.metrics import TransitionScheme
from mapchange.rasters import read_pgm, read_ppm, write_pgm

TINY = """[run]
seed = 4
[gen]
tile = 16
n_train = 4
n_val = 1
n_test = 2
[model]
base_channels = 4
encoder_stages = 2
[optim]
total_iters = 3
batch_size = 2
"""


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.ini").write_text(TINY)
    assert cli.main(["gen-data", "--config", str(root / "tiny.ini"), "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--config", str(root / "tiny.ini"), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def test_gen_data_counts_and_determinism(workdir, tmp_path):
    files = list((workdir / "data").glob("*"))
    assert len([f for f in files if f.suffix in (".ppm", ".pgm")]) == 7 * 6
    assert cli.main(["gen-data", "--config", str(workdir / "tiny.ini"), "--out", str(tmp_path / "again")]) == 0
    assert digest(tmp_path / "again") == digest(workdir / "data")


def test_seed_flag_overrides_config(workdir, tmp_path):
    cli.main(["gen-data", "--config", str(workdir / "tiny.ini"), "--out", str(tmp_path / "s5"), "--seed", "5"])
    assert (tmp_path / "s5" / "train_0000_t1.ppm").read_bytes() != (workdir / "data" / "train_0000_t1.ppm").read_bytes()
    assert "seed = 5" in (tmp_path / "s5" / "config.ini").read_text()


def test_gen_data_refuses_existing_dataset(workdir, capsys):
    assert cli.main(["gen-data", "--config", str(workdir / "tiny.ini"), "--out", str(workdir / "data")]) == 1
    assert "already contains" in capsys.readouterr().err


def test_train_writes_log_and_checkpoint(workdir):
    lines = (workdir / "run" / "train.log").read_text().splitlines()
    assert len(lines) == 3 and lines[-1].startswith("iter=3 ")
    assert (workdir / "run" / "checkpoints" / "final" / "manifest.txt").is_file()


def test_train_is_deterministic_and_resumable(workdir, tmp_path):
    args = ["train", "--config", str(workdir / "tiny.ini"), "--data", str(workdir / "data")]
    assert cli.main(args + ["--out", str(tmp_path / "again")]) == 0
    assert digest(tmp_path / "again" / "checkpoints") == digest(workdir / "run" / "checkpoints")
    assert (tmp_path / "again" / "train.log").read_bytes() == (workdir / "run" / "train.log").read_bytes()


def test_eval_report_and_determinism(workdir, tmp_path):
    args = ["eval", "--checkpoint", str(workdir / "run" / "checkpoints" / "final"), "--data", str(workdir / "data")]
    assert cli.main(args + ["--out", str(tmp_path / "a.txt")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b.txt")]) == 0
    text = (tmp_path / "a.txt").read_text()
    assert text == (tmp_path / "b.txt").read_text()
    assert text.splitlines()[0].split("\t")[1:] == ["Kappa(%)", "Sek(%)", "IoU(%)", "F1(%)", "OA(%)"]
    assert "pixels=512" in text


def test_eval_mode_and_class_mismatch(workdir, tmp_path, capsys):
    ck = str(workdir / "run" / "checkpoints" / "final")
    assert cli.main(["eval", "--checkpoint", ck, "--data", str(workdir / "data"), "--mode", "pcc"]) == 1
    (tmp_path / "k9.ini").write_text(TINY.replace("[gen]\n", "[gen]\nnum_classes = 9\n"))
    cli.main(["gen-data", "--config", str(tmp_path / "k9.ini"), "--out", str(tmp_path / "k9")])
    capsys.readouterr()
    assert cli.main(["eval", "--checkpoint", ck, "--data", str(tmp_path / "k9")]) == 1
    assert "num_classes=5" in capsys.readouterr().err


def test_missing_data_is_exit_2(workdir, tmp_path):
    assert cli.main(["eval", "--checkpoint", str(workdir / "run" / "checkpoints" / "final"), "--data", str(tmp_path)]) == 2
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "nothing"), "--data", str(workdir / "data")]) == 2


def test_usage_errors_are_exit_1(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--data", "x"])
    assert exc.value.code == 1
    (tmp_path / "bad.ini").write_text("[model]\nnope = 1\n")
    assert cli.main(["gen-data", "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path / "o")]) == 1


def test_pcc_mode_train_and_eval(workdir, tmp_path):
    base = ["--config", str(workdir / "tiny.ini"), "--data", str(workdir / "data")]
    assert cli.main(["train", *base, "--out", str(tmp_path / "pcc"), "--mode", "pcc"]) == 0
    ck = str(tmp_path / "pcc" / "checkpoints" / "final")
    assert cli.main(["eval", "--checkpoint", ck, "--data", str(workdir / "data"), "--mode", "pcc", "--out", str(tmp_path / "p.txt")]) == 0
    mc = str(workdir / "run" / "checkpoints" / "final")
    assert cli.main(["eval", "--checkpoint", mc, "--data", str(workdir / "data"), "--out", str(tmp_path / "m.txt")]) == 0

    def schema(path):
        lines = path.read_text().splitlines()
        return [lines[0].split()] + [line.split("=")[0] for line in lines[1:] if "=" in line]

    assert schema(tmp_path / "p.txt") == schema(tmp_path / "m.txt")


def test_predict_and_swap_symmetry(workdir, tmp_path):
    d = workdir / "data"
    ck = str(workdir / "run" / "checkpoints" / "final")
    common = ["predict", "--checkpoint", ck, "--map", str(d / "test_0000_map.pgm")]
    assert cli.main(common + ["--t1", str(d / "test_0000_t1.ppm"), "--t2", str(d / "test_0000_t2.ppm"), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(common + ["--t1", str(d / "test_0000_t2.ppm"), "--t2", str(d / "test_0000_t1.ppm"), "--out", str(tmp_path / "b")]) == 0
    scm = read_pgm(tmp_path / "a" / "semantic_change.pgm")
    assert scm.shape == (16, 16) and scm.max() < TransitionScheme(5).size
    # the change probability does not depend on the order of the two images
    assert (tmp_path / "a" / "change_prob.mct").read_bytes() == (tmp_path / "b" / "change_prob.mct").read_bytes()


def test_predict_rejects_misaligned_inputs(workdir, tmp_path):
    d = workdir / "data"
    write_pgm(tmp_path / "small.pgm", np.zeros((8, 8), dtype=np.uint8))
    args = ["predict", "--checkpoint", str(workdir / "run" / "checkpoints" / "final"), "--t1", str(d / "test_0000_t1.ppm"),
            "--t2", str(d / "test_0000_t2.ppm"), "--map", str(tmp_path / "small.pgm"), "--out", str(tmp_path / "o")]
    assert cli.main(args) == 2


def test_render_change_map(tmp_path):
    scheme = TransitionScheme(5)
    pred = np.arange(scheme.size, dtype=np.uint8).reshape(3, 7)
    write_pgm(tmp_path / "pred.pgm", pred)
    assert cli.main(["render-change-map", "--pred", str(tmp_path / "pred.pgm"), "--palette", "5", "--out", str(tmp_path / "c.ppm")]) == 0
    img = np.round(read_ppm(tmp_path / "c.ppm") * 255).astype(int)
    assert tuple(img[0, 0]) == cli.NO_CHANGE_GRAY
    colors = {tuple(img.reshape(-1, 3)[c]) for c in range(scheme.size)}
    assert len(colors) == scheme.size
    legend = (tmp_path / "c.ppm.legend.txt").read_text().splitlines()
    assert legend[0] == "category from to r g b" and legend[1].startswith("0 - - 128 128 128")
    assert legend[2].split()[:3] == ["1", "0", "1"]
    write_pgm(tmp_path / "bad.pgm", np.full((2, 2), 21, dtype=np.uint8))
    assert cli.main(["render-change-map", "--pred", str(tmp_path / "bad.pgm"), "--palette", "5", "--out", str(tmp_path / "x.ppm")]) == 2


def test_ablate_small(workdir, tmp_path):
    out = tmp_path / "ablate.txt"
    cfg = tmp_path / "ab.ini"
    cfg.write_text(TINY.replace("total_iters = 3", "total_iters = 1"))
    assert cli.main(["ablate", "--config", str(cfg), "--data", str(workdir / "data"), "--out", str(out)]) == 0
    text = out.read_text()
    for label in ("TST-Add", "Add", "Cat", "PCC", "MapChange"):
        assert label in text


def test_rendered_ground_truth_support_equals_change_mask(workdir, tmp_path):
    d = workdir / "data"
    gt1, gt2, chg = (read_pgm(d / f"train_0001_{k}.pgm") for k in ("gt1", "gt2", "chg"))
    write_pgm(tmp_path / "gt.pgm", TransitionScheme(5).encode(gt1, gt2).astype(np.uint8))
    assert cli.main(["render-change-map", "--pred", str(tmp_path / "gt.pgm"), "--palette", "5", "--out", str(tmp_path / "gt.ppm")]) == 0
    img = np.round(read_ppm(tmp_path / "gt.ppm") * 255).astype(int)
    colored = (img != np.array(cli.NO_CHANGE_GRAY)).any(axis=-1)
    assert chg.any() and np.array_equal(colored, chg.astype(bool))


def test_render_all_no_change_is_uniform_gray_and_deterministic(tmp_path):
    write_pgm(tmp_path / "z.pgm", np.zeros((5, 6), dtype=np.uint8))
    for name in ("a.ppm", "b.ppm"):
        cli.main(["render-change-map", "--pred", str(tmp_path / "z.pgm"), "--palette", "9", "--out", str(tmp_path / name)])
    img = np.round(read_ppm(tmp_path / "a.ppm") * 255).astype(int)
    assert (img == np.array(cli.NO_CHANGE_GRAY)).all()
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()


def test_default_config_generates_270_samples(tmp_path):
    assert cli.main(["gen-data", "--out", str(tmp_path / "d")]) == 0
    lines = (tmp_path / "d" / "index.txt").read_text().splitlines()
    splits = [line.split()[2] for line in lines if line.startswith("sample ")]
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (200, 20, 50)
