import numpy as np
import pytest

from brixel.cli import main
from brixel.imgio import read_ppm, write_ppm
from brixel.tensors import load_tensor

TINY_CONFIG = """\
# desk-mini run
patch_size=8
embed_dim=8
depth=1
heads=2
pyramid_channels=4,4,4
fusion_channels=8
head_blocks=1
student_resolution=32
total_iters=4
batch_size=2
dataset_size=2
pca_k=2
seed=3
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(TINY_CONFIG)
    return p


def read_metrics(out):
    return (out / "metrics.tsv").read_text().strip().splitlines()


# ---------------------------------------------------------------------------
# distill
# ---------------------------------------------------------------------------

def test_distill_synthetic_contract(tmp_path, cfg_file):
    out = tmp_path / "run"
    assert main(["distill", "--config", str(cfg_file), "--data", "synthetic",
                 "--out", str(out)]) == 0
    lines = read_metrics(out)
    assert len(lines) == 4  # one line per iteration, no header
    assert (out / "config.resolved").exists()
    assert (out / "checkpoints" / "latest" / "manifest.txt").exists()
    assert (out / "checkpoints" / "latest" / "config.resolved").exists()
    first = lines[0].split("\t")
    assert first[0] == "0"
    assert float(first[1]) == 0.0  # warmup starts at lr 0


def test_distill_reproducible_bit_identical(tmp_path, cfg_file):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    for out in (out_a, out_b):
        assert main(["distill", "--config", str(cfg_file), "--data", "synthetic",
                     "--out", str(out)]) == 0
    assert (out_a / "metrics.tsv").read_bytes() == (out_b / "metrics.tsv").read_bytes()


def test_seed_flag_overrides_config(tmp_path, cfg_file):
    out_a, out_b, out_c = tmp_path / "sa", tmp_path / "sb", tmp_path / "sc"
    for out, seed in ((out_a, "21"), (out_b, "21"), (out_c, "22")):
        assert main(["distill", "--config", str(cfg_file), "--data", "synthetic",
                     "--out", str(out), "--seed", seed]) == 0
    assert (out_a / "metrics.tsv").read_bytes() == (out_b / "metrics.tsv").read_bytes()
    assert (out_a / "metrics.tsv").read_bytes() != (out_c / "metrics.tsv").read_bytes()
    assert "seed=21" in (out_a / "config.resolved").read_text()


def test_unknown_config_key_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text(TINY_CONFIG + "foo=1\n")
    code = main(["distill", "--config", str(bad), "--data", "synthetic",
                 "--out", str(tmp_path / "o")])
    assert code == 2
    assert "foo" in capsys.readouterr().err


def test_unreadable_data_exit_3(tmp_path, cfg_file):
    code = main(["distill", "--config", str(cfg_file), "--data",
                 str(tmp_path / "missing"), "--out", str(tmp_path / "o")])
    assert code == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_blowup_exit_4(tmp_path):
    cfg = tmp_path / "hot.cfg"
    cfg.write_text(TINY_CONFIG.replace("total_iters=4", "total_iters=4") + "lr=1e30\n")
    code = main(["distill", "--config", str(cfg), "--data", "synthetic",
                 "--out", str(tmp_path / "o")])
    assert code == 4


def test_resume_continues_numbering(tmp_path, cfg_file):
    full, paused = tmp_path / "full", tmp_path / "paused"
    cfg8 = tmp_path / "run8.cfg"
    cfg8.write_text(TINY_CONFIG.replace("total_iters=4", "total_iters=8"))

    assert main(["distill", "--config", str(cfg8), "--data", "synthetic",
                 "--out", str(full)]) == 0
    assert main(["distill", "--config", str(cfg_file), "--data", "synthetic",
                 "--out", str(paused)]) == 0
    assert main(["distill", "--config", str(cfg8), "--data", "synthetic",
                 "--out", str(paused), "--resume"]) == 0

    full_lines = read_metrics(full)
    paused_lines = read_metrics(paused)
    assert [l.split("\t")[0] for l in paused_lines] == [str(i) for i in range(8)]
    for a, b in zip(full_lines, paused_lines):
        fa, fb = a.split("\t"), b.split("\t")
        assert fa[0] == fb[0]
        assert float(fa[5]) == pytest.approx(float(fb[5]), abs=1e-6)  # total column


def test_resume_without_checkpoint_exit_3(tmp_path, cfg_file):
    code = main(["distill", "--config", str(cfg_file), "--data", "synthetic",
                 "--out", str(tmp_path / "fresh"), "--resume"])
    assert code == 3


# ---------------------------------------------------------------------------
# extract
# ---------------------------------------------------------------------------

def test_extract_roundtrip_matches_live_first_step(tmp_path, cfg_file):
    feats = tmp_path / "feats"
    assert main(["extract", "--config", str(cfg_file), "--data", "synthetic",
                 "--out", str(feats)]) == 0
    dumped = sorted(feats.glob("*.brxt"))
    assert len(dumped) == 2
    assert load_tensor(dumped[0]).shape == (8, 16, 16)

    live_out = tmp_path / "live"
    file_out = tmp_path / "filetea"
    assert main(["distill", "--config", str(cfg_file), "--data", "synthetic",
                 "--out", str(live_out)]) == 0
    file_cfg = tmp_path / "file.cfg"
    file_cfg.write_text(TINY_CONFIG + f"teacher_source=file:{feats}\n")
    assert main(["distill", "--config", str(file_cfg), "--data", "synthetic",
                 "--out", str(file_out)]) == 0
    a = read_metrics(live_out)[0].split("\t")
    b = read_metrics(file_out)[0].split("\t")
    for col in range(1, 7):
        assert float(a[col]) == pytest.approx(float(b[col]), abs=1e-6)


def test_extract_empty_dir_exit_3(tmp_path, cfg_file):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["extract", "--config", str(cfg_file), "--data", str(empty),
                 "--out", str(tmp_path / "o")]) == 3


# ---------------------------------------------------------------------------
# eval / viz
# ---------------------------------------------------------------------------

@pytest.fixture
def trained(tmp_path, cfg_file):
    out = tmp_path / "trained"
    assert main(["distill", "--config", str(cfg_file), "--data", "synthetic",
                 "--out", str(out)]) == 0
    return out


def test_eval_writes_documented_report(tmp_path, trained):
    out = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(trained / "checkpoints" / "latest"),
                 "--data", "synthetic", "--out", str(out)]) == 0
    lines = (out / "fidelity.tsv").read_text().splitlines()
    assert lines[0].startswith("# columns:")
    assert lines[-1].startswith("mean\t")
    assert len(lines) == 1 + 2 + 1  # header + 2 samples + aggregate


def test_eval_missing_checkpoint_exit_3(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope"), "--data",
                 "synthetic", "--out", str(tmp_path / "o")]) == 3


def test_viz_panels_follow_4x_protocol(tmp_path, trained):
    rng = np.random.default_rng(0)
    img = tmp_path / "photo.ppm"
    write_ppm(img, rng.integers(0, 256, size=(40, 50, 3), dtype=np.uint8))
    out = tmp_path / "viz"
    assert main(["viz", "--checkpoint", str(trained / "checkpoints" / "latest"),
                 "--image", str(img), "--out", str(out)]) == 0
    panels = out / "panels"
    input_img = read_ppm(panels / "photo_input.ppm")
    teacher = read_ppm(panels / "photo_teacher.ppm")
    baseline = read_ppm(panels / "photo_baseline.ppm")
    student = read_ppm(panels / "photo_student.ppm")
    assert input_img.data.shape == (3, 128, 128)   # teacher resolution
    assert teacher.data.shape == (3, 16, 16)       # 128 / p
    assert student.data.shape == (3, 16, 16)       # same grid as teacher
    assert baseline.data.shape == (3, 4, 4)        # quarter grid (4x protocol)


def test_viz_deterministic_bytes_and_png(tmp_path, trained):
    rng = np.random.default_rng(1)
    img = tmp_path / "pic.ppm"
    write_ppm(img, rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8))
    ck = str(trained / "checkpoints" / "latest")
    out_a, out_b = tmp_path / "va", tmp_path / "vb"
    for out in (out_a, out_b):
        assert main(["viz", "--checkpoint", ck, "--image", str(img),
                     "--out", str(out)]) == 0
    pa = (out_a / "panels" / "pic_student.ppm").read_bytes()
    pb = (out_b / "panels" / "pic_student.ppm").read_bytes()
    assert pa == pb

    assert main(["viz", "--checkpoint", ck, "--image", str(img),
                 "--out", str(tmp_path / "vp"), "--png"]) == 0
    assert (tmp_path / "vp" / "panels" / "pic_student.png").exists()


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def test_bench_table_contract(tmp_path, cfg_file, capsys):
    out = tmp_path / "bench"
    assert main(["bench", "--config", str(cfg_file), "--sizes", "16,32,64",
                 "--out", str(out), "--max-time-tokens", "256"]) == 0
    table = (out / "cost.tsv").read_text().strip().splitlines()
    assert len(table) == 2 + 3  # note + header + one row per requested size
    rows = [line.split("\t") for line in table[2:]]
    teacher = [int(r[1]) for r in rows]
    ratios = [float(r[3]) for r in rows]
    assert teacher == sorted(teacher) and teacher[0] < teacher[-1]
    assert all(b > a for a, b in zip(ratios, ratios[1:]))
    assert (out / "cost.svg").exists()
    assert capsys.readouterr().out.startswith("# FLOP convention")


def test_bench_rejects_bad_grid(tmp_path, cfg_file):
    assert main(["bench", "--config", str(cfg_file), "--sizes", "15"]) == 2
