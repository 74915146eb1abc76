import filecmp

import numpy as np
import pytest
from scipy import ndimage

from glandseg import pipeline
from glandseg.cli import main
from glandseg.config import parse_config
from glandseg.dataset import generate_synthetic_dataset, read_manifest, write_dataset
from glandseg.fusion import FusionParams
from glandseg.imaging import load_image, save_image, write_fmap
from glandseg.tvseg import EdgeParams, PdParams
from conftest import CONFIGS, run_cli


def _ckpts(models):
    return ["--object-ckpt", models / "object.ckpt", "--separator-ckpt", models / "separator.ckpt"]


# --- exit codes -----------------------------------------------------------

def test_usage_errors_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["segment", "--bogus"])
    assert exc.value.code == 1
    assert main(["synth", "--set", "nosuch.key=1", "--out", str(tmp_path)]) == 1
    assert main(["synth", "--jobs", "0", "--out", str(tmp_path)]) == 1


def test_missing_checkpoint_exits_2(tmp_path, smoke_run, capsys):
    data, models, _ = smoke_run
    code = main(["segment", "--manifest", str(data / "test" / "manifest.txt"),
                 "--object-ckpt", str(tmp_path / "none.ckpt"), "--separator-ckpt", str(models / "separator.ckpt"),
                 "--out", str(tmp_path / "o")])
    assert code == 2
    assert "checkpoint not found" in capsys.readouterr().err


def test_unreadable_image_exits_2(tmp_path, smoke_run, capsys):
    _, models, _ = smoke_run
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    assert main(["segment", str(bad), *map(str, _ckpts(models)), "--out", str(tmp_path / "o")]) == 2
    assert main(["segment", str(tmp_path / "gone.png"), *map(str, _ckpts(models)),
                 "--out", str(tmp_path / "o")]) == 2


def test_missing_separator_labels_exit_2_and_name_image(tmp_path, smoke_run, capsys):
    data, _, _ = smoke_run
    lines = (data / "train" / "manifest.txt").read_text().splitlines()
    fields = lines[-1].split()
    fields[2] = "-"
    lines[-1] = " ".join(fields)
    m = data / "train" / "nosep.txt"
    m.write_text("\n".join(lines) + "\n")
    code = main(["train", "--config", str(CONFIGS / "smoke.cfg"), "--manifest", str(m), "--out", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err
    assert "separator" in err and fields[0] in err and "nosep.txt:" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exits_3(tmp_path, smoke_run, capsys):
    data, _, _ = smoke_run
    code = main(["train", "--config", str(CONFIGS / "smoke.cfg"), "--set", "train.eta0=1e30",
                 "--manifest", str(data / "train" / "manifest.txt"), "--out", str(tmp_path)])
    assert code == 3
    assert "numeric failure" in capsys.readouterr().err


# --- synth / run manifest -------------------------------------------------

def test_synth_is_deterministic(tmp_path):
    for d in ("a", "b"):
        run_cli("synth", "--config", CONFIGS / "smoke.cfg", "--out", tmp_path / d)
    for split in ("train", "test"):
        cmp = filecmp.dircmp(tmp_path / "a" / split, tmp_path / "b" / split)
        assert cmp.left_list == cmp.right_list and not cmp.diff_files
        _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / split, tmp_path / "b" / split,
                                               cmp.common_files, shallow=False)
        assert not mismatch and not errors
    recs = read_manifest(tmp_path / "a" / "train" / "manifest.txt")
    assert [r.malignant for r in recs] == [False, False, True, True]
    assert all(load_image(r.image).shape == (64, 64, 3) for r in recs)


def test_run_manifest_reproduces_config(tmp_path):
    run_cli("synth", "--config", CONFIGS / "smoke.cfg", "--seed", 9, "--set", "tv.lam=0.25",
            "--out", tmp_path)
    text = (tmp_path / "run.cfg").read_text()
    assert text.startswith("# command: glandseg synth")
    cfg = parse_config(text)
    assert cfg.seed == 9 and cfg.tv.lam == 0.25 and cfg.net.variant == "tiny"
    assert "# test_seed: 1009" in text


# --- segment --------------------------------------------------------------

def test_segment_outputs(smoke_run):
    data, _, seg = smoke_run
    recs = read_manifest(data / "test" / "manifest.txt")
    for rec in recs:
        rgb = load_image(rec.image)
        mask = load_image(seg / f"{rec.name}_mask.png")
        assert mask.shape == rgb.shape[:2]
        assert set(np.unique(mask)) <= {0, 255}
        labels = load_image(seg / f"{rec.name}_labels.fmap")
        assert labels.shape == rgb.shape[:2]
        np.testing.assert_array_equal(labels > 0, mask > 0)
        assert (seg / f"{rec.name}_diff.png").is_file()
        assert load_image(seg / f"{rec.name}_overlay.png").shape == rgb.shape
        assert (seg / f"{rec.name}_tv.log").read_text().startswith("iter=")
    rows = (seg / "decisions.tsv").read_text().splitlines()
    assert rows[0] == "image\tclass\tconfidence\ttie" and len(rows) == len(recs) + 1


def test_segment_without_ground_truth(tmp_path, smoke_run):
    data, models, _ = smoke_run
    img = read_manifest(data / "test" / "manifest.txt")[0].image
    run_cli("segment", img, *_ckpts(models), "--out", tmp_path)
    assert (tmp_path / f"{img.stem}_overlay.png").is_file()
    assert not (tmp_path / f"{img.stem}_diff.png").exists()
    overlay = load_image(tmp_path / f"{img.stem}_overlay.png")
    rgb = load_image(img)
    changed = np.any(overlay != rgb, axis=2)
    # only blue outline pixels may differ: no green ground-truth outline
    assert np.all(overlay[changed] == pipeline.BLUE)


def test_segment_parallel_matches_serial(tmp_path, smoke_run):
    data, models, seg = smoke_run
    run_cli("segment", "--config", CONFIGS / "smoke.cfg", "--manifest", data / "test" / "manifest.txt",
            *_ckpts(models), "--jobs", 2, "--out", tmp_path)
    for f in seg.iterdir():
        if f.name != "run.cfg":
            assert f.read_bytes() == (tmp_path / f.name).read_bytes(), f.name


def test_overlay_and_difference_colours():
    gt = np.zeros((8, 8), bool)
    gt[1:5, 1:5] = True
    pred = np.zeros_like(gt)
    pred[3:7, 3:7] = True
    diff = pipeline.render_difference(pred, gt)
    assert tuple(diff[1, 1]) == pipeline.CYAN and tuple(diff[6, 6]) == pipeline.YELLOW
    assert tuple(diff[3, 3]) == (255, 255, 255) and tuple(diff[0, 7]) == (0, 0, 0)
    ov = pipeline.render_overlay(np.zeros((8, 8, 3), np.uint8), pred, gt)
    assert tuple(ov[1, 1]) == pipeline.GREEN and tuple(ov[6, 6]) == pipeline.BLUE


def _oracle_maps(sample, blur=1.0):
    """Classifier maps read off the ground truth, blurred like upsampled
    half-resolution network outputs."""
    gland = ndimage.gaussian_filter((sample.labels > 0).astype(float), blur)
    sep = np.clip(2 * ndimage.gaussian_filter(sample.separator.astype(float), blur), 0, 1)
    k = 3 if sample.malignant else 1
    objects = np.zeros(gland.shape + (4,))
    objects[..., k] = gland
    objects[..., k - 1] = 1 - gland
    return pipeline.ClassifierMaps(np.zeros(gland.shape), objects, sep)


def _counts(sample):
    maps = _oracle_maps(sample)
    return [int(pipeline.segment_maps(maps, FusionParams(rho=rho), EdgeParams(), 0.1, PdParams(), 20).labels.max())
            for rho in (0.0, 1.0)]


@pytest.mark.parametrize("seed", range(4))
def test_separator_refinement_never_merges_more(seed):
    n0, n1 = _counts(generate_synthetic_dataset(seed, 0, 1)[0])
    assert n0 <= n1


def test_separator_refinement_splits_touching_glands():
    sample = generate_synthetic_dataset(0, 0, 1)[0]
    n0, n1 = _counts(sample)
    assert n0 < n1 == int(sample.labels.max())


# --- evaluate -------------------------------------------------------------

def _labels_dir(records, out):
    out.mkdir()
    for r in records:
        write_fmap(load_image(r.labels).astype(np.float32), out / f"{r.name}_labels.fmap")
    return out


def test_evaluate_perfect_prediction(tmp_path, smoke_run, capsys):
    data, _, _ = smoke_run
    manifest = data / "test" / "manifest.txt"
    pred = _labels_dir(read_manifest(manifest), tmp_path / "pred")
    run_cli("evaluate", pred, manifest, "--out", tmp_path / "ev")
    rows = {l.split("\t")[0]: l.split("\t")[1:] for l in (tmp_path / "ev" / "metrics.tsv").read_text().splitlines()}
    assert rows["mean"] == ["1.000000"] * 4 + ["0.000000"]
    assert rows["sd"] == ["0.000000"] * 5


def test_evaluate_swapped_roles_same_dice(tmp_path, smoke_run):
    data, _, seg = smoke_run
    manifest = data / "test" / "manifest.txt"
    recs = read_manifest(manifest)
    run_cli("evaluate", seg, manifest, "--out", tmp_path / "a")
    # predictions become ground truth and vice versa
    gt_as_pred = _labels_dir(recs, tmp_path / "gtpred")
    lines = []
    for r in recs:
        png = tmp_path / f"{r.name}_pl.png"
        save_image(load_image(seg / f"{r.name}_labels.fmap").astype(np.uint8), png)
        lines.append(f"{r.image} {png} - {'malignant' if r.malignant else 'benign'}")
    (tmp_path / "swap.txt").write_text("\n".join(lines) + "\n")
    run_cli("evaluate", gt_as_pred, tmp_path / "swap.txt", "--out", tmp_path / "b")

    def dice(p):
        return [l.split("\t")[4] for l in (p / "metrics.tsv").read_text().splitlines()[1:-1]]
    assert dice(tmp_path / "a") == dice(tmp_path / "b")


def test_evaluate_toy_table(tmp_path):
    gt1 = np.zeros((12, 12), np.uint8)
    gt1[2:8, 2:8] = 1
    pr1 = np.zeros_like(gt1)
    pr1[2:8, 5:11] = 1  # Dice 0.5, one-sided Hausdorff 3
    gt2 = np.zeros((10, 10), np.uint8)
    gt2[0:5, 0:4] = 1
    gt2[6:9, 6:9] = 2
    pr2 = np.zeros_like(gt2)
    pr2[0:3, 0:4] = 1
    gt3 = np.zeros((6, 6), np.uint8)
    gt3[1:4, 1:4] = 1
    rgb = np.zeros((1, 1, 3), np.uint8)
    lines = []
    (tmp_path / "pred").mkdir()
    for i, (gt, pr) in enumerate([(gt1, pr1), (gt2, pr2), (gt3, gt3)]):
        save_image(rgb, tmp_path / f"t{i}.png")
        save_image(gt, tmp_path / f"t{i}_l.png")
        write_fmap(pr.astype(np.float32), tmp_path / "pred" / f"t{i}_labels.fmap")
        lines.append(f"t{i}.png t{i}_l.png - benign")
    (tmp_path / "m.txt").write_text("\n".join(lines) + "\n")
    run_cli("evaluate", tmp_path / "pred", tmp_path / "m.txt", "--out", tmp_path / "ev")
    rows = {l.split("\t")[0]: [float(x) for x in l.split("\t")[1:]]
            for l in (tmp_path / "ev" / "metrics.tsv").read_text().splitlines()[1:-1]}
    # image 1: 18 px overlap of two 36 px squares -> detection fails (50% is not > 50%)
    np.testing.assert_allclose(rows["t0"], [0, 0, 0, 0.5, 3.0], atol=1e-6)
    # image 2: dice (20/29 * 24/32 + 0 * 9/29 + 1.0 * 24/32) / 2
    d2 = 0.5 * (20 / 29 * (24 / 32) + 1.0 * (24 / 32))
    assert rows["t1"][:3] == pytest.approx([1.0, 0.5, 2 / 3], abs=1e-6)
    assert rows["t1"][3] == pytest.approx(d2, abs=1e-6)
    np.testing.assert_allclose(rows["t2"], [1, 1, 1, 1, 0], atol=1e-6)


def test_evaluate_unmatched_files_listed(tmp_path, smoke_run, capsys):
    data, _, _ = smoke_run
    (tmp_path / "empty").mkdir()
    write_fmap(np.zeros((2, 2), np.float32), tmp_path / "empty" / "stray_labels.fmap")
    assert main(["evaluate", str(tmp_path / "empty"), str(data / "test" / "manifest.txt"),
                 "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "no prediction for img000" in err and "no ground truth for stray" in err


# --- gridsearch -----------------------------------------------------------

def _grid(tmp_path, models, data, out, alpha, beta, lam):
    run_cli("gridsearch", "--config", CONFIGS / "smoke.cfg", "--manifest", data / "test" / "manifest.txt",
            *_ckpts(models), "--set", f"gridsearch.alpha={alpha}", "--set", f"gridsearch.beta={beta}",
            "--set", f"gridsearch.lam={lam}", "--out", tmp_path / out)
    rows = (tmp_path / out / "gridsearch.tsv").read_text().splitlines()[1:]
    best = parse_config((tmp_path / out / "best.cfg").read_text())
    return rows, (best.edge.alpha, best.edge.beta, best.tv.lam)


def test_gridsearch_single_point(tmp_path, smoke_run):
    data, models, _ = smoke_run
    rows, best = _grid(tmp_path, models, data, "g1", "2.5", "0.6", "0.3")
    assert len(rows) == 1 and best == (2.5, 0.6, 0.3)


def test_gridsearch_table_size(tmp_path, smoke_run):
    data, models, _ = smoke_run
    rows, _ = _grid(tmp_path, models, data, "coarse", "0.5 15", "0.35 0.95", "0.01 0.1 10")
    assert len(rows) == 2 * 2 * 3
    assert [tuple(map(float, r.split("\t")[:3])) for r in rows[:3]] == [(0.5, 0.35, 0.01), (0.5, 0.35, 0.1),
                                                                         (0.5, 0.35, 10.0)]


def test_gridsearch_selects_planted_optimum():
    from glandseg.config import GridSearchSpec
    samples = generate_synthetic_dataset(7, 1, 2)
    maps = [_oracle_maps(s) for s in samples]
    gts = [s.labels for s in samples]
    coarse = GridSearchSpec((0.5, 5.0, 15.0), (0.35, 0.95), (0.01, 0.1, 10.0))
    best, table = pipeline.grid_search(maps, gts, coarse, min_area=20)
    scores = [r[3] for r in table]
    assert len(set(np.round(scores, 6))) > 1
    # plant the coarse optimum among points that scored lower
    others = sorted((r for r in table if r[3] < best[3]), key=lambda r: r[3])[:2]
    grid = GridSearchSpec(tuple(sorted({best[0], *(r[0] for r in others)})),
                          tuple(sorted({best[1], *(r[1] for r in others)})),
                          tuple(sorted({best[2], *(r[2] for r in others)})))
    fine_best, fine_table = pipeline.grid_search(maps, gts, grid, min_area=20, jobs=2)
    assert len(fine_table) == len(grid.alpha) * len(grid.beta) * len(grid.lam)
    assert fine_best[3] == max(r[3] for r in fine_table)
    assert fine_best[3] >= best[3]
    if fine_best[3] == best[3]:
        assert fine_best[:3] == min((r for r in fine_table if r[3] == best[3]),
                                    key=lambda r: (r[2], r[0], r[1]))[:3]


def test_gridsearch_ties_prefer_small_values():
    maps = [pipeline.ClassifierMaps(np.zeros((8, 8)), np.tile([0.0, 1.0, 0.0, 0.0], (8, 8, 1)), np.zeros((8, 8)))]
    gts = [np.ones((8, 8), int)]
    from glandseg.config import GridSearchSpec
    best, table = pipeline.grid_search(maps, gts, GridSearchSpec((2.0, 1.0), (0.9, 0.5), (0.3, 0.2)),
                                       min_area=1)
    assert all(r[3] == 1.0 for r in table)
    assert best[:3] == (1.0, 0.5, 0.2)
