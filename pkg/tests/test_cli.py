import json
import subprocess
import sys

import numpy as np
import pytest

from oracles import parse_ppm
from patchland.cli import main
from patchland.config import PRESETS, apply_override, build_config, load_config
from patchland.errors import ConfigError
from patchland.experiment import SweepResult, TrainedModel
from patchland.raster import LabelMap, RasterCube, load_cube, load_labels, write_cube, write_labels

SCENE = {
    "rows": 32,
    "cols": 32,
    "bands": 4,
    "class_count": 3,
    "field_count": 6,
    "noise_sigma": 0.05,
    "salt_pepper_rate": 0.1,
    "seed": 0,
}

@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    (d / "spec.json").write_text(json.dumps(SCENE))
    assert main(["synth", "--config", str(d / "spec.json"), "--out", str(d)]) == 0
    return d


def _scene_args(d):
    return ["--cube", str(d / "scene.cube"), "--labels", str(d / "scene.lbl")]


def test_synth_writes_matching_files(scene_dir, capsys):
    cube = load_cube(scene_dir / "scene.cube")
    labels = load_labels(scene_dir / "scene.lbl")
    assert cube.shape == (32, 32, 4)
    assert (labels.rows, labels.cols) == (32, 32)
    side = json.loads((scene_dir / "scene.json").read_text())
    assert len(side["placement"]) == 6


def test_synth_deterministic(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({**SCENE, "class_count": 2, "field_count": 2}))
    for out in ("a", "b"):
        assert main(["synth", "--config", str(spec), "--out", str(tmp_path / out)]) == 0
    for name in ("scene.cube", "scene.lbl", "scene.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert main(["synth", "--config", str(spec), "--seed", "5", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "a" / "scene.cube").read_bytes() != (tmp_path / "c" / "scene.cube").read_bytes()


def test_synth_thirteen_classes(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"rows": 96, "cols": 96, "bands": 6, "class_count": 13, "field_count": 20,
                                "min_field": 6, "max_field": 16, "seed": 1}))
    assert main(["synth", "--config", str(spec), "--out", str(tmp_path)]) == 0
    labels = load_labels(tmp_path / "scene.lbl").labels
    assert sorted(np.unique(labels[labels > 0]).tolist()) == list(range(1, 14))
    assert "class 13" in capsys.readouterr().out


def test_synth_bad_spec_exit_1(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"rows": 8, "unknown": 1}))
    assert main(["synth", "--config", str(spec), "--out", str(tmp_path)]) == 1
    assert main(["synth", "--out", str(tmp_path)]) == 1


def test_train_svm_then_evaluate_matches(scene_dir, tmp_path, capsys):
    out = tmp_path / "svm"
    rc = main(["train", *_scene_args(scene_dir), "--classifier", "svm", "--patch-size", "5",
               "--set", "svm.C=10", "--set", "svm.gamma=0.3", "--out", str(out)])
    assert rc == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert 0 <= metrics["overall_accuracy"] <= 100
    assert metrics["classifier"] == "svm" and metrics["p"] == 5
    rc = main(["evaluate", *_scene_args(scene_dir), "--model", str(out / "model.json"), "--out", str(out)])
    assert rc == 0
    ev = json.loads((out / "evaluation.json").read_text())
    assert ev["overall_accuracy"] == metrics["overall_accuracy"]
    assert ev["confusion"] == metrics["confusion"]
    assert main(["evaluate", *_scene_args(scene_dir), "--model", str(out / "model.json"),
                 "--split", "all", "--out", str(tmp_path / "all")]) == 0
    ev_all = json.loads((tmp_path / "all" / "evaluation.json").read_text())
    assert ev_all["test_size"] == metrics["train_size"] + metrics["test_size"]


def test_train_nn_published_hidden_layers_accepted(scene_dir, tmp_path):
    rc = main(["train", *_scene_args(scene_dir), "--classifier", "nn", "--patch-size", "3",
               "--set", "nn.hidden=[500,350,150]", "--set", "max_steps=1", "--out", str(tmp_path)])
    assert rc == 0
    tm = TrainedModel.load(tmp_path / "model.json")
    assert tm.model.layer_sizes[1:4] == (500, 350, 150)


def test_train_cnn_small(scene_dir, tmp_path):
    rc = main(["train", *_scene_args(scene_dir), "--classifier", "cnn", "--patch-size", "5",
               "--set", "cnn.filters=[4,4]", "--set", "cnn.fc_sizes=[8]", "--set", "cnn.kernel=3",
               "--set", "cnn.epochs=2", "--out", str(tmp_path)])
    assert rc == 0
    assert TrainedModel.load(tmp_path / "model.json").kind == "cnn"


def test_train_from_config_file(scene_dir, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({
        "cube": str(scene_dir / "scene.cube"),
        "labels": str(scene_dir / "scene.lbl"),
        "classifier": "nn",
        "patch_size": 1,
        "nn": {"hidden": [8], "epochs": 5},
        "out": "result",
    }))
    assert main(["train", "--config", str(cfg)]) == 0
    # relative paths in the config resolve against the config's directory
    assert (tmp_path / "result" / "model.json").exists()


def test_missing_cube_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.cube"
    rc = main(["train", "--cube", str(missing), "--labels", str(missing), "--patch-size", "1",
               "--out", str(tmp_path)])
    assert rc == 2
    assert str(missing) in capsys.readouterr().err


def test_usage_errors_exit_1(scene_dir, tmp_path):
    assert main(["train", "--bogus"]) == 1
    assert main([]) == 1
    assert main(["train", *_scene_args(scene_dir), "--patch-size", "4", "--out", str(tmp_path)]) == 1
    assert main(["train", *_scene_args(scene_dir), "--patch-size", "3", "--set", "svm.kernel=1",
                 "--out", str(tmp_path)]) == 1
    assert main(["train", *_scene_args(scene_dir), "--patch-size", "3", "--threads", "0"]) == 1


def test_bad_threads_env(scene_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("PATCHLAND_THREADS", "many")
    assert main(["train", *_scene_args(scene_dir), "--patch-size", "1", "--out", str(tmp_path)]) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_3(scene_dir, tmp_path):
    rc = main(["train", *_scene_args(scene_dir), "--classifier", "nn", "--patch-size", "1",
               "--set", "nn.hidden=[8]", "--set", "nn.optimizer=\"sgd\"", "--set", "nn.learning_rate=1e300",
               "--set", "nn.epochs=3", "--out", str(tmp_path)])
    assert rc == 3


def test_evaluate_wrong_band_count(scene_dir, tmp_path):
    assert main(["train", *_scene_args(scene_dir), "--patch-size", "1", "--out", str(tmp_path)]) == 0
    cube = load_cube(scene_dir / "scene.cube")
    write_cube(tmp_path / "fewer.cube", RasterCube(cube.values[:, :, :2]))
    rc = main(["evaluate", "--cube", str(tmp_path / "fewer.cube"), "--labels", str(scene_dir / "scene.lbl"),
               "--model", str(tmp_path / "model.json"), "--out", str(tmp_path)])
    assert rc == 2


def test_evaluate_constant_scene_perfect(tmp_path):
    values = np.zeros((12, 12, 2), dtype=np.float32)
    labels = np.zeros((12, 12), dtype=np.uint16)
    labels[:6] = 1
    labels[6:] = 2
    values[6:, :, 0] = 1.0
    write_cube(tmp_path / "c.cube", RasterCube(values))
    write_labels(tmp_path / "c.lbl", LabelMap(labels))
    args = ["--cube", str(tmp_path / "c.cube"), "--labels", str(tmp_path / "c.lbl")]
    assert main(["train", *args, "--patch-size", "1", "--out", str(tmp_path)]) == 0
    assert main(["evaluate", *args, "--model", str(tmp_path / "model.json"), "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "evaluation.json").read_text())["overall_accuracy"] == 100.0


@pytest.fixture(scope="module")
def p1_model(scene_dir, tmp_path_factory):
    d = tmp_path_factory.mktemp("p1")
    assert main(["train", *_scene_args(scene_dir), "--patch-size", "1", "--out", str(d)]) == 0
    return d


def test_classify_map_geometry_and_determinism(scene_dir, p1_model, tmp_path):
    args = ["classify", "--cube", str(scene_dir / "scene.cube"), "--model", str(p1_model / "model.json")]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b"), "--threads", "3"]) == 0
    blob = (tmp_path / "a" / "map.ppm").read_bytes()
    assert blob == (tmp_path / "b" / "map.ppm").read_bytes()
    w, h, _, _ = parse_ppm(blob)
    assert (h, w) == (32, 32)
    assert load_labels(tmp_path / "a" / "map.lbl").labels.shape == (32, 32)


def test_classify_p1_equals_per_pixel_predictions(scene_dir, p1_model, tmp_path):
    assert main(["classify", "--cube", str(scene_dir / "scene.cube"), "--model", str(p1_model / "model.json"),
                 "--out", str(tmp_path)]) == 0
    tm = TrainedModel.load(p1_model / "model.json")
    cube = load_cube(scene_dir / "scene.cube")
    dump = tm.predict_patches(cube.values.reshape(-1, 1, 1, cube.bands)).reshape(32, 32)
    np.testing.assert_array_equal(load_labels(tmp_path / "map.lbl").labels, dump)


def test_classify_with_palette(scene_dir, p1_model, tmp_path):
    pal = tmp_path / "pal.csv"
    pal.write_text("1,255,0,0\n2,0,255,0\n3,0,0,255\n")
    assert main(["classify", "--cube", str(scene_dir / "scene.cube"), "--model", str(p1_model / "model.json"),
                 "--palette", str(pal), "--out", str(tmp_path)]) == 0
    _, _, _, img = parse_ppm((tmp_path / "map.ppm").read_bytes())
    labels = load_labels(tmp_path / "map.lbl").labels
    colors = {1: (255, 0, 0), 2: (0, 255, 0), 3: (0, 0, 255)}
    for c, rgb in colors.items():
        assert np.all(img[labels == c] == rgb)


def test_commands_do_not_mutate_inputs(scene_dir, p1_model, tmp_path):
    before = {p: p.read_bytes() for p in (scene_dir / "scene.cube", scene_dir / "scene.lbl",
                                          p1_model / "model.json")}
    main(["evaluate", *_scene_args(scene_dir), "--model", str(p1_model / "model.json"), "--out", str(tmp_path)])
    main(["classify", "--cube", str(scene_dir / "scene.cube"), "--model", str(p1_model / "model.json"),
          "--out", str(tmp_path)])
    for p, blob in before.items():
        assert p.read_bytes() == blob


def test_sweep_rows_and_round_trip(scene_dir, tmp_path, capsys):
    cfg = tmp_path / "sweep.json"
    cfg.write_text(json.dumps({"classifiers": ["svm"], "p_list": [1, 3, 5], "seed": 2}))
    assert main(["sweep", "--config", str(cfg), *_scene_args(scene_dir), "--out", str(tmp_path)]) == 0
    res = SweepResult.read_csv(tmp_path / "sweep.csv")
    assert [(r.classifier, r.patch_size) for r in res.rows] == [("svm", 1), ("svm", 3), ("svm", 5)]
    assert all(r.seed == 2 for r in res.rows)
    for p in (1, 3, 5):
        assert (tmp_path / "metrics" / f"svm_p{p}.json").exists()
    res.write_csv(tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == (tmp_path / "sweep.csv").read_bytes()
    assert "spread" in capsys.readouterr().out


def test_sweep_flushes_partial_results(scene_dir, tmp_path):
    # p=3 succeeds; p=41 is larger than the scene, so it has no patches and aborts
    cfg = tmp_path / "sweep.json"
    cfg.write_text(json.dumps({"classifiers": ["svm"], "p_list": [3, 41]}))
    rc = main(["sweep", "--config", str(cfg), *_scene_args(scene_dir), "--out", str(tmp_path)])
    assert rc == 2
    rows = SweepResult.read_csv(tmp_path / "sweep.csv").rows
    assert [r.patch_size for r in rows] == [3]


def test_sweep_etm_range_accepted():
    cfg = build_config({"p_list": [1, 3, 5, 7, 9, 11], "classifiers": ["svm"]})
    assert cfg.p_list == (1, 3, 5, 7, 9, 11)
    with pytest.raises(ConfigError):
        build_config({"p_list": [1, 2]})


def test_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "patchland.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("synth", "train", "evaluate", "classify", "sweep"):
        assert cmd in res.stdout


# --- configuration ------------------------------------------------------------


def test_presets_carry_published_parameters():
    etm = build_config({"preset": "ETM+"})
    assert (etm.svm.C, etm.svm.gamma) == (10.0, 0.3)
    assert etm.cnn.arch.filters == (500, 100)
    assert etm.cnn.arch.fc_sizes == (200, 84)
    assert etm.nn.hidden == (500, 350, 150)
    assert etm.nn.train.batch_size == 128 and etm.nn.train.learning_rate == 0.001
    assert etm.cnn.train.optimizer == "adagrad"
    assert etm.patch_spec("cnn").p == 9 and etm.patch_spec("svm").p == 5
    av = build_config({"preset": "aviris-ng"})
    assert (av.svm.C, av.svm.gamma) == (30.0, 3.0)
    assert av.cnn.arch.filters == (300, 200)
    assert av.patch_spec("cnn").p == 7
    assert set(PRESETS) == {"etm+", "aviris-ng"}


def test_explicit_keys_override_preset():
    cfg = build_config({"preset": "etm+", "svm": {"C": 2}, "patch_size": 3})
    assert (cfg.svm.C, cfg.svm.gamma) == (2.0, 0.3)
    assert cfg.patch_spec("cnn").p == 3


def test_config_errors():
    for doc in ({"preset": "landsat"}, {"classifier": "rf"}, {"train_fraction": 1.0},
                {"nn": {"depth": 3}}, {"svm": {"C": -1}}, {"border_policy": "wrap"}, {"surprise": 1}, []):
        with pytest.raises(ConfigError):
            build_config(doc)
    with pytest.raises(ConfigError):
        build_config({}).patch_spec()


def test_apply_override_parses_json():
    doc = {}
    apply_override(doc, "nn.hidden=[4,2]")
    apply_override(doc, "svm.C=3")
    apply_override(doc, "classifier=cnn")
    assert doc == {"nn": {"hidden": [4, 2]}, "svm": {"C": 3}, "classifier": "cnn"}
    with pytest.raises(ConfigError):
        apply_override(doc, "novalue")


def test_exclude_bands_string(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"exclude_bands": "1-5,196-207,285-320", "cube": "x.cube"}))
    cfg = load_config(path)
    assert cfg.exclude_bands == [(1, 5), (196, 207), (285, 320)]
    assert cfg.cube == str(tmp_path / "x.cube")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
