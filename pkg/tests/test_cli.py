import json

import numpy as np
import pytest
import yaml

from spinefrac.cli import ExperimentConfig, load_config, main
from spinefrac.corpus import read_manifest
from spinefrac.network import NetworkConfig, init_weights, save_checkpoint
from spinefrac.trainer import ProbabilityMap

SMALL_CONFIG = {
    "phantom": {
        "n_cases": 6,
        "dims": [30, 30, 48],
        "spacing": [1.0, 1.0, 1.5],
        "vertebrae_per_case": [1, 2],
        "vertebra_radii_mm": [10, 10, 9],
        "tissue_radius_mm": 14,
        "min_negative_cases": 2,
        "fracture_prevalence": 0.5,
    },
    "network": {"variant": "3D", "channels_per_layer": [4] * 8, "fc_channels": [8]},
    "training": {"epochs": 2, "segments_per_epoch": 4, "segment_batch": 4, "output_patch": [3, 3, 3], "val_segments": 4},
    "evaluation": {"k": 2, "min_negatives": 1, "bootstrap_n": 10, "tile": [40, 40, 40]},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), (json.loads(err) if err.strip() else None)


@pytest.fixture
def config_file(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(SMALL_CONFIG))
    return p


@pytest.fixture
def corpus_dir(tmp_path, config_file, capsys):
    code, out, _ = run(capsys, "phantom-gen", "--config", config_file, "--seed", 3, "--out", tmp_path / "corpus")
    assert code == 0 and out["result"]["n_cases"] == 6
    return tmp_path / "corpus"


class TestConfig:
    def test_defaults(self):
        cfg = load_config(None)
        assert cfg.network == NetworkConfig.for_variant("3D")
        assert cfg.training.epochs == 35

    def test_seed_propagates(self):
        cfg = ExperimentConfig.from_dict({"seed": 9})
        assert cfg.phantom.seed == cfg.training.seed == cfg.evaluation.seed == 9

    def test_json_config(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"network": {"variant": "1slice"}}))
        assert load_config(p).network.variant == "1slice"

    @pytest.mark.parametrize(
        "bad", [{"trainig": {}}, {"training": {"epoch": 3}}, {"network": {"filters": 3}}, {"phantom": {"size": 1}}]
    )
    def test_unknown_keys_rejected(self, tmp_path, capsys, bad):
        p = tmp_path / "bad.yaml"
        p.write_text(yaml.safe_dump(bad))
        code, _, err = run(capsys, "phantom-gen", "--config", p, "--out", tmp_path / "x")
        assert code == 2 and err["status"] == "error"


class TestCommands:
    def test_missing_argument_is_usage_error(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", "--out", tmp_path)
        assert code == 2 and "corpus" in err["message"]

    def test_zero_epochs(self, capsys, tmp_path, corpus_dir, config_file):
        code, _, err = run(capsys, "train", "--corpus", corpus_dir, "--config", config_file, "--epochs", 0,
                           "--out", tmp_path / "run")
        assert code == 2 and "epochs" in err["message"]

    def test_phantom_gen_deterministic(self, capsys, tmp_path, config_file, corpus_dir):
        run(capsys, "phantom-gen", "--config", config_file, "--seed", 3, "--workers", 2, "--out", tmp_path / "again")
        for entry in read_manifest(corpus_dir)["cases"]:
            for f in ("image.nii", "labels.nii", "annotations.csv"):
                a = (corpus_dir / entry["case_id"] / f).read_bytes()
                assert a == (tmp_path / "again" / entry["case_id"] / f).read_bytes()

    def test_build_labels_matches_corpus(self, capsys, tmp_path, corpus_dir, config_file):
        code, out, _ = run(capsys, "build-labels", "--config", config_file, "--annotations", corpus_dir,
                           "--volumes", corpus_dir, "--out", tmp_path / "labels")
        assert code == 0 and len(out["result"]["cases"]) == 6
        for cid in out["result"]["cases"]:
            assert (tmp_path / "labels" / cid / "labels.nii").read_bytes() == (corpus_dir / cid / "labels.nii").read_bytes()

    def test_train_infer_aggregate(self, capsys, tmp_path, corpus_dir, config_file):
        before = {p: p.read_bytes() for p in corpus_dir.rglob("*") if p.is_file()}
        code, out, _ = run(capsys, "train", "--corpus", corpus_dir, "--config", config_file, "--out", tmp_path / "run")
        assert code == 0 and out["result"]["epochs"] == 2
        assert len((tmp_path / "run" / "train_log.jsonl").read_text().splitlines()) == 2

        case = corpus_dir / "case000"
        code, out, _ = run(capsys, "infer", "--volume", case / "image.nii", "--checkpoint", tmp_path / "run" / "model.npz",
                           "--config", config_file, "--out", tmp_path / "case000.nii")
        assert code == 0
        pm = ProbabilityMap.load(tmp_path / "case000.nii")
        np.testing.assert_allclose(pm.data.sum(-1), 1.0, atol=1e-5)

        code, out, _ = run(capsys, "aggregate", "--map", tmp_path / "case000.nii", "--mode", "patient",
                           "--config", config_file, "--out", tmp_path / "patient.jsonl")
        assert code == 0 and set(out["result"][0]) >= {"decision", "fracture_voxel_count"}
        code, out, _ = run(capsys, "aggregate", "--map", tmp_path / "case000.nii", "--mode", "vertebra",
                           "--annotations", case / "annotations.csv", "--config", config_file,
                           "--out", tmp_path / "vert.jsonl")
        assert code == 0
        lines = (tmp_path / "vert.jsonl").read_text().splitlines()
        assert len(lines) == len(out["result"]) >= 1
        assert all(0 <= json.loads(l)["score"] <= 1 for l in lines)
        # inputs untouched
        assert before == {p: p.read_bytes() for p in corpus_dir.rglob("*") if p.is_file()}

    def test_vertebra_mode_needs_annotations(self, capsys, tmp_path):
        ProbabilityMap(np.full((4, 4, 4, 3), 1 / 3, np.float32)).save(tmp_path / "m.nii")
        code, _, err = run(capsys, "aggregate", "--map", tmp_path / "m.nii", "--mode", "vertebra", "--out", tmp_path / "o")
        assert code == 2

    def test_checkpoint_version_mismatch(self, capsys, tmp_path, corpus_dir):
        cfg = NetworkConfig(channels_per_layer=(2,), fc_channels=())
        save_checkpoint(tmp_path / "c.npz", cfg, init_weights(cfg))
        with np.load(tmp_path / "c.npz") as data:
            arrays = dict(data)
        arrays["__header__"] = np.frombuffer(b'{"format": "spinefrac-checkpoint/0"}', dtype=np.uint8)
        np.savez(tmp_path / "old.npz", **arrays)
        code, _, err = run(capsys, "infer", "--volume", corpus_dir / "case000" / "image.nii",
                           "--checkpoint", tmp_path / "old.npz", "--out", tmp_path / "m.nii")
        assert code == 3 and err["error"] == "CheckpointFormatError"

    def test_missing_volume(self, capsys, tmp_path):
        cfg = NetworkConfig(channels_per_layer=(2,), fc_channels=())
        save_checkpoint(tmp_path / "c.npz", cfg, init_weights(cfg))
        code, _, err = run(capsys, "infer", "--volume", tmp_path / "none.nii", "--checkpoint", tmp_path / "c.npz",
                           "--out", tmp_path / "m.nii")
        assert code == 3

    def test_evaluate_deterministic(self, capsys, tmp_path, corpus_dir, config_file):
        digests = []
        for name in ("a", "b"):
            code, out, err = run(capsys, "evaluate", "--corpus", corpus_dir, "--config", config_file, "--seed", 1,
                                 "--out", tmp_path / name)
            assert code == 0, err
            digests.append(out["result"]["digest"])
        assert digests[0] == digests[1]
        report = json.loads((tmp_path / "a" / "report.json").read_text())
        assert len(report["folds"]) == 2
        assert (tmp_path / "a" / "roc_vertebra.png").exists()
