"""Tests for dataset I/O, metrics, the experiment runner, and self-checks."""

import csv
import json
import struct

import numpy as np
import pytest

from advgrad.harness import (
    ExperimentConfig,
    MetricsRow,
    aggregate_rows,
    compute_metrics,
    load_cifar_binary,
    load_idx,
    run_experiment,
    synth_dataset,
    verify_propositions,
    write_cifar_binary,
    write_idx,
)
from advgrad.models import LabeledDataset
from advgrad.numerics import ImageShape, make_rng

SHAPE = ImageShape(8, 8, 1)


class TestIdxFormat:
    def make_dataset(self, n=6):
        rng = make_rng(0, 70)
        images = np.round(rng.uniform(0, 255, size=(n, 5, 4, 1)))
        labels = np.arange(n) % 3
        return LabeledDataset(images, labels, 3)

    def test_roundtrip(self, tmp_path):
        ds = self.make_dataset()
        ip, lp = str(tmp_path / "img.idx"), str(tmp_path / "lab.idx")
        write_idx(ds, ip, lp)
        back = load_idx(ip, lp)
        assert np.array_equal(back.images, ds.images)
        assert np.array_equal(back.labels, ds.labels)

    def test_header_layout_is_big_endian(self, tmp_path):
        ds = self.make_dataset(3)
        ip, lp = str(tmp_path / "img.idx"), str(tmp_path / "lab.idx")
        write_idx(ds, ip, lp)
        with open(ip, "rb") as fh:
            magic, count, h, w = struct.unpack(">IIII", fh.read(16))
        assert (magic, count, h, w) == (0x00000803, 3, 5, 4)
        with open(lp, "rb") as fh:
            magic, count = struct.unpack(">II", fh.read(8))
        assert (magic, count) == (0x00000801, 3)

    def test_bad_magic_names_offset(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(struct.pack(">IIII", 0xDEADBEEF, 1, 2, 2) + b"\x00" * 4)
        lab = tmp_path / "lab.idx"
        lab.write_bytes(struct.pack(">II", 0x00000801, 1) + b"\x00")
        with pytest.raises(ValueError, match="offset 0"):
            load_idx(str(path), str(lab))

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.idx"
        path.write_bytes(struct.pack(">IIII", 0x00000803, 2, 2, 2) + b"\x00" * 3)
        lab = tmp_path / "lab.idx"
        lab.write_bytes(struct.pack(">II", 0x00000801, 2) + b"\x00\x01")
        with pytest.raises(ValueError, match="truncated"):
            load_idx(str(path), str(lab))

    def test_count_mismatch(self, tmp_path):
        ds = self.make_dataset(2)
        ip, lp = str(tmp_path / "img.idx"), str(tmp_path / "lab.idx")
        write_idx(ds, ip, lp)
        bad = tmp_path / "bad_lab.idx"
        bad.write_bytes(struct.pack(">II", 0x00000801, 5) + b"\x00" * 5)
        with pytest.raises(ValueError, match="count"):
            load_idx(ip, str(bad))


class TestCifarFormat:
    def test_roundtrip(self, tmp_path):
        rng = make_rng(1, 71)
        images = np.round(rng.uniform(0, 255, size=(4, 32, 32, 3)))
        ds = LabeledDataset(images, np.array([0, 3, 9, 1]), 10)
        path = str(tmp_path / "batch.bin")
        write_cifar_binary(ds, path)
        back = load_cifar_binary(path)
        assert np.array_equal(back.images, ds.images)
        assert np.array_equal(back.labels, ds.labels)

    def test_record_layout(self, tmp_path):
        # one record: label byte then 3072 channel-major pixels
        images = np.zeros((1, 32, 32, 3))
        images[0, 0, 0, 0] = 255.0  # red channel of the top-left pixel
        ds = LabeledDataset(images, np.array([7]), 10)
        path = str(tmp_path / "one.bin")
        write_cifar_binary(ds, path)
        blob = open(path, "rb").read()
        assert len(blob) == 3073
        assert blob[0] == 7
        assert blob[1] == 255  # first byte of the red plane
        assert blob[1 + 1024] == 0  # green plane untouched

    def test_rejects_partial_record(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x00" * 3000)
        with pytest.raises(ValueError):
            load_cifar_binary(str(path))


class TestSynthDataset:
    @pytest.mark.parametrize("kind,classes", [
        ("blobs", 3), ("two-moons-image", 2), ("striped-digits", 4)])
    def test_shapes_labels_and_range(self, kind, classes):
        ds = synth_dataset(kind, 20, SHAPE, seed=0, num_classes=classes)
        assert ds.images.shape == (20, 8, 8, 1)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 255.0
        counts = np.bincount(ds.labels, minlength=classes)
        assert counts.max() - counts.min() <= 1  # balanced within one

    def test_deterministic(self):
        a = synth_dataset("blobs", 10, SHAPE, seed=4)
        b = synth_dataset("blobs", 10, SHAPE, seed=4)
        assert np.array_equal(a.images, b.images)

    def test_seed_changes_content(self):
        a = synth_dataset("blobs", 10, SHAPE, seed=0)
        b = synth_dataset("blobs", 10, SHAPE, seed=1)
        assert not np.array_equal(a.images, b.images)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            synth_dataset("imagenet", 10, SHAPE, seed=0)

    def test_moons_requires_two_classes(self):
        with pytest.raises(ValueError):
            synth_dataset("two-moons-image", 10, SHAPE, seed=0, num_classes=3)


class TestMetrics:
    def test_hand_computed_mad_rmsd(self):
        # delta (8, 0, 0, 0): MAD = 2, RMSD = 4
        orig = np.zeros((1, 2, 2, 1))
        adv = orig.copy()
        adv[0, 0, 0, 0] = 8.0
        row = compute_metrics(orig, adv, np.array([1]), np.array([0]),
                              method="m", source="s", target="t",
                              epsilon=8.0, steps=1)
        assert row.mad == pytest.approx(2.0)
        assert row.rmsd == pytest.approx(4.0)
        assert row.asr == 1.0

    def test_asr_counts_clean_misclassifications(self):
        # prediction differs from the label on both examples, even though the
        # second was never perturbed: ASR = 1.0 by convention
        orig = np.zeros((2, 2, 2, 1))
        row = compute_metrics(orig, orig, np.array([1, 2]), np.array([0, 0]),
                              method="m", source="s", target="t",
                              epsilon=8.0, steps=1)
        assert row.asr == 1.0

    def test_targeted_asr(self):
        orig = np.zeros((3, 1, 1, 1))
        row = compute_metrics(orig, orig, np.array([2, 2, 0]), np.array([0, 0, 0]),
                              targeted=True, target_labels=np.array([2, 2, 2]),
                              method="m", source="s", target="t",
                              epsilon=8.0, steps=1)
        assert row.asr == pytest.approx(2 / 3)

    def test_row_invariant_mad_le_rmsd_le_eps(self):
        with pytest.raises(ValueError):
            MetricsRow(method="m", source="s", target="t", asr=0.5,
                       mad=5.0, rmsd=3.0, epsilon=8.0, steps=1)
        with pytest.raises(ValueError):
            MetricsRow(method="m", source="s", target="t", asr=0.5,
                       mad=2.0, rmsd=9.0, epsilon=8.0, steps=1)

    def test_rejects_asr_out_of_range(self):
        with pytest.raises(ValueError):
            MetricsRow(method="m", source="s", target="t", asr=1.5,
                       mad=1.0, rmsd=1.0, epsilon=8.0, steps=1)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            compute_metrics(np.zeros((2, 1, 1, 1)), np.zeros((3, 1, 1, 1)),
                            np.zeros(2), np.zeros(2), method="m", source="s",
                            target="t", epsilon=8.0, steps=1)


class TestAggregate:
    def test_means_across_seeds(self):
        rows = [
            MetricsRow(method="a", source="s", target="t", asr=0.2, mad=1.0,
                       rmsd=1.5, epsilon=8.0, steps=5, seed=0),
            MetricsRow(method="a", source="s", target="t", asr=0.4, mad=3.0,
                       rmsd=3.5, epsilon=8.0, steps=5, seed=1),
        ]
        agg = aggregate_rows(rows)
        assert len(agg) == 1
        assert agg[0]["asr"] == pytest.approx(0.3)
        assert agg[0]["mad"] == pytest.approx(2.0)
        assert agg[0]["seeds"] == 2

    def test_groups_by_cell(self):
        rows = [
            MetricsRow(method="a", source="s", target="t", asr=0.2, mad=1.0,
                       rmsd=1.5, epsilon=8.0, steps=5),
            MetricsRow(method="b", source="s", target="t", asr=0.4, mad=1.0,
                       rmsd=1.5, epsilon=8.0, steps=5),
        ]
        assert len(aggregate_rows(rows)) == 2


class TestExperimentRunner:
    def base_config(self, tmp_path, **overrides):
        doc = {
            "dataset": {"kind": "blobs", "n": 60, "image_shape": [8, 8, 1],
                        "seed": 0, "num_classes": 3},
            "models": [
                {"name": "mlp", "kind": "mlp-1-hidden", "epochs": 3, "seed": 0},
                {"name": "conv", "kind": "tiny-conv", "epochs": 3, "seed": 1},
            ],
            "attacks": [
                {"name": "bim", "config": {
                    "epsilon": 8.0, "steps": 3,
                    "step_rule": {"type": "sign", "alpha": 2.0}}},
            ],
            "sources": ["mlp"],
            "targets": ["mlp", "conv"],
            "seeds": [0],
            "eval_count": 6,
            "output_dir": str(tmp_path / "out"),
        }
        doc.update(overrides)
        return ExperimentConfig.from_dict(doc)

    def test_writes_expected_files(self, tmp_path):
        paths = run_experiment(self.base_config(tmp_path))
        for key in ("results", "metrics", "summary"):
            assert key in paths
        with open(paths["metrics"], newline="") as fh:
            rows = list(csv.DictReader(fh))
        # one row per (attack, source, target, seed)
        assert len(rows) == 2
        assert {r["target"] for r in rows} == {"mlp", "conv"}
        for r in rows:
            assert 0.0 <= float(r["asr"]) <= 1.0
            assert float(r["mad"]) <= float(r["rmsd"]) + 1e-9
            assert float(r["rmsd"]) <= float(r["epsilon"]) + 1e-9

    def test_results_csv_respects_budget(self, tmp_path):
        paths = run_experiment(self.base_config(tmp_path))
        with open(paths["results"], newline="") as fh:
            for rec in csv.DictReader(fh):
                assert float(rec["linf"]) <= 8.0 + 1e-9

    def test_deterministic_metrics(self, tmp_path):
        p1 = run_experiment(self.base_config(tmp_path / "a"))
        p2 = run_experiment(self.base_config(tmp_path / "b"))
        assert open(p1["metrics"]).read() == open(p2["metrics"]).read()

    def test_epsilon_sweep_output(self, tmp_path):
        cfg = self.base_config(tmp_path, epsilon_grid=[2, 8])
        paths = run_experiment(cfg)
        with open(paths["sweep"], newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert {float(r["epsilon"]) for r in rows} == {2.0, 8.0}

    def test_interaction_histogram_output(self, tmp_path):
        cfg = self.base_config(tmp_path)
        cfg.interaction = {"examples": 3, "num_pairs": 3, "num_subsets": 2}
        paths = run_experiment(cfg)
        with open(paths["interaction"], newline="") as fh:
            raw = list(csv.DictReader(fh))
        assert len(raw) == 3
        with open(paths["histogram"], newline="") as fh:
            hist = list(csv.DictReader(fh))
        assert sum(int(r["count"]) for r in hist) == 3

    def test_summary_states_conventions(self, tmp_path):
        paths = run_experiment(self.base_config(tmp_path))
        summary = json.load(open(paths["summary"]))
        assert "clean misclassifications" in summary["asr_convention"]
        assert summary["aggregate"]

    def test_ensemble_source_name(self, tmp_path):
        cfg = self.base_config(tmp_path, sources=["mlp+conv"])
        paths = run_experiment(cfg)
        with open(paths["metrics"], newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert all(r["source"] == "mlp+conv" for r in rows)

    def test_missing_checkpoint_fails_fast(self, tmp_path):
        cfg = self.base_config(tmp_path, models=[
            {"name": "mlp", "checkpoint": str(tmp_path / "nope.json")}])
        with pytest.raises(FileNotFoundError):
            run_experiment(cfg)

    def test_config_validation(self, tmp_path):
        with pytest.raises(ValueError):
            self.base_config(tmp_path, attacks=[])
        with pytest.raises(ValueError):
            self.base_config(tmp_path, seeds=[])


class TestVerifyPropositions:
    def test_all_checks_pass(self):
        results = verify_propositions(seed=0)
        assert len(results) == 5
        for name, ok, detail in results:
            assert ok, f"{name}: {detail}"
