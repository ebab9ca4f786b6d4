"""CLI contract: artifacts, exit codes, determinism of reruns."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from volfuse import checksuite
from volfuse.cli import main
from volfuse.data import save_volume, VolumeRecord
from volfuse.gradcheck import grad_check
from volfuse.rng import Rng
from volfuse.tensor import Tensor, result_tensor


def write_config(path: Path, **sections) -> Path:
    base = {
        "phantom": {"count_per_class": 4, "dims": [8, 8, 8],
                    "cavity_radius_nc": [1.0, 1.5], "cavity_radius_ad": [2.5, 3.0],
                    "noise_sigma": 0.05, "seed": 3},
        "model": {"input_dims": [8, 8, 8]},
        "train": {"epochs": 2, "batch_size": 4, "lr": 0.001, "seed": 1},
    }
    base.update(sections)
    path.write_text(json.dumps(base))
    return path


def tree_hashes(root: Path) -> dict:
    return {
        p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


@pytest.fixture()
def dataset(tmp_path):
    cfg = write_config(tmp_path / "cfg.json")
    out = tmp_path / "data"
    assert main(["gen-data", "--config", str(cfg), "--out-dir", str(out)]) == 0
    return cfg, out / "manifest.json", out


class TestGenData:
    def test_rerun_is_hash_identical(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json")
        d1, d2 = tmp_path / "d1", tmp_path / "d2"
        assert main(["gen-data", "--config", str(cfg), "--out-dir", str(d1)]) == 0
        assert main(["gen-data", "--config", str(cfg), "--out-dir", str(d2)]) == 0
        assert tree_hashes(d1) == tree_hashes(d2)

    def test_threads_flag_bit_identical(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json")
        d1, d2 = tmp_path / "d1", tmp_path / "d2"
        assert main(["gen-data", "--config", str(cfg), "--out-dir", str(d1)]) == 0
        assert main(["--threads", "4", "gen-data", "--config", str(cfg),
                     "--out-dir", str(d2)]) == 0
        assert tree_hashes(d1) == tree_hashes(d2)

    def test_unwritable_out_dir_exits_1_naming_path(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json")
        blocker = tmp_path / "blocked"
        blocker.write_text("a file, not a directory")
        rc = main(["gen-data", "--config", str(cfg), "--out-dir", str(blocker)])
        assert rc == 1
        assert "blocked" in capsys.readouterr().err

    def test_unknown_config_key_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"train": {"epoch": 3}}))
        rc = main(["gen-data", "--config", str(bad), "--out-dir", str(tmp_path / "x")])
        assert rc == 2
        assert "epoch" in capsys.readouterr().err

    def test_unknown_section_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"training": {}}))
        assert main(["gen-data", "--config", str(bad),
                     "--out-dir", str(tmp_path / "x")]) == 2


class TestFuse:
    def test_pgm_header_for_cube(self, tmp_path):
        vol = VolumeRecord(Rng(0).uniform(0, 1, (32, 32, 32)).astype(np.float32), 0, "v")
        save_volume(vol, tmp_path / "v")
        out = tmp_path / "v.pgm"
        assert main(["fuse", "--input", str(tmp_path / "v.vol"), "--method", "approx",
                     "--out", str(out)]) == 0
        assert out.read_bytes().startswith(b"P5\n32 32\n255\n")

    def test_constant_volume_renders_mid_gray(self, tmp_path):
        vol = VolumeRecord(np.full((8, 8, 8), 2.0, np.float32), 0, "c")
        save_volume(vol, tmp_path / "c")
        out = tmp_path / "c.pgm"
        assert main(["fuse", "--input", str(tmp_path / "c.vol"), "--method", "approx",
                     "--out", str(out)]) == 0
        payload = out.read_bytes().split(b"255\n", 1)[1]
        assert payload == bytes([128] * 64)

    def test_exact_prints_objective(self, tmp_path, capsys):
        vol = VolumeRecord(Rng(1).uniform(0, 1, (6, 6, 6)).astype(np.float32), 0, "e")
        save_volume(vol, tmp_path / "e")
        assert main(["fuse", "--input", str(tmp_path / "e.vol"), "--method", "exact",
                     "--out", str(tmp_path / "e.pgm")]) == 0
        assert "objective" in capsys.readouterr().out

    def test_chunked_and_max_methods(self, tmp_path):
        vol = VolumeRecord(Rng(2).uniform(0, 1, (8, 6, 6)).astype(np.float32), 0, "m")
        save_volume(vol, tmp_path / "m")
        for method in ("chunked:3", "max"):
            assert main(["fuse", "--input", str(tmp_path / "m.vol"), "--method", method,
                         "--out", str(tmp_path / "m.pgm")]) == 0

    def test_unknown_method_exits_2(self, tmp_path):
        vol = VolumeRecord(np.zeros((4, 4, 4), np.float32), 0, "u")
        save_volume(vol, tmp_path / "u")
        assert main(["fuse", "--input", str(tmp_path / "u.vol"), "--method", "median",
                     "--out", str(tmp_path / "u.pgm")]) == 2
        assert main(["fuse", "--input", str(tmp_path / "u.vol"), "--method", "chunked:x",
                     "--out", str(tmp_path / "u.pgm")]) == 2

    def test_exact_approx_cosine_on_monotone_volume(self, tmp_path):
        # depth-ramped volume: the surrogate should point near the exact u
        ramp = np.stack([t * np.ones((6, 6)) for t in range(1, 9)]) / 8.0
        ramp += 0.01 * Rng(3).normal((8, 6, 6))
        vol = VolumeRecord(ramp.astype(np.float32), 0, "r")
        save_volume(vol, tmp_path / "r")
        assert main(["fuse", "--input", str(tmp_path / "r.vol"), "--method", "exact",
                     "--out", str(tmp_path / "exact.pgm")]) == 0
        assert main(["fuse", "--input", str(tmp_path / "r.vol"), "--method", "approx",
                     "--out", str(tmp_path / "approx.pgm")]) == 0
        from volfuse.rankpool import SliceSequence, approx_rank_pool, ranksvm_solve

        seq = SliceSequence.from_stack(ramp.astype(np.float64))
        a = approx_rank_pool(seq).value.reshape(-1)
        e = ranksvm_solve(seq).value.reshape(-1)
        cos = float(a @ e / (np.linalg.norm(a) * np.linalg.norm(e)))
        assert cos >= 0.9


class TestTrainEval:
    def test_artifacts_and_epoch_rows(self, dataset, tmp_path):
        cfg, manifest, _ = dataset
        run = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--manifest", str(manifest),
                     "--out-dir", str(run), "--epochs", "3"]) == 0
        curve = (run / "curve.csv").read_text().splitlines()
        assert curve[0] == "epoch,train_loss,eval_loss"
        assert len(curve) == 4
        for stem in ("checkpoint_best", "checkpoint_final"):
            assert (run / f"{stem}.json").exists()
            assert (run / f"{stem}.bin").exists()

    def test_eval_metrics_keys(self, dataset, tmp_path, capsys):
        cfg, manifest, _ = dataset
        run = tmp_path / "run"
        main(["train", "--config", str(cfg), "--manifest", str(manifest),
              "--out-dir", str(run), "--epochs", "2"])
        metrics_path = tmp_path / "metrics.json"
        assert main(["eval", "--config", str(cfg), "--manifest", str(manifest),
                     "--checkpoint", str(run / "checkpoint_best"),
                     "--out", str(metrics_path)]) == 0
        doc = json.loads(metrics_path.read_text())
        assert set(doc) == {"acc", "auc", "f1", "precision", "recall", "ap",
                            "threshold", "counts"}

    def test_train_rerun_bit_identical(self, dataset, tmp_path):
        cfg, manifest, _ = dataset
        r1, r2 = tmp_path / "r1", tmp_path / "r2"
        for run in (r1, r2):
            assert main(["train", "--config", str(cfg), "--manifest", str(manifest),
                         "--out-dir", str(run), "--epochs", "2"]) == 0
        assert tree_hashes(r1) == tree_hashes(r2)

    def test_dump_attention_writes_pgms(self, dataset, tmp_path):
        cfg, manifest, _ = dataset
        run = tmp_path / "run"
        main(["train", "--config", str(cfg), "--manifest", str(manifest),
              "--out-dir", str(run), "--epochs", "1"])
        att = tmp_path / "att"
        assert main(["eval", "--config", str(cfg), "--manifest", str(manifest),
                     "--checkpoint", str(run / "checkpoint_best"),
                     "--dump-attention", str(att)]) == 0
        assert (att / "attention_spatial.pgm").read_bytes().startswith(b"P5")
        assert (att / "attention_channel.pgm").exists()


class TestBenchAndAblate:
    def test_bench_one_row_per_variant(self, dataset, tmp_path, capsys):
        cfg, manifest, _ = dataset
        out = tmp_path / "bench.csv"
        assert main(["bench", "--config", str(cfg), "--manifest", str(manifest),
                     "--variants", "post_fusion_b,post_fusion_a", "--epochs", "3",
                     "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "variant,median_s_per_epoch"
        assert len(lines) == 3
        assert lines[1].startswith("post_fusion_b,")

    def test_bench_unknown_variant_exits_2(self, dataset, tmp_path):
        cfg, manifest, _ = dataset
        assert main(["bench", "--config", str(cfg), "--manifest", str(manifest),
                     "--variants", "resnet152"]) == 2

    def test_ablate_table_structure(self, dataset, tmp_path):
        cfg, manifest, _ = dataset
        out = tmp_path / "tables"
        assert main(["ablate", "--config", str(cfg), "--manifest", str(manifest),
                     "--out-dir", str(out), "--seeds", "1", "--epochs", "1"]) == 0
        lines = (out / "ablation.csv").read_text().splitlines()
        assert lines[0] == "variant,seed,acc,auc,f1,precision,recall,ap"
        variants = [ln.split(",")[0] for ln in lines[1:]]
        assert variants == [
            "post_fusion_a", "post_fusion_b", "pre_fusion",
            "post_fusion_no_cbam", "post_fusion_maxpool", "post_fusion_svm",
        ]
        assert (out / "report.md").exists()


class TestGradcheckCommand:
    def test_broken_backward_exits_1_naming_op(self, monkeypatch, capsys):
        def sabotaged(seed):
            def op(ts):
                x = ts[0]
                out = x.data * 2.0

                def backward(g):
                    x._accumulate(g * 1.0)  # wrong: true jacobian is 2

                return result_tensor(out, "sabotaged", (x,), backward)

            return grad_check(op, [Tensor(np.ones(3))], rng=Rng(seed))

        monkeypatch.setattr(checksuite, "OP_CHECKS", [("sabotaged_scale", sabotaged)])
        monkeypatch.setattr(
            checksuite, "variant_configs",
            lambda: {k: v for k, v in list(checksuite_variant_items())[:1]},
        )
        rc = main(["gradcheck", "--seeds", "1"])
        captured = capsys.readouterr()
        assert rc == 1
        assert "sabotaged_scale" in captured.out
        assert "FAIL" in captured.out


def checksuite_variant_items():
    from volfuse.checksuite import ModelConfig, TINY_DIMS

    return {
        "post_fusion_a": ModelConfig(variant="post_fusion_a", input_dims=TINY_DIMS)
    }.items()


def test_gradcheck_report_covers_benchmark_variants(capsys):
    rc = main(["gradcheck", "--seeds", "1"])
    out = capsys.readouterr().out
    assert rc == 0
    for name in ("conv3d_baseline", "pre_fusion", "post_fusion_a", "post_fusion_b",
                 "post_fusion_a_svm_features", "post_fusion_a_no_cbam",
                 "post_fusion_a_maxpool"):
        assert name in out
    assert "worst offender" in out
