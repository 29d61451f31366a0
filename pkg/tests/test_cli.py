import csv
import json

import numpy as np
import pytest

from visreformer import faults
from visreformer.checkpoint import load_checkpoint
from visreformer.cli import apply_overrides, main, parse_override
from visreformer.model import build

TINY = [
    "--set", "model.embed_dim=16", "--set", "model.heads=2", "--set", "model.depth=2",
    "--set", "model.stem_channels=4", "--set", "model.patch_size=2", "--set", "model.image_size=8",
    "--set", "model.bucket_size=4", "--set", "micro_batch=8", "--set", "accum_steps=1",
    "--set", "augment=false", "--set", "synthetic_n=64",
]


def run_train(tmp_path, name, *extra):
    out = tmp_path / name
    rc = main(["train", "--preset", "cifar10", "--variant", "lsh", "--epochs", "5", "--seed", "3",
               "--out", str(out), "--quiet", *TINY, *extra])
    return rc, out


@pytest.fixture(autouse=True)
def _no_faults():
    faults.clear()
    yield
    faults.clear()


class TestOverrides:
    def test_parse_json_and_string(self):
        assert parse_override("model.depth=2") == (["model", "depth"], 2)
        assert parse_override("data=synthetic") == (["data"], "synthetic")
        assert parse_override("augment=false") == (["augment"], False)

    def test_apply_nested(self):
        doc = apply_overrides({"model": {}, "lr": 1.0}, ["model.depth=4", "lr=0.5"])
        assert doc == {"model": {"depth": 4}, "lr": 0.5}

    def test_malformed_override_is_usage_error(self, tmp_path):
        assert main(["train", "--out", str(tmp_path), "--set", "nonsense"]) == 2


class TestVerify:
    def test_revblocks_scope_passes(self, tmp_path, capsys):
        assert main(["verify", "--scope", "revblocks", "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "verify.json").read_text())
        assert report["passed"] and report["scope"] == "revblocks"
        assert (tmp_path / "manifest.json").exists()

    @pytest.mark.parametrize("fault,scope,name", [
        ("rev_inverse", "revblocks", "revblocks.round_trip"),
        ("lsh_dedup", "attention", "attention.degeneracy"),
        ("accumulation", "train", "train.accumulation_equivalence"),
    ])
    def test_injected_fault_detected(self, tmp_path, monkeypatch, capsys, fault, scope, name):
        monkeypatch.setenv("VISREFORMER_ENABLE_FAULTS", "1")
        rc = main(["verify", "--scope", scope, "--inject-fault", fault, "--out", str(tmp_path), "--quiet"])
        assert rc == 1
        err = capsys.readouterr().err
        assert name in err
        report = json.loads((tmp_path / "verify.json").read_text())
        assert not report["passed"]
        assert not faults.active(fault)

    def test_fault_needs_env(self, tmp_path, monkeypatch):
        monkeypatch.delenv("VISREFORMER_ENABLE_FAULTS", raising=False)
        assert main(["verify", "--scope", "core", "--inject-fault", "rev_inverse", "--out", str(tmp_path)]) == 2

    def test_unknown_scope(self, tmp_path):
        assert main(["verify", "--scope", "nope", "--out", str(tmp_path)]) == 2


class TestBench:
    ARGS = ["bench", "--n", "256,512,1024,2048", "--counts-only"]

    def test_cardinality_and_fits(self, tmp_path, capsys):
        assert main([*self.ARGS, "--out", str(tmp_path)]) == 0
        with open(tmp_path / "bench.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 8
        doc = json.loads((tmp_path / "bench.json").read_text())
        score_fits = [f for f in doc["fits"] if f["metric"] == "scores"]
        assert len(score_fits) == 2
        dense = next(f for f in score_fits if f["variant"] == "dense")
        assert dense["exponent"] == pytest.approx(2.0, abs=1e-12)
        assert (tmp_path / "bench.svg").exists() and (tmp_path / "manifest.json").exists()

    def test_deterministic_counts(self, tmp_path, capsys):
        main([*self.ARGS, "--out", str(tmp_path / "a")])
        main([*self.ARGS, "--out", str(tmp_path / "b")])
        a = (tmp_path / "a" / "bench.csv").read_text()
        b = (tmp_path / "b" / "bench.csv").read_text()
        assert a == b

    def test_missing_n(self, tmp_path, capsys):
        assert main(["bench", "--out", str(tmp_path)]) == 2

    @pytest.mark.parametrize("n", ["256,abc", "512,256", "0,16", ""])
    def test_bad_n(self, tmp_path, capsys, n):
        assert main(["bench", "--n", n, "--counts-only", "--out", str(tmp_path)]) == 2

    def test_bad_variant(self, tmp_path, capsys):
        assert main(["bench", "--n", "64", "--variants", "sparse", "--out", str(tmp_path)]) == 2

    def test_timed_small(self, tmp_path, capsys):
        rc = main(["bench", "--n", "64,128,256,512", "--trials", "3", "--out", str(tmp_path)])
        assert rc == 0
        doc = json.loads((tmp_path / "bench.json").read_text())
        assert {f["metric"] for f in doc["fits"]} == {"scores", "time"}


class TestTrain:
    def test_artifacts(self, tmp_path, capsys):
        rc, out = run_train(tmp_path, "run")
        assert rc == 0
        for name in ("metrics.jsonl", "model.ckpt", "config.json", "manifest.json"):
            assert (out / name).exists(), name
        lines = [json.loads(s) for s in (out / "metrics.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in lines] == [1, 2, 3, 4, 5]
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 3 and manifest["config"]["train"]["variant"] == "lsh"

    def test_zero_lr_leaves_parameters(self, tmp_path, capsys):
        rc, out = run_train(tmp_path, "zero", "--set", "lr=0", "--set", "min_lr=0")
        assert rc == 0
        trained = load_checkpoint(out / "model.ckpt")
        fresh = build(trained.config, 3)
        for (n, a), (_, b) in zip(fresh.named_parameters(), trained.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data, err_msg=n)

    def test_same_seed_same_log(self, tmp_path, capsys):
        _, a = run_train(tmp_path, "a")
        _, b = run_train(tmp_path, "b")

        def strip(path):
            rows = [json.loads(s) for s in (path / "metrics.jsonl").read_text().splitlines()]
            for r in rows:
                r.pop("epoch_time_s")
            return rows

        assert strip(a) == strip(b)

    def test_missing_data_path(self, tmp_path, capsys):
        rc = main(["train", "--data", str(tmp_path / "absent"), "--epochs", "1", "--out", str(tmp_path / "o")])
        assert rc == 3

    def test_unknown_config_key(self, tmp_path, capsys):
        rc = main(["train", "--set", "bogus=1", "--out", str(tmp_path)])
        assert rc == 2

    def test_env_output_root(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("VISREFORMER_OUT", str(tmp_path / "root"))
        assert main(["train", "--epochs", "1", "--quiet", *TINY]) == 0
        assert (tmp_path / "root" / "train" / "manifest.json").exists()


class TestEvalInspect:
    def test_eval_checkpoint(self, tmp_path, capsys):
        _, out = run_train(tmp_path, "run")
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(out / "model.ckpt"), "--out", str(tmp_path / "ev")]) == 0
        doc = json.loads((tmp_path / "ev" / "eval.json").read_text())
        assert 0.0 <= doc["accuracy"] <= 1.0
        assert (tmp_path / "ev" / "manifest.json").exists()

    def test_inspect_preset(self, capsys):
        assert main(["inspect", "--preset", "retinopathy"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["matched"] and doc["param_delta"] == doc["expected_delta"]

    def test_inspect_missing_checkpoint(self, tmp_path, capsys):
        assert main(["inspect", "--checkpoint", str(tmp_path / "none.ckpt")]) == 3
