"""Command-line interface tests.

Subcommands run in-process through main(argv) so exit codes, stdout,
and written artifacts can all be asserted cheaply. One subprocess
smoke test covers the installed console script.
"""

import json
import shutil
import subprocess
import sys
import warnings

import pytest

from editfx.cli import main
from editfx.store import serialize
from editfx.synth import SynthConfig, generate

from conftest import effect_corpus


@pytest.fixture(scope="module")
def corpus_path(tmp_path_factory):
    records, _ = generate(SynthConfig(n=120, seed=11))
    path = tmp_path_factory.mktemp("corpus") / "corpus.jsonl"
    serialize(records, path)
    return path


@pytest.fixture(scope="module")
def reversal_corpus_path(tmp_path_factory):
    layout = [
        ("m1", "math", True, 0.2, 6),
        ("m1", "math", False, 0.0, 6),
        ("m2", "math", True, 0.2, 6),
        ("m2", "math", False, 0.0, 6),
        ("l1", "logical", True, -0.2, 6),
        ("l1", "logical", False, 0.0, 6),
        ("l2", "logical", True, -0.2, 6),
        ("l2", "logical", False, 0.0, 6),
    ]
    path = tmp_path_factory.mktemp("reversal") / "corpus.jsonl"
    serialize(effect_corpus(layout), path)
    return path


class TestValidate:
    def test_ok_corpus_prints_stats(self, corpus_path, capsys):
        assert main(["validate", "--input", str(corpus_path)]) == 0
        stats = json.loads(capsys.readouterr().out)
        assert stats["record_count"] == 120
        assert stats["skipped_count"] == 0
        assert sum(stats["per_dataset_counts"].values()) == 120

    def test_strict_mode_rejects_bad_line(self, corpus_path, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_bytes(corpus_path.read_bytes() + b"not json at all\n")
        assert main(["validate", "--input", str(bad)]) == 1
        assert capsys.readouterr().err.startswith("error:")

    def test_lenient_mode_skips_and_counts(self, corpus_path, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_bytes(corpus_path.read_bytes() + b"not json at all\n")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert main(["validate", "--input", str(bad), "--lenient"]) == 0
            stats = json.loads(capsys.readouterr().out)
            assert stats["skipped_count"] == 1
            assert stats["record_count"] == 120
            assert main(["validate", "--input", str(bad), "--lenient", "--fail-on-skip"]) == 1


class TestStageCommands:
    def test_features_writes_vectors(self, corpus_path, tmp_path):
        out = tmp_path / "features"
        assert main(["features", "--input", str(corpus_path), "--out", str(out)]) == 0
        lines = (out / "features.jsonl").read_text("utf-8").splitlines()
        assert len(lines) == 120
        doc = json.loads(lines[0])
        assert set(doc) == {"pair_id", "before", "after", "delta"}
        assert doc["delta"]["word_count"] == pytest.approx(
            doc["after"]["word_count"] - doc["before"]["word_count"]
        )

    def test_motifs_writes_results_and_audit(self, corpus_path, tmp_path):
        out = tmp_path / "motifs"
        argv = [
            "motifs",
            "--input",
            str(corpus_path),
            "--out",
            str(out),
            "--audit-label",
            "meta_instruction",
            "--audit-k",
            "5",
        ]
        assert main(argv) == 0
        lines = (out / "motifs.jsonl").read_text("utf-8").splitlines()
        assert len(lines) == 120
        assert "record_labels" in json.loads(lines[0])
        cooc = (out / "motif_cooccurrence.csv").read_text("utf-8").splitlines()
        assert cooc[0] == "label_a,label_b,count,rate_all,rate_labeled"
        audit = (out / "audit_meta_instruction.csv").read_text("utf-8").splitlines()
        assert audit[0] == "pair_id,span_text"
        assert len(audit) == 6

    def test_estimate_writes_artifacts(self, corpus_path, tmp_path, capsys):
        out = tmp_path / "estimates"
        assert main(["estimate", "--input", str(corpus_path), "--out", str(out)]) == 0
        doc = json.loads((out / "estimates.json").read_text("utf-8"))
        assert doc["estimates"]
        assert (out / "estimates.csv").exists()
        assert capsys.readouterr().out.startswith("estimated ")

    def test_infer_writes_artifacts(self, corpus_path, tmp_path):
        out = tmp_path / "inference"
        argv = ["infer", "--input", str(corpus_path), "--out", str(out), "--resamples", "8"]
        assert main(argv) == 0
        doc = json.loads((out / "inference.json").read_text("utf-8"))
        assert doc["alpha"] == 0.05
        assert all(0.0 <= row["q_value"] <= 1.0 for row in doc["results"])

    def test_ceiling_writes_json(self, corpus_path, tmp_path, capsys):
        out = tmp_path / "ceiling"
        assert main(["ceiling", "--input", str(corpus_path), "--out", str(out)]) == 0
        doc = json.loads((out / "ceiling.json").read_text("utf-8"))
        assert json.loads(capsys.readouterr().out) == doc

    def test_receptivity_notes_missing_annotations(self, corpus_path, tmp_path):
        out = tmp_path / "receptivity"
        assert main(["receptivity", "--input", str(corpus_path), "--out", str(out)]) == 0
        doc = json.loads((out / "receptivity.json").read_text("utf-8"))
        assert doc == {"note": "receptivity requires annotation vectors; none present"}


class TestLoo:
    def test_auto_signs_from_baseline(self, reversal_corpus_path, tmp_path, capsys):
        out = tmp_path / "loo"
        argv = [
            "loo",
            "--input",
            str(reversal_corpus_path),
            "--out",
            str(out),
            "--view",
            "surface",
            "--feature",
            "word_count",
            "--group-a",
            "math",
            "--group-b",
            "logical",
        ]
        assert main(argv) == 0
        assert capsys.readouterr().out.strip() == "stable 4/4"
        lines = (out / "loo.csv").read_text("utf-8").splitlines()
        assert lines[0].startswith("# baseline surface:word_count math=")
        assert len(lines) == 6

    def test_explicit_signs(self, reversal_corpus_path, tmp_path):
        out = tmp_path / "loo"
        argv = [
            "loo",
            "--input",
            str(reversal_corpus_path),
            "--out",
            str(out),
            "--view",
            "surface",
            "--feature",
            "word_count",
            "--group-a",
            "math",
            "--group-b",
            "logical",
            "--sign-a",
            "+",
            "--sign-b",
            "-",
        ]
        assert main(argv) == 0
        assert (out / "loo.csv").exists()


class TestSynthCommand:
    def test_config_file_and_seed_override(self, tmp_path):
        cfg_path = tmp_path / "synth.json"
        cfg_path.write_text(json.dumps({"n": 80, "seed": 3}), encoding="utf-8")
        out = tmp_path / "synth"
        argv = ["synth", "--config", str(cfg_path), "--out", str(out), "--seed", "9"]
        assert main(argv) == 0
        lines = (out / "corpus.jsonl").read_text("utf-8").splitlines()
        assert len(lines) == 80
        truth = json.loads((out / "ground_truth.json").read_text("utf-8"))
        assert truth["config"]["n"] == 80
        assert truth["config"]["seed"] == 9

    def test_default_config(self, tmp_path):
        out = tmp_path / "synth"
        assert main(["synth", "--out", str(out)]) == 0
        lines = (out / "corpus.jsonl").read_text("utf-8").splitlines()
        assert len(lines) == SynthConfig().n


class TestReportCommand:
    def test_full_bundle_then_render_only(self, corpus_path, tmp_path):
        bundle = tmp_path / "bundle"
        argv = [
            "report",
            "--input",
            str(corpus_path),
            "--out",
            str(bundle),
            "--resamples",
            "8",
        ]
        assert main(argv) == 0
        assert (bundle / "provenance.json").exists()

        rendered = tmp_path / "rendered"
        argv = [
            "report",
            "--estimates",
            str(bundle / "estimates.json"),
            "--inference",
            str(bundle / "inference.json"),
            "--out",
            str(rendered),
        ]
        assert main(argv) == 0
        provenance = json.loads((rendered / "provenance.json").read_text("utf-8"))
        assert provenance["mode"] == "render"
        # render-only tables must agree with the pipeline's own tables
        assert (rendered / "table_surface.csv").read_bytes() == (
            bundle / "table_surface.csv"
        ).read_bytes()

    def test_requires_input_or_estimates(self, tmp_path, capsys):
        assert main(["report", "--out", str(tmp_path / "x")]) == 1
        assert "report needs either --input or --estimates" in capsys.readouterr().err

    def test_missing_artifact_path_fails(self, tmp_path, capsys):
        assert main(["report", "--estimates", "nope.json", "--out", str(tmp_path / "x")]) == 1
        assert "estimates file not found: nope.json" in capsys.readouterr().err

    def test_rejects_input_and_estimates_together(self, corpus_path, tmp_path, capsys):
        argv = [
            "report",
            "--input",
            str(corpus_path),
            "--estimates",
            "whatever.json",
            "--out",
            str(tmp_path / "x"),
        ]
        assert main(argv) == 1
        assert "not both" in capsys.readouterr().err


class TestRunConfig:
    def test_flags_override_config_file(self, corpus_path, tmp_path):
        cfg_path = tmp_path / "run.json"
        cfg_path.write_text(json.dumps({"resamples": 8, "alpha": 0.2}), encoding="utf-8")
        out = tmp_path / "inference"
        argv = [
            "infer",
            "--input",
            str(corpus_path),
            "--out",
            str(out),
            "--config",
            str(cfg_path),
            "--alpha",
            "0.1",
        ]
        assert main(argv) == 0
        doc = json.loads((out / "inference.json").read_text("utf-8"))
        assert doc["alpha"] == 0.1
        assert all(row["valid_resamples"] <= 8 for row in doc["results"])

    def test_unknown_config_key_fails(self, corpus_path, tmp_path, capsys):
        cfg_path = tmp_path / "run.json"
        cfg_path.write_text(json.dumps({"bogus": 1}), encoding="utf-8")
        out = tmp_path / "x"
        argv = ["infer", "--input", str(corpus_path), "--out", str(out), "--config", str(cfg_path)]
        assert main(argv) == 1
        assert "unknown config keys" in capsys.readouterr().err

    def test_missing_config_file_fails(self, corpus_path, tmp_path, capsys):
        out = tmp_path / "x"
        argv = ["infer", "--input", str(corpus_path), "--out", str(out), "--config", "nope.json"]
        assert main(argv) == 1
        assert "config file not found: nope.json" in capsys.readouterr().err

    def test_config_must_be_json(self, corpus_path, tmp_path, capsys):
        cfg_path = tmp_path / "run.json"
        cfg_path.write_text("not json", encoding="utf-8")
        out = tmp_path / "x"
        argv = ["infer", "--input", str(corpus_path), "--out", str(out), "--config", str(cfg_path)]
        assert main(argv) == 1
        assert "config file is not valid JSON" in capsys.readouterr().err


class TestStageCache:
    def test_cached_stages_reproduce_estimates(self, corpus_path, tmp_path):
        cache = tmp_path / "cache"
        assert main(["features", "--input", str(corpus_path), "--out", str(cache)]) == 0
        assert main(["motifs", "--input", str(corpus_path), "--out", str(cache)]) == 0

        fresh = tmp_path / "fresh"
        cached = tmp_path / "cached"
        assert main(["estimate", "--input", str(corpus_path), "--out", str(fresh)]) == 0
        argv = [
            "estimate",
            "--input",
            str(corpus_path),
            "--out",
            str(cached),
            "--cache-dir",
            str(cache),
        ]
        assert main(argv) == 0
        assert (fresh / "estimates.json").read_bytes() == (cached / "estimates.json").read_bytes()

    def test_partial_cache_recomputes(self, corpus_path, tmp_path):
        cache = tmp_path / "cache"
        assert main(["features", "--input", str(corpus_path), "--out", str(cache)]) == 0
        features = (cache / "features.jsonl").read_text("utf-8").splitlines()
        (cache / "features.jsonl").write_text(features[0] + "\n", encoding="utf-8")

        fresh = tmp_path / "fresh"
        partial = tmp_path / "partial"
        assert main(["estimate", "--input", str(corpus_path), "--out", str(fresh)]) == 0
        with pytest.warns(UserWarning, match="does not cover the corpus"):
            argv = [
                "estimate",
                "--input",
                str(corpus_path),
                "--out",
                str(partial),
                "--cache-dir",
                str(cache),
            ]
            assert main(argv) == 0
        assert (fresh / "estimates.json").read_bytes() == (partial / "estimates.json").read_bytes()


class TestExitCodes:
    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(["--version"])
        assert excinfo.value.code == 0
        assert capsys.readouterr().out.startswith("editfx ")

    def test_directory_as_input_is_user_error(self, tmp_path, capsys):
        assert main(["validate", "--input", str(tmp_path)]) == 1
        assert "input file not found" in capsys.readouterr().err

    def test_internal_error_exits_2(self, corpus_path, capsys, monkeypatch):
        def boom(*args, **kwargs):
            raise RuntimeError("boom")

        monkeypatch.setattr("editfx.cli.ingest", boom)
        assert main(["validate", "--input", str(corpus_path)]) == 2
        assert capsys.readouterr().err.startswith("internal error: RuntimeError: boom")

    def test_console_script_smoke(self, corpus_path, tmp_path):
        exe = shutil.which("editfx")
        if exe is None:
            pytest.skip("console script not installed")
        result = subprocess.run(
            [exe, "validate", "--input", str(corpus_path)],
            capture_output=True,
            text=True,
            timeout=60,
        )
        assert result.returncode == 0
        assert json.loads(result.stdout)["record_count"] == 120
