import json

import pytest

from lazyinfer import load_model
from lazyinfer.bench import TIMING_FIELDS
from lazyinfer.cli import main


@pytest.fixture
def model_path(tmp_path):
    path = tmp_path / "m.lzwt"
    code = main(["gen-model", "--layers", "4", "--heads", "2", "--dim", "16",
                 "--vocab", "258", "--seed", "0", "--out", str(path)])
    assert code == 0
    return str(path)


@pytest.fixture
def corpus_dir(tmp_path):
    d = tmp_path / "corpus"
    d.mkdir()
    for i in range(3):
        (d / f"p{i}.txt").write_bytes(bytes([65 + i]) * (20 + i))
    return str(d)


class TestGenModel:
    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.lzwt", tmp_path / "b.lzwt"
        for p in (a, b):
            assert main(["gen-model", "--layers", "2", "--dim", "16",
                         "--heads", "2", "--out", str(p)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_output_loadable(self, model_path):
        config, _ = load_model(model_path)
        assert config.num_layers == 4

    def test_defaults_produce_a_loadable_model(self, tmp_path):
        out = tmp_path / "default.lzwt"
        assert main(["gen-model", "--out", str(out)]) == 0
        config, _ = load_model(out)
        assert (config.num_layers, config.num_heads, config.d_model,
                config.vocab_size) == (12, 8, 256, 258)

    def test_bad_config_exit_1(self, tmp_path):
        assert main(["gen-model", "--layers", "1", "--out",
                     str(tmp_path / "x.lzwt")]) == 1


class TestRun:
    def test_baseline_percent_100(self, model_path, tmp_path, capsys):
        out = tmp_path / "r.json"
        code = main(["run", "--model", model_path, "--prompt", "hello world",
                     "--policy", "baseline", "--max-new", "4",
                     "--out", str(out)])
        assert code == 0
        report = json.loads(out.read_text())
        assert report["percent_prompt_tokens_computed"] == 100.0
        assert len(report["generated_ids"]) == 4

    def test_lazy_prunes(self, model_path, tmp_path):
        out = tmp_path / "r.json"
        code = main(["run", "--model", model_path, "--prompt", "hello world",
                     "--policy", "lazy", "--schedule", "2:0.5",
                     "--max-new", "2", "--out", str(out)])
        assert code == 0
        report = json.loads(out.read_text())
        assert report["percent_prompt_tokens_computed"] < 100.0
        assert report["schedule"] == "2:0.5"

    def test_malformed_schedule_exit_1_no_partial_output(self, model_path, tmp_path):
        out = tmp_path / "r.json"
        code = main(["run", "--model", model_path, "--prompt", "x",
                     "--policy", "lazy", "--schedule", "8:0.4,4:0.7",
                     "--out", str(out)])
        assert code == 1
        assert not out.exists()

    def test_missing_model_exit_3(self, tmp_path):
        assert main(["run", "--model", str(tmp_path / "nope.lzwt"),
                     "--prompt", "x"]) == 3

    def test_no_prompt_source_usage_error(self, model_path):
        assert main(["run", "--model", model_path]) == 1

    def test_deterministic_reports(self, model_path, tmp_path):
        outs = []
        for name in ("a.json", "b.json"):
            out = tmp_path / name
            assert main(["run", "--model", model_path, "--prompt", "abcdef",
                         "--policy", "lazy", "--schedule", "2:0.5",
                         "--max-new", "4", "--out", str(out)]) == 0
            outs.append(json.loads(out.read_text()))
        for report in outs:
            for field in TIMING_FIELDS:
                report.pop(field)
        assert outs[0] == outs[1]

    def test_long_prompt_truncated_left(self, tmp_path, capsys):
        path = tmp_path / "small.lzwt"
        assert main(["gen-model", "--layers", "2", "--heads", "2", "--dim",
                     "16", "--max-position", "24", "--out", str(path)]) == 0
        code = main(["run", "--model", str(path), "--prompt", "z" * 100,
                     "--max-new", "2"])
        assert code == 0
        assert "truncated" in capsys.readouterr().err


class TestVerify:
    def test_clean_run_exit_0(self, model_path):
        assert main(["verify", "--model", model_path, "--prompt", "abcdefgh",
                     "--policy", "lazy", "--schedule", "2:0.5",
                     "--max-new", "4"]) == 0


class TestSweep:
    def test_grid_size(self, model_path, corpus_dir, tmp_path):
        out = tmp_path / "sweep.csv"
        code = main(["sweep", "--model", model_path, "--corpus", corpus_dir,
                     "--layers", "1,2", "--fractions", "1.0,0.5",
                     "--out", str(out)])
        assert code == 0
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 1 + 4

    def test_empty_corpus_exit_1(self, model_path, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["sweep", "--model", model_path, "--corpus", str(empty),
                     "--layers", "1", "--fractions", "0.5"]) == 1


class TestProfile:
    def test_histogram_blocks_per_layer(self, model_path, tmp_path):
        out = tmp_path / "profile.csv"
        code = main(["profile", "--model", model_path, "--prompt",
                     "some longer text to profile", "--bins", "8",
                     "--out", str(out)])
        assert code == 0
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 1 + 4 * 8  # 4 layers x 8 bins


class TestBench:
    def test_baseline_speedup_is_one(self, model_path, corpus_dir, tmp_path, capsys):
        out_json = tmp_path / "bench.json"
        out_csv = tmp_path / "bench.csv"
        code = main(["bench", "--model", model_path, "--corpus", corpus_dir,
                     "--policies", "baseline,lazy", "--schedule", "2:0.5",
                     "--max-new", "2", "--repeats", "1", "--warmup", "0",
                     "--out-json", str(out_json), "--out-csv", str(out_csv)])
        assert code == 0
        payload = json.loads(out_json.read_text())
        rows = {r["policy"]: r for r in payload["policies"]}
        assert rows["baseline"]["ttft_speedup"] == pytest.approx(1.0)
        assert rows["baseline"]["fidelity_match_rate"] == 1.0
        # speedup is recomputable from the raw per-prompt timings
        lazy = rows["lazy"]
        recomputed = sum(b / t for b, t in zip(rows["baseline"]["ttft_seconds"],
                                               lazy["ttft_seconds"]))
        recomputed /= len(lazy["ttft_seconds"])
        assert lazy["ttft_speedup"] == pytest.approx(recomputed)
        assert out_csv.read_text().startswith("policy,")
