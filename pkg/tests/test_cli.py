import json

import pytest

from dcgen.cli import main
from dcgen.configio import (ConfigError, config_hash, parse_flat_config,
                            to_train_config, to_world_config)

WORLD_CFG = """\
world.num_items = 40
world.num_users = 30
world.relevance_rank = 4
world.exposure_skew = 1.2
world.slate_size = 6
world.interactions_per_user = 10
world.seed = 5
"""

TRAIN_CFG = """\
mode = clrec_queue_cached
batch_size = 16
queue.capacity = 64
epochs = 2
seed = 3
encoder.d = 8
max_prefix_len = 5
eval.k = 10
data.catalog = sim/catalog.tsv
data.interactions = sim/interactions.tsv
"""

EVAL_CFG = """\
seed = 3
eval.k = 10
max_prefix_len = 5
eval.protocol = holdout_test
data.catalog = sim/catalog.tsv
data.interactions = sim/interactions.tsv
data.checkpoint = run/checkpoint.bin
eval.truth = sim/truth.jsonl
"""


@pytest.fixture
def pipeline_dir(tmp_path):
    (tmp_path / "world.cfg").write_text(WORLD_CFG)
    (tmp_path / "train.cfg").write_text(TRAIN_CFG)
    (tmp_path / "eval.cfg").write_text(EVAL_CFG)
    return tmp_path


def run_pipeline(d):
    assert main(["simulate", "-c", str(d / "world.cfg"),
                 "-o", str(d / "sim")]) == 0
    assert main(["train", "-c", str(d / "train.cfg"),
                 "-o", str(d / "run")]) == 0
    assert main(["eval", "-c", str(d / "eval.cfg"),
                 "-o", str(d / "ev")]) == 0


class TestConfigParsing:
    def test_key_value_lines(self):
        cfg = parse_flat_config("a = 1\n# comment\n\nb.c=x\n")
        assert cfg == {"a": "1", "b.c": "x"}

    def test_malformed_line(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_flat_config("a = 1\njunk\n")

    def test_hash_stable_under_reordering(self):
        a = config_hash({"x": "1", "y": "2"})
        b = config_hash({"y": "2", "x": "1"})
        assert a == b
        assert a != config_hash({"x": "1", "y": "3"})

    def test_world_and_train_builders(self):
        cfg = parse_flat_config(WORLD_CFG + TRAIN_CFG)
        w = to_world_config(cfg)
        assert w.num_items == 40 and w.seed == 5
        t = to_train_config(cfg, seed_override=99)
        assert t.seed == 99 and t.queue_capacity == 64

    def test_queue_cached_key_normalizes_mode(self):
        cfg = parse_flat_config("mode = clrec_queue\nqueue.cached = true\n")
        assert to_train_config(cfg).mode == "clrec_queue_cached"

    def test_bad_value_is_config_error(self):
        with pytest.raises(ConfigError, match="batch_size"):
            to_train_config({"batch_size": "many"})


class TestSimulateCommand:
    def test_writes_world_files(self, pipeline_dir):
        assert main(["simulate", "-c", str(pipeline_dir / "world.cfg"),
                     "-o", str(pipeline_dir / "sim")]) == 0
        for name in ("catalog.tsv", "interactions.tsv", "truth.jsonl"):
            assert (pipeline_dir / "sim" / name).exists()
        head = (pipeline_dir / "sim" / "catalog.tsv").read_text().splitlines()
        assert head[0].startswith("# config_hash=")

    def test_missing_config_exits_2(self, pipeline_dir, capsys):
        rc = main(["simulate", "-c", str(pipeline_dir / "absent.cfg"),
                   "-o", str(pipeline_dir / "sim")])
        assert rc == 2
        assert "config error" in capsys.readouterr().err

    def test_same_seed_identical_files(self, pipeline_dir):
        for out in ("s1", "s2"):
            assert main(["simulate", "-c", str(pipeline_dir / "world.cfg"),
                         "-o", str(pipeline_dir / out)]) == 0
        for name in ("catalog.tsv", "interactions.tsv", "truth.jsonl"):
            a = (pipeline_dir / "s1" / name).read_bytes()
            b = (pipeline_dir / "s2" / name).read_bytes()
            assert a == b


class TestTrainEvalCommands:
    def test_full_pipeline_outputs(self, pipeline_dir):
        run_pipeline(pipeline_dir)
        assert (pipeline_dir / "run" / "checkpoint.bin").exists()
        history = (pipeline_dir / "run" / "history.jsonl").read_text()
        assert "config_hash" in history.splitlines()[0]
        metrics = json.loads((pipeline_dir / "ev" / "metrics.json").read_text())
        assert metrics["protocol"] == "holdout_test"
        assert "hit_rate" in metrics and "config_hash" in metrics
        hist_csv = (pipeline_dir / "ev" / "histogram.csv").read_text()
        assert hist_csv.startswith("# config_hash=")
        assert "bucket_low" in hist_csv

    def test_pipeline_rerun_byte_identical_metrics(self, pipeline_dir, tmp_path):
        run_pipeline(pipeline_dir)
        first = (pipeline_dir / "ev" / "metrics.json").read_bytes()
        run_pipeline(pipeline_dir)
        second = (pipeline_dir / "ev" / "metrics.json").read_bytes()
        assert first == second

    def test_mode_override_applies(self, pipeline_dir):
        assert main(["simulate", "-c", str(pipeline_dir / "world.cfg"),
                     "-o", str(pipeline_dir / "sim")]) == 0
        rc = main(["train", "-c", str(pipeline_dir / "train.cfg"),
                   "-o", str(pipeline_dir / "run"), "--mode",
                   "clrec_inbatch"])
        assert rc == 0
        meta = json.loads((pipeline_dir / "run" / "history.jsonl")
                          .read_text().splitlines()[0])
        assert meta["mode"] == "clrec_inbatch"

    def test_unknown_mode_exits_2(self, pipeline_dir, capsys):
        assert main(["simulate", "-c", str(pipeline_dir / "world.cfg"),
                     "-o", str(pipeline_dir / "sim")]) == 0
        rc = main(["train", "-c", str(pipeline_dir / "train.cfg"),
                   "-o", str(pipeline_dir / "run"), "--mode", "bogus"])
        assert rc == 2

    def test_unbiased_truth_protocol(self, pipeline_dir):
        run_pipeline(pipeline_dir)
        cfg = EVAL_CFG.replace("eval.protocol = holdout_test",
                               "eval.protocol = unbiased_truth")
        (pipeline_dir / "eval2.cfg").write_text(cfg)
        assert main(["eval", "-c", str(pipeline_dir / "eval2.cfg"),
                     "-o", str(pipeline_dir / "ev2")]) == 0
        metrics = json.loads(
            (pipeline_dir / "ev2" / "metrics.json").read_text())
        assert metrics["protocol"] == "unbiased_truth"


class TestVerifyTheoremCommand:
    def test_report_and_exit_codes(self, tmp_path):
        cfg = tmp_path / "t.cfg"
        cfg.write_text("theorem.instances = 2\ntheorem.steps = 60000\n"
                       "theorem.max_contexts = 2\n")
        rc = main(["verify-theorem", "-c", str(cfg),
                   "-o", str(tmp_path / "vt"), "--seed", "1"])
        assert rc == 0
        report = json.loads((tmp_path / "vt" / "report.json").read_text())
        assert report["all_pass"] is True
        assert len(report["instances"]) == 2

    def test_unreachable_tolerance_exits_3(self, tmp_path):
        cfg = tmp_path / "t.cfg"
        cfg.write_text("theorem.instances = 1\ntheorem.steps = 500\n"
                       "theorem.tv_tol = 1e-9\n")
        rc = main(["verify-theorem", "-c", str(cfg),
                   "-o", str(tmp_path / "vt"), "--seed", "1"])
        assert rc == 3
        report = json.loads((tmp_path / "vt" / "report.json").read_text())
        assert report["all_pass"] is False


class TestGradcheckCommand:
    def test_passes_and_writes_report(self, tmp_path):
        cfg = tmp_path / "g.cfg"
        cfg.write_text("gradcheck.coords = 25\n")
        rc = main(["gradcheck", "-c", str(cfg), "-o", str(tmp_path / "gc"),
                   "--seed", "0"])
        assert rc == 0
        report = json.loads((tmp_path / "gc" / "gradcheck.json").read_text())
        assert report["all_pass"] is True
        assert len(report["cases"]) == 20


class TestBenchCommand:
    def test_counter_identity(self, tmp_path):
        cfg = tmp_path / "b.cfg"
        cfg.write_text("bench.batch_size = 8\nbench.queue_capacity = 80\n"
                       "bench.negatives = 80\nbench.num_items = 512\n"
                       "bench.steps = 2\n")
        rc = main(["bench", "-c", str(cfg), "-o", str(tmp_path / "bench"),
                   "--seed", "0"])
        assert rc == 0
        report = json.loads((tmp_path / "bench" / "bench.json").read_text())
        assert report["identity_ok"] is True
        assert report["ratio"] <= report["bound"] + 1e-9
