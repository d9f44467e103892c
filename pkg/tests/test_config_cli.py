import csv
import json
import logging
import sys

import pytest

from graphformers.cli import run_command
from graphformers.config.settings import (
    RunConfig,
    get_settings,
    load_config,
    nest_overrides,
    reload_settings,
    write_resolved_config,
)
from graphformers.errors import ConfigError
from graphformers.observability.tracing import JsonFormatter, configure_logging
from tests.conftest import write_text_corpus

TINY_RUN = {
    "data": {"num_nodes": 60, "num_clusters": 3, "vocab_size": 40, "tokens_per_node": 5, "p_in": 0.3, "p_out": 0.01},
    "model": {
        "num_layers": 2,
        "hidden_size": 8,
        "num_heads": 2,
        "max_tokens": 6,
        "max_neighbours": 3,
        "vocab_size": 40,
    },
    "train": {
        "stage1": {"max_steps": 2, "eval_every": 1},
        "stage2": {"max_steps": 2, "eval_every": 1},
        "batch_size": 4,
        "neighbours": 3,
        "valid_pairs": 8,
        "checkpoint_every": 2,
    },
    "eval": {"n_neg": 5, "num_instances": 10, "neighbours": 3},
    "bench": {
        "neighbour_sizes": [1, 2],
        "batch_size": 2,
        "reps": 1,
        "max_tokens": 4,
        "hidden_size": 8,
        "num_layers": 2,
        "num_heads": 2,
        "min_ticks": 1,
    },
}


@pytest.fixture(autouse=True)
def isolated_env(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    for name in ("GFK_SEED", "GFK_OUTPUT_DIR", "GFK_TRAIN__BATCH_SIZE", "GFK_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)
    yield
    reload_settings(RunConfig())


def write_config(path, data):
    path.write_text(json.dumps(data))
    return path


class TestLoadConfig:
    def test_defaults(self):
        config = load_config()
        assert config.seed == 0 and config.model.num_layers == 3
        assert config.dataset_dir.as_posix() == "runs/default/data"
        assert config.train_seed == 0

    def test_unknown_key_suggests_dotted_path(self, tmp_path):
        path = write_config(tmp_path / "run.json", {"lerning_rate": 1e-3})
        with pytest.raises(ConfigError, match="did you mean 'train.learning_rate'"):
            load_config(path)

    def test_unknown_nested_key(self, tmp_path):
        path = write_config(tmp_path / "run.json", {"train": {"batch_sise": 8}})
        with pytest.raises(ConfigError, match="train.batch_size"):
            load_config(path)

    def test_type_mismatch_names_the_key(self, tmp_path):
        path = write_config(tmp_path / "run.json", {"train": {"batch_size": "abc"}})
        with pytest.raises(ConfigError, match="'train.batch_size'"):
            load_config(path)

    def test_non_object_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "absent.json")

    def test_environment_then_file_then_flags(self, tmp_path, monkeypatch):
        monkeypatch.setenv("GFK_SEED", "7")
        assert load_config().seed == 7
        path = write_config(tmp_path / "run.json", {"seed": 3, "train": {"learning_rate": 1e-3}})
        assert load_config(path).seed == 3
        config = load_config(path, {"train.learning_rate": 5e-4, "seed": None})
        assert config.train.learning_rate == 5e-4
        assert config.seed == 3

    def test_nested_environment_variable(self, monkeypatch):
        monkeypatch.setenv("GFK_TRAIN__BATCH_SIZE", "16")
        assert load_config().train.batch_size == 16

    def test_section_validators_apply(self):
        with pytest.raises(ConfigError, match="train.batch_size"):
            load_config(overrides={"train.batch_size": 1})

    def test_nest_overrides(self):
        assert nest_overrides({"a.b.c": 1, "a.d": 2, "e": None}) == {"a": {"b": {"c": 1}, "d": 2}}

    def test_resolved_config_round_trip(self, tmp_path):
        config = load_config(overrides={"seed": 5, "model.hidden_size": 32})
        path = write_resolved_config(config, tmp_path / "out")
        assert RunConfig(**json.loads(path.read_text())) == config

    def test_settings_singleton(self):
        config = load_config(overrides={"seed": 9})
        assert reload_settings(config) is get_settings()
        assert get_settings().seed == 9


class TestLogging:
    def _record(self, message, exc_info=None):
        return logging.LogRecord("graphformers.cli", logging.ERROR, __file__, 1, message, None, exc_info)

    def test_quotes_and_newlines_stay_valid_json(self):
        message = 'bad value "x"\n\tsecond line \\ end'
        entry = json.loads(JsonFormatter().format(self._record(message)))
        assert entry["message"] == message
        assert entry["logger"] == "graphformers.cli" and entry["level"] == "ERROR"

    def test_exception_is_a_field(self):
        try:
            raise ConfigError('missing "seed"')
        except ConfigError:
            record = self._record("load failed", sys.exc_info())
        line = JsonFormatter().format(record)
        assert "\n" not in line
        assert 'ConfigError: missing "seed"' in json.loads(line)["exception"]

    def test_configure_installs_the_json_formatter(self):
        configure_logging("DEBUG", "json")
        root = logging.getLogger()
        try:
            assert root.level == logging.DEBUG
            assert [type(h.formatter) for h in root.handlers] == [JsonFormatter]
        finally:
            configure_logging()


class TestExitCodes:
    def test_help(self, capsys):
        assert run_command(["--help"]) == 0
        assert "gen-data" in capsys.readouterr().out

    @pytest.mark.parametrize("argv", [[], ["frobnicate"], ["train", "--share-gnn", "maybe"], ["eval", "--n-neg", "x"]])
    def test_usage_errors(self, argv, capsys):
        assert run_command(argv) == 1
        assert "error" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert run_command(["gen-data", "--config", str(tmp_path / "absent.json")]) == 2

    def test_invalid_config(self, tmp_path, capsys):
        path = write_config(tmp_path / "run.json", {"train": {"batch_size": "abc"}})
        assert run_command(["gen-data", "--config", str(path)]) == 1
        assert "train.batch_size" in capsys.readouterr().err

    def test_missing_dataset_is_a_runtime_error(self, tmp_path):
        assert run_command(["train", "--outdir", str(tmp_path / "run")]) == 2
        assert (tmp_path / "run" / "trace.json").exists()


class TestLifecycle:
    def test_gen_train_eval_inspect_bench(self, tmp_path, capsys):
        config = write_config(tmp_path / "run.json", TINY_RUN)
        outdir = tmp_path / "run"
        common = ["--config", str(config), "--outdir", str(outdir), "--seed", "4"]

        assert run_command(["gen-data", *common]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["nodes"] == 60 and summary["test"] > 0
        assert (outdir / "data" / "graph.txt").exists()

        assert run_command(["train", *common, "--mode", "unidirectional", "--lr", "5e-4"]) == 0
        trained = json.loads(capsys.readouterr().out)
        assert trained["parameters"] > 0
        resolved = json.loads((outdir / "resolved_config.json").read_text())
        assert resolved["train"]["learning_rate"] == 5e-4 and resolved["seed"] == 4
        assert (outdir / "checkpoints" / "final" / "manifest.json").exists()
        assert (outdir / "train_log.csv").exists()

        assert run_command(["eval", *common, "--neighbour-sweep", "1,2", "--dump-ranks"]) == 0
        reports = json.loads(capsys.readouterr().out)
        assert [r["label"] for r in reports] == [
            "nested-unidirectional",
            "nested-unidirectional@1",
            "nested-unidirectional@2",
        ]
        report = json.loads((outdir / "report.json").read_text())
        assert len(report["ranks"]) == report["num_instances"] > 0
        assert all(1 <= rank <= 6 for rank in report["ranks"])
        with open(outdir / "reports.csv", newline="") as handle:
            assert len(list(csv.reader(handle))) == 4

        assert run_command(["inspect", *common, "--checkpoint", str(outdir / "checkpoints" / "final")]) == 0
        inspected = json.loads(capsys.readouterr().out)
        assert inspected["parameters"] == trained["parameters"]
        assert inspected["config"]["mode"] == "unidirectional"

        assert run_command(["inspect", *common]) == 0
        assert json.loads(capsys.readouterr().out)["edges"] == summary["edges"]

        assert run_command(["bench", *common, "--aggregator", "nested"]) == 0
        with open(outdir / "bench.csv", newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["mode", "n_neighbours", "batch", "mean_ms", "std_ms", "peak_mib"]
        assert len(rows) == 5

        trace = json.loads((outdir / "trace.json").read_text())
        assert trace["command"] == "bench"
        assert [span["name"] for span in trace["spans"]] == ["bench"]

    def test_text_corpus_trains_through_the_tokenizer(self, tmp_path, capsys):
        corpus = write_text_corpus(tmp_path / "corpus.txt")
        config = write_config(tmp_path / "run.json", {**TINY_RUN, "data": {"valid_fraction": 0.2}})
        common = ["--config", str(config), "--outdir", str(tmp_path / "run"), "--seed", "3"]

        assert run_command(["gen-data", *common, "--corpus", str(corpus)]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["nodes"] == 30 and summary["edges"] == 60
        assert 4 < summary["vocab"] <= 40
        assert (tmp_path / "run" / "data" / "vocab.json").exists()

        assert run_command(["train", *common]) == 0
        assert json.loads(capsys.readouterr().out)["parameters"] > 0

    def test_corpus_vocabulary_larger_than_the_model(self, tmp_path, capsys):
        corpus = write_text_corpus(tmp_path / "corpus.txt")
        common = ["--outdir", str(tmp_path / "run")]
        assert run_command(["gen-data", *common, "--corpus", str(corpus)]) == 0
        small = write_config(tmp_path / "small.json", {**TINY_RUN, "data": {"valid_fraction": 0.2}})
        assert run_command(["train", *common, "--config", str(small)]) == 2
        assert "vocabulary" in capsys.readouterr().err

    def test_eval_without_checkpoint(self, tmp_path, capsys):
        config = write_config(tmp_path / "run.json", TINY_RUN)
        outdir = tmp_path / "run"
        assert run_command(["gen-data", "--config", str(config), "--outdir", str(outdir)]) == 0
        assert run_command(["eval", "--config", str(config), "--outdir", str(outdir)]) == 2
        assert "error" in capsys.readouterr().err

    def test_same_seed_reproduces_artifacts(self, tmp_path, capsys):
        config = write_config(tmp_path / "run.json", TINY_RUN)
        for name in ("a", "b"):
            common = ["--config", str(config), "--outdir", str(tmp_path / name), "--seed", "7"]
            for command in ("gen-data", "train", "eval"):
                assert run_command([command, *common]) == 0
        capsys.readouterr()

        for file in ("data/graph.txt", "data/train.edges", "train_log.csv", "report.json", "reports.csv"):
            assert (tmp_path / "a" / file).read_bytes() == (tmp_path / "b" / file).read_bytes()
        manifests = [json.loads((tmp_path / n / "checkpoints" / "final" / "manifest.json").read_text()) for n in "ab"]
        assert manifests[0]["version"] == manifests[1]["version"]

    def test_single_stage_equals_empty_first_stage(self, tmp_path, capsys):
        config = write_config(tmp_path / "run.json", TINY_RUN)
        empty_stage1 = {**TINY_RUN, "train": {**TINY_RUN["train"], "stage1": {"max_steps": 0, "eval_every": 1}}}
        config_zero = write_config(tmp_path / "zero.json", empty_stage1)
        data = ["--data", str(tmp_path / "data"), "--seed", "5"]
        assert run_command(["gen-data", "--config", str(config), "--outdir", str(tmp_path / "gen"), *data]) == 0

        one = ["--config", str(config), "--outdir", str(tmp_path / "one"), *data]
        zero = ["--config", str(config_zero), "--outdir", str(tmp_path / "zero"), *data]
        assert run_command(["train", *one, "--stages", "one"]) == 0
        assert run_command(["train", *zero]) == 0
        capsys.readouterr()

        manifests = [
            json.loads((tmp_path / n / "checkpoints" / "final" / "manifest.json").read_text()) for n in ("one", "zero")
        ]
        assert manifests[0]["version"] == manifests[1]["version"]
        assert (tmp_path / "one" / "train_log.csv").read_bytes() == (tmp_path / "zero" / "train_log.csv").read_bytes()
        assert not (tmp_path / "one" / "checkpoints" / "stage1-final").exists()
