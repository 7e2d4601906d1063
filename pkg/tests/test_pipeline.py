import io
import os

import pandas as pd
import pytest
import yaml

import main as entry
from config.config_manager import ConfigManager
from core.errors import ArgumentError, DependencyError
from core.model import TransformerModel
from core.pipeline import MODEL_FILE, PIPELINE_ORDER, SUMMARY_FILE, Pipeline
from core.stage_router import SUBCOMMANDS, StageRouter
from countdown.corpus import CORPUS_FILE, INDEX_FILE, load_corpus
from countdown.instances import generation_prompt
from interfaces.cli import CommandLineInterface, build_parser


def _read(path):
    with open(path, "rb") as f:
        return f.read()


def _summary(pipeline, stage):
    with open(pipeline.path(stage, SUMMARY_FILE), "r", encoding="utf-8") as f:
        return yaml.safe_load(f)


def _cli(config):
    out, err = io.StringIO(), io.StringIO()
    return CommandLineInterface(StageRouter(Pipeline(config)), out, err), out, err


# Router and command line

def test_every_subcommand_is_routed(run_config):
    router = StageRouter(Pipeline(run_config))
    assert sorted(info["name"] for info in router.stage_registry.values()) == sorted(SUBCOMMANDS)
    assert len(router.help()) == len(SUBCOMMANDS)


def test_unknown_route_is_a_config_error(run_config):
    response = StageRouter(Pipeline(run_config)).route("bogus")
    assert not response["success"]
    assert response["exit_code"] == 2 and response["category"] == "config"


def test_unexpected_exceptions_are_internal_errors(run_config):
    router = StageRouter(Pipeline(run_config))

    def broken():
        raise ValueError("boom")

    router.register_stage("broken", broken)
    response = router.route("broken")
    assert response["category"] == "internal" and response["exit_code"] == 1
    assert "boom" in response["error"]


def test_unknown_stage_name(run_config):
    with pytest.raises(ArgumentError):
        Pipeline(run_config).stage("nope")


@pytest.mark.parametrize("stage", ["train", "capture", "probe", "glu-select", "heads", "report"])
def test_missing_inputs_exit_with_dependency_code(run_config, stage):
    cli, out, err = _cli(run_config)
    assert cli.run(stage) == 3
    assert err.getvalue().startswith("Error [dependency]: Missing artifact")
    assert out.getvalue() == ""


def test_parser_rejects_unknown_subcommand():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["bogus"])
    args = build_parser().parse_args(["--seed", "3", "--force", "gen-data"])
    assert args.seed == 3 and args.force and args.command == "gen-data"


# Stages

def test_gen_data_writes_corpus_and_summary(run_config, tokenizer):
    cli, out, _ = _cli(run_config)
    assert cli.run("gen-data") == 0
    assert out.getvalue().startswith("gen-data: 24 transcripts (train 20 / val 2 / test 2)")

    pipeline = Pipeline(run_config)
    summary = _summary(pipeline, "gen-data")
    assert summary["stage"] == "gen-data"
    assert summary["digest"] == run_config.digest()
    corpus = load_corpus(pipeline.path("gen-data"), tokenizer)
    assert len(corpus) == 24


def test_gen_data_rerun_is_byte_identical(run_config):
    pipeline = Pipeline(run_config)
    pipeline.gen_data()
    first = [_read(pipeline.path("gen-data", name)) for name in (CORPUS_FILE, INDEX_FILE)]
    pipeline.gen_data()
    assert [_read(pipeline.path("gen-data", name)) for name in (CORPUS_FILE, INDEX_FILE)] == first


def test_gen_data_follows_the_seed(run_config, tmp_path):
    a = Pipeline(run_config)
    a.gen_data()
    other = ConfigManager(use_env=False)
    other.merge(run_config.get_all())
    other.merge({"SEED": 1, "OUT_DIR": str(tmp_path / "other")})
    b = Pipeline(other)
    b.gen_data()
    assert _read(a.path("gen-data", CORPUS_FILE)) != _read(b.path("gen-data", CORPUS_FILE))


def test_train_rejects_mismatched_vocabulary(run_config):
    Pipeline(run_config).gen_data()
    run_config.merge({"model": {"vocab_size": 10}})
    response = StageRouter(Pipeline(run_config)).route("train")
    assert response["exit_code"] == 2 and response["category"] == "argument"


def test_train_writes_model_and_log(run_config):
    pipeline = Pipeline(run_config)
    pipeline.gen_data()
    response = pipeline.train()
    assert response["success"]
    assert os.path.exists(pipeline.path("train", MODEL_FILE))
    log = pd.read_csv(pipeline.path("train", "training_log.csv"))
    assert list(log["step"]) == [2, 4]
    assert response["details"]["steps"] == 4


def test_run_all_stops_at_first_failed_stage(run_config):
    pipeline = Pipeline(run_config)
    later = []
    pipeline.train = lambda: {"error": "bad corpus", "category": "data", "exit_code": 4, "success": False}
    pipeline.capture = lambda: later.append("capture") or {"summary": "capture", "success": True}
    response = pipeline.run_all()
    assert not response["success"] and response["exit_code"] == 4
    assert len(response["lines"]) == 1 and response["lines"][0].startswith("gen-data:")
    assert later == []


def test_report_refuses_artifacts_from_another_config(run_config):
    Pipeline(run_config).gen_data()
    run_config.merge({"data": {"count": 25}})
    with pytest.raises(DependencyError):
        Pipeline(run_config).report()
    forced = Pipeline(run_config, force=True).report()
    assert forced["details"]["stale"] == ["gen-data"]
    run_config.merge({"report": {"force": True}})
    assert Pipeline(run_config).report()["success"]


def test_report_collects_stage_summaries(run_config):
    pipeline = Pipeline(run_config)
    pipeline.gen_data()
    response = pipeline.report()
    assert response["details"]["stages"] == ["gen-data"]
    with open(pipeline.path("report", "report.yaml"), "r", encoding="utf-8") as f:
        report = yaml.safe_load(f)
    assert report["digest"] == run_config.digest()
    assert report["rates"] == []


# Entry point

def test_main_runs_one_subcommand(run_config, tmp_path, capsys):
    path = str(tmp_path / "run.yaml")
    run_config.save(path)
    assert entry.main(["--config", path, "--out", str(tmp_path / "cli"), "gen-data"]) == 0
    assert "gen-data: 24 transcripts" in capsys.readouterr().out
    assert os.path.exists(tmp_path / "cli" / "data" / CORPUS_FILE)
    assert os.path.lexists(tmp_path / "logs" / "latest.log")


def test_main_reports_config_errors(tmp_path, capsys):
    assert entry.main(["--config", str(tmp_path / "missing.yaml"), "gen-data"]) == 2
    assert capsys.readouterr().err.startswith("Error [config]:")


def test_main_rejects_bad_log_level(run_config, tmp_path):
    run_config.set("LOG_LEVEL", "LOUD")
    path = str(tmp_path / "loud.yaml")
    run_config.save(path)
    assert entry.main(["--config", path, "gen-data"]) == 2


def test_main_exits_on_unknown_subcommand():
    with pytest.raises(SystemExit):
        entry.main(["bogus"])


# End to end

@pytest.fixture
def replaying(monkeypatch):
    """
    Model whose unmodified generations replay the corpus transcript of a known prompt.
    Planned and steered generations still run the real decoder.
    """
    real = TransformerModel.generate
    table = {}

    def generate(self, prompt, max_new, opts=None, stop_token=None):
        if opts is None or (opts.plan is None and opts.steer is None):
            hit = table.get(tuple(int(t) for t in prompt))
            if hit is not None:
                return list(hit)
        return real(self, prompt, max_new, opts, stop_token=stop_token)

    monkeypatch.setattr(TransformerModel, "generate", generate)
    return table


def _remember_corpus(table, pipeline, tokenizer):
    for record in load_corpus(pipeline.path("gen-data"), tokenizer):
        tokens = record.transcript.tokens
        for text in (record.prompt, generation_prompt(record.instance)):
            table[tuple(tokenizer.encode(text))] = tokens
        table[tuple(tokens[: record.transcript.prompt_len])] = tokens


@pytest.fixture
def e2e_config(run_config):
    run_config.merge({
        "capture": {"max_new": 200},
        "probe": {"max_steps": 100, "eval_every": 10, "val_size": 32, "patience": 3},
        "glu": {"k": 4, "neighbors": 3},
        "heads": {"n_sweep": [2, 4]},
        "search": {"samples": 2, "budget": 4},
        "intervene": {"samples": 2, "max_new": 24, "baseline_runs": 2},
        "steer": {"samples": 2, "max_new": 8},
    })
    return run_config


def _run_stages(config, table, tokenizer, stages):
    pipeline = Pipeline(config)
    responses = {}
    for stage in stages:
        responses[stage] = StageRouter(pipeline).route(stage)
        assert responses[stage].get("success"), responses[stage]
        if stage == "gen-data":
            _remember_corpus(table, pipeline, tokenizer)
    return pipeline, responses


@pytest.mark.slow
def test_full_pipeline(e2e_config, replaying, tokenizer):
    stages = list(PIPELINE_ORDER[:-1]) + ["lens", "steer", "transfer", "report"]
    pipeline, responses = _run_stages(e2e_config, replaying, tokenizer, stages)

    for stage in stages:
        assert _summary(pipeline, stage)["digest"] == e2e_config.digest()
    capture = responses["capture"]["details"]
    assert capture["samples"] == 2 and capture["validated"] == 2

    rates = pd.read_csv(pipeline.path("intervene", "interventions.csv"))
    totals = rates[["success", "partial", "failure", "out_of_range"]].sum(axis=1)
    assert ((totals - 1.0).abs() < 1e-6).all()
    assert len(responses["report"]["details"]["stages"]) == len(stages) - 1

    transfer = responses["transfer"]["details"]
    assert transfer["map_vs_rotation_max_error"] < 1e-3
    assert transfer["transferred_accuracy"] == pytest.approx(transfer["native_accuracy"])


@pytest.mark.slow
def test_pipeline_is_deterministic_across_threads(e2e_config, replaying, tokenizer, tmp_path):
    stages = ["gen-data", "train", "capture", "probe", "glu-select"]
    first, _ = _run_stages(e2e_config, replaying, tokenizer, stages)
    e2e_config.merge({"OUT_DIR": str(tmp_path / "again"), "THREADS": 3})
    second, _ = _run_stages(e2e_config, replaying, tokenizer, stages)
    for stage, name in [("gen-data", CORPUS_FILE), ("train", MODEL_FILE), ("probe", "accuracy.csv"),
                        ("glu-select", "selection.yaml")]:
        assert _read(first.path(stage, name)) == _read(second.path(stage, name)), name
