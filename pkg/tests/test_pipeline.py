import json
import logging
import shutil
from pathlib import Path

import pandas as pd
import pytest
import yaml

import main as cli
from configs import get_runtime_settings
from src.exceptions import ConfigurationError, StageError
from src.logging.logger import ProjectLogger
from src.pipeline import commands
from src.pipeline.commands import CityArtifacts, RunArtifacts, run_command
from src.schemas.run import RunConfig
from src.storage.formats import load_grid_csv, load_score_panel, save_score_panel

CITY = "tiny"

TINY_RUN = {
    "patch_size": 32,
    "cities": [{"city_id": CITY, "synthetic": True}],
    "network": {"spec": {"num_conv_blocks": 1, "conv_filters": 2, "fc_units": 8, "patch_size": 32}},
    "train": {"epochs": 1, "batch_size": 16, "max_train_samples": 200, "max_validation_samples": 100},
    "forest": {"num_trees": 5, "max_depth": 4, "min_leaf": 2},
    "synth": {"extent": 512, "building_density": 0.8, "destruction_share": 0.2, "seed": 3, "event_decoys": 4},
}

STABLE_OUTPUTS = [
    "cities/tiny/grid.csv",
    "cities/tiny/labels.csv",
    "cities/tiny/split.csv",
    "cities/tiny/stage1_scores.csv",
    "cities/tiny/scores.csv",
    "cities/tiny/evaluation.json",
    "cities/tiny/event_coefficients.csv",
    "model/model.json",
    "forest/forest.json",
    "summary.csv",
    "audit.json",
]


def tiny_config(output_dir: Path, **overrides) -> RunConfig:
    return RunConfig(**{**TINY_RUN, "output_dir": str(output_dir), **overrides})


def write_config(path: Path, payload: dict) -> Path:
    path.write_text(yaml.safe_dump(payload))
    return path


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    runtime = get_runtime_settings()
    saved = (runtime.progress, runtime.jobs)
    runtime.progress, runtime.jobs = False, 1
    try:
        config = tiny_config(tmp_path_factory.mktemp("run") / "out")
        response = run_command("pipeline", config)
    finally:
        runtime.progress, runtime.jobs = saved
    return config, response


@pytest.fixture
def stage_log(monkeypatch):
    """(stage, city, status) of every stage the commands run"""
    calls = []
    original = commands.after_stage

    def record(stage, city_id, response):
        calls.append((stage, city_id, response["status"]))
        original(stage, city_id, response)

    monkeypatch.setattr(commands, "after_stage", record)
    return calls


def copied_run(finished_run, tmp_path) -> RunConfig:
    config, _ = finished_run
    shutil.copytree(config.output_path, tmp_path / "out")
    return tiny_config(tmp_path / "out")


def test_pipeline_writes_every_artifact(finished_run):
    config, response = finished_run
    assert response["status"] == "success"
    for name in STABLE_OUTPUTS:
        assert (config.output_path / name).exists(), name
    files = CityArtifacts(config, CITY)
    assert files.pr_plot.exists() and files.event_plot.exists()
    assert files.truth_check.exists()
    assert not (config.output_path / get_runtime_settings().lock_filename).exists()


def test_split_audit_passes(finished_run):
    config, _ = finished_run
    audit = json.loads(RunArtifacts(config).audit.read_text())
    assert audit["passed"] and audit["violation_count"] == 0
    assert audit["checked_rows"]["cnn_samples"] > 0
    assert audit["checked_rows"]["forest_rows"] > 0


def test_summary_has_city_and_total_rows(finished_run):
    config, _ = finished_run
    summary = pd.read_csv(RunArtifacts(config).summary)
    assert list(summary["city"])[0] == CITY
    assert len(summary) == 2
    assert summary.loc[0, "dates"] == 21


def test_evaluation_reports_both_stages(finished_run):
    config, _ = finished_run
    payload = json.loads(CityArtifacts(config, CITY).evaluation.read_text())
    assert [row["stage"] for row in payload["stages"]] == ["stage1", "stage2"]
    assert payload["no_analysis"]["patches"] > 0


def test_resume_skips_every_stage(finished_run, tmp_path, stage_log):
    config = copied_run(finished_run, tmp_path)
    response = run_command("pipeline", config, resume=True)
    assert response["status"] == "skipped"
    assert stage_log and all(status == "skipped" for _, _, status in stage_log)


def test_resume_reruns_only_the_missing_stage(finished_run, tmp_path, stage_log):
    config = copied_run(finished_run, tmp_path)
    stage1 = CityArtifacts(config, CITY).stage1
    original = stage1.read_bytes()
    stage1.unlink()

    run_command("pipeline", config, resume=True)
    ran = [(stage, city) for stage, city, status in stage_log if status != "skipped"]
    assert ran == [("scan", CITY)]
    assert stage1.read_bytes() == original


def test_changed_section_invalidates_downstream(finished_run, tmp_path, stage_log):
    config = copied_run(finished_run, tmp_path)
    changed = config.model_copy(update={"target_recall": 0.6})
    run_command("pipeline", changed, resume=True)
    ran = {stage for stage, _, status in stage_log if status == "success"}
    assert "smooth" in ran
    assert not ran & {"synth", "tile", "label", "split", "train", "scan"}


def test_repeated_run_is_byte_identical(finished_run, tmp_path):
    first, _ = finished_run
    second = tiny_config(tmp_path / "again")
    run_command("pipeline", second)
    for name in STABLE_OUTPUTS:
        assert (second.output_path / name).read_bytes() == (first.output_path / name).read_bytes(), name


def test_rescan_retires_stale_smoothed_scores(finished_run, tmp_path, stage_log):
    config = copied_run(finished_run, tmp_path)
    files = CityArtifacts(config, CITY)
    grid = load_grid_csv(files.grid)
    panel = load_score_panel(files.stage1, grid)
    save_score_panel(panel.model_copy(update={"stage1": panel.stage1 * 0.5}), files.stage1)

    run_command("evaluate", config, resume=True)
    assert stage_log == [("evaluate", CITY, "success")]
    payload = json.loads(files.evaluation.read_text())
    assert [row["stage"] for row in payload["stages"]] == ["stage1"]

    run_command("smooth", config, resume=True)
    run_command("evaluate", config, resume=True)
    payload = json.loads(files.evaluation.read_text())
    assert [row["stage"] for row in payload["stages"]] == ["stage1", "stage2"]


def test_two_cities_report_per_city(tmp_path):
    base = RunConfig.from_yaml(str(Path(__file__).parent.parent / "config" / "two_cities.yaml"))
    config = tiny_config(tmp_path / "two", cities=[city.model_dump() for city in base.cities])
    assert run_command("pipeline", config)["status"] == "success"

    for city_id in ("north", "south"):
        payload = json.loads(CityArtifacts(config, city_id).evaluation.read_text())
        assert payload["city"] == city_id
        assert [row["stage"] for row in payload["stages"]] == ["stage1", "stage2"]
    summary = pd.read_csv(RunArtifacts(config).summary)
    assert list(summary["city"]) == ["north", "south", "total/average"]
    assert summary.loc[2, "total_samples"] == summary.loc[0, "total_samples"] + summary.loc[1, "total_samples"]
    rows = pd.read_csv(RunArtifacts(config).forest_rows)
    assert set(rows["city_id"]) == {"north", "south"}


def test_report_needs_earlier_stages(tmp_path):
    with pytest.raises(StageError) as raised:
        run_command("report", tiny_config(tmp_path / "empty"))
    assert raised.value.stage == "report"
    assert "tile" in str(raised.value.cause)


def test_cli_exit_codes(tmp_path):
    bad = write_config(tmp_path / "bad.yaml", {**TINY_RUN, "output_dir": str(tmp_path / "a"), "colour": "red"})
    assert cli.main(["tile", "--config", str(bad)]) == cli.EXIT_BAD_CONFIG
    assert cli.main(["tile", "--config", str(tmp_path / "absent.yaml")]) == cli.EXIT_BAD_CONFIG

    # synthetic inputs have not been rendered yet
    good = write_config(tmp_path / "good.yaml", {**TINY_RUN, "output_dir": str(tmp_path / "b")})
    assert cli.main(["tile", "--config", str(good)]) == cli.EXIT_BAD_CONFIG
    assert cli.main(["tile", "--config", str(good), "--jobs", "0"]) == cli.EXIT_BAD_CONFIG

    (tmp_path / "b").mkdir(exist_ok=True)
    (tmp_path / "b" / get_runtime_settings().lock_filename).write_text("")
    assert cli.main(["split", "--config", str(good)]) == cli.EXIT_LOCKED


def test_cli_reports_stage_failure(tmp_path):
    good = write_config(tmp_path / "good.yaml", {**TINY_RUN, "output_dir": str(tmp_path / "c")})
    assert cli.main(["report", "--config", str(good)]) == cli.EXIT_STAGE_FAILED


def test_seed_override_derives_distinct_seeds():
    config = tiny_config(Path("unused"))
    first, again = config.with_seed_override(42), config.with_seed_override(42)
    seeds = [first.split.seed, first.train.seed, first.forest.bootstrap_seed, first.synth.seed]
    assert len(set(seeds)) == 4
    assert seeds == [again.split.seed, again.train.seed, again.forest.bootstrap_seed, again.synth.seed]
    assert config.with_seed_override(43).split.seed != first.split.seed
    assert first.config_hash() != config.config_hash()
    with pytest.raises(ConfigurationError):
        config.with_seed_override(-1)


@pytest.mark.slow
def test_acceptance_run(tmp_path):
    config = RunConfig.from_yaml(str(Path(__file__).parent.parent / "config" / "acceptance.yaml"))
    config = config.model_copy(update={"output_dir": str(tmp_path / "acceptance")})
    assert run_command("pipeline", config)["status"] == "success"

    stages = {row["stage"]: row for row in
              json.loads(CityArtifacts(config, "synth").evaluation.read_text())["stages"]}
    assert stages["stage1"]["auc"] >= 0.95
    assert stages["stage2"]["ap_unbalanced"] >= stages["stage1"]["ap_unbalanced"] + 0.05

    calibration = json.loads(RunArtifacts(config).forest.read_text())["calibration"]
    assert 0.50 <= calibration["achieved_train_recall"] <= 0.52
    assert json.loads(RunArtifacts(config).audit.read_text())["passed"]


def test_cli_log_level_sets_console_only(tmp_path):
    project_logger = ProjectLogger()
    saved = project_logger.console.level
    good = write_config(tmp_path / "good.yaml", {**TINY_RUN, "output_dir": str(tmp_path / "d")})
    try:
        assert cli.main(["tile", "--config", str(good), "--log-level", "warning"]) == cli.EXIT_BAD_CONFIG
        assert project_logger.console.level == logging.WARNING
        assert project_logger.logger.level == logging.DEBUG
    finally:
        project_logger.console.setLevel(saved)
