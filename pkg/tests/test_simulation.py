from pathlib import Path

import numpy as np
import pandas as pd
from pytest import approx, fixture, raises


@fixture
def settings(tmp_path):
    """Small double-integrator experiment with an oracle model set."""
    return dict(
        environment=dict(name="double_integrator", noise_std=0.005),
        model=dict(name="oracle", beta=2.0),
        cost=dict(name="indicator"),
        backup=dict(name="robust_value_iteration", per_dimension=5, tolerance=1e-6),
        objective=dict(gamma=0.9),
        grid=dict(axes=[[-1.5, 1.5, 9], [-2.0, 2.0, 9]]),
        quadrature=dict(order=3),
        filter=dict(cem_particles=100, cem_iterations=2, cem_elite_fraction=0.1),
        planner=dict(horizon=3, population=16, elite_count=4, iterations=2),
        episodes=dict(warmup=1, count=2, horizon=10),
        certificate=dict(horizon=10, mc_rollouts=0),
        seed=3,
        output=str(tmp_path / "run"),
    )


def test_default_input():
    from confsafe.simulation import construct_input

    inputs = construct_input()
    assert inputs.environment.name == "pitch"
    assert inputs.model.name == "oracle"
    assert inputs.cost.name == "indicator"
    assert inputs.backup.name == "robust_value_iteration"
    assert inputs.seed == 0
    assert inputs.objective.gamma == 0.99
    assert inputs.output == str(Path.cwd() / "confsafe-run")


def test_input_from_yaml_with_overrides(tmp_path):
    from io import StringIO

    from omegaconf import OmegaConf

    from confsafe.simulation import construct_input

    yaml = StringIO(
        """
        environment:
            name: double_integrator
        episodes:
            count: 4
        output: ${root}/here
    """
    )
    overrides = OmegaConf.from_dotlist(["seed=7", "episodes.horizon=20"])
    inputs = construct_input(yaml, root=tmp_path, overrides=overrides)
    assert inputs.environment.name == "double_integrator"
    assert inputs.episodes.count == 4
    assert inputs.episodes.horizon == 20
    assert inputs.episodes.warmup == 10
    assert inputs.seed == 7
    assert inputs.output == str(tmp_path / "here")


def test_input_rejects_unknown_keys():
    from omegaconf.errors import ConfigKeyError

    from confsafe.simulation import construct_input

    with raises(ConfigKeyError):
        construct_input(dict(episodes=dict(cout=3)))


def test_check_input(settings):
    from omegaconf import OmegaConf

    from confsafe.simulation import check_input, construct_input

    check_input(construct_input(settings))
    for override, message in [
        ("episodes.count=0", "episodes.count"),
        ("episodes.warmup=-1", "episodes.warmup"),
        ("planner.elite_count=20", "elite_count"),
        ("certificate.mc_rollouts=10", "mc_rollouts"),
        ("quadrature.order=0", "quadrature.order"),
    ]:
        inputs = construct_input(settings, overrides=OmegaConf.from_dotlist([override]))
        with raises(ValueError, match=message):
            check_input(inputs)


def test_resolved_settings_drop_directories(settings):
    from confsafe.simulation import construct_input, resolved_settings

    resolved = resolved_settings(construct_input(settings))
    assert "cwd" not in resolved and "root" not in resolved
    assert resolved["output"] == settings["output"]
    assert resolved["environment"]["name"] == "double_integrator"


def test_pipeline_setup(settings):
    from confsafe.envs import DoubleIntegratorEnv
    from confsafe.simulation import Pipeline

    pipeline = Pipeline.load(settings)
    assert isinstance(pipeline.environment, DoubleIntegratorEnv)
    assert pipeline.grid.shape == (9, 9)
    assert pipeline.objective.gamma == 0.9
    assert pipeline.filter_config.xi == approx(pipeline.objective.xi)
    first = pipeline.random("warmup", 1).generator().random(3)
    assert pipeline.random("warmup", 1).generator().random(3) == approx(first)
    assert not np.allclose(pipeline.random("rollouts", 1).generator().random(3), first)


def test_pipeline_rejects_grid_dimension(settings):
    from confsafe.simulation import Pipeline

    settings["grid"] = dict(axes=[[-1.0, 1.0, 5]])
    with raises(ValueError, match="axes"):
        Pipeline.load(settings)


def test_pipeline_runs_every_stage(settings):
    from confsafe.io import read_document
    from confsafe.schema import METRICS, follows_schema
    from confsafe.simulation import STAGES, Pipeline

    pipeline = Pipeline.load(settings)
    metrics = pipeline()
    output = Path(settings["output"])
    for name in (
        "config.yaml",
        "buffer.csv",
        "model.yaml",
        "policy.yaml",
        "value.yaml",
        "value.csv",
        "certificate.yaml",
        "metrics.csv",
        "steps.csv",
        "timings.csv",
    ):
        assert (output / name).exists(), name

    assert len(metrics) == 2
    assert follows_schema(metrics, METRICS)
    assert metrics["filtered"].all()
    assert metrics["steps"].tolist() == [10, 10]
    steps = pd.read_csv(output / "steps.csv")
    assert {"episode", "k", "x_0", "x_1", "u_nominal_0", "u_0"} <= set(steps.columns)
    assert set(steps["branch"]) <= {"nominal", "filtered", "fallback", "backup"}
    assert len(steps) == 20
    assert len(pipeline.buffer) == 30
    timings = pd.read_csv(output / "timings.csv")
    assert timings.loc[timings["episode"].isna(), "stage"].tolist() == list(STAGES)
    per_episode = timings.dropna(subset=["episode"])
    assert per_episode["episode"].tolist() == [0, 1]
    assert set(per_episode["stage"]) == {"rollouts"}
    assert (per_episode["seconds"] >= 0).all()
    assert "seconds" not in metrics.columns
    certificate = read_document(output / "certificate.yaml", "certificate")
    assert certificate["config"]["seed"] == 3


def test_pipeline_is_reproducible(settings, tmp_path):
    from confsafe.simulation import Pipeline

    first = Pipeline.load(settings)()
    settings["output"] = str(tmp_path / "again")
    second = Pipeline.load(settings)()
    pd.testing.assert_frame_equal(first, second)


def test_stages_read_earlier_artifacts(settings):
    from confsafe.simulation import Pipeline

    pipeline = Pipeline.load(settings)
    for stage in ("warmup", "fit_model", "learn_backup", "solve_value"):
        pipeline.run_stage(stage)

    other = Pipeline.load(settings)
    other.run_stage("solve_value")
    assert other.value.values == approx(pipeline.value.values)
    assert len(other.artifact("buffer")) == len(pipeline.buffer)
    other.run_stage("rollouts")
    assert len(other.metrics) == 2


def test_stage_failures_are_tagged(settings):
    from confsafe.simulation import Pipeline, PipelineError

    pipeline = Pipeline.load(settings)
    with raises(PipelineError) as error:
        pipeline.run_stage("learn_backup")
    assert error.value.stage == "learn_backup"
    assert isinstance(error.value.cause, FileNotFoundError)
    assert pipeline.timings[-1]["stage"] == "learn_backup"
    with raises(ValueError):
        pipeline.run_stage("deploy")


def test_unfiltered_pipeline(settings):
    from confsafe.simulation import Pipeline

    settings["filter"]["enabled"] = False
    settings["certificate"]["enabled"] = False
    pipeline = Pipeline.load(settings)
    metrics = pipeline()
    assert not metrics["filtered"].any()
    assert metrics["interventions"].sum() == 0
    assert pipeline.certificate is None
    assert not (Path(settings["output"]) / "certificate.yaml").exists()


def test_ensemble_pipeline(settings):
    from confsafe.models import EnsembleModel
    from confsafe.simulation import Pipeline

    settings["model"] = dict(
        name="ensemble", members=2, hidden=[8], epochs=20, refit_epochs=5
    )
    settings["episodes"] = dict(warmup=2, count=1, horizon=10)
    pipeline = Pipeline.load(settings)
    for stage in ("warmup", "fit_model"):
        pipeline.run_stage(stage)
    assert isinstance(pipeline.model, EnsembleModel)
    assert pipeline.model.training.fit_beta
    assert pipeline.model.beta != 2.0
    assert (Path(settings["output"]) / "training.csv").exists()


def test_imports_register_new_entries(settings, tmp_path):
    from confsafe.simulation import Pipeline

    module = tmp_path / "extra_costs.py"
    module.write_text(
        "from confsafe.objectives import indicator_cost, register_cost\n"
        "\n"
        "\n"
        "@register_cost\n"
        "def strict(environment):\n"
        "    return indicator_cost(environment.safe_indicator)\n"
    )
    settings["cost"] = dict(name="strict")
    settings["imports"] = [str(module)]
    pipeline = Pipeline.load(settings)
    assert pipeline.cost([2.0, 0.0]) == 1.0


def test_compare(settings, tmp_path):
    from confsafe.schema import SUMMARY, follows_schema
    from confsafe.simulation import Pipeline, compare

    Pipeline.load(settings)()
    settings["filter"]["enabled"] = False
    settings["output"] = str(tmp_path / "unfiltered")
    Pipeline.load(settings)()

    summary = compare(
        [tmp_path / "run", tmp_path / "unfiltered"], tmp_path / "summary.csv"
    )
    assert follows_schema(summary, SUMMARY)
    assert summary["episodes"].tolist() == [2, 2]
    assert (tmp_path / "summary.csv").exists()
    with raises(ValueError):
        compare([])
    with raises(FileNotFoundError):
        compare([tmp_path / "missing"])


@fixture(scope="module")
def pitch_run(tmp_path_factory):
    """Packaged pitch example over two episodes, with and without the filter."""
    from dataclasses import replace

    from omegaconf import OmegaConf

    from confsafe.io import EXEMPLARS
    from confsafe.simulation import Pipeline

    output = tmp_path_factory.mktemp("pitch") / "run"
    overrides = OmegaConf.from_dotlist(
        [f"output={output}", "episodes.warmup=1", "episodes.count=2"]
    )
    pipeline = Pipeline.load(EXEMPLARS["examples"] / "pitch.yaml", overrides=overrides)
    filtered = pipeline()
    steps = pd.read_csv(output / "steps.csv")
    pipeline.filter_config = replace(pipeline.filter_config, enabled=False)
    pipeline.run_stage("rollouts")
    return pipeline, filtered, steps, pipeline.metrics


def test_pitch_example_starts_inside_the_filter_threshold(pitch_run):
    pipeline, _, steps, _ = pitch_run
    x0 = pipeline.environment.initial_state()
    assert pipeline.value(x0) <= pipeline.filter_config.xi
    assert pipeline.value.min < pipeline.objective.xi_bar
    assert {"nominal", "filtered"} & set(steps["branch"])


def test_pitch_filter_prevents_violations(pitch_run):
    _, filtered, _, unfiltered = pitch_run
    assert filtered["filtered"].all()
    assert filtered["violations"].sum() == 0
    assert not unfiltered["filtered"].any()
    assert (unfiltered["violations"] > 0).any()


def test_pitch_certificate_reports_the_drift_check(pitch_run):
    from confsafe.io import read_document

    pipeline, _, _, _ = pitch_run
    document = read_document(pipeline.path("certificate.yaml"), "certificate")
    # with an indicator cost, the value decreases in expectation only where it is 0
    assert not document["certified"]
    assert any(u.startswith("Drift condition fails") for u in document["warnings"])
