from contextlib import contextmanager
from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import (
    IO,
    Any,
    Dict,
    List,
    Mapping,
    Optional,
    Sequence,
    Text,
    Type,
    TypeVar,
    Union,
)

import numpy as np
import pandas as pd
from omegaconf import MISSING
from omegaconf.dictconfig import DictConfig
from omegaconf.listconfig import ListConfig

from confsafe.core import RandomSource

__doc__ = Path(__file__).with_suffix(".rst").read_text()

logger = getLogger(__name__)

INPUT_DEFAULTS: Mapping[Text, Any] = dict(
    environment=dict(name="pitch"),
    model=dict(name="oracle"),
    cost=dict(name="indicator"),
    backup=dict(name="robust_value_iteration"),
    imports=[],
)
"""Default input."""

STAGES = ("warmup", "fit_model", "learn_backup", "solve_value", "certify", "rollouts")
"""Pipeline stages, in order."""

TIMING_COLUMNS = ("stage", "episode", "seconds")
"""Columns of ``timings.csv``: one row per stage, and one per roll-out episode."""

PipelineVar = TypeVar("PipelineVar", bound="Pipeline")


@dataclass
class ObjectiveSection:
    gamma: float = 0.99
    xi: Optional[float] = None
    """Enforced threshold. Defaults to halfway between the cost floor and ``xi_bar``."""
    c_min_bound: Optional[float] = None


@dataclass
class GridSection:
    axes: Optional[List[Any]] = None
    """``[low, high, count]`` per state dimension. Defaults to the environment's."""
    conservative: bool = True
    cap: int = 1_000_000


@dataclass
class QuadratureSection:
    order: int = 5
    samples: int = 64


@dataclass
class FilterSection:
    xi: Optional[float] = None
    enabled: bool = True
    cem_particles: int = 1000
    cem_iterations: int = 5
    cem_elite_fraction: float = 0.1
    inner_eta_mode: Text = "breakpoints"


@dataclass
class PlannerSection:
    horizon: int = 20
    population: int = 64
    elite_count: int = 8
    iterations: int = 4


@dataclass
class EpisodeSection:
    warmup: int = 10
    """Episodes collected with the uniform policy before fitting the model."""
    count: int = 30
    horizon: int = 300
    capacity: int = 100000
    """Size of the replay buffer."""


@dataclass
class CertificateSection:
    enabled: bool = True
    horizon: int = 100
    varthetas: List[float] = field(default_factory=lambda: [0.5, 0.2, 0.1, 0.05, 0.02])
    lambda_fractions: List[float] = field(default_factory=lambda: [1.0, 0.5, 0.2, 0.1])
    delta_f: float = 0.0
    variant: Text = "derived"
    alpha_offset: Text = "minus"
    mc_rollouts: int = 1000
    """Monte-Carlo roll-outs cross-checking the bound. Zero disables the check."""


@dataclass
class ExperimentConfig:
    """Configuration of an experiment for reading with OmegaConf."""

    environment: Dict = field(default_factory=lambda: DictConfig(MISSING))
    model: Dict = field(default_factory=lambda: DictConfig(MISSING))
    cost: Dict = field(default_factory=lambda: DictConfig(MISSING))
    backup: Dict = field(default_factory=lambda: DictConfig(MISSING))
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    grid: GridSection = field(default_factory=GridSection)
    quadrature: QuadratureSection = field(default_factory=QuadratureSection)
    filter: FilterSection = field(default_factory=FilterSection)
    planner: PlannerSection = field(default_factory=PlannerSection)
    episodes: EpisodeSection = field(default_factory=EpisodeSection)
    certificate: CertificateSection = field(default_factory=CertificateSection)
    seed: int = 0
    output: Text = "${cwd}/confsafe-run"
    imports: List = field(default_factory=lambda: ListConfig(MISSING))
    root: Text = field(default_factory=lambda: str(Path.cwd()))
    cwd: Text = field(default_factory=lambda: str(Path.cwd()))


class PipelineError(RuntimeError):
    """A pipeline stage failed."""

    def __init__(self, stage: Text, cause: BaseException):
        super().__init__(f"Stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


def load_initial_imports(imports: List[Union[Text, Path]]):
    """Load user-declared module to register new functions."""
    from importlib import util as implib

    for path in imports:
        path = Path(path)
        spec = implib.spec_from_file_location(path.stem, path)
        mod = implib.module_from_spec(spec)
        spec.loader.exec_module(mod)  # type: ignore


def construct_input(
    settings: Optional[Union[Text, Path, IO, Mapping[Text, Any]]] = None,
    root: Optional[Union[Text, Path]] = None,
    overrides: Optional[DictConfig] = None,
) -> DictConfig:
    """Construct and partially validate an input.

    Args:
        settings (Union[Text, pathlib.Path, dict]): path to a yaml file, or an io
            buffer with yaml content, or a dictionary with the settings already
            prepared.
        root: root custom interpolation when loading omegaconf files. Defaults to
            the directory where the file is located, if the input is a file, or to
            the current working directory.
        overrides(Optional[Mapping]): additional dictionary with which to override the
            underlying inputs.

    Returns:
        Mapping: a fully merged omegaconf input.
    """
    from io import StringIO

    from omegaconf import OmegaConf

    if settings is None:
        settings = dict()
    elif isinstance(settings, (Text, Path)) and root is None:
        root = Path(settings).parent.absolute()
    elif hasattr(settings, "name") and root is None:
        root = Path(getattr(settings, "name")).parent.absolute()
    elif root is None:
        root = Path().absolute()

    if isinstance(settings, (Text, Path, StringIO, IO)) or hasattr(settings, "read"):
        inputs = OmegaConf.load(settings)
    else:
        inputs = OmegaConf.create(settings)
    inputs = OmegaConf.merge(dict(root=str(root), cwd=str(Path().absolute())), inputs)
    if overrides:
        inputs = OmegaConf.merge(inputs, overrides)
    inputs = OmegaConf.merge(OmegaConf.structured(ExperimentConfig), inputs)
    for subsection, defaults in INPUT_DEFAULTS.items():
        if OmegaConf.is_missing(inputs, subsection):
            setattr(inputs, subsection, OmegaConf.create(defaults))

    return inputs


def check_input(inputs: DictConfig):
    """Checks counts and sizes which the schema cannot express."""
    counts = {
        "episodes.count": inputs.episodes.count,
        "episodes.horizon": inputs.episodes.horizon,
        "episodes.capacity": inputs.episodes.capacity,
        "planner.horizon": inputs.planner.horizon,
        "planner.population": inputs.planner.population,
        "planner.elite_count": inputs.planner.elite_count,
        "planner.iterations": inputs.planner.iterations,
        "quadrature.order": inputs.quadrature.order,
        "quadrature.samples": inputs.quadrature.samples,
    }
    for key, value in counts.items():
        if value < 1:
            raise ValueError(f"{key} must be positive, got {value}")
    if inputs.episodes.warmup < 0:
        raise ValueError(
            f"episodes.warmup must be non-negative, got {inputs.episodes.warmup}"
        )
    if inputs.certificate.horizon < 0:
        raise ValueError(
            "certificate.horizon must be non-negative,"
            f" got {inputs.certificate.horizon}"
        )
    if inputs.planner.elite_count > inputs.planner.population:
        raise ValueError("planner.elite_count cannot exceed planner.population")
    if 0 < inputs.certificate.mc_rollouts < 1000:
        raise ValueError(
            "certificate.mc_rollouts must be zero or at least 1000, got"
            f" {inputs.certificate.mc_rollouts}"
        )


def resolved_settings(inputs: DictConfig) -> Dict[Text, Any]:
    """Plain configuration without the machine-specific directories."""
    from omegaconf import OmegaConf

    result = OmegaConf.to_container(inputs, resolve=True)
    result.pop("cwd", None)
    result.pop("root", None)
    return result


class Pipeline:
    """Experiment from warm-up data to filtered roll-outs.

    Each stage writes its artifacts to the output directory, and reads those of earlier
    stages from it when they were produced by another process. Randomness derives from
    a single seed, with one stream per stage and per episode.
    """

    def __init__(self, settings: DictConfig):
        from omegaconf import OmegaConf

        from confsafe.envs import register_environment
        from confsafe.filters import FilterConfig
        from confsafe.objectives import SafetyObjective, register_cost
        from confsafe.values import GridSpec, NoiseQuadrature

        check_input(settings)
        self.settings = settings
        self.config = resolved_settings(settings)
        self.source = RandomSource(int(settings.seed))
        self.output = Path(settings.output)
        self.environment = register_environment.factory(settings.environment)
        self.cost = register_cost.build(settings.cost, environment=self.environment)
        self.objective = SafetyObjective.create(
            self.cost,
            gamma=settings.objective.gamma,
            xi=settings.objective.xi,
            c_min_bound=settings.objective.c_min_bound,
        )
        filter_settings = OmegaConf.to_container(settings.filter, resolve=True)
        self.filter_config = FilterConfig(**filter_settings).resolve(self.objective)
        axes = settings.grid.axes
        if axes is None:
            axes = self.environment.grid_axes()
        self.grid = GridSpec(
            [tuple(u) for u in axes],
            cap=settings.grid.cap,
            conservative_cost=settings.grid.conservative,
        )
        if self.grid.dimension != self.environment.state_dim:
            raise ValueError(
                f"Grid has {self.grid.dimension} axes for"
                f" {self.environment.state_dim} state dimensions"
            )
        self.quadrature = NoiseQuadrature.from_noise(
            self.environment.noise,
            order=settings.quadrature.order,
            samples=settings.quadrature.samples,
            seed=int(settings.seed),
        )
        self.timings: List[Mapping[Text, Any]] = []
        self.buffer = None
        self.model = None
        self.policy = None
        self.value = None
        self.certificate = None
        self.metrics: Optional[pd.DataFrame] = None

    @classmethod
    def load(
        cls: Type[PipelineVar],
        settings: Union[Text, Path, IO, Mapping[Text, Any]],
        root: Optional[Union[Text, Path]] = None,
        overrides: Optional[DictConfig] = None,
    ) -> PipelineVar:
        """Loads an experiment from an input file.

        Args:
            settings (Union[Text, pathlib.Path, dict]): path to a yaml file, or an io
                buffer with yaml content, or a dictionary with the settings already
                prepared.
            root: root custom interpolation when loading omegaconf files.
            overrides: dot-syntax overrides.
        """
        inputs = construct_input(settings, root=root, overrides=overrides)
        load_initial_imports(inputs.imports)
        return cls(inputs)

    def random(self, stage: Text, *streams: int) -> RandomSource:
        """Independent stream for a stage, and optionally an episode."""
        return self.source.child(STAGES.index(stage), *streams)

    def path(self, name: Text) -> Path:
        return self.output / name

    def write_document(self, name: Text, kind: Text, content: Mapping[Text, Any]):
        from confsafe.io import write_document

        self.output.mkdir(parents=True, exist_ok=True)
        write_document(self.path(name), kind, content, config=self.config)

    def write_table(self, name: Text, table: pd.DataFrame):
        from confsafe.io import write_table

        self.output.mkdir(parents=True, exist_ok=True)
        write_table(table, self.path(name), index=False)

    def artifact(self, name: Text) -> Any:
        """Result of an earlier stage, read from the output directory if need be."""
        from confsafe.backups import policy_from_document
        from confsafe.io import read_document, read_table
        from confsafe.models import ReplayBuffer, model_from_document
        from confsafe.values import GridValueFunction

        if getattr(self, name) is not None:
            return getattr(self, name)
        loaders: Mapping[Text, Any] = dict(
            buffer=(
                "buffer.csv",
                lambda path: ReplayBuffer.from_dataframe(
                    read_table(path), self.settings.episodes.capacity
                ),
            ),
            model=(
                "model.yaml",
                lambda path: model_from_document(
                    read_document(path, "model"), self.environment
                ),
            ),
            policy=(
                "policy.yaml",
                lambda path: policy_from_document(read_document(path, "policy")),
            ),
            value=(
                "value.yaml",
                lambda path: GridValueFunction.from_document(
                    read_document(path, "value")
                ),
            ),
        )
        filename, loader = loaders[name]
        path = self.path(filename)
        if not path.exists():
            raise FileNotFoundError(
                f"Missing artifact {path}: run the earlier stages first"
            )
        setattr(self, name, loader(path))
        logger.info("read %s from %s", name, path)
        return getattr(self, name)

    @contextmanager
    def stage(self, name: Text):
        """Times a stage and tags its failures with its name."""
        from time import perf_counter

        logger.info("starting stage %s", name)
        start = perf_counter()
        try:
            yield
        except PipelineError:
            raise
        except Exception as error:
            raise PipelineError(name, error) from error
        finally:
            elapsed = perf_counter() - start
            self.timings.append(dict(stage=name, seconds=elapsed))
            timings = pd.DataFrame(self.timings, columns=list(TIMING_COLUMNS))
            timings["episode"] = timings["episode"].astype("float64").astype("Int64")
            self.write_table("timings.csv", timings)
            logger.info("stage %s took %.2f s", name, elapsed)

    def run_stage(self, name: Text):
        if name not in STAGES:
            raise ValueError(f"Unknown stage {name}, expected one of {STAGES}")
        with self.stage(name):
            getattr(self, name)()

    def __call__(self) -> pd.DataFrame:
        """Runs every stage and returns the episode metrics."""
        from omegaconf import OmegaConf

        self.output.mkdir(parents=True, exist_ok=True)
        with open(self.path("config.yaml"), "w") as stream:
            stream.write(OmegaConf.to_yaml(OmegaConf.create(self.config)))
        for name in STAGES:
            self.run_stage(name)
        return self.metrics

    def warmup(self):
        """Collects transitions with uniformly random actions."""
        from confsafe.core import rollout
        from confsafe.models import ReplayBuffer
        from confsafe.planners import UniformPolicy

        env = self.environment
        self.buffer = ReplayBuffer(
            env.state_dim, env.action_dim, self.settings.episodes.capacity
        )
        policy = UniformPolicy(env.action_box, self.random("warmup", 0))
        for episode in range(self.settings.episodes.warmup):
            generator = self.random("warmup", episode + 1).generator()
            trajectory = rollout(
                env,
                policy,
                env.initial_state(generator),
                self.settings.episodes.horizon,
                generator,
            )
            self.buffer.add(
                trajectory.states[:-1], trajectory.actions, trajectory.states[1:]
            )
        logger.info("collected %i warm-up transitions", len(self.buffer))
        self.write_table("buffer.csv", self.buffer.to_dataframe())

    def _fit_ensemble(self, epochs: int, rng) -> pd.DataFrame:
        from sklearn.model_selection import train_test_split

        from confsafe.models import ReplayBuffer, fit_beta, fit_ensemble

        model, buffer = self.model, self.artifact("buffer")
        training = model.training
        states, actions, next_states = buffer.transitions()
        held_out = None
        if training.fit_beta and training.holdout > 0 and len(buffer) >= 10:
            train, test = train_test_split(
                np.arange(len(buffer)),
                test_size=training.holdout,
                random_state=int(rng.integers(2 ** 31)),
            )
            fitting = ReplayBuffer(model.state_dim, model.action_dim, len(train))
            fitting.add(states[train], actions[train], next_states[train])
            held_out = states[test], actions[test]
        else:
            fitting = buffer
        losses = fit_ensemble(
            model,
            fitting,
            epochs=epochs,
            learning_rate=training.learning_rate,
            weight_decay=training.weight_decay,
            rng=rng,
            bootstrap=training.bootstrap,
        )
        if held_out is not None:
            model.beta = fit_beta(model, self.environment, *held_out)
            logger.info(
                "fitted beta %g on %i held-out transitions", model.beta, len(test)
            )
        return losses

    def fit_model(self):
        """Creates the model set and fits it to the replay buffer, if it learns."""
        from confsafe.models import EnsembleModel, register_model

        generator = self.random("fit_model").generator()
        self.model = register_model.build(
            self.settings.model, environment=self.environment, rng=generator
        )
        if isinstance(self.model, EnsembleModel):
            losses = self._fit_ensemble(self.model.training.epochs, generator)
            self.write_table("training.csv", losses)
        self.write_document("model.yaml", "model", self.model.to_document())

    def learn_backup(self):
        """Learns the backup policy with the configured method."""
        from confsafe.backups import register_backup

        generator = self.random("learn_backup").generator()
        self.policy, self.value = register_backup.build(
            self.settings.backup,
            model=self.artifact("model"),
            objective=self.objective,
            grid=self.grid,
            quadrature=self.quadrature,
            initial_state=self.environment.initial_state(),
            rng=generator,
        )
        self.write_document("policy.yaml", "policy", self.policy.to_document())

    def solve_value(self):
        """Pessimistic value of the backup policy on the grid."""
        from confsafe.values import pessimistic_value_grid

        self.value = pessimistic_value_grid(
            self.artifact("model"),
            self.artifact("policy"),
            self.cost,
            self.objective.gamma,
            self.grid,
            self.quadrature,
            eta_search=self.filter_config.inner_eta_mode,
        )
        self.write_document("value.yaml", "value", self.value.to_document())
        self.write_table("value.csv", self.value.to_dataframe())

    def certify(self):
        """Drift check, finite-horizon certificate, and Monte-Carlo cross-check."""
        from confsafe.certificates import CertificateReport, mc_delta_estimate
        from confsafe.values import check_drift

        section = self.settings.certificate
        if not section.enabled:
            logger.info("certificate disabled")
            return
        model, policy, value = (
            self.artifact("model"),
            self.artifact("policy"),
            self.artifact("value"),
        )
        eta_search = self.filter_config.inner_eta_mode
        inside = value.values < self.objective.xi_bar
        entry = np.zeros((0, value.grid.dimension))
        if not inside.any():
            report = CertificateReport(
                1.0, section.horizon, None, None, certified=False
            )
            report.warnings.append("No grid node lies inside the safe sub-level set")
        else:
            drift = check_drift(
                value,
                model,
                policy,
                self.objective.c_min_bound,
                self.quadrature,
                safe=inside,
                eta_search=eta_search,
            )
            if drift.holds:
                report, entry = self._certificate(model, policy, value, drift)
            else:
                report = CertificateReport(
                    1.0, section.horizon, None, None, certified=False
                )
                report.warnings.append(
                    f"Drift condition fails at {np.asarray(drift.worst_state).tolist()}"
                )
        if report.certified and section.mc_rollouts > 0:
            if len(entry):
                rate, (low, high) = mc_delta_estimate(
                    self.environment,
                    policy,
                    value,
                    self.objective.xi_bar,
                    entry,
                    section.horizon,
                    section.mc_rollouts,
                    self.random("certify", 1),
                )
                report.mc_crosscheck.update(rate=rate, lower=low, upper=high)
                if rate > report.delta:
                    report.warnings.append(
                        f"Simulated violation rate {rate:.3g} exceeds the bound"
                        f" {report.delta:.3g}"
                    )
        for message in report.warnings:
            logger.warning(message)
        self.certificate = report
        self.write_document("certificate.yaml", "certificate", report.to_document())

    def _certificate(self, model, policy, value, drift):
        from confsafe.certificates import certify
        from confsafe.values import certify_policy

        section = self.settings.certificate
        cert_input = certify_policy(
            value,
            model,
            policy,
            self.objective,
            drift,
            self.quadrature,
            eta_search=self.filter_config.inner_eta_mode,
            xi=self.filter_config.xi,
        )
        report = certify(
            cert_input,
            section.horizon,
            varthetas=list(section.varthetas),
            lambda_fractions=list(section.lambda_fractions),
            delta_f=section.delta_f,
            variant=section.variant,
            alpha_offset=section.alpha_offset,
        )
        report.mc_crosscheck = dict(
            rollouts=int(section.mc_rollouts), entry_states=int(cert_input.entry.sum())
        )
        return report, cert_input.states[cert_input.entry]

    def rollouts(self):
        """Filtered episodes on the true environment, refitting learned models."""
        from time import perf_counter

        from confsafe.filters import rollout_filtered
        from confsafe.models import EnsembleModel
        from confsafe.planners import CEMPlanner
        from confsafe.schema import METRICS, to_schema

        env, episodes = self.environment, self.settings.episodes
        model, buffer = self.artifact("model"), self.artifact("buffer")
        policy, value = self.artifact("policy"), self.artifact("value")
        planner = CEMPlanner(
            model.mean,
            env.reward,
            env.action_box,
            horizon=self.settings.planner.horizon,
            population=self.settings.planner.population,
            elite_count=self.settings.planner.elite_count,
            iterations=self.settings.planner.iterations,
            rng=self.random("rollouts", 0),
        )
        rows, steps = [], []
        for episode in range(episodes.count):
            start = perf_counter()
            source = self.random("rollouts", episode + 1)
            planner.reset()
            trajectory, metrics, table = rollout_filtered(
                env,
                planner,
                policy,
                value,
                model,
                self.filter_config,
                episodes.horizon,
                source,
                self.quadrature,
                self.cost,
                env.initial_state(source.child(2).generator()),
            )
            rows.append(dict(episode=episode, seed=int(self.settings.seed), **metrics))
            table.insert(0, "episode", episode)
            steps.append(table)
            buffer.add(
                trajectory.states[:-1], trajectory.actions, trajectory.states[1:]
            )
            if isinstance(model, EnsembleModel):
                generator = source.child(3).generator()
                self._fit_ensemble(model.training.refit_epochs, generator)
            logger.info(
                "episode %i: return %.3g, %i violations, %i interventions",
                episode,
                metrics["return"],
                metrics["violations"],
                metrics["interventions"],
            )
            self.timings.append(
                dict(stage="rollouts", episode=episode, seconds=perf_counter() - start)
            )
        metrics = pd.DataFrame(rows, columns=list(METRICS.columns))
        self.metrics = to_schema(METRICS, metrics)
        self.write_table("metrics.csv", self.metrics)
        if steps:
            self.write_table("steps.csv", pd.concat(steps, ignore_index=True))
        self.write_table("buffer.csv", buffer.to_dataframe())
        if isinstance(model, EnsembleModel):
            self.write_document("model.yaml", "model", model.to_document())


def compare(
    run_dirs: Sequence[Union[Text, Path]], output: Optional[Union[Text, Path]] = None
) -> pd.DataFrame:
    """Summary of several runs, one row per run.

    Args:
        run_dirs: output directories of earlier runs, each with a ``metrics.csv``.
        output: where to write the summary. Nothing is written if ``None``.
    """
    from confsafe.io import read_table, write_table
    from confsafe.schema import METRICS, SUMMARY, to_schema

    if len(run_dirs) == 0:
        raise ValueError("Nothing to compare: no run directory given")
    rows = []
    for directory in run_dirs:
        path = Path(directory) / "metrics.csv"
        if not path.exists():
            raise FileNotFoundError(f"No metrics file {path}")
        metrics = read_table(path, METRICS)
        rows.append(
            dict(
                run=str(directory),
                episodes=len(metrics),
                mean_return=metrics["return"].mean(),
                mean_cost=metrics["cost"].mean(),
                total_violations=metrics["violations"].sum(),
                total_interventions=metrics["interventions"].sum(),
            )
        )
    summary = to_schema(SUMMARY, pd.DataFrame(rows))
    if output is not None:
        write_table(summary, output, index=False)
    return summary
