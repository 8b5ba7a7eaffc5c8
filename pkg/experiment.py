"""Experiment orchestration: configuration files, checkpoints, runs and sweeps.

A run evaluates every configured objective on the same sample stream of the
same benchmark, so rows of `results.tsv` differ only by what the objective
does. Tables exclude wall time and are byte-identical for identical configs;
timings go to `timing.tsv` and the per-sample traces.
"""
import csv
import enum
import hashlib
from itertools import product
import json
from pathlib import Path
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import typing
from typing import (
    Any,
    Callable,
    Dict,
    List,
    Mapping,
    MutableMapping,
    Optional,
    Sequence,
    Tuple,
    Type,
)

import attr
import numpy as np

import bench
import captioner as cap
import metrics
import models
from numcore import softmax
from pipelines import (
    CAPTION_OBJECTIVES,
    EpisodeTrace,
    Objective,
    Session,
    Task,
    TTAConfig,
    run_stream,
    tta_caption,
    tta_classify,
    tta_retrieve,
)
from reward import ENSEMBLE_WEIGHTS, RewardModel, RewardScorer, Words
import store
import tracing


class ConfigError(ValueError):
    pass


class MissingCheckpoint(ConfigError):
    def __init__(self, path: Path, reason: str = "not found"):
        super().__init__(
            f"Checkpoint {path} {reason}; run the `pretrain` subcommand with this "
            "config first, or set experiment.pretrain = true"
        )
        self.path = path


ALL_OBJECTIVES = tuple(o.value for o in Objective)


@attr.s(auto_attribs=True, frozen=True)
class ExperimentConfig:
    seed: int
    name: str = "default"
    out_dir: str = "runs/default"
    checkpoints: str = "checkpoints/default"
    benchmark: str = ""
    tasks: Tuple[str, ...] = (Task.CLASSIFY.value,)
    objectives: Tuple[str, ...] = ALL_OBJECTIVES
    samples: int = 0
    workers: int = 1
    ensemble: bool = False
    pretrain: bool = True

    def __attrs_post_init__(self) -> None:
        for task in self.tasks:
            Task(task)
        for objective in self.objectives:
            Objective(objective)
        if self.samples < 0:
            raise ValueError(f"samples must be >= 0, got {self.samples}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")


SECTIONS: Dict[str, Type[Any]] = {
    "experiment": ExperimentConfig,
    "benchmark": bench.BenchmarkSpec,
    "shift": bench.ShiftSpec,
    "student": models.PretrainConfig,
    "teacher": models.PretrainConfig,
    "captioner": cap.CaptionerConfig,
}

TTA_FIELDS = {
    name: field
    for name, field in attr.fields_dict(TTAConfig).items()
    if name != "task"
}

Grid = Mapping[str, Sequence[Any]]


@attr.s(auto_attribs=True, frozen=True)
class Config:
    experiment: ExperimentConfig
    benchmark: bench.BenchmarkSpec = bench.BenchmarkSpec()
    shift: bench.ShiftSpec = bench.ShiftSpec()
    student: models.PretrainConfig = models.PretrainConfig()
    teacher: models.PretrainConfig = models.PretrainConfig()
    captioner: cap.CaptionerConfig = cap.CaptionerConfig()
    tta: Mapping[str, Any] = attr.Factory(dict)
    tta_tasks: Mapping[str, Mapping[str, Any]] = attr.Factory(dict)
    sweep: Grid = attr.Factory(dict)

    @property
    def seed(self) -> int:
        return self.experiment.seed

    def tta_config(
        self,
        task: Task,
        objective: Objective,
        extra: Optional[Mapping[str, Any]] = None,
    ) -> TTAConfig:
        """Task defaults, then [tta], [tta.<task>] and `extra`."""
        overrides: Dict[str, Any] = {
            "seed": self.seed,
            **self.tta,
            **self.tta_tasks.get(task.value, {}),
            **(extra or {}),
            "objective": objective,
        }
        mode = overrides.pop("mode", None)
        try:
            return TTAConfig.defaults(task, mode, **overrides)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[tta] for {task.value}: {e}") from e

    def fingerprint(self) -> str:
        """Identifies everything the checkpoints depend on."""
        payload = {
            "seed": self.seed,
            "ensemble": self.experiment.ensemble,
            "benchmark_file": self.experiment.benchmark,
            **{
                name: attr.asdict(getattr(self, name))
                for name in ("benchmark", "shift", "student", "teacher", "captioner")
            },
        }
        text = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# Config files and overrides


def _field_type(cls: Type[Any], name: str) -> Any:
    return typing.get_type_hints(cls)[name]


def coerce(value: Any, tp: Any, where: str) -> Any:
    """Convert a TOML value or command-line string to a field's declared type."""
    origin = typing.get_origin(tp)
    if origin is tuple:
        (item_type, *_) = typing.get_args(tp)
        items = value.split(",") if isinstance(value, str) else value
        if not isinstance(items, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(coerce(item, item_type, where) for item in items if item != "")

    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(value)
        except ValueError as e:
            raise ConfigError(f"{where}: {e}") from e

    if tp is bool:
        if isinstance(value, bool):
            return value
        text = str(value).lower()
        if text in ("true", "yes", "on", "1"):
            return True
        if text in ("false", "no", "off", "0"):
            return False
        raise ConfigError(f'{where}: expected true or false, got "{value}"')

    if tp is int:
        if isinstance(value, bool) or isinstance(value, float):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        try:
            return int(value)
        except ValueError as e:
            raise ConfigError(f"{where}: expected an integer, got {value!r}") from e

    if tp is float:
        if isinstance(value, bool):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        try:
            return float(value)
        except ValueError as e:
            raise ConfigError(f"{where}: expected a number, got {value!r}") from e

    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value

    raise ConfigError(f"{where}: unsupported field type {tp}")


def _build(cls: Type[Any], table: Mapping[str, Any], section: str) -> Any:
    if not isinstance(table, Mapping):
        raise ConfigError(f"[{section}] must be a table")
    fields = attr.fields_dict(cls)
    unknown = sorted(set(table) - set(fields))
    if unknown:
        raise ConfigError(f"[{section}] has unknown keys {unknown}")
    values = {
        name: coerce(value, _field_type(cls, name), f"{section}.{name}")
        for name, value in table.items()
    }
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}] {e}") from e


def _tta_table(table: Mapping[str, Any], section: str) -> Dict[str, Any]:
    unknown = sorted(set(table) - set(TTA_FIELDS))
    if unknown:
        raise ConfigError(f"[{section}] has unknown keys {unknown}")
    return {
        name: coerce(value, _field_type(TTAConfig, name), f"{section}.{name}")
        for name, value in table.items()
    }


def _sweep_grid(table: Mapping[str, Any]) -> Dict[str, Tuple[Any, ...]]:
    grid = {}
    for name, values in table.items():
        if name not in TTA_FIELDS:
            raise ConfigError(f"[sweep] cannot vary unknown field {name!r}")
        items = values if isinstance(values, (list, tuple)) else [values]
        if not items:
            raise ConfigError(f"[sweep] {name} has no values")
        tp = _field_type(TTAConfig, name)
        grid[name] = tuple(coerce(v, tp, f"sweep.{name}") for v in items)
    return grid


def parse_grid(specs: Sequence[str]) -> Dict[str, Tuple[Any, ...]]:
    """Parse `field=v1,v2,...` sweep axes."""
    table = {}
    for spec in specs:
        name, has_values, values = spec.partition("=")
        if not has_values:
            raise ConfigError(f'Unrecognised grid axis "{spec}"')
        table[name.strip().replace("-", "_")] = [v for v in values.split(",") if v]
    return _sweep_grid(table)


def parse_overrides(args: Sequence[str]) -> List[Tuple[Tuple[str, ...], str]]:
    """Parse `--field value` / `--field=value` pairs into (key path, text).

    A bare field names an [experiment] key, or failing that a [tta] key;
    other sections are addressed as `--section.field` and per-task TTA keys
    as `--tta.<task>.<field>`.
    """
    parsed = []
    items = list(args)
    while items:
        flag = items.pop(0)
        if not flag.startswith("--") or len(flag) == 2:
            raise ConfigError(f'Unrecognised argument "{flag}"')
        key, has_value, text = flag[2:].partition("=")
        if not has_value:
            if not items:
                raise ConfigError(f"Missing value for --{key}")
            text = items.pop(0)
        path = tuple(key.replace("-", "_").split("."))
        if len(path) == 1:
            if path[0] in attr.fields_dict(ExperimentConfig):
                path = ("experiment",) + path
            elif path[0] in TTA_FIELDS:
                path = ("tta",) + path
            else:
                raise ConfigError(f"Unknown setting --{key}")
        parsed.append((path, text))
    return parsed


def _apply_override(
    raw: MutableMapping[str, Any], path: Tuple[str, ...], text: str
) -> None:
    table = raw
    for part in path[:-1]:
        child = table.setdefault(part, {})
        if not isinstance(child, MutableMapping):
            raise ConfigError(f"Cannot override --{'.'.join(path)}")
        table = child
    table[path[-1]] = text


def config_from_dict(raw: Mapping[str, Any]) -> Config:
    unknown = sorted(set(raw) - set(SECTIONS) - {"tta", "sweep"})
    if unknown:
        raise ConfigError(f"Unknown sections {unknown}")
    experiment_table = raw.get("experiment", {})
    if "seed" not in experiment_table:
        raise ConfigError("experiment.seed is mandatory")
    sections = {
        name: _build(cls, raw.get(name, {}), name) for name, cls in SECTIONS.items()
    }

    tta_raw = dict(raw.get("tta", {}))
    task_tables = {
        name: tta_raw.pop(name)
        for name in list(tta_raw)
        if isinstance(tta_raw[name], Mapping)
    }
    for name in task_tables:
        try:
            Task(name)
        except ValueError as e:
            raise ConfigError(f"[tta.{name}] does not name a task") from e
    return Config(
        tta=_tta_table(tta_raw, "tta"),
        tta_tasks={
            name: _tta_table(table, f"tta.{name}")
            for name, table in task_tables.items()
        },
        sweep=_sweep_grid(raw.get("sweep", {})),
        **sections,
    )


def load_config(
    path: Path, overrides: Sequence[Tuple[Tuple[str, ...], str]] = ()
) -> Config:
    try:
        with open(path, "rb") as config_file:
            raw = tomllib.load(config_file)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file {path} not found") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid TOML: {e}") from e
    for key, text in overrides:
        _apply_override(raw, key, text)
    return config_from_dict(raw)


# Benchmarks and checkpoints


def load_bench(cfg: Config) -> bench.ShiftBenchmark:
    if cfg.experiment.benchmark:
        path = Path(cfg.experiment.benchmark)
        if not store.exists(path):
            raise ConfigError(f"Benchmark file {path} not found; run `genbench` first")
        return bench.load_benchmark(path)
    return bench.gen_benchmark(cfg.benchmark, cfg.shift, cfg.seed)


def _derived_seed(seed: int, section_seed: int) -> int:
    return int(np.random.SeedSequence([seed, section_seed]).generate_state(1)[0])


def _fit(
    p: models.PretrainConfig, spec: bench.BenchmarkSpec, seed: int
) -> models.PretrainConfig:
    """Match a model config to the benchmark's dimensions."""
    return attr.evolve(
        p,
        d_in=spec.d_in,
        classes=spec.classes,
        words=spec.attributes,
        seed=_derived_seed(seed, p.seed),
    )


def teacher_configs(
    cfg: Config, spec: bench.BenchmarkSpec
) -> List[Tuple[str, models.PretrainConfig, float]]:
    """Reward models as (name, config, weight); the ensemble varies width and seed."""
    base = _fit(cfg.teacher, spec, cfg.seed)
    if not cfg.experiment.ensemble:
        return [("teacher", base, 1.0)]
    widths = (base.d_emb, max(4, base.d_emb * 3 // 4), max(4, base.d_emb // 2))
    return [
        (f"teacher-{i}", attr.evolve(base, d_emb=width, seed=base.seed + i), weight)
        for i, (width, weight) in enumerate(zip(widths, ENSEMBLE_WEIGHTS))
    ]


@attr.s(auto_attribs=True, frozen=True)
class Assets:
    student: models.DualEncoder
    teachers: Tuple[RewardModel, ...]
    captioner: cap.ToyCaptioner


@attr.s(auto_attribs=True, frozen=True)
class PretrainRow:
    model: str
    epochs: int
    final_loss: float
    source_accuracy: float

    def cells(self) -> List[str]:
        return [
            self.model,
            str(self.epochs),
            f"{self.final_loss:.6f}",
            f"{self.source_accuracy:.6f}",
        ]


def _checkpoint(cfg: Config, name: str) -> Path:
    return Path(cfg.experiment.checkpoints) / name


def _checkpoint_names(cfg: Config, spec: bench.BenchmarkSpec) -> List[str]:
    teachers = [name for name, _, _ in teacher_configs(cfg, spec)]
    return ["student", "captioner"] + teachers


def pretrain(cfg: Config, benchmark: bench.ShiftBenchmark) -> List[PretrainRow]:
    """Train and save the student, the reward models and the captioner."""
    meta = {"fingerprint": cfg.fingerprint()}
    rows = []

    def encoder(name: str, p: models.PretrainConfig, data: models.PairedSet) -> None:
        with tracing.span("pretrain", {"model": name, "seed": cfg.seed}):
            result = models.pretrain_contrastive(p, data)
            models.check_guardrail(result, p.classes)
        models.save_encoder(_checkpoint(cfg, name), result.model, meta)
        final = result.losses[-1] if result.losses else float("nan")
        rows.append(PretrainRow(name, p.epochs, final, result.source_accuracy))

    spec = benchmark.spec
    encoder("student", _fit(cfg.student, spec, cfg.seed), benchmark.student_pairs())
    for name, p, _ in teacher_configs(cfg, spec):
        encoder(name, p, benchmark.teacher_pairs())

    student = models.load_encoder(_checkpoint(cfg, "student"))
    captioner_cfg = attr.evolve(
        cfg.captioner, seed=_derived_seed(cfg.seed, cfg.captioner.seed)
    )
    with tracing.span("pretrain", {"model": "captioner", "seed": cfg.seed}):
        captioner = cap.pretrain_captioner(
            captioner_cfg,
            student,
            benchmark.source.images,
            benchmark.source.labels,
            benchmark.class_words(),
        )
    cap.save_captioner(_checkpoint(cfg, "captioner"), captioner, meta)

    write_table(
        Path(cfg.experiment.checkpoints) / "pretrain.tsv",
        ["model", "epochs", "final_loss", "source_accuracy"],
        [row.cells() for row in rows],
    )
    return rows


def _stale(cfg: Config, path: Path) -> Optional[str]:
    if not store.exists(path):
        return "not found"
    if store.read_meta(path).get("fingerprint") != cfg.fingerprint():
        return "was built from a different configuration"
    return None


def load_assets(cfg: Config, benchmark: bench.ShiftBenchmark) -> Assets:
    """Load checkpoints, pretraining first when allowed and any is missing or stale.

    Freshly trained models are read back from disk too, so a run sees the same
    32-bit weights whether or not it did the pretraining itself.
    """
    for name in _checkpoint_names(cfg, benchmark.spec):
        path = _checkpoint(cfg, name)
        reason = _stale(cfg, path)
        if reason is None:
            continue
        if not cfg.experiment.pretrain:
            raise MissingCheckpoint(path, reason)
        pretrain(cfg, benchmark)
        break

    teachers = tuple(
        RewardModel(models.load_encoder(_checkpoint(cfg, name)), weight, name)
        for name, _, weight in teacher_configs(cfg, benchmark.spec)
    )
    return Assets(
        student=models.load_encoder(_checkpoint(cfg, "student")),
        teachers=teachers,
        captioner=cap.load_captioner(_checkpoint(cfg, "captioner")),
    )


# Running tasks


def _limit(count: int, samples: int) -> int:
    return count if samples == 0 else min(count, samples)


def _classify_stream(
    cfg: Config,
    tta: TTAConfig,
    assets: Assets,
    benchmark: bench.ShiftBenchmark,
    scorer: RewardScorer,
    session: Session,
) -> Tuple[List[Any], Callable[[int, Any], EpisodeTrace]]:
    target = benchmark.target
    images = list(target.images[: _limit(len(target), cfg.experiment.samples)])

    def episode(index: int, image: Any) -> EpisodeTrace:
        _, trace = tta_classify(
            image,
            assets.student,
            scorer,
            tta,
            session=session,
            index=index,
            truth=int(target.labels[index]),
        )
        return trace

    return images, episode


def _retrieval_stream(
    cfg: Config,
    tta: TTAConfig,
    assets: Assets,
    benchmark: bench.ShiftBenchmark,
    scorer: RewardScorer,
    session: Session,
) -> Tuple[List[Any], Callable[[int, Any], EpisodeTrace]]:
    """Queries are gallery items from the other modality; query i matches item i."""
    texts = [Words.of(row) for row in benchmark.gallery_words()]
    images = list(benchmark.gallery_images)
    if tta.task == Task.RETRIEVE_T2I:
        queries: List[Any] = list(texts)
        gallery: Any = benchmark.gallery_images
    else:
        queries, gallery = images, texts

    def episode(index: int, query: Any) -> EpisodeTrace:
        _, trace = tta_retrieve(
            query,
            gallery,
            assets.student,
            scorer,
            tta,
            session=session,
            index=index,
            truth=index,
        )
        return trace

    return queries[: _limit(len(queries), cfg.experiment.samples)], episode


def _caption_stream(
    cfg: Config,
    tta: TTAConfig,
    assets: Assets,
    benchmark: bench.ShiftBenchmark,
    scorer: RewardScorer,
    session: Session,
) -> Tuple[List[Any], Callable[[int, Any], EpisodeTrace]]:
    captions = benchmark.captions
    images = list(captions.images[: _limit(len(captions), cfg.experiment.samples)])

    def episode(index: int, image: Any) -> EpisodeTrace:
        _, trace = tta_caption(
            image,
            assets.captioner,
            scorer,
            tta,
            session=session,
            index=index,
            truth=benchmark.class_attributes[captions.labels[index]].tolist(),
        )
        return trace

    return images, episode


def run_task(
    cfg: Config,
    tta: TTAConfig,
    assets: Assets,
    benchmark: bench.ShiftBenchmark,
    scorer: Optional[RewardScorer] = None,
) -> List[EpisodeTrace]:
    scorer = scorer or RewardScorer(assets.teachers)
    if tta.task == Task.CAPTION:
        session = Session.start(assets.captioner.params, tta)
        stream = _caption_stream
    else:
        session = Session.start(assets.student.params, tta)
        stream = _retrieval_stream if tta.task.is_retrieval else _classify_stream
    samples, episode = stream(cfg, tta, assets, benchmark, scorer, session)

    context = {
        "task": tta.task.value,
        "objective": tta.objective.value,
        "samples": len(samples),
    }
    with tracing.span("run_task", context):
        return run_stream(samples, episode, session, cfg.experiment.workers)


def summarize(task: Task, traces: Sequence[EpisodeTrace]) -> metrics.MetricsReport:
    if not traces:
        return metrics.MetricsReport(samples=0)
    rewards = dict(
        reward_gain=float(np.mean([t.reward_gain for t in traces])),
        mean_reward=float(np.mean([t.final_reward for t in traces])),
        wall_time=float(np.mean([t.wall_time for t in traces])),
    )
    rankings = [t.ranking for t in traces]
    truths = [t.truth for t in traces]

    if task == Task.CLASSIFY:
        return metrics.MetricsReport(
            samples=len(traces),
            top1=float(np.mean([bool(t.correct) for t in traces])),
            top5=metrics.top_k_accuracy(rankings, truths, 5),
            ece=metrics.ece(
                [t.confidence or 0.0 for t in traces], [bool(t.correct) for t in traces]
            ),
            **rewards,
        )
    if task.is_retrieval:
        return metrics.MetricsReport(
            samples=len(traces),
            recall1=metrics.recall_at_k(rankings, truths, 1),
            recall5=metrics.recall_at_k(rankings, truths, 5),
            recall10=metrics.recall_at_k(rankings, truths, 10),
            **rewards,
        )
    return metrics.MetricsReport(
        samples=len(traces),
        caption_f1=float(
            np.mean(
                [
                    metrics.caption_attribute_f1(
                        cap.caption_attributes(t.prediction), t.truth or ()
                    )
                    for t in traces
                ]
            )
        ),
        **rewards,
    )


def reward_model_report(
    cfg: Config, scorer: RewardScorer, benchmark: bench.ShiftBenchmark
) -> metrics.MetricsReport:
    """The reward models' own zero-shot classification of the target stream."""
    target = benchmark.target
    count = _limit(len(target), cfg.experiment.samples)
    logits = np.array([scorer.teacher_logits(image) for image in target.images[:count]])
    probs = softmax(logits)
    predictions = np.argmax(probs, axis=-1)
    truths = [int(label) for label in target.labels[:count]]
    rankings = [models.top_k(row, min(5, len(row))).tolist() for row in logits]
    correct = predictions == np.array(truths)
    return metrics.MetricsReport(
        samples=count,
        top1=float(np.mean(correct)),
        top5=metrics.top_k_accuracy(rankings, truths, 5),
        ece=metrics.ece(probs.max(axis=-1), correct),
    )


# Tables

REWARD_MODEL = "reward_model"
RESULT_COLUMNS = ["task", "objective", "variant", "mode", "steps", "k", "lr"]
RESULT_COLUMNS += metrics.REPORT_COLUMNS


def write_table(
    path: Path, header: Sequence[str], rows: Sequence[Sequence[str]]
) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as out:
        writer = csv.writer(out, delimiter="\t", lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def read_table(path: Path) -> List[Dict[str, str]]:
    with open(path, newline="") as table:
        return list(csv.DictReader(table, delimiter="\t"))


@attr.s(auto_attribs=True, frozen=True)
class ResultRow:
    task: str
    objective: str
    variant: str
    report: metrics.MetricsReport
    tta: Optional[TTAConfig] = None
    traces: Tuple[EpisodeTrace, ...] = ()

    def cells(self) -> List[str]:
        settings = (
            ["", "", "", ""]
            if self.tta is None
            else [
                self.tta.mode.value,
                str(self.tta.effective_steps),
                str(self.tta.k),
                f"{self.tta.lr:g}",
            ]
        )
        return [self.task, self.objective, self.variant] + settings + self.report.row()


# Headline metric per task for the objective comparison.
SUMMARY_METRICS = {
    Task.CLASSIFY: ("top1", "ece"),
    Task.RETRIEVE_T2I: ("recall1",),
    Task.RETRIEVE_I2T: ("recall1",),
    Task.CAPTION: ("caption_f1", "mean_reward"),
}


def summary_rows(rows: Sequence[ResultRow]) -> List[List[str]]:
    """Each objective's headline metrics beside the zero-shot values."""
    baseline = {
        row.task: row.report for row in rows if row.objective == Objective.NONE.value
    }
    table = []
    for row in rows:
        zero = baseline.get(row.task)
        for name in SUMMARY_METRICS[Task(row.task)]:
            value = getattr(row.report, name)
            if value is None:
                continue
            reference = None if zero is None else getattr(zero, name)
            delta = "" if reference is None else f"{value - reference:+.6f}"
            table.append(
                [
                    row.task,
                    row.objective,
                    name,
                    f"{value:.6f}",
                    "" if reference is None else f"{reference:.6f}",
                    delta,
                ]
            )
    return table


SUMMARY_COLUMNS = ["task", "objective", "metric", "value", "zero_shot", "delta"]
TIMING_COLUMNS = ["task", "objective", "samples", "mean_wall_time", "total_wall_time"]


def _timing(row: ResultRow) -> List[str]:
    times = [t.wall_time for t in row.traces]
    mean = float(np.mean(times)) if times else 0.0
    total = f"{sum(times):.6f}"
    return [row.task, row.objective, str(len(times)), f"{mean:.6f}", total]


def write_traces(path: Path, traces: Sequence[EpisodeTrace]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as out:
        for trace in traces:
            out.write(json.dumps(trace.to_record(), sort_keys=True) + "\n")


def _objectives(cfg: Config, task: Task) -> List[Objective]:
    chosen = [Objective(o) for o in cfg.experiment.objectives]
    if task == Task.CAPTION:
        return [o for o in chosen if o in CAPTION_OBJECTIVES]
    return chosen


def skipped_objectives(cfg: Config, task: Task) -> List[Objective]:
    """Configured objectives that `task` cannot run."""
    kept = _objectives(cfg, task)
    chosen = [Objective(o) for o in cfg.experiment.objectives]
    return [o for o in chosen if o not in kept]


def _note_skipped(task: Task, skipped: Sequence[Objective]) -> None:
    names = ",".join(o.value for o in skipped)
    tracing.event("objectives_skipped", {"task": task.value, "objectives": names})


@attr.s(auto_attribs=True, frozen=True)
class ExperimentResult:
    out_dir: Path
    rows: Tuple[ResultRow, ...]
    skipped: Tuple[Tuple[str, str], ...] = ()

    def row(self, task: str, objective: str) -> ResultRow:
        for row in self.rows:
            if row.task == task and row.objective == objective:
                return row
        raise KeyError(f"No result for {task}/{objective}")


def run_experiment(cfg: Config, out_dir: Optional[Path] = None) -> ExperimentResult:
    """Evaluate every configured objective on identical streams and write tables.

    `results.tsv` and `timing.tsv` are rewritten after every finished row, so a
    failure part way through leaves the completed rows on disk.
    """
    out = Path(cfg.experiment.out_dir) if out_dir is None else out_dir
    benchmark = load_bench(cfg)
    assets = load_assets(cfg, benchmark)
    scorer = RewardScorer(assets.teachers)
    rows: List[ResultRow] = []
    variant = cfg.experiment.name
    skipped: List[Tuple[str, str]] = []

    def flush() -> None:
        write_table(out / "results.tsv", RESULT_COLUMNS, [r.cells() for r in rows])
        write_table(
            out / "timing.tsv", TIMING_COLUMNS, [_timing(r) for r in rows if r.traces]
        )

    with tracing.span("run_experiment", {"name": variant, "seed": cfg.seed}):
        for task in (Task(t) for t in cfg.experiment.tasks):
            if task == Task.CLASSIFY:
                report = reward_model_report(cfg, scorer, benchmark)
                rows.append(ResultRow(task.value, REWARD_MODEL, variant, report))
                flush()
            unsupported = skipped_objectives(cfg, task)
            if unsupported:
                _note_skipped(task, unsupported)
                skipped.extend((task.value, o.value) for o in unsupported)
            for objective in _objectives(cfg, task):
                tta = cfg.tta_config(task, objective)
                traces = run_task(cfg, tta, assets, benchmark, scorer)
                name = f"{task.value}-{objective.value}.jsonl"
                write_traces(out / "traces" / name, traces)
                report = summarize(task, traces)
                rows.append(
                    ResultRow(
                        task.value, objective.value, variant, report, tta, tuple(traces)
                    )
                )
                flush()

    write_table(out / "summary.tsv", SUMMARY_COLUMNS, summary_rows(rows))
    return ExperimentResult(out, tuple(rows), tuple(skipped))


# Sweeps


def sweep_cells(grid: Grid) -> List[Dict[str, Any]]:
    names = sorted(grid)
    return [dict(zip(names, values)) for values in product(*(grid[n] for n in names))]


def _cell_text(value: Any) -> str:
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


def run_sweep(
    cfg: Config, grid: Optional[Grid] = None, out_dir: Optional[Path] = None
) -> Path:
    """One row per (task, grid cell, objective) in `sweep.tsv`."""
    grid = dict(cfg.sweep) if grid is None else dict(grid)
    if not grid:
        raise ConfigError("A sweep needs at least one field to vary")
    for name in grid:
        if name not in TTA_FIELDS:
            raise ConfigError(f"Cannot sweep unknown field {name!r}")
    out = Path(cfg.experiment.out_dir) if out_dir is None else out_dir
    benchmark = load_bench(cfg)
    assets = load_assets(cfg, benchmark)
    scorer = RewardScorer(assets.teachers)
    keys = sorted(k for k in grid if k != "objective")
    header = ["task", "objective"] + keys + metrics.REPORT_COLUMNS
    table: List[List[str]] = []

    for task in (Task(t) for t in cfg.experiment.tasks):
        for cell in sweep_cells(grid):
            objectives = (
                [Objective(cell["objective"])]
                if "objective" in cell
                else _objectives(cfg, task)
            )
            extra = {k: v for k, v in cell.items() if k != "objective"}
            for objective in objectives:
                if task == Task.CAPTION and objective not in CAPTION_OBJECTIVES:
                    _note_skipped(task, [objective])
                    continue
                tta = cfg.tta_config(task, objective, extra)
                context = {"task": task.value, "objective": objective.value}
                context.update({k: _cell_text(v) for k, v in extra.items()})
                with tracing.span("sweep_cell", context):
                    traces = run_task(cfg, tta, assets, benchmark, scorer)
                report = summarize(task, traces)
                table.append(
                    [task.value, objective.value]
                    + [_cell_text(cell[k]) for k in keys]
                    + report.row()
                )
                write_table(out / "sweep.tsv", header, table)
    return out / "sweep.tsv"


def genbench(cfg: Config, path: Path) -> bench.ShiftBenchmark:
    benchmark = bench.gen_benchmark(cfg.benchmark, cfg.shift, cfg.seed)
    bench.save_benchmark(path, benchmark)
    return benchmark
