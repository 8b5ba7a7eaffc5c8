"""Single-sample test-time adaptation episodes for classification, retrieval
and captioning.

Each episode starts from the session's pristine parameters, adapts the scoped
blocks for `steps` optimizer steps on one test input, predicts, and resets.
With the momentum buffer enabled the session also folds every adapted state
into a running average and commits it every `momentum_interval` samples.
"""
from concurrent.futures import ThreadPoolExecutor
import enum
import hashlib
import time
from typing import (
    Any,
    Callable,
    Dict,
    FrozenSet,
    List,
    Optional,
    Sequence,
    Tuple,
    TypeVar,
    Union,
)

import attr
import numpy as np

from adapt import (
    EpisodeState,
    MomentumBuffer,
    entropy_min_loss,
    episodic_reset,
    kd_loss,
    momentum_observe,
    pseudo_label_loss,
    reinforce_loss,
)
import captioner as cap
from numcore import (
    Array,
    ArrayLike,
    NonFiniteError,
    ParamTree,
    Var,
    entropy,
    leaves,
    lift,
    softmax,
    value_and_grad,
)
import models
from reward import RewardModel, RewardScorer, RewardSignal, Words, center_rewards
import tracing


class Task(enum.Enum):
    CLASSIFY = "classify"
    RETRIEVE_T2I = "retrieve_t2i"
    RETRIEVE_I2T = "retrieve_i2t"
    CAPTION = "caption"

    @property
    def is_retrieval(self) -> bool:
        return self in (Task.RETRIEVE_T2I, Task.RETRIEVE_I2T)


class Mode(enum.Enum):
    PROMPT = "prompt"
    ENCODER = "encoder"
    PROJECTOR = "projector"


class Objective(enum.Enum):
    RLCF = "rlcf"
    ENTROPY_MIN = "entropy_min"
    PSEUDO_LABEL = "pseudo_label"
    KD = "kd"
    NONE = "none"


CAPTION_OBJECTIVES = frozenset({Objective.RLCF, Objective.PSEUDO_LABEL, Objective.NONE})

# Retrieval traces keep this many top-ranked gallery items.
RANKING_DEPTH = 10

MODES = {
    Task.CLASSIFY: (Mode.PROMPT, Mode.ENCODER),
    Task.RETRIEVE_T2I: (Mode.ENCODER,),
    Task.RETRIEVE_I2T: (Mode.ENCODER,),
    Task.CAPTION: (Mode.PROJECTOR,),
}

_SCOPES = {
    (Task.CLASSIFY, Mode.PROMPT): frozenset({models.PROMPT}),
    (Task.CLASSIFY, Mode.ENCODER): frozenset({models.IMAGE_PROJ}),
    (Task.RETRIEVE_T2I, Mode.ENCODER): frozenset({models.TEXT_PROJ}),
    (Task.RETRIEVE_I2T, Mode.ENCODER): frozenset({models.IMAGE_PROJ}),
    (Task.CAPTION, Mode.PROJECTOR): frozenset({cap.PROJECTOR}),
}

# CLIP-scale hyperparameters per task. The text-to-image and image-to-text
# sampling factors follow the smaller of the two retrieval benchmarks.
_DEFAULTS: Dict[Tuple[Task, Mode], Dict[str, Any]] = {
    (Task.CLASSIFY, Mode.PROMPT): dict(steps=3, k=3, lr=7e-3, weight_decay=5e-4),
    (Task.CLASSIFY, Mode.ENCODER): dict(steps=3, k=3, lr=1e-5, weight_decay=5e-4),
    (Task.RETRIEVE_T2I, Mode.ENCODER): dict(
        steps=8, k=12, lr=1e-6, weight_decay=5e-4, n_views=1
    ),
    (Task.RETRIEVE_I2T, Mode.ENCODER): dict(
        steps=8, k=16, lr=1e-6, weight_decay=5e-4, n_views=1
    ),
    (Task.CAPTION, Mode.PROJECTOR): dict(
        steps=4, k=10, lr=2e-6, weight_decay=0.0, n_views=1, beam_width=5
    ),
}


@attr.s(auto_attribs=True, frozen=True)
class TTAConfig:
    task: Task = attr.ib(default=Task.CLASSIFY, converter=Task)
    mode: Mode = attr.ib(default=Mode.PROMPT, converter=Mode)
    objective: Objective = attr.ib(default=Objective.RLCF, converter=Objective)
    steps: int = 3
    k: int = 3
    lr: float = 7e-3
    weight_decay: float = 5e-4
    n_views: int = 64
    rho: float = 0.1
    beam_width: int = 5
    policy_temperature: float = 1.0
    kd_temperature: float = 1.0
    k1_passthrough: bool = True
    mask_fraction: float = 0.25
    jitter: float = 0.05
    momentum: bool = False
    momentum_m: float = 0.9998
    momentum_interval: int = 64
    seed: int = 0

    def __attrs_post_init__(self) -> None:
        if self.steps < 0:
            raise ValueError(f"steps must be non-negative, got {self.steps}")
        if self.k < 1:
            raise ValueError(f"k must be at least 1, got {self.k}")
        if not 0 < self.rho <= 1:
            raise ValueError(f"rho must be in (0, 1], got {self.rho}")
        if self.n_views < 1 or self.beam_width < 1:
            raise ValueError("n_views and beam_width must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if self.policy_temperature <= 0 or self.kd_temperature <= 0:
            raise ValueError("Temperatures must be positive")
        if not 0 <= self.mask_fraction < 1 or self.jitter < 0:
            raise ValueError("mask_fraction must be in [0, 1) and jitter non-negative")
        if not 0 <= self.momentum_m < 1 or self.momentum_interval < 1:
            raise ValueError("momentum_m must be in [0, 1) and momentum_interval >= 1")
        if self.mode not in MODES[self.task]:
            raise ValueError(
                f"Mode {self.mode.value} does not apply to {self.task.value}"
            )
        if self.task == Task.CAPTION and self.objective not in CAPTION_OBJECTIVES:
            raise ValueError(
                f"Objective {self.objective.value} does not apply to captions"
            )

    @classmethod
    def defaults(
        cls,
        task: Union[Task, str],
        mode: Union[Mode, str, None] = None,
        **overrides: Any,
    ) -> "TTAConfig":
        task = Task(task)
        mode = MODES[task][0] if mode is None else Mode(mode)
        if (task, mode) not in _DEFAULTS:
            raise ValueError(f"Mode {mode.value} does not apply to {task.value}")
        return cls(task=task, mode=mode, **{**_DEFAULTS[task, mode], **overrides})

    @property
    def scope(self) -> FrozenSet[str]:
        return _SCOPES[self.task, self.mode]

    @property
    def effective_steps(self) -> int:
        return 0 if self.objective == Objective.NONE else self.steps


# Augmentation and view selection


def episode_rng(seed: int, sample: ArrayLike) -> np.random.Generator:
    """A generator keyed on the sample's contents, not its stream position."""
    data = np.ascontiguousarray(sample, dtype="<f8")
    digest = hashlib.blake2b(data.tobytes(), digest_size=8).digest()
    return np.random.default_rng([seed, int.from_bytes(digest, "little")])


def augment_views(
    v: ArrayLike,
    n: int,
    rng: np.random.Generator,
    mask_fraction: float = 0.25,
    jitter: float = 0.05,
) -> Array:
    """View 0 is `v` itself; every other view zeroes a random `mask_fraction`
    of the coordinates and adds Gaussian jitter scaled to ‖v‖/√d."""
    if n < 1:
        raise ValueError(f"Need at least one view, got {n}")
    image = np.asarray(v, dtype=np.float64)
    d = image.shape[0]
    masked = int(round(mask_fraction * d))
    sigma = jitter * np.linalg.norm(image) / np.sqrt(d)
    views = np.empty((n, d))
    views[0] = image
    for i in range(1, n):
        view = image.copy()
        view[rng.permutation(d)[:masked]] = 0.0
        views[i] = view + rng.normal(0.0, sigma, d)
    return views


def lowest_entropy(entropies: ArrayLike, rho: float) -> Array:
    """The ⌊rho·n⌋ lowest-entropy indices (at least one), lower index first."""
    values = np.asarray(entropies, dtype=np.float64)
    if values.size == 0:
        raise ValueError("No views to select from")
    if not 0 < rho <= 1:
        raise ValueError(f"rho must be in (0, 1], got {rho}")
    keep = max(1, int(np.floor(rho * values.size)))
    return np.argsort(values, kind="stable")[:keep]


def confidence_select(
    views: ArrayLike,
    model: models.DualEncoder,
    rho: float,
    class_set: Optional[Sequence[int]] = None,
) -> Array:
    """The confident views (lowest prediction entropy), in selection order."""
    views = np.atleast_2d(np.asarray(views, dtype=np.float64))
    logits = models.class_logits(model, views, class_set)
    return views[lowest_entropy(entropy(softmax(logits)), rho)]


# Traces


def _floats(values: Any) -> Any:
    return np.asarray(values, dtype=np.float64).tolist()


@attr.s(auto_attribs=True, frozen=True)
class StepTrace:
    step: int
    selected: int
    candidates: Tuple[Tuple[Any, ...], ...]
    raw: Tuple[Tuple[float, ...], ...]
    centered: Tuple[Tuple[float, ...], ...]
    loss: float
    prediction: Any
    confidence: Optional[float] = None

    def to_record(self) -> Dict[str, Any]:
        return {
            "step": self.step,
            "selected": self.selected,
            "candidates": [list(c) for c in self.candidates],
            "raw": [list(r) for r in self.raw],
            "centered": [list(c) for c in self.centered],
            "loss": self.loss,
            "prediction": self.prediction,
            "confidence": self.confidence,
        }

    @property
    def reward_sum(self) -> float:
        return float(sum(sum(row) for row in self.centered))


@attr.s(auto_attribs=True, frozen=True)
class EpisodeTrace:
    index: int
    task: Task
    objective: Objective
    zero_shot: Any
    prediction: Any
    steps: Tuple[StepTrace, ...]
    zero_shot_confidence: Optional[float] = None
    confidence: Optional[float] = None
    ranking: Tuple[int, ...] = ()
    truth: Any = None
    zero_shot_reward: float = 0.0
    final_reward: float = 0.0
    wall_time: float = 0.0
    aborted: bool = False
    warning: Optional[str] = None
    error: Optional[str] = None

    @property
    def correct(self) -> Optional[bool]:
        return None if self.truth is None else bool(self.prediction == self.truth)

    @property
    def reward_gain(self) -> float:
        return self.final_reward - self.zero_shot_reward

    def to_record(self) -> Dict[str, Any]:
        return {
            "index": self.index,
            "task": self.task.value,
            "objective": self.objective.value,
            "zero_shot": self.zero_shot,
            "zero_shot_confidence": self.zero_shot_confidence,
            "prediction": self.prediction,
            "confidence": self.confidence,
            "ranking": list(self.ranking),
            "truth": self.truth,
            "zero_shot_reward": self.zero_shot_reward,
            "final_reward": self.final_reward,
            "wall_time": self.wall_time,
            "aborted": self.aborted,
            "warning": self.warning,
            "error": self.error,
            "steps": [step.to_record() for step in self.steps],
        }


# Sessions


class Session:
    """Stream-level state: the pristine snapshot and the optional momentum buffer."""

    def __init__(self, pristine: ParamTree, cfg: TTAConfig):
        self.pristine = pristine
        self.cfg = cfg
        self.momentum = (
            MomentumBuffer(pristine, cfg.momentum_m, cfg.momentum_interval)
            if cfg.momentum
            else None
        )
        self.commits: List[int] = []

    @classmethod
    def start(cls, params: ParamTree, cfg: TTAConfig) -> "Session":
        return cls(params.with_trainable(cfg.scope), cfg)

    @property
    def sequential(self) -> bool:
        return self.momentum is not None

    def episode(self) -> EpisodeState:
        return EpisodeState.start(self.pristine, self.cfg.lr, self.cfg.weight_decay)

    def finish(self, ep: EpisodeState, index: int) -> None:
        if self.momentum is not None:
            committed = momentum_observe(self.momentum, ep.params)
            if committed is not None:
                self.pristine = committed
                self.commits.append(index)
        episodic_reset(ep)


T = TypeVar("T")
R = TypeVar("R")


def run_stream(
    samples: Sequence[T],
    fn: Callable[[int, T], R],
    session: Optional[Session] = None,
    workers: int = 1,
) -> List[R]:
    """Apply `fn(index, sample)` across a stream, returning results in order.

    Samples are sharded over a thread pool only when no momentum buffer ties
    the episodes together.
    """
    if workers <= 1 or (session is not None and session.sequential):
        return [fn(index, sample) for index, sample in enumerate(samples)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(len(samples)), samples))


# Shared episode loop


Blocks = Dict[str, Var]
LossBuilder = Callable[[ParamTree], Tuple[Callable[[Blocks], Var], Dict[str, Any]]]


@attr.s(auto_attribs=True)
class _Loop:
    steps: List[StepTrace] = attr.Factory(list)
    aborted: bool = False
    error: Optional[str] = None


def _adapt(
    ep: EpisodeState,
    cfg: TTAConfig,
    build_loss: LossBuilder,
    observe: Callable[[ParamTree], Tuple[Any, Optional[float]]],
    span_context: Dict[str, Any],
) -> _Loop:
    loop = _Loop()
    for step in range(cfg.effective_steps):
        with tracing.span("tta_step", {**span_context, "step": step}):
            try:
                loss_fn, details = build_loss(ep.params)
                loss, grads = value_and_grad(loss_fn, ep.params)
                ep.apply(grads)
            except (NonFiniteError, ValueError) as e:
                loop.aborted, loop.error = True, str(e)
                break
            prediction, confidence = observe(ep.params)
            loop.steps.append(
                StepTrace(
                    step=step,
                    loss=loss,
                    prediction=prediction,
                    confidence=confidence,
                    **details,
                )
            )
    return loop


def _details(
    selected: int,
    candidates: Sequence[Sequence[Any]],
    signals: Sequence[Optional[RewardSignal]],
) -> Dict[str, Any]:
    return {
        "selected": selected,
        "candidates": tuple(tuple(c) for c in candidates),
        "raw": tuple(tuple(_floats(s.raw_scores)) if s else () for s in signals),
        "centered": tuple(tuple(_floats(s.centered)) if s else () for s in signals),
    }


def _scorer(reward_models: Union[RewardScorer, Sequence[RewardModel]]) -> RewardScorer:
    if isinstance(reward_models, RewardScorer):
        return reward_models.for_episode()
    return RewardScorer(reward_models)


def _span_context(cfg: TTAConfig, index: int) -> Dict[str, Any]:
    return {"task": cfg.task.value, "objective": cfg.objective.value, "sample": index}


# Classification


def tta_classify(
    v: ArrayLike,
    student: models.DualEncoder,
    reward_models: Union[RewardScorer, Sequence[RewardModel]],
    cfg: TTAConfig,
    *,
    session: Optional[Session] = None,
    index: int = 0,
    truth: Optional[int] = None,
    class_set: Optional[Sequence[int]] = None,
) -> Tuple[int, EpisodeTrace]:
    if cfg.task != Task.CLASSIFY:
        raise ValueError(f"tta_classify cannot run a {cfg.task.value} config")
    started = time.perf_counter()
    session = session or Session.start(student.params, cfg)
    scorer = _scorer(reward_models)
    ids = np.arange(student.classes) if class_set is None else np.asarray(class_set)
    models.check_classes(student, ids)
    if cfg.k > len(ids):
        raise ValueError(f"k={cfg.k} exceeds the {len(ids)} candidate classes")

    image = np.asarray(v, dtype=np.float64)
    views = augment_views(
        image, cfg.n_views, episode_rng(cfg.seed, image), cfg.mask_fraction, cfg.jitter
    )
    scale = student.logit_scale
    fixed_text = (
        None
        if cfg.mode == Mode.PROMPT
        else models.class_features(leaves(session.pristine, False), ids).value
    )

    def text(p: Blocks) -> Var:
        return models.class_features(p, ids) if fixed_text is None else lift(fixed_text)

    def logits(p: Blocks, images: Array) -> Var:
        return (models.image_features(p, images) @ text(p).transpose()) * scale

    def plain_logits(params: ParamTree, images: Array) -> Array:
        return logits(leaves(params, False), images).value

    def observe(params: ParamTree) -> Tuple[int, float]:
        probs = softmax(plain_logits(params, image))
        best = int(np.argmax(probs))
        return int(ids[best]), float(probs[best])

    def build_loss(params: ParamTree) -> Tuple[Callable[[Blocks], Var], Dict[str, Any]]:
        view_logits = plain_logits(params, views)
        chosen = lowest_entropy(entropy(softmax(view_logits)), cfg.rho)
        selected_views = views[chosen]
        rows = np.arange(len(chosen))
        temperature = cfg.policy_temperature

        if cfg.objective == Objective.RLCF:
            candidates = np.array([models.top_k(view_logits[j], cfg.k) for j in chosen])
            raw = [
                scorer.class_scores(views[j], ids[c])
                for j, c in zip(chosen, candidates)
            ]
            signals = [center_rewards(r, cfg.k1_passthrough) for r in raw]
            rewards = np.array([s.centered for s in signals])

            def reinforce_fn(p: Blocks) -> Var:
                logp = (logits(p, selected_views) / temperature).log_softmax()
                return reinforce_loss(logp[rows[:, None], candidates], rewards)

            classes = ids[candidates].tolist()
            return reinforce_fn, _details(len(chosen), classes, signals)

        if cfg.objective == Objective.ENTROPY_MIN:

            def entropy_fn(p: Blocks) -> Var:
                return entropy_min_loss(logits(p, selected_views).log_softmax())

            return entropy_fn, _details(len(chosen), [], [])

        teacher = np.array([scorer.teacher_logits(views[j], ids) for j in chosen])
        if cfg.objective == Objective.PSEUDO_LABEL:
            targets = np.argmax(teacher, axis=-1)

            def pseudo_fn(p: Blocks) -> Var:
                logp = logits(p, selected_views).log_softmax()
                return pseudo_label_loss(logp, targets)

            labels = [[int(ids[t])] for t in targets]
            return pseudo_fn, _details(len(chosen), labels, [])

        def kd_fn(p: Blocks) -> Var:
            return kd_loss(logits(p, selected_views), teacher, cfg.kd_temperature)

        return kd_fn, _details(len(chosen), [], [])

    context = _span_context(cfg, index)
    with tracing.span("tta_episode", context):
        zero_shot, zero_conf = observe(session.pristine)
        ep = session.episode()
        loop = _adapt(ep, cfg, build_loss, observe, context)
        prediction, confidence = observe(ep.params)
        top5 = models.top_k(plain_logits(ep.params, image), min(5, len(ids)))
        session.finish(ep, index)

    zero_reward, final_reward = scorer.class_scores(image, [zero_shot, prediction])
    trace = EpisodeTrace(
        index=index,
        task=cfg.task,
        objective=cfg.objective,
        zero_shot=zero_shot,
        prediction=prediction,
        steps=tuple(loop.steps),
        zero_shot_confidence=zero_conf,
        confidence=confidence,
        ranking=tuple(int(ids[i]) for i in top5),
        truth=truth,
        zero_shot_reward=float(zero_reward),
        final_reward=float(final_reward),
        wall_time=time.perf_counter() - started,
        aborted=loop.aborted,
        error=loop.error,
    )
    return prediction, trace


# Retrieval

Query = Union[Words, Sequence[int], ArrayLike]


def tta_retrieve(
    query: Query,
    gallery: Union[ArrayLike, Sequence[Words]],
    student: models.DualEncoder,
    reward_models: Union[RewardScorer, Sequence[RewardModel]],
    cfg: TTAConfig,
    *,
    session: Optional[Session] = None,
    index: int = 0,
    truth: Optional[int] = None,
) -> Tuple[Tuple[int, ...], EpisodeTrace]:
    """Adapt the query branch on one query and rank the whole gallery.

    Text-to-image queries are word bags against a gallery of images; image-to-
    text queries are images against a gallery of word bags. The gallery side
    is encoded once with frozen parameters.
    """
    if not cfg.task.is_retrieval:
        raise ValueError(f"tta_retrieve cannot run a {cfg.task.value} config")
    started = time.perf_counter()
    session = session or Session.start(student.params, cfg)
    scorer = _scorer(reward_models)
    size = len(gallery)  # type: ignore[arg-type]
    if size == 0:
        raise ValueError("Gallery must not be empty")
    if cfg.k > size:
        raise ValueError(f"k={cfg.k} exceeds the gallery of {size} items")

    frozen = leaves(session.pristine, False)
    if cfg.task == Task.RETRIEVE_T2I:
        text = query if isinstance(query, Words) else Words.of(query)  # type: ignore
        counts = models.bag_counts([text.ids], student.words)
        images = np.asarray(gallery, dtype=np.float64)
        keys = models.image_features(frozen, images).value

        def query_embed(p: Blocks) -> Var:
            return models.bag_features(p, counts)

        def rewards(candidates: Sequence[int]) -> Array:
            return scorer.image_scores(text, images[np.asarray(candidates)])

        def teacher() -> Array:
            return scorer.teacher_image_logits(text, images)

    else:
        image = np.asarray(query, dtype=np.float64)
        texts = [
            t if isinstance(t, Words) else Words.of(t)  # type: ignore[arg-type]
            for t in gallery  # type: ignore[union-attr]
        ]
        bags = models.bag_counts([t.ids for t in texts], student.words)
        keys = models.bag_features(frozen, bags).value

        def query_embed(p: Blocks) -> Var:
            return models.image_features(p, image[None, :])

        def rewards(candidates: Sequence[int]) -> Array:
            return scorer.text_scores(image, [texts[i] for i in candidates])

        def teacher() -> Array:
            return scorer.teacher_text_logits(image, texts)

    scale = student.logit_scale
    key_matrix = lift(keys.T)

    def scores(p: Blocks) -> Var:
        return (query_embed(p) @ key_matrix) * scale

    def plain_scores(params: ParamTree) -> Array:
        return scores(leaves(params, False)).value[0]

    def observe(params: ParamTree) -> Tuple[int, float]:
        values = plain_scores(params)
        best = int(models.top_k(values, 1)[0])
        return best, float(softmax(values)[best])

    def build_loss(params: ParamTree) -> Tuple[Callable[[Blocks], Var], Dict[str, Any]]:
        values = plain_scores(params)

        if cfg.objective == Objective.RLCF:
            candidates = models.top_k(values, cfg.k)
            signal = center_rewards(rewards(candidates), cfg.k1_passthrough)
            temperature = cfg.policy_temperature

            def reinforce_fn(p: Blocks) -> Var:
                logp = (scores(p) / temperature).log_softmax()
                return reinforce_loss(logp[0, candidates], signal.centered)

            return reinforce_fn, _details(1, [candidates.tolist()], [signal])

        if cfg.objective == Objective.ENTROPY_MIN:

            def entropy_fn(p: Blocks) -> Var:
                return entropy_min_loss(scores(p).log_softmax())

            return entropy_fn, _details(1, [], [])

        teacher_scores = teacher()
        if cfg.objective == Objective.PSEUDO_LABEL:
            target = int(np.argmax(teacher_scores))

            def pseudo_fn(p: Blocks) -> Var:
                return pseudo_label_loss(scores(p).log_softmax(), [target])

            return pseudo_fn, _details(1, [[target]], [])

        def kd_fn(p: Blocks) -> Var:
            return kd_loss(scores(p), teacher_scores[None, :], cfg.kd_temperature)

        return kd_fn, _details(1, [], [])

    context = _span_context(cfg, index)
    with tracing.span("tta_episode", context):
        zero_shot, zero_conf = observe(session.pristine)
        ep = session.episode()
        loop = _adapt(ep, cfg, build_loss, observe, context)
        ranking = tuple(int(i) for i in models.top_k(plain_scores(ep.params), size))
        confidence = float(softmax(plain_scores(ep.params))[ranking[0]])
        session.finish(ep, index)

    zero_reward, final_reward = rewards([zero_shot, ranking[0]])
    trace = EpisodeTrace(
        index=index,
        task=cfg.task,
        objective=cfg.objective,
        zero_shot=zero_shot,
        prediction=ranking[0],
        steps=tuple(loop.steps),
        zero_shot_confidence=zero_conf,
        confidence=confidence,
        ranking=ranking[:RANKING_DEPTH],
        truth=truth,
        zero_shot_reward=float(zero_reward),
        final_reward=float(final_reward),
        wall_time=time.perf_counter() - started,
        aborted=loop.aborted,
        error=loop.error,
    )
    return ranking, trace


# Captioning


def caption_words(tokens: Sequence[int]) -> Words:
    """The attribute-word bag a caption is scored as."""
    return Words.of([cap.token_attribute(t) for t in cap.body(tokens)])


def tta_caption(
    v: ArrayLike,
    captioner: cap.ToyCaptioner,
    reward_models: Union[RewardScorer, Sequence[RewardModel]],
    cfg: TTAConfig,
    *,
    session: Optional[Session] = None,
    index: int = 0,
    truth: Optional[Sequence[int]] = None,
) -> Tuple[cap.Tokens, EpisodeTrace]:
    """Adapt the projector so the reward model's preferred beams gain probability.

    Candidates are the top `k` beams of a search as wide as `k` or
    `beam_width`, whichever is larger; the final caption is the best beam of a
    `beam_width` search with the adapted projector.
    """
    if cfg.task != Task.CAPTION:
        raise ValueError(f"tta_caption cannot run a {cfg.task.value} config")
    started = time.perf_counter()
    session = session or Session.start(captioner.params, cfg)
    scorer = _scorer(reward_models)
    image = np.asarray(v, dtype=np.float64)
    embed = captioner.embed(image)
    width = max(cfg.k, cfg.beam_width)

    def rewards(sequences: Sequence[Sequence[int]]) -> Array:
        return scorer.text_scores(image, [caption_words(s) for s in sequences])

    def decode(params: ParamTree) -> List[cap.Beam]:
        return cap.beam_search(captioner, embed, cfg.beam_width, params=params)

    def observe(params: ParamTree) -> Tuple[List[int], float]:
        best = decode(params)[0]
        return list(best.tokens), float(np.exp(best.logprob))

    def build_loss(params: ParamTree) -> Tuple[Callable[[Blocks], Var], Dict[str, Any]]:
        beams = cap.beam_search(captioner, embed, width, params=params)[: cfg.k]
        sequences = [beam.tokens for beam in beams]
        raw = rewards(sequences)
        candidates = [[list(s) for s in sequences]]

        if cfg.objective == Objective.RLCF:
            signal = center_rewards(raw, cfg.k1_passthrough)

            def reinforce_fn(p: Blocks) -> Var:
                logprobs = cap.caption_logprobs(p, embed, sequences)
                return reinforce_loss(logprobs, signal.centered)

            return reinforce_fn, _details(1, candidates, [signal])

        best = int(np.argmax(raw))

        def pseudo_fn(p: Blocks) -> Var:
            return pseudo_label_loss(cap.caption_logprobs(p, embed, sequences), best)

        return pseudo_fn, _details(1, [[list(sequences[best])]], [])

    context = _span_context(cfg, index)
    with tracing.span("tta_episode", context):
        zero_shot, zero_conf = observe(session.pristine)
        ep = session.episode()
        loop = _adapt(ep, cfg, build_loss, observe, context)
        final_beams = decode(ep.params)
        session.finish(ep, index)

    best = final_beams[0]
    warning = None
    if not any(beam.finished for beam in final_beams):
        warning = f"no beam finished within max_len={captioner.max_len}"
    zero_reward, final_reward = rewards([zero_shot, best.tokens])
    trace = EpisodeTrace(
        index=index,
        task=cfg.task,
        objective=cfg.objective,
        zero_shot=zero_shot,
        prediction=list(best.tokens),
        steps=tuple(loop.steps),
        zero_shot_confidence=zero_conf,
        confidence=float(np.exp(best.logprob)),
        truth=None if truth is None else sorted(int(a) for a in truth),
        zero_shot_reward=float(zero_reward),
        final_reward=float(final_reward),
        wall_time=time.perf_counter() - started,
        aborted=loop.aborted,
        warning=warning,
        error=loop.error,
    )
    return best.tokens, trace
