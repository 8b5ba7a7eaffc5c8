"""Toy dual encoders: construction, contrastive pretraining and scoring.

"Images" are raw real vectors and "texts" are bags of token embeddings. The
text encoder mean-pools the rows of [prompt; content tokens], projects them and
normalizes, so a class text is the prompt plus one class-name token and a
caption is the prompt plus its attribute words.
"""
from pathlib import Path
from typing import Iterable, List, Mapping, Optional, Sequence, Tuple

import attr
import numpy as np

from adapt import OptimizerState, optimizer_step
from numcore import (
    Array,
    ArrayLike,
    LossFunction,
    NonFiniteError,
    ParamTree,
    Var,
    leaves,
    lift,
    value_and_grad,
)
import store
import tracing

IMAGE_PROJ = "image_proj"
TEXT_PROJ = "text_proj"
PROMPT = "prompt"
CLASS_TABLE = "class_table"
WORD_TABLE = "word_table"

BLOCKS = (IMAGE_PROJ, TEXT_PROJ, PROMPT, CLASS_TABLE, WORD_TABLE)
PRETRAINED = (IMAGE_PROJ, TEXT_PROJ, CLASS_TABLE, WORD_TABLE)


class PretrainError(RuntimeError):
    def __init__(self, epoch: int, cause: Exception):
        super().__init__(f"Pretraining failed at epoch {epoch}: {cause}")
        self.epoch = epoch


@attr.s(auto_attribs=True, frozen=True)
class PretrainConfig:
    d_in: int = 32
    d_tok: int = 16
    d_emb: int = 16
    classes: int = 20
    words: int = 12
    prompt_len: int = 4
    pairs_per_class: int = 50
    epochs: int = 20
    lr: float = 5e-3
    temperature: float = 0.07
    logit_scale: float = 100.0
    seed: int = 0

    def __attrs_post_init__(self) -> None:
        counts = ("d_in", "d_tok", "d_emb", "words", "prompt_len", "pairs_per_class")
        for name in counts + ("lr", "temperature", "logit_scale"):
            value = getattr(self, name)
            if value <= 0:
                raise ValueError(f"PretrainConfig.{name} must be positive, got {value}")
        if self.epochs < 0:
            raise ValueError(f"PretrainConfig.epochs must be >= 0, got {self.epochs}")
        if self.classes < 2:
            raise ValueError(f"Need at least 2 classes, got {self.classes}")


@attr.s(auto_attribs=True, frozen=True, eq=False)
class PairedSet:
    """Images paired with a class label and a bag of attribute words."""

    images: Array
    labels: Array
    bags: Array

    def __attrs_post_init__(self) -> None:
        if not (len(self.images) == len(self.labels) == len(self.bags)):
            raise ValueError("Images, labels and bags must have equal length")

    def __len__(self) -> int:
        return len(self.images)


@attr.s(auto_attribs=True, frozen=True)
class DualEncoder:
    params: ParamTree
    logit_scale: float = 100.0

    def __attrs_post_init__(self) -> None:
        missing = set(BLOCKS) - set(self.params)
        if missing:
            raise ValueError(f"DualEncoder is missing blocks {sorted(missing)}")
        if self.logit_scale <= 0:
            raise ValueError(f"Logit scale must be positive, got {self.logit_scale}")

    @classmethod
    def initialize(cls, cfg: PretrainConfig) -> "DualEncoder":
        rng = np.random.default_rng(cfg.seed)
        scale = 1 / np.sqrt(cfg.d_tok)
        blocks = {
            IMAGE_PROJ: rng.normal(0, 1 / np.sqrt(cfg.d_in), (cfg.d_in, cfg.d_emb)),
            TEXT_PROJ: rng.normal(0, scale, (cfg.d_tok, cfg.d_emb)),
            PROMPT: rng.normal(0, 0.02, (cfg.prompt_len, cfg.d_tok)),
            CLASS_TABLE: rng.normal(0, scale, (cfg.classes, cfg.d_tok)),
            WORD_TABLE: rng.normal(0, scale, (cfg.words, cfg.d_tok)),
        }
        return cls(ParamTree.build(blocks, trainable=()), cfg.logit_scale)

    @property
    def classes(self) -> int:
        return int(self.params[CLASS_TABLE].shape[0])

    @property
    def words(self) -> int:
        return int(self.params[WORD_TABLE].shape[0])

    @property
    def d_in(self) -> int:
        return int(self.params[IMAGE_PROJ].shape[0])

    @property
    def d_emb(self) -> int:
        return int(self.params[IMAGE_PROJ].shape[1])

    def with_params(self, params: ParamTree) -> "DualEncoder":
        self.params.check_congruent(params)
        return DualEncoder(params, self.logit_scale)

    def with_logit_scale(self, logit_scale: float) -> "DualEncoder":
        return DualEncoder(self.params, logit_scale)


# Differentiable forward passes, shared by scoring and by gradient computation.

Blocks = Mapping[str, Var]


def image_features(p: Blocks, images: ArrayLike) -> Var:
    return (lift(np.asarray(images, dtype=np.float64)) @ p[IMAGE_PROJ]).normalize()


def _pooled_text(p: Blocks, token_sum: Var, lengths: Array) -> Var:
    prompt = p[PROMPT]
    prompt_len = prompt.shape[0]
    pooled = (token_sum + prompt.sum(axis=0)) / (lengths + prompt_len)[:, None]
    return (pooled @ p[TEXT_PROJ]).normalize()


def class_features(p: Blocks, class_ids: Sequence[int]) -> Var:
    ids = np.asarray(class_ids, dtype=np.int64)
    return _pooled_text(p, p[CLASS_TABLE][ids], np.ones(len(ids)))


def bag_features(p: Blocks, bags: ArrayLike) -> Var:
    """Embed word bags given as a count matrix (texts × words)."""
    counts = np.atleast_2d(np.asarray(bags, dtype=np.float64))
    return _pooled_text(p, lift(counts) @ p[WORD_TABLE], counts.sum(axis=1))


def bag_counts(texts: Iterable[Sequence[int]], words: int) -> Array:
    texts = list(texts)
    counts = np.zeros((len(texts), words))
    for row, text in enumerate(texts):
        for word in text:
            if not 0 <= word < words:
                raise ValueError(f"Word {word} out of range for {words} words")
            counts[row, word] += 1
    return counts


def check_classes(m: DualEncoder, class_ids: Sequence[int]) -> None:
    ids = np.asarray(class_ids)
    if ids.size == 0:
        raise ValueError("Class set must not be empty")
    if np.any(ids < 0) or np.any(ids >= m.classes):
        raise ValueError(f"Class ids {list(ids)} out of range for {m.classes} classes")


def encode_image(m: DualEncoder, v: ArrayLike) -> Array:
    """Unit image embedding; a 2-D input is treated as a batch of images."""
    images = np.asarray(v, dtype=np.float64)
    if images.shape[-1] != m.d_in:
        raise ValueError(f"Image has dimension {images.shape[-1]}, expected {m.d_in}")
    return image_features(leaves(m.params, False), images).value


def encode_class_text(m: DualEncoder, class_id: int) -> Array:
    check_classes(m, [class_id])
    return class_features(leaves(m.params, False), [class_id]).value[0]


def class_text_embeddings(
    m: DualEncoder, class_set: Optional[Sequence[int]] = None
) -> Array:
    ids = list(range(m.classes)) if class_set is None else list(class_set)
    check_classes(m, ids)
    return class_features(leaves(m.params, False), ids).value


def encode_word_text(m: DualEncoder, words: Sequence[int]) -> Array:
    counts = bag_counts([words], m.words)
    return bag_features(leaves(m.params, False), counts).value[0]


def encode_word_texts(m: DualEncoder, texts: Sequence[Sequence[int]]) -> Array:
    return bag_features(leaves(m.params, False), bag_counts(texts, m.words)).value


def class_logits(
    m: DualEncoder, v: ArrayLike, class_set: Optional[Sequence[int]] = None
) -> Array:
    """logit_scale · cos(h(t_c), g(v)) for every class in `class_set`."""
    text = class_text_embeddings(m, class_set)
    return m.logit_scale * (encode_image(m, v) @ text.T)


def top_k(scores: ArrayLike, k: int) -> Array:
    """Indices of the k largest scores, ties broken by the lower index."""
    values = np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= len(values):
        raise ValueError(f"k={k} out of range for {len(values)} scores")
    return np.argsort(-values, kind="stable")[:k]


def zero_shot_accuracy(m: DualEncoder, images: ArrayLike, labels: ArrayLike) -> float:
    predictions = np.argmax(class_logits(m, images), axis=-1)
    return float(np.mean(predictions == np.asarray(labels)))


# Pretraining


def _info_nce(image_emb: Var, text_emb: Var, temperature: float) -> Var:
    """Symmetric InfoNCE where row i of each side is the positive pair."""
    logits = (image_emb @ text_emb.transpose()) / temperature
    diagonal = (np.arange(logits.shape[0]), np.arange(logits.shape[0]))
    image_to_text = -logits.log_softmax()[diagonal].mean()
    text_to_image = -logits.transpose().log_softmax()[diagonal].mean()
    return (image_to_text + text_to_image) / 2.0


def _class_batches(
    labels: Array, classes: int, batches: int, rng: np.random.Generator
) -> List[Array]:
    """Index batches holding one sample of every class, in shuffled order."""
    per_class = [rng.permutation(np.flatnonzero(labels == c)) for c in range(classes)]
    for c, members in enumerate(per_class):
        if len(members) == 0:
            raise ValueError(f"No pretraining samples for class {c}")
    return [
        rng.permutation([members[b % len(members)] for members in per_class])
        for b in range(batches)
    ]


@attr.s(auto_attribs=True, frozen=True)
class PretrainResult:
    model: DualEncoder
    losses: Tuple[float, ...]
    source_accuracy: float


def pretrain_contrastive(
    cfg: PretrainConfig, data: PairedSet, init: Optional[DualEncoder] = None
) -> PretrainResult:
    """Fit image/text projections and token tables with symmetric InfoNCE."""
    model = init or DualEncoder.initialize(cfg)
    if data.images.shape[1] != model.d_in:
        raise ValueError(
            f"Data has dimension {data.images.shape[1]}, expected {model.d_in}"
        )
    rng = np.random.default_rng(cfg.seed + 1)
    params = model.params.with_trainable(PRETRAINED)
    optimizer = OptimizerState(params, cfg.lr)
    labels = np.asarray(data.labels)

    def loss_for(batch: Array) -> LossFunction:
        images = data.images[batch]
        bags = data.bags[batch]
        class_ids = labels[batch]

        def loss_fn(p: Blocks) -> Var:
            image_emb = image_features(p, images)
            class_emb = class_features(p, class_ids)
            class_loss = _info_nce(image_emb, class_emb, cfg.temperature)
            bag_loss = _info_nce(image_emb, bag_features(p, bags), cfg.temperature)
            return class_loss + bag_loss

        return loss_fn

    losses = []
    for epoch in range(cfg.epochs):
        with tracing.span("pretrain_epoch", {"epoch": epoch, "d_emb": cfg.d_emb}):
            epoch_losses = []
            batches = _class_batches(labels, model.classes, cfg.pairs_per_class, rng)
            for batch in batches:
                try:
                    loss, grads = value_and_grad(loss_for(batch), params)
                    if not np.isfinite(loss):
                        raise NonFiniteError("loss")
                    params = optimizer_step(optimizer, params, grads)
                except (NonFiniteError, ValueError) as e:
                    raise PretrainError(epoch, e) from e
                epoch_losses.append(loss)
            losses.append(float(np.mean(epoch_losses)))

    trained = DualEncoder(params.with_trainable(()), model.logit_scale)
    accuracy = zero_shot_accuracy(trained, data.images, labels)
    return PretrainResult(trained, tuple(losses), accuracy)


def check_guardrail(result: PretrainResult, classes: int, factor: float = 3.0) -> None:
    chance = 1.0 / classes
    if result.source_accuracy < factor * chance:
        raise PretrainError(
            len(result.losses),
            ValueError(
                f"source accuracy {result.source_accuracy:.3f} is below "
                f"{factor:g}x chance ({chance:.3f})"
            ),
        )


# Checkpoints


def save_encoder(
    path: Path, m: DualEncoder, meta: Optional[Mapping[str, object]] = None
) -> None:
    store.write_arrays(
        path,
        {name: m.params[name] for name in m.params},
        meta={"kind": "dual_encoder", "logit_scale": m.logit_scale, **(meta or {})},
        block_meta={
            name: {"trainable": m.params.is_trainable(name)} for name in m.params
        },
    )


def load_encoder(path: Path) -> DualEncoder:
    arrays, meta, entries = store.read_arrays(path)
    if meta.get("kind") != "dual_encoder":
        raise ValueError(f"{path} is not a dual encoder checkpoint")
    trainable = [name for name, entry in entries.items() if entry.get("trainable")]
    return DualEncoder(ParamTree.build(arrays, trainable), float(meta["logit_scale"]))
