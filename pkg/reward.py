"""CLIPScore rewards from frozen dual encoders, mean-baseline centering and
weighted ensembles of reward models."""
from typing import Dict, Hashable, List, Optional, Sequence, Tuple, Union

import attr
import numpy as np

from numcore import Array, ArrayLike, cosine
import models

CLIP_S_WEIGHT = 2.5

# Ensemble weights, largest reward model first.
ENSEMBLE_WEIGHTS = (10.0, 5.0, 3.0)


@attr.s(auto_attribs=True, frozen=True)
class Words:
    """A text given as a bag of attribute word ids."""

    ids: Tuple[int, ...]

    @classmethod
    def of(cls, ids: Sequence[int]) -> "Words":
        return cls(tuple(int(i) for i in ids))


Text = Union[int, Words, Array]


@attr.s(auto_attribs=True, frozen=True)
class RewardModel:
    encoder: models.DualEncoder
    weight: float = 1.0
    name: str = "teacher"

    def __attrs_post_init__(self) -> None:
        if self.weight <= 0:
            raise ValueError(f"Reward weight must be positive, got {self.weight}")


@attr.s(auto_attribs=True, frozen=True, eq=False)
class RewardSignal:
    raw_scores: Array
    baseline: float
    centered: Array

    @property
    def k(self) -> int:
        return len(self.raw_scores)


def clip_from_cosine(cos: ArrayLike) -> Array:
    return CLIP_S_WEIGHT * np.clip(np.asarray(cos, dtype=np.float64), 0.0, 1.0)


def text_embedding(encoder: models.DualEncoder, text: Text) -> Array:
    if isinstance(text, Words):
        return models.encode_word_text(encoder, text.ids)
    if isinstance(text, (int, np.integer)):
        return models.encode_class_text(encoder, int(text))
    return np.asarray(text, dtype=np.float64)


def clip_score(rm: RewardModel, text: Text, image: ArrayLike) -> float:
    """2.5 · max(cos(h(t), g(v)), 0); `text` is a class id, word bag or embedding."""
    image_embed = models.encode_image(rm.encoder, image)
    cos = cosine(text_embedding(rm.encoder, text), image_embed)
    return float(clip_from_cosine(cos))


def normalized_weights(reward_models: Sequence[RewardModel]) -> Array:
    if not reward_models:
        raise ValueError("At least one reward model is required")
    weights = np.array([rm.weight for rm in reward_models], dtype=np.float64)
    return weights / weights.sum()


def ensemble_score(
    reward_models: Sequence[RewardModel], text: Text, image: ArrayLike
) -> float:
    weights = normalized_weights(reward_models)
    if isinstance(text, np.ndarray) and len(reward_models) > 1:
        raise ValueError("An ensemble needs a class id or word bag, not an embedding")
    scores = [clip_score(rm, text, image) for rm in reward_models]
    return float(weights @ np.array(scores))


def center_rewards(raw: ArrayLike, k_is_one_passthrough: bool = True) -> RewardSignal:
    """Subtract the mean raw score from every candidate's score.

    A single candidate would always be centered to zero; with passthrough its
    raw score is kept, which makes the update a reward-weighted pseudo-label.
    """
    scores = np.array(raw, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        raise ValueError("Cannot center an empty set of rewards")
    if scores.size == 1 and k_is_one_passthrough:
        return RewardSignal(scores, 0.0, scores.copy())
    baseline = float(scores.mean())
    return RewardSignal(scores, baseline, scores - baseline)


class RewardScorer:
    """Scores candidates against an ensemble of reward models.

    Class-text embeddings are computed once and shared by every episode;
    image and text embeddings are cached per episode (see `for_episode`).
    """

    def __init__(
        self,
        reward_models: Sequence[RewardModel],
        class_text: Optional[List[Array]] = None,
    ):
        self.models = list(reward_models)
        self.weights = normalized_weights(self.models)
        self.class_text = class_text or [
            models.class_text_embeddings(rm.encoder) for rm in self.models
        ]
        self._images: Dict[Hashable, List[Array]] = {}
        self._texts: Dict[Tuple[Words, ...], List[Array]] = {}

    def for_episode(self) -> "RewardScorer":
        return RewardScorer(self.models, self.class_text)

    @property
    def classes(self) -> int:
        return min(rm.encoder.classes for rm in self.models)

    def image_embeddings(self, images: ArrayLike) -> List[Array]:
        """Per-model embeddings of one image or a batch of images."""
        array = np.ascontiguousarray(images, dtype=np.float64)
        key = (array.shape, array.tobytes())
        if key not in self._images:
            self._images[key] = [
                models.encode_image(rm.encoder, array) for rm in self.models
            ]
        return self._images[key]

    def text_embeddings(self, texts: Sequence[Words]) -> List[Array]:
        key = tuple(texts)
        if key not in self._texts:
            bags = [text.ids for text in key]
            self._texts[key] = [
                models.encode_word_texts(rm.encoder, bags) for rm in self.models
            ]
        return self._texts[key]

    def _weighted(self, per_model: Sequence[Array]) -> Array:
        total = self.weights[0] * per_model[0]
        for weight, values in zip(self.weights[1:], per_model[1:]):
            total = total + weight * values
        return np.asarray(total)

    def _cosines(self, image: ArrayLike, texts: Sequence[Words]) -> List[Array]:
        return [
            t @ e
            for t, e in zip(self.text_embeddings(texts), self.image_embeddings(image))
        ]

    def _query_cosines(self, text: Words, images: ArrayLike) -> List[Array]:
        return [
            g @ q[0]
            for g, q in zip(self.image_embeddings(images), self.text_embeddings([text]))
        ]

    def _class_cosines(self, image: ArrayLike, class_ids: Sequence[int]) -> List[Array]:
        ids = np.asarray(class_ids, dtype=np.int64)
        return [
            table[ids] @ e
            for table, e in zip(self.class_text, self.image_embeddings(image))
        ]

    def _scaled(self, cosines: Sequence[Array]) -> List[Array]:
        return [rm.encoder.logit_scale * c for rm, c in zip(self.models, cosines)]

    def class_scores(self, image: ArrayLike, class_ids: Sequence[int]) -> Array:
        cosines = self._class_cosines(image, class_ids)
        return self._weighted([clip_from_cosine(c) for c in cosines])

    def text_scores(self, image: ArrayLike, texts: Sequence[Words]) -> Array:
        """Rewards for word-bag texts (captions or retrieval texts) given an image."""
        cosines = self._cosines(image, texts)
        return self._weighted([clip_from_cosine(c) for c in cosines])

    def image_scores(self, text: Words, images: ArrayLike) -> Array:
        """Rewards for candidate images given a word-bag query."""
        cosines = self._query_cosines(text, images)
        return self._weighted([clip_from_cosine(c) for c in cosines])

    def teacher_logits(
        self, image: ArrayLike, class_ids: Optional[Sequence[int]] = None
    ) -> Array:
        """Weighted average of the reward models' scaled class logits."""
        ids = range(self.classes) if class_ids is None else class_ids
        return self._weighted(self._scaled(self._class_cosines(image, list(ids))))

    def teacher_text_logits(self, image: ArrayLike, texts: Sequence[Words]) -> Array:
        return self._weighted(self._scaled(self._cosines(image, texts)))

    def teacher_image_logits(self, text: Words, images: ArrayLike) -> Array:
        return self._weighted(self._scaled(self._query_cosines(text, images)))
