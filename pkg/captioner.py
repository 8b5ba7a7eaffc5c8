"""Toy captioning model: a trainable projector in front of a frozen recurrent
decoder, plus beam search over its token sequences.

Token ids: 0 is BOS, 1 is EOS and every id from 2 up is the attribute word
`w<id>`. The decoder never emits BOS, so its output layer covers ids 1..V-1.
"""
from pathlib import Path
from typing import Iterable, List, Mapping, Optional, Sequence, Tuple

import attr
import numpy as np

from adapt import OptimizerState, optimizer_step
from numcore import (
    Array,
    ArrayLike,
    NonFiniteError,
    ParamTree,
    Var,
    l2_normalize,
    leaves,
    lift,
    log_softmax,
    value_and_grad,
)
import models
import store
import tracing

BOS = 0
EOS = 1
FIRST_WORD = 2

IMAGE_PROJ = "image_proj"
PROJECTOR = "projector"
TOK_EMBED = "tok_embed"
W_HH = "w_hh"
W_OUT = "w_out"

DECODER = (TOK_EMBED, W_HH, W_OUT)
BLOCKS = (IMAGE_PROJ, PROJECTOR) + DECODER

Tokens = Tuple[int, ...]


@attr.s(auto_attribs=True, frozen=True)
class Vocab:
    """Bijective mapping between token ids and caption words."""

    size: int

    def __attrs_post_init__(self) -> None:
        if self.size < FIRST_WORD + 1:
            raise ValueError(f"Vocabulary needs a word, got size {self.size}")

    @classmethod
    def for_attributes(cls, attributes: int) -> "Vocab":
        return cls(attributes + FIRST_WORD)

    def word(self, token: int) -> str:
        if not FIRST_WORD <= token < self.size:
            raise ValueError(f"Unknown word id {token}")
        return f"w{token}"

    def token(self, word: str) -> int:
        if not word.startswith("w") or not word[1:].isdigit():
            raise ValueError(f'Unknown word "{word}"')
        token = int(word[1:])
        self.word(token)
        return token

    def check(self, tokens: Iterable[int]) -> None:
        for token in tokens:
            if not 0 <= token < self.size:
                raise ValueError(f"Token {token} out of vocabulary of size {self.size}")


def attribute_token(attribute: int) -> int:
    return attribute + FIRST_WORD


def token_attribute(token: int) -> int:
    return token - FIRST_WORD


def body(tokens: Sequence[int]) -> Tokens:
    """The word tokens of a sequence, without BOS and EOS."""
    return tuple(t for t in tokens if t not in (BOS, EOS))


def caption_attributes(tokens: Sequence[int]) -> Tuple[int, ...]:
    return tuple(sorted({token_attribute(t) for t in body(tokens)}))


def decode_to_text(tokens: Sequence[int], vocab: Vocab) -> str:
    return " ".join(vocab.word(t) for t in tokens if t not in (BOS, EOS))


def encode_text(text: str, vocab: Vocab) -> Tokens:
    return (BOS, *(vocab.token(word) for word in text.split()), EOS)


@attr.s(auto_attribs=True, frozen=True)
class CaptionerConfig:
    d_dec: int = 16
    max_len: int = 5
    epochs: int = 30
    batches_per_epoch: int = 20
    lr: float = 1e-2
    seed: int = 0

    def __attrs_post_init__(self) -> None:
        if self.d_dec < 1:
            raise ValueError(f"Decoder width must be positive, got {self.d_dec}")
        if self.max_len < 2:
            raise ValueError(f"max_len must be at least 2, got {self.max_len}")
        if self.epochs < 0 or self.batches_per_epoch < 1 or self.lr <= 0:
            raise ValueError("Captioner training needs epochs >= 0, batches, lr > 0")


@attr.s(auto_attribs=True, frozen=True)
class ToyCaptioner:
    params: ParamTree
    vocab: Vocab
    max_len: int = 5

    def __attrs_post_init__(self) -> None:
        missing = set(BLOCKS) - set(self.params)
        if missing:
            raise ValueError(f"Captioner is missing blocks {sorted(missing)}")
        if self.max_len < 2:
            raise ValueError(f"max_len must be at least 2, got {self.max_len}")
        trainable_decoder = [name for name in DECODER if self.params.is_trainable(name)]
        if trainable_decoder:
            raise ValueError(f"Decoder blocks {trainable_decoder} must be frozen")
        if self.params[W_OUT].shape[1] != self.vocab.size - 1:
            raise ValueError(
                f"Output layer covers {self.params[W_OUT].shape[1]} tokens, "
                f"vocabulary emits {self.vocab.size - 1}"
            )

    @classmethod
    def initialize(
        cls, cfg: CaptionerConfig, image_proj: ArrayLike, vocab: Vocab
    ) -> "ToyCaptioner":
        rng = np.random.default_rng(cfg.seed)
        image_proj = np.asarray(image_proj, dtype=np.float64)
        d_emb, d = image_proj.shape[1], cfg.d_dec
        blocks = {
            IMAGE_PROJ: image_proj,
            PROJECTOR: rng.normal(0, 1 / np.sqrt(d_emb), (d_emb, d)),
            TOK_EMBED: rng.normal(0, 1 / np.sqrt(d), (vocab.size, d)),
            W_HH: rng.normal(0, 0.5 / np.sqrt(d), (d, d)),
            W_OUT: rng.normal(0, 1 / np.sqrt(d), (d, vocab.size - 1)),
        }
        return cls(ParamTree.build(blocks, trainable=[PROJECTOR]), vocab, cfg.max_len)

    def with_params(self, params: ParamTree) -> "ToyCaptioner":
        self.params.check_congruent(params)
        return ToyCaptioner(params, self.vocab, self.max_len)

    def embed(self, v: ArrayLike) -> Array:
        """The frozen image embedding the projector consumes."""
        image = np.asarray(v, dtype=np.float64)
        return l2_normalize(image @ self.params[IMAGE_PROJ])


Blocks = Mapping[str, Var]


def _check_sequence(tokens: Sequence[int], vocab: Vocab, max_len: int) -> None:
    vocab.check(tokens)
    if len(tokens) < 2 or tokens[0] != BOS:
        raise ValueError(f"Caption {list(tokens)} must start with BOS and emit a token")
    if BOS in tokens[1:]:
        raise ValueError(f"Caption {list(tokens)} contains BOS after the start")
    if EOS in tokens[:-1]:
        raise ValueError(f"Caption {list(tokens)} continues after EOS")
    if len(tokens) - 1 > max_len:
        raise ValueError(f"Caption {list(tokens)} is longer than max_len={max_len}")


def caption_logprobs(
    p: Blocks, image_embed: ArrayLike, sequences: Sequence[Sequence[int]]
) -> Var:
    """Differentiable log-probabilities of whole sequences, one per sequence.

    Sequences start with BOS; shorter ones are padded and masked so the batch
    shares one pass through the decoder. A 2-D `image_embed` conditions each
    sequence on its own row.
    """
    if not sequences:
        raise ValueError("No sequences to score")
    count = len(sequences)
    embed = np.asarray(image_embed, dtype=np.float64)
    if embed.ndim == 2 and embed.shape[0] != count:
        raise ValueError(f"{embed.shape[0]} image rows for {count} sequences")
    steps = max(len(s) for s in sequences) - 1
    if steps < 1:
        raise ValueError("Sequences must hold BOS and at least one emitted token")
    prev = np.full((steps, count), EOS, dtype=np.int64)
    emitted = np.full((steps, count), EOS, dtype=np.int64)
    mask = np.zeros((steps, count))
    for column, sequence in enumerate(sequences):
        n = len(sequence) - 1
        prev[:n, column] = sequence[:-1]
        emitted[:n, column] = sequence[1:]
        mask[:n, column] = 1.0

    prefix = lift(embed) @ p[PROJECTOR]
    hidden = (prefix + np.zeros((count, prefix.shape[-1]))).tanh()
    rows = np.arange(count)
    total: Optional[Var] = None
    for t in range(steps):
        hidden = (hidden @ p[W_HH] + p[TOK_EMBED][prev[t]] + prefix).tanh()
        logp = (hidden @ p[W_OUT]).log_softmax()
        picked = logp[rows, emitted[t] - 1] * mask[t]
        total = picked if total is None else total + picked
    assert total is not None
    return total


def caption_logprob(
    c: ToyCaptioner, image_embed: ArrayLike, tokens: Sequence[int]
) -> float:
    _check_sequence(tokens, c.vocab, c.max_len)
    if tokens[-1] != EOS:
        raise ValueError(f"Caption {list(tokens)} does not end with EOS")
    logprobs = caption_logprobs(leaves(c.params, False), image_embed, [tokens])
    return float(logprobs.value[0])


# Beam search


@attr.s(auto_attribs=True, frozen=True)
class Beam:
    tokens: Tokens
    logprob: float
    hidden: Array = attr.ib(eq=False, repr=False)

    @property
    def finished(self) -> bool:
        return self.tokens[-1] == EOS

    @property
    def emitted(self) -> int:
        return len(self.tokens) - 1

    def sort_key(self) -> Tuple[float, Tokens]:
        return (-self.logprob, self.tokens)


class Decoder:
    """Plain numpy stepper over the decoder, used for search."""

    def __init__(self, params: ParamTree, image_embed: ArrayLike):
        embed = np.asarray(image_embed, dtype=np.float64)
        self.prefix: Array = embed @ params[PROJECTOR]
        self.tok_embed = params[TOK_EMBED]
        self.w_hh = params[W_HH]
        self.w_out = params[W_OUT]

    def start(self) -> Beam:
        return Beam((BOS,), 0.0, np.tanh(self.prefix))

    def step(self, beam: Beam) -> Tuple[Array, Array]:
        """Next hidden state and log-probabilities of emitting ids 1..V-1."""
        hidden = np.tanh(
            beam.hidden @ self.w_hh + self.tok_embed[beam.tokens[-1]] + self.prefix
        )
        logp = log_softmax(hidden @ self.w_out)
        if not np.all(np.isfinite(logp)):
            raise NonFiniteError("decoder step")
        return hidden, logp


def beam_search(
    c: ToyCaptioner,
    image_embed: ArrayLike,
    width: int,
    max_len: Optional[int] = None,
    params: Optional[ParamTree] = None,
) -> List[Beam]:
    """Best `width` sequences by summed log-probability, highest first.

    Finished beams stay in the pool and compete with the live ones at every
    step, so a width covering every sequence returns them all. Ties go to the
    lexicographically smaller token sequence.
    """
    if width < 1:
        raise ValueError(f"Beam width must be at least 1, got {width}")
    limit = c.max_len if max_len is None else max_len
    if limit < 1:
        raise ValueError(f"max_len must be positive, got {limit}")

    decoder = Decoder(c.params if params is None else params, image_embed)
    pool = [decoder.start()]
    for _ in range(limit):
        if all(beam.finished for beam in pool):
            break
        candidates = []
        for beam in pool:
            if beam.finished:
                candidates.append(beam)
                continue
            hidden, logp = decoder.step(beam)
            for index, value in enumerate(logp):
                tokens = beam.tokens + (index + 1,)
                candidates.append(Beam(tokens, beam.logprob + float(value), hidden))
        candidates.sort(key=Beam.sort_key)
        pool = candidates[:width]
    return sorted(pool, key=Beam.sort_key)


def greedy_decode(c: ToyCaptioner, image_embed: ArrayLike) -> Beam:
    decoder = Decoder(c.params, image_embed)
    beam = decoder.start()
    while not beam.finished and beam.emitted < c.max_len:
        hidden, logp = decoder.step(beam)
        token = int(np.argmax(logp))
        logprob = beam.logprob + float(logp[token])
        beam = Beam(beam.tokens + (token + 1,), logprob, hidden)
    return beam


# Pretraining


def reference_caption(attributes: Iterable[int]) -> Tokens:
    return (BOS, *(attribute_token(a) for a in sorted(attributes)), EOS)


def pretrain_captioner(
    cfg: CaptionerConfig,
    encoder: models.DualEncoder,
    images: ArrayLike,
    labels: ArrayLike,
    class_attributes: Sequence[Sequence[int]],
) -> ToyCaptioner:
    """Teacher-forced training of projector and decoder on reference captions.

    Every image's reference caption is its class's attribute words in sorted
    order. Only the projector stays trainable afterwards.
    """
    vocab = Vocab.for_attributes(encoder.words)
    captioner = ToyCaptioner.initialize(cfg, encoder.params[models.IMAGE_PROJ], vocab)
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    captions = [reference_caption(attrs) for attrs in class_attributes]
    for caption in captions:
        _check_sequence(caption, vocab, cfg.max_len)
    embeds = models.encode_image(encoder, images)

    params = captioner.params.with_trainable((PROJECTOR,) + DECODER)
    optimizer = OptimizerState(params, cfg.lr)
    rng = np.random.default_rng(cfg.seed + 1)
    batch_size = len(captions)

    for epoch in range(cfg.epochs):
        with tracing.span("pretrain_captioner_epoch", {"epoch": epoch}):
            for _ in range(cfg.batches_per_epoch):
                batch = rng.choice(len(images), size=batch_size, replace=False)

                targets = [captions[labels[i]] for i in batch]

                def loss_fn(p: Blocks) -> Var:
                    return -caption_logprobs(p, embeds[batch], targets).mean()

                try:
                    _, grads = value_and_grad(loss_fn, params)
                    params = optimizer_step(optimizer, params, grads)
                except ValueError as e:
                    raise models.PretrainError(epoch, e) from e

    return ToyCaptioner(params.with_trainable([PROJECTOR]), vocab, cfg.max_len)


def save_captioner(
    path: Path, c: ToyCaptioner, meta: Optional[Mapping[str, object]] = None
) -> None:
    store.write_arrays(
        path,
        {name: c.params[name] for name in c.params},
        meta={
            "kind": "captioner",
            "vocab_size": c.vocab.size,
            "max_len": c.max_len,
            **(meta or {}),
        },
        block_meta={
            name: {"trainable": c.params.is_trainable(name)} for name in c.params
        },
    )


def load_captioner(path: Path) -> ToyCaptioner:
    arrays, meta, entries = store.read_arrays(path)
    if meta.get("kind") != "captioner":
        raise ValueError(f"{path} is not a captioner checkpoint")
    trainable = [name for name, entry in entries.items() if entry.get("trainable")]
    params = ParamTree.build(arrays, trainable)
    return ToyCaptioner(params, Vocab(int(meta["vocab_size"])), int(meta["max_len"]))
