import json
import threading

import attr
from hypothesis import given, settings
from hypothesis import strategies as st
import numpy as np
import pytest

from .strategies import seeds, vectors
from .test_numcore import assert_gradients_match
from adapt import reinforce_loss
import captioner as cap
import models
from numcore import ParamTree, entropy, leaves, lift, softmax
import pipelines
from pipelines import Session, Task, TTAConfig
from reward import RewardModel, RewardScorer, Words


def rotation(degrees):
    theta = np.radians(degrees)
    return np.array(
        [[np.cos(theta), np.sin(theta)], [-np.sin(theta), np.cos(theta)]]
    )


def direction(degrees):
    theta = np.radians(degrees)
    return np.array([np.cos(theta), np.sin(theta)])


def encoder(image_proj=None, text_proj=None, words=None, prompt=None):
    blocks = {
        models.IMAGE_PROJ: np.eye(2) if image_proj is None else image_proj,
        models.TEXT_PROJ: np.eye(2) if text_proj is None else text_proj,
        models.PROMPT: [[0.0, 0.0]] if prompt is None else prompt,
        models.CLASS_TABLE: [[1.0, 0.0], [0.0, 1.0]],
        models.WORD_TABLE: np.eye(2) if words is None else words,
    }
    return models.DualEncoder(ParamTree.build(blocks, trainable=()), 100.0)


def flip_config(task, objective="rlcf", **changes):
    mode = changes.pop("mode", "projector" if task == "caption" else "encoder")
    values = dict(steps=3, k=2, lr=0.05, weight_decay=0.0, n_views=1)
    values.update(changes)
    return TTAConfig(task=task, mode=mode, objective=objective, **values)


# The student sees the image at 44.5°, just closer to class 0 on the x axis;
# the reward model sees it rotated a further 30°, firmly on class 1.
CLASSIFY_IMAGE = direction(44.5)


def classify_models():
    return encoder(), [RewardModel(encoder(image_proj=rotation(30)))]


def random_models(d=8, classes=5):
    def initialize(seed):
        cfg = models.PretrainConfig(
            d_in=d, d_tok=d, d_emb=d, classes=classes, seed=seed
        )
        return models.DualEncoder.initialize(cfg)

    return initialize(1), [RewardModel(initialize(2))]


class TestConfig:
    @pytest.mark.parametrize(
        "task,mode,scope",
        [
            (Task.CLASSIFY, "prompt", {models.PROMPT}),
            (Task.CLASSIFY, "encoder", {models.IMAGE_PROJ}),
            (Task.RETRIEVE_T2I, "encoder", {models.TEXT_PROJ}),
            (Task.RETRIEVE_I2T, "encoder", {models.IMAGE_PROJ}),
            (Task.CAPTION, "projector", {cap.PROJECTOR}),
        ],
    )
    def test_scopes(self, task, mode, scope):
        assert TTAConfig.defaults(task, mode).scope == scope

    def test_task_defaults(self):
        t2i = TTAConfig.defaults("retrieve_t2i")
        captions = TTAConfig.defaults("caption")

        assert (t2i.steps, t2i.k, t2i.n_views) == (8, 12, 1)
        assert TTAConfig.defaults("retrieve_i2t").k == 16
        assert (captions.k, captions.beam_width, captions.steps) == (10, 5, 4)

    def test_overrides_win(self):
        assert TTAConfig.defaults("classify", k=5).k == 5

    @pytest.mark.parametrize(
        "changes",
        [
            dict(task="retrieve_t2i", mode="prompt"),
            dict(task="caption", mode="projector", objective="kd"),
            dict(task="caption", mode="projector", objective="entropy_min"),
            dict(k=0),
            dict(steps=-1),
            dict(rho=0.0),
            dict(momentum_m=1.0),
            dict(policy_temperature=0.0),
        ],
    )
    def test_invalid(self, changes):
        with pytest.raises(ValueError):
            TTAConfig(**changes)

    def test_none_never_steps(self):
        cfg = TTAConfig(objective="none", steps=5)

        assert cfg.effective_steps == 0
        assert TTAConfig(steps=5).effective_steps == 5


class TestViews:
    def test_first_view_is_the_input(self):
        image = np.arange(1.0, 9.0)

        views = pipelines.augment_views(image, 4, np.random.default_rng(0))

        assert views.shape == (4, 8)
        assert np.array_equal(views[0], image)

    def test_masks_a_fixed_fraction(self):
        image = np.arange(1.0, 9.0)

        views = pipelines.augment_views(
            image, 5, np.random.default_rng(1), mask_fraction=0.25, jitter=0.0
        )

        for view in views[1:]:
            assert np.count_nonzero(view == 0.0) == 2

    @given(seeds())
    def test_views_are_reproducible(self, seed):
        image = np.linspace(-1.0, 1.0, 6)

        a = pipelines.augment_views(image, 3, pipelines.episode_rng(seed, image))
        b = pipelines.augment_views(image, 3, pipelines.episode_rng(seed, image.copy()))

        assert np.array_equal(a, b)

    def test_views_follow_the_sample(self):
        image = np.linspace(-1.0, 1.0, 6)
        other = image + 0.5

        a = pipelines.augment_views(image - 0.5, 3, pipelines.episode_rng(0, image))
        b = pipelines.augment_views(image - 0.5, 3, pipelines.episode_rng(0, other))

        assert not np.array_equal(a, b)

    def test_views_average_to_the_kept_fraction(self):
        image = np.arange(1.0, 9.0)

        views = pipelines.augment_views(image, 40000, np.random.default_rng(5))

        assert np.all(np.abs(views.mean(axis=0) - 0.75 * image) <= 0.02 * 0.75 * image)

    def test_needs_a_view(self):
        with pytest.raises(ValueError):
            pipelines.augment_views(np.ones(3), 0, np.random.default_rng(0))

    @pytest.mark.parametrize(
        "n,rho,keep", [(64, 0.1, 6), (5, 0.1, 1), (10, 1.0, 10), (9, 0.5, 4)]
    )
    def test_floor_with_at_least_one(self, n, rho, keep):
        assert len(pipelines.lowest_entropy(np.arange(n, 0, -1.0), rho)) == keep

    def test_lowest_first_and_ties_by_index(self):
        chosen = pipelines.lowest_entropy([0.5, 0.1, 0.1, 0.9], rho=0.75)

        assert chosen.tolist() == [1, 2, 0]

    @settings(max_examples=25)
    @given(vectors(12, bound=3.0), st.floats(0.05, 1.0))
    def test_selection_beats_the_rest(self, entropies, rho):
        chosen = pipelines.lowest_entropy(entropies, rho)
        rest = np.setdiff1d(np.arange(12), chosen)

        if len(rest):
            assert entropies[chosen].max() <= entropies[rest].min()

    def test_confidence_select(self):
        views = np.array([[1.0, 0.9], [1.0, 0.0], [0.6, 1.0]])

        picked = pipelines.confidence_select(views, encoder(), rho=0.34)

        assert np.array_equal(picked, [[1.0, 0.0]])


class TestClassify:
    @pytest.mark.parametrize("objective", ["rlcf", "pseudo_label", "kd"])
    def test_teacher_preference_flips_the_prediction(self, objective):
        student, rms = classify_models()

        prediction, trace = pipelines.tta_classify(
            CLASSIFY_IMAGE, student, rms, flip_config("classify", objective), truth=1
        )

        assert trace.zero_shot == 0
        assert prediction == 1
        assert trace.correct
        assert len(trace.steps) == 3
        assert trace.reward_gain > 0

    def test_first_reinforce_step_flips(self):
        student, rms = classify_models()

        _, trace = pipelines.tta_classify(
            CLASSIFY_IMAGE, student, rms, flip_config("classify")
        )

        first = trace.steps[0]
        assert first.candidates == ((0, 1),)
        assert first.centered[0][0] < 0 < first.centered[0][1]
        assert sum(first.centered[0]) == pytest.approx(0.0)
        assert first.prediction == 1

    def test_entropy_minimization_reinforces_the_mistake(self):
        student, rms = classify_models()

        prediction, trace = pipelines.tta_classify(
            CLASSIFY_IMAGE, student, rms, flip_config("classify", "entropy_min")
        )

        assert prediction == 0
        assert [s.prediction for s in trace.steps] == [0, 0, 0]
        assert trace.confidence > trace.zero_shot_confidence

    def test_prompt_tuning_moves_the_class_texts(self):
        student, rms = classify_models()
        cfg = TTAConfig(
            task="classify",
            mode="prompt",
            steps=3,
            k=2,
            lr=0.05,
            weight_decay=0.0,
            n_views=1,
        )
        session = Session.start(student.params, cfg)

        _, trace = pipelines.tta_classify(
            CLASSIFY_IMAGE, student, rms, cfg, session=session
        )

        assert len(trace.steps) == 3
        assert trace.steps[0].confidence != trace.zero_shot_confidence
        assert session.pristine == student.params.with_trainable({models.PROMPT})

    def test_no_steps_is_zero_shot(self):
        m = models.DualEncoder.initialize(models.PretrainConfig(d_in=6, classes=5))
        rms = [RewardModel(m)]
        image = np.random.default_rng(3).normal(size=6)
        logits = models.class_logits(m, image)

        prediction, trace = pipelines.tta_classify(
            image, m, rms, TTAConfig(objective="none", n_views=4)
        )

        assert prediction == int(np.argmax(logits))
        assert trace.steps == ()
        assert trace.ranking == tuple(models.top_k(logits, 5).tolist())
        assert trace.reward_gain == 0.0

    def test_class_subsets(self):
        student, rms = classify_models()
        cfg = flip_config("classify", k=1, steps=0)

        prediction, trace = pipelines.tta_classify(
            CLASSIFY_IMAGE, student, rms, cfg, class_set=[1]
        )

        assert prediction == 1
        assert trace.ranking == (1,)

    def test_k_larger_than_class_set(self):
        student, rms = classify_models()

        with pytest.raises(ValueError):
            pipelines.tta_classify(
                CLASSIFY_IMAGE, student, rms, flip_config("classify", k=3)
            )

    def test_wrong_task(self):
        student, rms = classify_models()

        with pytest.raises(ValueError):
            pipelines.tta_classify(
                CLASSIFY_IMAGE, student, rms, flip_config("retrieve_i2t")
            )

    def test_non_finite_step_aborts_the_episode(self):
        student, rms = classify_models()
        cfg = flip_config("classify", policy_temperature=1e-310)

        with np.errstate(all="ignore"):
            prediction, trace = pipelines.tta_classify(
                CLASSIFY_IMAGE, student, rms, cfg
            )

        assert trace.aborted
        assert trace.error
        assert trace.steps == ()
        assert prediction == trace.zero_shot == 0

    def test_episodes_leave_the_session_untouched(self):
        student, rms = classify_models()
        cfg = flip_config("classify")
        session = Session.start(student.params, cfg)
        pristine = session.pristine

        for index in range(3):
            pipelines.tta_classify(
                CLASSIFY_IMAGE, student, rms, cfg, session=session, index=index
            )

        assert session.pristine is pristine
        assert session.commits == []

    def test_momentum_commits_only_the_scope(self):
        student, rms = classify_models()
        cfg = flip_config(
            "classify", momentum=True, momentum_m=0.0, momentum_interval=1
        )
        session = Session.start(student.params, cfg)

        pipelines.tta_classify(CLASSIFY_IMAGE, student, rms, cfg, session=session)

        assert session.commits == [0]
        for name in models.BLOCKS:
            changed = not np.array_equal(session.pristine[name], student.params[name])
            assert changed == (name == models.IMAGE_PROJ), name

    def test_traces_serialize(self):
        student, rms = classify_models()

        _, trace = pipelines.tta_classify(
            CLASSIFY_IMAGE, student, rms, flip_config("classify"), truth=1
        )
        record = json.loads(json.dumps(trace.to_record()))

        assert record["task"] == "classify"
        assert record["zero_shot"] == 0
        assert len(record["steps"]) == 3
        assert record["steps"][0]["candidates"] == [[0, 1]]


class TestRetrieve:
    def test_image_to_text_flip(self):
        # Gallery texts sit at 10° and -12°; the query image at 0° is nearer
        # the first, but the reward model sees it at -15°.
        words = [direction(10), direction(-12)]
        student = encoder(words=words)
        teacher = encoder(image_proj=rotation(-15), words=words)
        gallery = [Words.of([0]), Words.of([1])]

        ranking, trace = pipelines.tta_retrieve(
            [1.0, 0.0],
            gallery,
            student,
            [RewardModel(teacher)],
            flip_config("retrieve_i2t"),
            truth=1,
        )

        assert trace.zero_shot == 0
        assert ranking == (1, 0)
        assert trace.correct
        assert trace.steps[0].prediction == 1

    def test_text_to_image_flip(self):
        student = encoder(words=[[1.0, 0.0]])
        teacher = encoder(text_proj=rotation(-15), words=[[1.0, 0.0]])
        gallery = np.array([direction(10), direction(-12)])

        ranking, trace = pipelines.tta_retrieve(
            Words.of([0]),
            gallery,
            student,
            [RewardModel(teacher)],
            flip_config("retrieve_t2i"),
            truth=1,
        )

        assert trace.zero_shot == 0
        assert ranking[0] == 1
        assert trace.reward_gain > 0

    def test_no_steps_ranks_by_student_similarity(self):
        student = encoder(words=[direction(40), direction(5), direction(-20)])
        gallery = [[0], [1], [2]]

        ranking, trace = pipelines.tta_retrieve(
            direction(0),
            gallery,
            student,
            [RewardModel(student)],
            flip_config("retrieve_i2t", objective="none"),
        )

        assert ranking == (1, 2, 0)
        assert trace.prediction == trace.zero_shot == 1

    def test_k_larger_than_gallery(self):
        student = encoder()

        with pytest.raises(ValueError):
            pipelines.tta_retrieve(
                [1.0, 0.0],
                [Words.of([0])],
                student,
                [RewardModel(student)],
                flip_config("retrieve_i2t"),
            )

    def test_empty_gallery(self):
        student = encoder()

        with pytest.raises(ValueError):
            pipelines.tta_retrieve(
                [1.0, 0.0],
                [],
                student,
                [RewardModel(student)],
                flip_config("retrieve_i2t", k=1),
            )


def flip_captioner():
    """A captioner whose first word is chosen by the sign of the prefix's y.

    BOS pushes the hidden state to +x, where EOS is unlikely; any word pushes
    it to -x, where EOS dominates. w2 wins while prefix y < 0, w3 once > 0.
    """
    blocks = {
        cap.IMAGE_PROJ: np.eye(2),
        cap.PROJECTOR: [[0.0, 0.0], [0.0, -0.3]],
        cap.TOK_EMBED: [[3.0, 0.0], [0.0, 0.0], [-3.0, 0.0], [-3.0, 0.0]],
        cap.W_HH: np.zeros((2, 2)),
        cap.W_OUT: [[-2.0, 1.0, 1.0], [0.0, -1.0, 1.0]],
    }
    params = ParamTree.build(blocks, trainable=[cap.PROJECTOR])
    return cap.ToyCaptioner(params, cap.Vocab(4), max_len=2)


def caption_reward_models():
    # Attribute 1 (token w3) points along the image.
    return [RewardModel(encoder(prompt=[[0.1, 0.1]]))]


class TestCaption:
    @pytest.mark.parametrize("objective", ["rlcf", "pseudo_label"])
    def test_reward_preference_changes_the_caption(self, objective):
        cfg = flip_config("caption", objective, steps=4, lr=0.3, beam_width=2)

        tokens, trace = pipelines.tta_caption(
            [0.0, 1.0],
            flip_captioner(),
            caption_reward_models(),
            cfg,
            truth=[1],
        )

        assert trace.zero_shot == [cap.BOS, 2, cap.EOS]
        assert tokens == (cap.BOS, 3, cap.EOS)
        assert trace.truth == [1]
        assert trace.reward_gain > 0
        assert trace.warning is None

    def test_candidates_are_the_top_beams(self):
        cfg = flip_config("caption", steps=1, lr=0.3, beam_width=2)

        _, trace = pipelines.tta_caption(
            [0.0, 1.0], flip_captioner(), caption_reward_models(), cfg
        )

        first = trace.steps[0]
        assert first.candidates == (([0, 2, 1], [0, 3, 1]),)
        assert first.centered[0][0] < 0 < first.centered[0][1]

    def test_no_steps_keeps_the_zero_shot_caption(self):
        cfg = flip_config("caption", "none", beam_width=2)
        c = flip_captioner()

        tokens, trace = pipelines.tta_caption(
            [0.0, 1.0], c, caption_reward_models(), cfg
        )

        best = cap.beam_search(c, c.embed([0.0, 1.0]), 2)[0]
        assert tokens == best.tokens
        assert trace.steps == ()

    def test_unfinished_beams_are_flagged(self):
        c = flip_captioner()
        params = c.params.replace({cap.TOK_EMBED: np.zeros((4, 2))})
        cfg = flip_config("caption", "none", beam_width=1)

        _, trace = pipelines.tta_caption(
            [0.0, 1.0], c.with_params(params), caption_reward_models(), cfg
        )

        assert trace.warning is not None

    def test_caption_words(self):
        assert pipelines.caption_words((cap.BOS, 3, 2, cap.EOS)) == Words((1, 0))


class TestStreams:
    def test_results_keep_stream_order(self):
        results = pipelines.run_stream(
            list("abcdef"), lambda index, sample: (index, sample), workers=3
        )

        assert results == list(enumerate("abcdef"))

    def test_momentum_runs_in_order_on_one_thread(self):
        cfg = TTAConfig(momentum=True)
        session = Session.start(encoder().params, cfg)
        seen = []

        def record(index, sample):
            seen.append((index, threading.current_thread().name))
            return sample

        pipelines.run_stream([1, 2, 3], record, session=session, workers=4)

        assert [i for i, _ in seen] == [0, 1, 2]
        assert {name for _, name in seen} == {threading.current_thread().name}

    def test_shared_scorer_gives_the_same_episode(self):
        student, rms = classify_models()
        cfg = flip_config("classify")
        scorer = RewardScorer(rms)

        _, shared = pipelines.tta_classify(CLASSIFY_IMAGE, student, scorer, cfg)
        _, fresh = pipelines.tta_classify(CLASSIFY_IMAGE, student, rms, cfg)

        assert shared.prediction == fresh.prediction
        assert shared.final_reward == fresh.final_reward

    def test_episodes_ignore_their_place_in_the_stream(self):
        student, rms = random_models()
        cfg = TTAConfig(
            task="classify", mode="encoder", steps=3, k=3, lr=0.05, n_views=16, rho=0.25
        )
        images = np.random.default_rng(11).normal(size=(50, 8))
        order = np.random.default_rng(12).permutation(50)

        def episode(index, image):
            return pipelines.tta_classify(image, student, rms, cfg, index=index)[1]

        in_order = pipelines.run_stream(list(images), episode)
        shuffled = pipelines.run_stream(list(images[order]), episode)

        for position, original in enumerate(order):
            expected = attr.evolve(in_order[original], index=0, wall_time=0.0)
            assert attr.evolve(shuffled[position], index=0, wall_time=0.0) == expected

    def test_momentum_commits_every_interval(self):
        student, rms = classify_models()
        cfg = flip_config("classify", momentum=True, momentum_interval=64)
        session = Session.start(student.params, cfg)
        original = session.pristine
        started_from_original = []

        def episode(index, image):
            started_from_original.append(session.pristine is original)
            return pipelines.tta_classify(
                image, student, rms, cfg, session=session, index=index
            )

        pipelines.run_stream([CLASSIFY_IMAGE] * 130, episode, session=session)

        assert session.commits == [63, 127]
        assert started_from_original == [True] * 64 + [False] * 66
        assert session.pristine != original

    def test_more_steps_take_longer(self):
        student, rms = random_models()
        images = np.random.default_rng(4).normal(size=(10, 8))

        def total_time(steps):
            cfg = TTAConfig(task="classify", mode="encoder", steps=steps, lr=0.01)
            traces = [pipelines.tta_classify(x, student, rms, cfg)[1] for x in images]
            return sum(trace.wall_time for trace in traces)

        assert total_time(3) > total_time(1)


class TestEpisodeInvariants:
    def test_confident_views_drive_the_first_step(self):
        student, rms = random_models()
        cfg = TTAConfig(
            task="classify", mode="encoder", steps=1, k=3, lr=0.01, n_views=8, rho=0.25
        )
        image = np.random.default_rng(6).normal(size=8)
        rng = pipelines.episode_rng(cfg.seed, image)
        views = pipelines.augment_views(image, 8, rng, cfg.mask_fraction, cfg.jitter)
        view_logits = models.class_logits(student, views)
        confident = pipelines.lowest_entropy(entropy(softmax(view_logits)), 0.25)

        _, trace = pipelines.tta_classify(image, student, rms, cfg)

        (step,) = trace.steps
        assert step.selected == 2
        assert step.candidates == tuple(
            tuple(models.top_k(view_logits[j], 3).tolist()) for j in confident
        )

    def test_centered_rewards_sum_to_zero_at_every_step(self):
        student, rms = random_models()
        cfg = TTAConfig(
            task="classify", mode="encoder", steps=3, k=4, lr=0.01, n_views=8, rho=0.5
        )

        for image in np.random.default_rng(7).normal(size=(5, 8)):
            _, trace = pipelines.tta_classify(image, student, rms, cfg)
            for step in trace.steps:
                assert len(step.centered) == 4
                for row in step.centered:
                    assert sum(row) == pytest.approx(0.0, abs=1e-9)

    @pytest.mark.parametrize(
        "case", ["prompt", "retrieve_i2t", "retrieve_t2i", "caption"]
    )
    def test_commits_only_touch_the_scope(self, case):
        momentum = dict(momentum=True, momentum_m=0.0, momentum_interval=1)
        if case == "prompt":
            student, rms = classify_models()
            cfg = flip_config("classify", mode="prompt", **momentum)
            start = student.params

            def episode(session):
                pipelines.tta_classify(
                    CLASSIFY_IMAGE, student, rms, cfg, session=session
                )

        elif case == "retrieve_i2t":
            words = [direction(10), direction(-12)]
            student = encoder(words=words)
            teacher = encoder(image_proj=rotation(-15), words=words)
            cfg = flip_config(case, **momentum)
            start = student.params

            def episode(session):
                pipelines.tta_retrieve(
                    [1.0, 0.0],
                    [Words.of([0]), Words.of([1])],
                    student,
                    [RewardModel(teacher)],
                    cfg,
                    session=session,
                )

        elif case == "retrieve_t2i":
            student = encoder(words=[[1.0, 0.0]])
            teacher = encoder(text_proj=rotation(-15), words=[[1.0, 0.0]])
            cfg = flip_config(case, **momentum)
            start = student.params

            def episode(session):
                pipelines.tta_retrieve(
                    Words.of([0]),
                    np.array([direction(10), direction(-12)]),
                    student,
                    [RewardModel(teacher)],
                    cfg,
                    session=session,
                )

        else:
            c = flip_captioner()
            cfg = flip_config(case, lr=0.3, beam_width=2, **momentum)
            start = c.params

            def episode(session):
                pipelines.tta_caption(
                    [0.0, 1.0], c, caption_reward_models(), cfg, session=session
                )

        session = Session.start(start, cfg)

        episode(session)

        assert session.commits == [0]
        for name in start:
            changed = not np.array_equal(session.pristine[name], start[name])
            assert changed == (name in cfg.scope), name


def classify_surrogate(params, seed, mode):
    rng = np.random.default_rng(seed)
    views = rng.normal(size=(2, 4))
    candidates = np.array([rng.choice(4, 2, replace=False) for _ in range(2)])
    rewards = rng.normal(size=(2, 2))
    rows = np.arange(2)[:, None]
    fixed = models.class_features(leaves(params, False), np.arange(4)).value

    def loss(p):
        text = models.class_features(p, np.arange(4)) if mode == "prompt" else fixed
        logits = models.image_features(p, views) @ lift(text).transpose() * 10.0
        return reinforce_loss(logits.log_softmax()[rows, candidates], rewards)

    return loss


def retrieval_surrogate(params, seed, task):
    rng = np.random.default_rng(seed)
    bags = models.bag_counts([[0, 1], [2], [3, 4, 0], [1, 2]], words=5)
    image = rng.normal(size=4)
    images = rng.normal(size=(4, 4))
    candidates = rng.choice(4, 3, replace=False)
    rewards = rng.normal(size=3)
    frozen = leaves(params, False)
    if task == "retrieve_i2t":
        keys = models.bag_features(frozen, bags).value

        def query(p):
            return models.image_features(p, image[None, :])

    else:
        keys = models.image_features(frozen, images).value

        def query(p):
            return models.bag_features(p, bags[:1])

    def loss(p):
        scores = query(p) @ lift(keys.T) * 10.0
        return reinforce_loss(scores.log_softmax()[0, candidates], rewards)

    return loss


class TestSurrogateGradients:
    @settings(max_examples=100, deadline=None)
    @given(seeds(), st.sampled_from(["prompt", "encoder"]))
    def test_classification(self, seed, mode):
        cfg = models.PretrainConfig(
            d_in=4, d_tok=3, d_emb=3, classes=4, words=5, prompt_len=2, seed=seed
        )
        scope = TTAConfig.defaults("classify", mode).scope
        params = models.DualEncoder.initialize(cfg).params.with_trainable(scope)

        assert_gradients_match(classify_surrogate(params, seed, mode), params)

    @settings(max_examples=100, deadline=None)
    @given(seeds(), st.sampled_from(["retrieve_i2t", "retrieve_t2i"]))
    def test_retrieval(self, seed, task):
        cfg = models.PretrainConfig(
            d_in=4, d_tok=3, d_emb=3, classes=2, words=5, prompt_len=2, seed=seed
        )
        scope = TTAConfig.defaults(task).scope
        params = models.DualEncoder.initialize(cfg).params.with_trainable(scope)

        assert_gradients_match(retrieval_surrogate(params, seed, task), params)

    @settings(max_examples=100, deadline=None)
    @given(seeds())
    def test_captioning(self, seed):
        rng = np.random.default_rng(seed)
        c = cap.ToyCaptioner.initialize(
            cap.CaptionerConfig(d_dec=3, seed=seed),
            rng.normal(size=(4, 3)),
            cap.Vocab(6),
        )
        embed = c.embed(rng.normal(size=4))
        sequences = [
            (cap.BOS, *rng.integers(cap.FIRST_WORD, 6, size=length), cap.EOS)
            for length in (0, 1, 3)
        ]
        rewards = rng.normal(size=3)

        def loss(p):
            return reinforce_loss(cap.caption_logprobs(p, embed, sequences), rewards)

        assert_gradients_match(loss, c.params)
