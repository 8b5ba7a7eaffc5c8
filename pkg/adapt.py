"""Policy-gradient adaptation engine and the comparison objectives.

All objectives are written as surrogate losses over `Var` nodes, so the same
gradient engine serves REINFORCE, entropy minimization, pseudo-labelling and
distillation. Rewards enter as constants: nothing flows back into the models
that produced them.
"""
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from numcore import (
    Array,
    ArrayLike,
    GradTree,
    ParamTree,
    Var,
    log_softmax,
    softmax,
    stack,
)

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


class OptimizerState:
    """Adaptive moments with decoupled weight decay."""

    def __init__(
        self,
        params: ParamTree,
        lr: float,
        weight_decay: float = 0.0,
        betas: Tuple[float, float] = (BETA1, BETA2),
        eps: float = EPSILON,
    ):
        if lr < 0:
            raise ValueError(f"Learning rate must be non-negative, got {lr}")
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self._shapes = {name: params[name].shape for name in params.trainable}
        self.first: Dict[str, Array] = {n: np.zeros(s) for n, s in self._shapes.items()}
        self.second: Dict[str, Array] = {
            n: np.zeros(s) for n, s in self._shapes.items()
        }

    def fresh(self) -> "OptimizerState":
        state = OptimizerState.__new__(OptimizerState)
        state.lr = self.lr
        state.weight_decay = self.weight_decay
        state.betas = self.betas
        state.eps = self.eps
        state.step_count = 0
        state._shapes = dict(self._shapes)
        state.first = {n: np.zeros(s) for n, s in self._shapes.items()}
        state.second = {n: np.zeros(s) for n, s in self._shapes.items()}
        return state

    @property
    def is_zeroed(self) -> bool:
        return self.step_count == 0 and all(
            not m.any() for m in (*self.first.values(), *self.second.values())
        )


def optimizer_step(
    state: OptimizerState, params: ParamTree, grads: GradTree
) -> ParamTree:
    """Apply one AdamW update to the trainable blocks and return the new tree."""
    if grads.shapes != params.shapes:
        raise ValueError(f"Gradient shapes {grads.shapes} differ from {params.shapes}")
    for name in params.trainable:
        if name not in state.first:
            raise ValueError(f"Optimizer has no moments for block {name}")
        if not np.all(np.isfinite(grads[name])):
            raise ValueError(f"Non-finite gradient in block {name}")

    state.step_count += 1
    beta1, beta2 = state.betas
    bias1 = 1.0 - beta1**state.step_count
    bias2 = 1.0 - beta2**state.step_count

    updates = {}
    for name in params.trainable:
        g = grads[name]
        state.first[name] = beta1 * state.first[name] + (1.0 - beta1) * g
        state.second[name] = beta2 * state.second[name] + (1.0 - beta2) * g * g
        m_hat = state.first[name] / bias1
        v_hat = state.second[name] / bias2
        theta = params[name]
        updates[name] = (
            theta
            - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
            - state.lr * state.weight_decay * theta
        )
    return params.replace(updates)


class EpisodeState:
    """Live parameters of one adaptation episode and the snapshot they reset to."""

    def __init__(self, pristine: ParamTree, optimizer: OptimizerState):
        self.pristine = pristine
        self.params = pristine
        self.optimizer = optimizer
        self.step = 0

    @classmethod
    def start(
        cls, pristine: ParamTree, lr: float, weight_decay: float
    ) -> "EpisodeState":
        return cls(pristine, OptimizerState(pristine, lr, weight_decay))

    def apply(self, grads: GradTree) -> None:
        self.params = optimizer_step(self.optimizer, self.params, grads)
        self.step += 1


def episodic_reset(ep: EpisodeState) -> None:
    # ParamTree blocks are read-only, so sharing the snapshot is a bit-exact reset.
    ep.params = ep.pristine
    ep.optimizer = ep.optimizer.fresh()
    ep.step = 0


class MomentumBuffer:
    """Exponential average of adapted parameters, committed every `interval` samples."""

    def __init__(self, xi: ParamTree, m: float, interval: int):
        if not 0.0 <= m < 1.0:
            raise ValueError(f"Momentum must be in [0, 1), got {m}")
        if interval < 1:
            raise ValueError(f"Commit interval must be positive, got {interval}")
        self.xi = xi
        self.m = m
        self.interval = interval
        self.samples_seen = 0
        self.commits = 0


def momentum_observe(buf: MomentumBuffer, theta_bar: ParamTree) -> Optional[ParamTree]:
    """Fold an adapted θ̄ into ξ; return the new θ* when a commit is due."""
    buf.xi.check_congruent(theta_bar)
    buf.xi = buf.xi.combine(theta_bar, buf.m, 1.0 - buf.m, names=theta_bar.trainable)
    buf.samples_seen += 1
    if buf.samples_seen == buf.interval:
        buf.samples_seen = 0
        buf.commits += 1
        return buf.xi
    return None


# Objectives


def _as_vector(logprobs: Union[Var, Sequence[Var]]) -> Var:
    return logprobs if isinstance(logprobs, Var) else stack(list(logprobs))


def reinforce_loss(logprobs: Union[Var, Sequence[Var]], rewards: ArrayLike) -> Var:
    """Surrogate −(1/K) Σ R_k log P_k; rows of a 2-D input are averaged.

    Its gradient is the REINFORCE estimator over the K drawn candidates.
    """
    lp = _as_vector(logprobs)
    r = np.asarray(rewards, dtype=np.float64)
    if r.shape != lp.shape:
        raise ValueError(f"Rewards shape {r.shape} does not match logprobs {lp.shape}")
    per_row = (lp * r).mean(axis=-1)
    return -(per_row.mean() if per_row.value.ndim else per_row)


def entropy_min_loss(view_logprobs: Var) -> Var:
    """Entropy of the mean prediction over views (marginal entropy).

    `view_logprobs` holds one row of log-probabilities per confident view.
    """
    if view_logprobs.value.ndim == 1:
        view_logprobs = stack([view_logprobs])
    views = view_logprobs.shape[0]
    if views == 0:
        raise ValueError("Entropy minimization needs at least one view")
    mean_logp = view_logprobs.logsumexp(axis=0) - float(np.log(views))
    return -(mean_logp.exp() * mean_logp).sum()


def pseudo_label_loss(
    student_logprobs: Var, teacher_argmax: Union[int, Sequence[int]]
) -> Var:
    """Negative log-probability of the teacher's top-1, averaged over rows."""
    classes = student_logprobs.shape[-1]
    targets = np.atleast_1d(np.asarray(teacher_argmax, dtype=np.int64))
    if np.any(targets < 0) or np.any(targets >= classes):
        raise ValueError(
            f"Teacher label {teacher_argmax} out of range for {classes} classes"
        )
    if student_logprobs.value.ndim == 1:
        return -student_logprobs[int(targets[0])]
    rows = np.arange(student_logprobs.shape[0])
    return -student_logprobs[rows, targets].mean()


def kd_loss(
    student_logits: Var, teacher_logits: ArrayLike, temperature: float = 1.0
) -> Var:
    """T² · KL(softmax(teacher/T) ‖ softmax(student/T)), averaged over rows."""
    if temperature <= 0:
        raise ValueError(f"Temperature must be positive, got {temperature}")
    teacher = np.asarray(teacher_logits, dtype=np.float64)
    if teacher.shape != student_logits.shape:
        raise ValueError(
            f"Teacher logits {teacher.shape} differ from student {student_logits.shape}"
        )
    target = softmax(teacher / temperature)
    target_log = log_softmax(teacher / temperature)
    student_log = (student_logits / temperature).log_softmax()
    kl = ((target_log - student_log) * target).sum(axis=-1)
    if kl.value.ndim:
        kl = kl.mean()
    return kl * (temperature * temperature)
