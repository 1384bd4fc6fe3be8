"""Policy distillation with a projected log-policy gradient term.

Teachers are fixed random MLP policies over Gaussian states, sharpened by a
temperature; they stand in for trained game-playing agents.  The student
minimises ``KL(student || teacher)`` plus ``alpha`` times the mismatch between
``grad_s <log pi_teacher, v>`` and ``grad_s <log pi_student, v>`` for random
unit ``v`` over actions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .nn import Mlp, TrainStep, init_mlp, make_optimizer
from .seeding import child_rng, child_seed
from .sobolev import ProjectionSampler, pointwise_loss, projected_derivative_term, resample

MODES = ("regular", "sobolev")


@dataclass
class TeacherPolicy:
    network: Mlp
    temperature: float

    @property
    def state_dim(self) -> int:
        return self.network.in_dim

    @property
    def action_count(self) -> int:
        return self.network.out_dim

    def log_probs(self, states) -> np.ndarray:
        tape = ad.Tape()
        return self.network(tape.constant(states)).value.copy()

    def probs(self, states) -> np.ndarray:
        return np.exp(self.log_probs(states))

    def log_prob_jacobian(self, states) -> np.ndarray:
        """``(N, A, d)`` Jacobian of the log-policy with respect to the state."""
        tape = ad.Tape()
        s = tape.constant(states)
        out = self.network(s)
        rows = [ad.grad(ad.sum(out[:, a]), [s])[0].value for a in range(self.action_count)]
        return np.stack(rows, axis=1)


def make_synthetic_teacher(d: int = 16, actions: int = 6, hidden=(64, 64), seed: int = 0,
                           temperature: float = 0.5, activation: str = "relu") -> TeacherPolicy:
    """Random MLP policy whose logits are divided by ``temperature``."""
    if d < 2 or actions < 2:
        raise ValueError("state dimension and action count must be >= 2")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    net = init_mlp((d, *hidden, actions), seed, activation=activation, head="log_softmax")
    net.weights[-1] /= temperature
    net.biases[-1] /= temperature
    for p in net.params:
        p.setflags(write=False)
    return TeacherPolicy(net, float(temperature))


@dataclass
class DistillConfig:
    student_hidden: tuple = (32,)
    alpha: float = 1.0
    data_fraction: float = 0.1
    num_projections: int = 1
    steps: int = 3000
    seed: int = 0
    learning_rate: float = 1e-4
    batch_size: int = 200
    num_states: int = 2000
    state_dim: int = 16
    actions: int = 6
    teacher_hidden: tuple = (64, 64)
    temperature: float = 0.5
    derivative_loss: str = "l2"
    activation: str = "relu"

    def __post_init__(self):
        self.student_hidden = tuple(int(h) for h in self.student_hidden)
        self.teacher_hidden = tuple(int(h) for h in self.teacher_hidden)
        if not 0 < self.data_fraction <= 1:
            raise ValueError("data_fraction must be in (0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.num_projections < 1 or self.steps < 0 or self.batch_size < 1:
            raise ValueError("num_projections, steps and batch_size must be positive")
        if self.derivative_loss not in ("l2", "l1"):
            raise ValueError("derivative_loss must be l2 or l1")

    @property
    def train_count(self) -> int:
        n = int(round(self.data_fraction * self.num_states))
        return max(1, min(n, self.num_states - 1 if self.data_fraction < 1 else self.num_states))


@dataclass
class DistillResult:
    mode: str
    config: DistillConfig
    kl_test: float
    top1_err: float
    kl_train: float
    wall_time: float
    step_log: list = field(default_factory=list)

    def row(self) -> dict:
        c = self.config
        return {
            "mode": self.mode,
            "seed": c.seed,
            "steps": c.steps,
            "data_fraction": c.data_fraction,
            "alpha": c.alpha if self.mode == "sobolev" else 0.0,
            "kl_test": self.kl_test,
            "top1_err": self.top1_err,
            "kl_train": self.kl_train,
            "wall_ms": round(self.wall_time * 1000.0, 3),
        }


def _build_loss(student: Mlp, states: ad.Node, teacher_logp: ad.Node, teacher_jac: ad.Node | None,
                alpha: float, sampler: ProjectionSampler | None, kind: str = "l2"):
    out = student(states)
    loss = pointwise_loss("kl", out, teacher_logp)
    term = None
    if alpha > 0:
        n = states.shape[0]
        draws = [sampler.sample(n) for _ in range(sampler.num_projections)]
        term = projected_derivative_term(out, states, teacher_jac, kind, draws)
        loss = ad.add(loss, ad.mul(term.loss, alpha))
    return loss, term


def distill_loss(student: Mlp, teacher: TeacherPolicy, states, alpha: float,
                 sampler: ProjectionSampler | None = None, kind: str = "l2", tape: ad.Tape | None = None) -> ad.Node:
    """Batch-mean ``KL(student || teacher)`` plus ``alpha`` times the projected gradient mismatch."""
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or states.shape[0] < 1:
        raise ValueError("states must be a nonempty (N, d) array")
    if alpha > 0 and (sampler is None or sampler.dimension != teacher.action_count):
        raise ValueError("the derivative term needs a sampler over the action dimension")
    tape = tape if tape is not None else ad.Tape()
    jac = tape.constant(teacher.log_prob_jacobian(states)) if alpha > 0 else None
    loss, _ = _build_loss(student, tape.constant(states), tape.constant(teacher.log_probs(states)),
                          jac, alpha, sampler, kind)
    return loss


def policy_metrics(student: Mlp, teacher_logp: np.ndarray, states: np.ndarray) -> tuple[float, float]:
    """Mean ``KL(student || teacher)`` and top-action disagreement rate."""
    tape = ad.Tape()
    logp = student(tape.constant(states)).value
    kl = float(np.mean(np.sum(np.exp(logp) * (logp - teacher_logp), axis=1)))
    err = float(np.mean(np.argmax(logp, axis=1) != np.argmax(teacher_logp, axis=1)))
    return kl, err


def make_states(config: DistillConfig) -> tuple[np.ndarray, np.ndarray]:
    """One Gaussian state stream split into disjoint train / test index ranges."""
    stream = child_rng(config.seed, "states").standard_normal((config.num_states, config.state_dim))
    n_train = config.train_count
    return stream[:n_train], stream[n_train:] if n_train < config.num_states else stream[:0]


def run_distillation(config: DistillConfig, mode: str = "sobolev", teacher: TeacherPolicy | None = None,
                     log_every: int = 0) -> DistillResult:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    t0 = time.perf_counter()
    if teacher is None:
        teacher = make_synthetic_teacher(config.state_dim, config.actions, config.teacher_hidden,
                                         child_seed(config.seed, "teacher"), config.temperature,
                                         config.activation)
    train_s, test_s = make_states(config)
    if test_s.shape[0] == 0:
        test_s = train_s
    train_logp = teacher.log_probs(train_s)
    alpha = config.alpha if mode == "sobolev" else 0.0
    train_jac = teacher.log_prob_jacobian(train_s) if alpha > 0 else None

    student = init_mlp((config.state_dim, *config.student_hidden, config.actions),
                       child_seed(config.seed, "student"), activation=config.activation, head="log_softmax")
    sampler = ProjectionSampler(config.actions, child_seed(config.seed, "projections"), config.num_projections)
    n = train_s.shape[0]
    batch = min(config.batch_size, n)
    order = child_rng(config.seed, "batch-order")

    tape = ad.Tape()
    s_leaf = tape.constant(train_s[:batch])
    lp_leaf = tape.constant(train_logp[:batch])
    j_leaf = tape.constant(train_jac[:batch]) if alpha > 0 else None
    loss, term = _build_loss(student, s_leaf, lp_leaf, j_leaf, alpha, sampler, config.derivative_loss)
    trainer = TrainStep(loss, [student], make_optimizer("adam", student.params, config.learning_rate))

    step_log = []
    for step in range(1, config.steps + 1):
        if batch < n:
            idx = order.choice(n, size=batch, replace=False)
            tape.assign(s_leaf, train_s[idx], copy=False)
            tape.assign(lp_leaf, train_logp[idx], copy=False)
            if j_leaf is not None:
                tape.assign(j_leaf, train_jac[idx], copy=False)
        if term is not None:
            resample(term, sampler)
        value = trainer.step()
        if not np.isfinite(value):
            raise FloatingPointError(f"distillation diverged at step {step}")
        if log_every and step % log_every == 0:
            kl, err = policy_metrics(student, teacher.log_probs(test_s), test_s)
            step_log.append({"step": step, "loss": value, "kl_test": kl, "top1_err": err})

    kl_test, top1 = policy_metrics(student, teacher.log_probs(test_s), test_s)
    kl_train, _ = policy_metrics(student, train_logp, train_s)
    return DistillResult(mode, config, kl_test, top1, kl_train, time.perf_counter() - t0, step_log)
