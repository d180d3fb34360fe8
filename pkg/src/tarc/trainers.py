"""Continual-learning methods and the two-phase (task-agnostic, task-specific) scheduler.

Method descriptors are ``base[+modifier]`` strings: bases ``sgd``, ``joint``,
``er``, ``oewc``, ``si``; modifiers ``tarc`` (contrastive phase then the
multi-objective phase), ``agnostic`` (contrastive phase then plain
cross-entropy) and ``aux`` (multi-objective loss, no contrastive phase).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .buffer import ReplayBuffer
from .losses import cross_entropy, multi_objective, supcon
from .model import MultiHeadNet, NetworkConfig
from .streams import AugmentConfig, ScenarioStream, augment, rotate90_batch
from .tensor import Tensor

BASES = ("sgd", "joint", "er", "oewc", "si")
MODIFIERS = ("tarc", "agnostic", "aux")


class MethodError(ValueError):
    pass


@dataclass(frozen=True)
class Method:
    base: str
    modifier: Optional[str] = None

    @classmethod
    def parse(cls, descriptor: str) -> "Method":
        tokens = descriptor.strip().lower().split("+")
        base, mods = tokens[0], tokens[1:]
        if base not in BASES:
            raise MethodError(f"unknown method token {base!r} in {descriptor!r}; bases are {BASES}")
        for tok in mods:
            if tok not in MODIFIERS:
                raise MethodError(f"unknown method token {tok!r} in {descriptor!r}; modifiers are {MODIFIERS}")
        if len(mods) > 1:
            raise MethodError(f"at most one modifier allowed, got {descriptor!r}")
        mod = mods[0] if mods else None
        if base == "joint" and mod:
            raise MethodError("joint training takes no modifier")
        if mod in ("agnostic", "aux") and base != "er":
            raise MethodError(f"ablation {mod!r} is defined for er only")
        return cls(base, mod)

    def __str__(self) -> str:
        return self.base + (f"+{self.modifier}" if self.modifier else "")

    @property
    def uses_replay(self) -> bool:
        return self.base == "er"

    @property
    def regularizer(self) -> Optional[str]:
        return self.base if self.base in ("oewc", "si") else None

    @property
    def agnostic_phase(self) -> bool:
        return self.modifier in ("tarc", "agnostic")

    @property
    def auxiliary(self) -> bool:
        return self.modifier in ("tarc", "aux")

    @property
    def two_stage(self) -> bool:
        return self.modifier is not None


@dataclass
class TrainConfig:
    budget_epochs: int = 5
    reg_budget_epochs: int = 2
    gamma: float = 0.9
    alpha: float = 1.0
    beta: float = 1.0
    learning_rate: float = 3e-4
    batch_size: int = 32
    replay_batch_size: Optional[int] = None
    buffer_capacity: int = 200
    tau: float = 0.07
    optimizer: str = "adam"
    ewc_lambda: float = 10.0
    ewc_decay: float = 0.9
    si_c: float = 0.5
    si_xi: float = 1.0
    task_augment: bool = True
    flip: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.budget_epochs < 1 or self.reg_budget_epochs < 1:
            raise ValueError("training budget must be at least one epoch")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @property
    def replay_k(self) -> int:
        return self.replay_batch_size or self.batch_size

    def epochs_for(self, method: Method) -> int:
        return self.reg_budget_epochs if method.regularizer else self.budget_epochs


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


def adam_step(params: np.ndarray, grads: np.ndarray, state: dict, lr: float,
              b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """One bias-corrected Adam update; ``state`` holds ``m``, ``v`` and step ``t``."""
    t = state.get("t", 0) + 1
    m = b1 * state.get("m", np.zeros_like(params)) + (1.0 - b1) * grads
    v = b2 * state.get("v", np.zeros_like(params)) + (1.0 - b2) * grads * grads
    state.update(t=t, m=m, v=v)
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps)


class Optimizer:
    """Per-parameter optimizer state; only the named parameters move on a step."""

    def __init__(self, kind: str, lr: float):
        self.kind = kind
        self.lr = lr
        self.state: Dict[str, dict] = {}

    def step(self, net: MultiHeadNet, names: List[str]) -> None:
        for name in names:
            p = net.params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.kind == "adam":
                p.data = adam_step(p.data, g, self.state.setdefault(name, {}), self.lr)
            else:
                p.data = p.data - self.lr * g


# ---------------------------------------------------------------------------
# regularizers
# ---------------------------------------------------------------------------


@dataclass
class RegularizerState:
    anchors: np.ndarray
    importance: np.ndarray
    omega: np.ndarray
    task_start: np.ndarray

    @classmethod
    def zeros(cls, net: MultiHeadNet) -> "RegularizerState":
        theta = net.get_flat_params()
        z = np.zeros_like(theta)
        return cls(theta.copy(), z.copy(), z.copy(), theta.copy())


def regularizer_penalty(state: RegularizerState, net: MultiHeadNet, kind: str, cfg: TrainConfig) -> Tensor:
    """oEWC: ``(lambda/2) sum F (theta - theta*)^2``; SI: ``c sum Omega (theta - theta*)^2``."""
    if kind == "oewc":
        coef = cfg.ewc_lambda / 2.0
    elif kind == "si":
        coef = cfg.si_c
    else:
        raise ValueError(f"unknown regularizer {kind!r}")
    total = Tensor(0.0)
    for name, sl in net.slices().items():
        imp = state.importance[sl]
        if not imp.any():
            continue
        p = net.params[name]
        diff = T.sub(p, Tensor(state.anchors[sl].reshape(p.shape)))
        total = T.add(total, T.sum(T.mul(Tensor(imp.reshape(p.shape)), T.square(diff))))
    return T.scale(total, coef)


def penalty_value(state: RegularizerState, theta: np.ndarray, kind: str, cfg: TrainConfig) -> float:
    coef = cfg.ewc_lambda / 2.0 if kind == "oewc" else cfg.si_c
    return float(coef * np.sum(state.importance * (theta - state.anchors) ** 2))


def fisher_diagonal(net: MultiHeadNet, images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Mean over samples of squared per-sample cross-entropy gradients."""
    fisher = np.zeros(net.num_params)
    net.eval()
    for i in range(len(labels)):
        net.zero_grad()
        logits = net.forward_head(net.forward_backbone(images[i : i + 1].reshape(1, -1)), "cls")
        cross_entropy(logits, labels[i : i + 1]).backward()
        fisher += net.get_flat_grads() ** 2
    net.zero_grad()
    net.train()
    return fisher / max(len(labels), 1)


def oewc_end_task(state: RegularizerState, net: MultiHeadNet, images, labels, cfg: TrainConfig) -> RegularizerState:
    f_new = fisher_diagonal(net, images, labels)
    state.importance = cfg.ewc_decay * state.importance + f_new
    state.anchors = net.get_flat_params()
    return state


def si_accumulate(state: RegularizerState, before: np.ndarray, after: np.ndarray, grads: np.ndarray) -> RegularizerState:
    state.omega = state.omega - grads * (after - before)
    return state


def si_end_task(state: RegularizerState, theta_end: np.ndarray, cfg: TrainConfig) -> RegularizerState:
    delta = theta_end - state.task_start
    state.importance = state.importance + state.omega / (delta * delta + cfg.si_xi)
    state.importance = np.maximum(state.importance, 0.0)
    state.omega = np.zeros_like(state.omega)
    state.anchors = theta_end.copy()
    state.task_start = theta_end.copy()
    return state


# ---------------------------------------------------------------------------
# learner
# ---------------------------------------------------------------------------


def _flat(images: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(images, dtype=np.float64).reshape(len(images), -1))


def minibatch_schedule(n: int, epochs: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    steps = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        steps += [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    return steps


def phase_split(total_steps: int, gamma: float) -> int:
    """Number of task-agnostic steps, ``floor(gamma * S)``."""
    return int(math.floor(gamma * total_steps + 1e-9))


@dataclass
class StepRecord:
    phase: str
    loss: float


@dataclass
class TaskStats:
    task_id: int
    total_steps: int
    agnostic_steps: int
    specific_steps: int
    losses: List[StepRecord] = field(default_factory=list)
    buffer_seen_before: int = 0
    buffer_seen_after_agnostic: int = 0
    buffer_seen_after: int = 0


class Learner:
    """Owns the network, optimizer, buffer and regularizer state of one run."""

    def __init__(self, method: Method, net_config: NetworkConfig, cfg: TrainConfig, record_losses: bool = False):
        self.method = method
        self.cfg = cfg
        seed = cfg.seed
        self.net = MultiHeadNet(net_config, seed)
        self.opt = Optimizer(cfg.optimizer, cfg.learning_rate)
        self.buffer = ReplayBuffer(cfg.buffer_capacity if method.uses_replay else 0, seed=seed + 1)
        self.order_rng = np.random.default_rng([seed, 11])
        self.aug_rng = np.random.default_rng([seed, 12])
        self.rot_rng = np.random.default_rng([seed, 13])
        self.replay_rng = np.random.default_rng([seed, 14])
        self.aug_cfg = AugmentConfig(flip=cfg.flip)
        self.reg = RegularizerState.zeros(self.net) if method.regularizer else None
        self.record_losses = record_losses
        self.step_hook = None

    # -- helpers -------------------------------------------------------------
    def _names(self, *prefixes: str) -> List[str]:
        return [n for p in prefixes for n in self.net.names(p)]

    def _replay_batch(self):
        if not self.method.uses_replay or len(self.buffer) == 0:
            return None
        return self.buffer.sample_batch(self.cfg.replay_k, self.replay_rng)

    def _apply(self, loss: Tensor, names: List[str]) -> float:
        net = self.net
        net.zero_grad()
        si = self.method.regularizer == "si"
        if si:
            before = net.get_flat_params()
        loss.backward()
        self.opt.step(net, names)
        if si:
            si_accumulate(self.reg, before, net.get_flat_params(), net.get_flat_grads())
        return float(loss.data)

    def _with_penalty(self, loss: Tensor) -> Tensor:
        if self.reg is None:
            return loss
        return T.add(loss, regularizer_penalty(self.reg, self.net, self.method.regularizer, self.cfg))

    # -- steps ---------------------------------------------------------------
    def er_step(self, x: np.ndarray, y: np.ndarray) -> float:
        """Cross-entropy on the current batch plus on an equal-size replay batch."""
        net = self.net.train()
        loss = cross_entropy(net.forward_head(net.forward_backbone(_flat(x)), "cls"), y)
        replay = self._replay_batch()
        if replay is not None:
            bx, by = replay
            loss = T.add(loss, cross_entropy(net.forward_head(net.forward_backbone(_flat(bx)), "cls"), by))
        value = self._apply(self._with_penalty(loss), self._names("backbone.", "cls."))
        if self.method.uses_replay:
            self.buffer.insert_batch(x, y)
        return value

    def agnostic_step(self, x: np.ndarray, y: np.ndarray) -> float:
        """Supervised contrastive step on two views of current (+ replay) samples."""
        net = self.net.train()
        replay = self._replay_batch()
        if replay is not None:
            x = np.concatenate([x, replay[0]])
            y = np.concatenate([y, replay[1]])
        va = augment(x, self.aug_rng, self.aug_cfg)
        vb = augment(x, self.aug_rng, self.aug_cfg)
        views = np.empty((2 * len(x), *x.shape[1:]))
        views[0::2], views[1::2] = va, vb
        z = net.forward_head(net.forward_backbone(_flat(views)), "ssl")
        loss = supcon(z, np.repeat(y, 2), self.cfg.tau)
        return self._apply(loss, self._names("backbone.", "ssl."))

    def specific_step(self, x: np.ndarray, y: np.ndarray) -> float:
        """Multi-objective step: classification on augmented views, rotation prediction on rotated ones."""
        net, cfg = self.net.train(), self.cfg
        replay = self._replay_batch()
        xs = augment(x, self.aug_rng, self.aug_cfg) if cfg.task_augment else x
        cur = net.forward_head(net.forward_backbone(_flat(xs)), "cls")
        rep_logits, by = None, None
        pool = xs
        if replay is not None:
            bx, by = replay
            bxs = augment(bx, self.aug_rng, self.aug_cfg) if cfg.task_augment else bx
            rep_logits = net.forward_head(net.forward_backbone(_flat(bxs)), "cls")
            pool = np.concatenate([xs, bxs])
        rot_logits, ks, names = None, None, self._names("backbone.", "cls.")
        if self.method.auxiliary:
            ks = self.rot_rng.integers(0, 4, len(pool))
            rot_logits = net.forward_head(net.forward_backbone(_flat(rotate90_batch(pool, ks))), "rot")
            names = self._names("backbone.", "cls.", "rot.")
        loss = multi_objective(cur, y, rot_logits, ks, cfg.alpha, cfg.beta if self.method.auxiliary else 0.0, rep_logits, by)
        value = self._apply(self._with_penalty(loss), names)
        if self.method.uses_replay:
            self.buffer.insert_batch(x, y)
        return value

    # -- per task ------------------------------------------------------------
    def train_task(self, task_id: int, images: np.ndarray, labels: np.ndarray) -> TaskStats:
        cfg, method = self.cfg, self.method
        schedule = minibatch_schedule(len(labels), cfg.epochs_for(method), cfg.batch_size, self.order_rng)
        S = len(schedule)
        n_agn = phase_split(S, cfg.gamma) if method.agnostic_phase else 0
        stats = TaskStats(task_id, S, n_agn, S - n_agn, buffer_seen_before=self.buffer.seen_count)
        for step, idx in enumerate(schedule):
            x, y = images[idx], labels[idx]
            if step < n_agn:
                phase, value = "agnostic", self.agnostic_step(x, y)
            elif method.two_stage:
                phase, value = "specific", self.specific_step(x, y)
            else:
                phase, value = "specific", self.er_step(x, y)
            if step + 1 == n_agn:
                stats.buffer_seen_after_agnostic = self.buffer.seen_count
            if self.record_losses:
                stats.losses.append(StepRecord(phase, value))
            if self.step_hook is not None:
                self.step_hook(self, phase, step)
        if n_agn == 0:
            stats.buffer_seen_after_agnostic = stats.buffer_seen_before
        stats.buffer_seen_after = self.buffer.seen_count
        if method.regularizer == "oewc":
            oewc_end_task(self.reg, self.net, images, labels, cfg)
        elif method.regularizer == "si":
            si_end_task(self.reg, self.net.get_flat_params(), cfg)
        return stats


def tarc_train_task(learner: Learner, task_id: int, images, labels) -> TaskStats:
    if not learner.method.two_stage:
        raise MethodError(f"{learner.method} is not a two-stage method")
    return learner.train_task(task_id, images, labels)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def accuracy(net: MultiHeadNet, images: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(net.predict_logits(images), axis=1) == labels))


def evaluate_all(net: MultiHeadNet, scenario: ScenarioStream) -> List[float]:
    net.eval()
    out = [accuracy(net, *scenario.task_data(j, "test")) for j in range(scenario.num_tasks)]
    net.train()
    return out


@dataclass
class RunResult:
    method: str
    accuracy_matrix: List[List[float]]
    random_baseline: List[float]
    task_stats: List[TaskStats]
    learner: Learner

    @property
    def net(self) -> MultiHeadNet:
        return self.learner.net


def default_network(scenario: ScenarioStream, hidden_dims=None, ssl_proj_dim: int = 64) -> NetworkConfig:
    H, W = scenario.train.image_shape
    if hidden_dims is None:
        hidden_dims = [256, 256] if scenario.scenario == "class_il" else [100, 100]
    return NetworkConfig(H * W, list(hidden_dims), scenario.num_classes, ssl_proj_dim)


def run_experiment(method, scenario: ScenarioStream, cfg: TrainConfig,
                   net_config: Optional[NetworkConfig] = None, record_losses: bool = False) -> RunResult:
    """Train on the stream task by task, evaluating every task after each one."""
    method = method if isinstance(method, Method) else Method.parse(method)
    net_config = net_config or default_network(scenario)
    learner = Learner(method, net_config, cfg, record_losses=record_losses)
    random_baseline = evaluate_all(learner.net, scenario)
    R, stats = [], []
    if method.base == "joint":
        parts = [scenario.task_data(t, "train") for t in range(scenario.num_tasks)]
        images = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
        stats.append(learner.train_task(0, images, labels))
        R.append(evaluate_all(learner.net, scenario))
    else:
        for t in range(scenario.num_tasks):
            stats.append(learner.train_task(t, *scenario.task_data(t, "train")))
            R.append(evaluate_all(learner.net, scenario))
    return RunResult(str(method), R, random_baseline, stats, learner)


def train_sgd_baseline(scenario: ScenarioStream, cfg: TrainConfig, net_config=None) -> RunResult:
    return run_experiment("sgd", scenario, cfg, net_config)


def train_joint(scenario: ScenarioStream, cfg: TrainConfig, net_config=None) -> RunResult:
    return run_experiment("joint", scenario, cfg, net_config)


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
