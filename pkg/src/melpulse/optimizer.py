"""Mini-batch SGD with adaptive per-feature rates and clipped L1 penalties.

The update is two-phase per touched dimension: an AdaGrad or AdaDelta step
(with an L2 gradient term folded in before the adaptive scaling), then a
cumulative-penalty L1 clip.  Two accumulators drive the clip: the total
penalty each dimension could have received so far and the penalty it
actually received; weights are clipped at zero crossings so they never
flip sign inside the L1 phase.

The total-penalty accumulator conceptually grows every optimizer step for
every dimension with the dimension's current adaptive rate; bookkeeping is
lazy and reconciles pending steps when a dimension is next touched, which
is exact because untouched accumulators are frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

ADAGRAD = "adagrad"
ADADELTA = "adadelta"

REASON_LOSS = "loss"
REASON_ACTIVE_SET = "active_set"
REASON_EPOCH_CAP = "epoch_cap"


class OptimizerError(RuntimeError):
    """Raised on non-finite gradients or inconsistent state."""


@dataclass(frozen=True)
class OptimizerConfig:
    """Algorithm choice, rates, batching and regularization strengths.

    ``l1``/``l2`` are the global strengths; per-feature factors multiply
    them.  ``n_train`` is the training-set size N in the total-penalty
    accrual (lambda1 * rho / N per conceptual step).
    """

    algorithm: str = ADAGRAD
    learning_rate: float = 1.0
    grad_sq_init: float = 1e-10
    decay: float = 0.95
    epsilon: float = 1e-6
    batch_size: int = 16
    l1: float = 0.0
    l2: float = 0.0
    n_train: int = 1
    max_epochs: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in (ADAGRAD, ADADELTA):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        if not 0 < self.decay < 1:
            raise ValueError("decay must be in (0, 1)")
        if self.epsilon <= 0 or self.grad_sq_init <= 0:
            raise ValueError("epsilon and grad_sq_init must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.l1 < 0 or self.l2 < 0:
            raise ValueError("regularization strengths must be >= 0")
        if self.n_train < 1:
            raise ValueError("n_train must be >= 1")

    def with_strengths(self, l1: float, l2: float, n_train: int) -> "OptimizerConfig":
        return replace(self, l1=l1, l2=l2, n_train=n_train)


@dataclass(frozen=True)
class ConvergenceConfig:
    """Inner-loop stopping: loss-EMA delta or active-set fluctuation EMA."""

    loss_tol: float = 5e-5
    loss_ema_decay: float = 0.9
    active_tol: float = 5e-3
    active_ema_decay: float = 0.9

    def __post_init__(self):
        if self.loss_tol <= 0 or self.active_tol <= 0:
            raise ValueError("convergence thresholds must be > 0")
        for decay in (self.loss_ema_decay, self.active_ema_decay):
            if not 0 < decay < 1:
                raise ValueError("EMA decays must be in (0, 1)")


@dataclass
class OptimizerState:
    """Weights plus all per-feature accumulators, hot-startable."""

    theta: np.ndarray
    grad_sq: np.ndarray        # adagrad: igsav + sum g^2; adadelta: EMA of g^2
    delta_sq: np.ndarray       # adadelta only: EMA of squared raw updates
    total_penalty: np.ndarray  # cumulative L1 each dim could have received
    applied_penalty: np.ndarray  # signed L1 each dim actually received
    last_sync: np.ndarray      # step at which total_penalty was reconciled
    step_count: int = 0
    epoch_count: int = 0

    def __len__(self) -> int:
        return self.theta.shape[0]

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            self.theta.copy(), self.grad_sq.copy(), self.delta_sq.copy(),
            self.total_penalty.copy(), self.applied_penalty.copy(),
            self.last_sync.copy(), self.step_count, self.epoch_count,
        )


def fresh_state(n_features: int, config: OptimizerConfig) -> OptimizerState:
    grad_sq_init = config.grad_sq_init if config.algorithm == ADAGRAD else 0.0
    return OptimizerState(
        theta=np.zeros(n_features),
        grad_sq=np.full(n_features, grad_sq_init),
        delta_sq=np.zeros(n_features),
        total_penalty=np.zeros(n_features),
        applied_penalty=np.zeros(n_features),
        last_sync=np.zeros(n_features, dtype=np.int64),
    )


def hot_start(
    prev: OptimizerState,
    old_indices: np.ndarray,
    config: OptimizerConfig,
) -> OptimizerState:
    """Map a previous run's state onto a new feature list.

    ``old_indices[i]`` is the feature's index in the previous state, or -1
    for a new candidate.  Survivors keep weights and every accumulator;
    candidates start at weight zero with the minimum surviving total
    penalty, so they are not retroactively penalized for steps before they
    existed.
    """
    old_indices = np.asarray(old_indices, dtype=np.int64)
    state = fresh_state(old_indices.shape[0], config)
    state.step_count = prev.step_count
    state.epoch_count = prev.epoch_count
    survivors = old_indices >= 0
    src = old_indices[survivors]
    state.theta[survivors] = prev.theta[src]
    state.grad_sq[survivors] = prev.grad_sq[src]
    state.delta_sq[survivors] = prev.delta_sq[src]
    state.total_penalty[survivors] = prev.total_penalty[src]
    state.applied_penalty[survivors] = prev.applied_penalty[src]
    state.last_sync[survivors] = prev.last_sync[src]
    base_penalty = float(prev.total_penalty[src].min()) if src.size else 0.0
    state.total_penalty[~survivors] = base_penalty
    state.last_sync[~survivors] = prev.step_count
    return state


def _rates(state: OptimizerState, config: OptimizerConfig, idx: np.ndarray) -> np.ndarray:
    """Current adaptive per-dimension rates (the g -> 0 guard for accrual)."""
    if config.algorithm == ADAGRAD:
        return config.learning_rate / np.sqrt(state.grad_sq[idx])
    return config.learning_rate * (
        np.sqrt(state.delta_sq[idx] + config.epsilon)
        / np.sqrt(state.grad_sq[idx] + config.epsilon)
    )


def step(
    state: OptimizerState,
    config: OptimizerConfig,
    grad: np.ndarray,
    touched: np.ndarray,
    l1_factors: np.ndarray,
    l2_factors: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One two-phase update over the touched dimensions (in place).

    Returns (mid-update weights, post-clip weights) for the touched
    dimensions, so clip invariants are observable.
    """
    touched = np.asarray(touched, dtype=np.int64)
    t = state.step_count + 1
    if touched.size == 0:
        state.step_count = t
        return np.zeros(0), np.zeros(0)

    g = grad[touched]
    if not np.all(np.isfinite(g)):
        bad = touched[~np.isfinite(g)]
        raise OptimizerError(f"non-finite gradient in dimensions {bad[:8].tolist()}")
    rho = l1_factors[touched]
    w = state.theta[touched]
    if config.l2 > 0:
        rho2 = rho if l2_factors is None else l2_factors[touched]
        g = g + config.l2 * rho2 * w

    penalize = config.l1 > 0
    if penalize:
        idle = (t - 1) - state.last_sync[touched]
        if np.any(idle > 0):
            idle_rate = _rates(state, config, touched)
            state.total_penalty[touched] += (
                (config.l1 * rho / config.n_train) * idle_rate * idle
            )

    if config.algorithm == ADAGRAD:
        state.grad_sq[touched] += g * g
        rate = config.learning_rate / np.sqrt(state.grad_sq[touched])
    else:
        state.grad_sq[touched] = (
            config.decay * state.grad_sq[touched] + (1 - config.decay) * g * g
        )
        rate = config.learning_rate * (
            np.sqrt(state.delta_sq[touched] + config.epsilon)
            / np.sqrt(state.grad_sq[touched] + config.epsilon)
        )
    dw = -rate * g
    if config.algorithm == ADADELTA:
        state.delta_sq[touched] = (
            config.decay * state.delta_sq[touched] + (1 - config.decay) * dw * dw
        )
    w_mid = w + dw

    if penalize:
        state.total_penalty[touched] += (config.l1 * rho / config.n_train) * rate
        u = state.total_penalty[touched]
        q = state.applied_penalty[touched]
        w_new = np.where(
            w_mid > 0,
            np.maximum(0.0, w_mid - (u + q)),
            np.where(w_mid < 0, np.minimum(0.0, w_mid + (u - q)), 0.0),
        )
        state.applied_penalty[touched] = q + (w_new - w_mid)
        state.last_sync[touched] = t
    else:
        w_new = w_mid
    state.theta[touched] = w_new
    state.step_count = t
    return w_mid, w_new


@dataclass
class RunResult:
    theta: np.ndarray
    state: OptimizerState
    epochs: int
    reason: str
    final_loss: float


def run(
    loss_grad,
    n_data: int,
    config: OptimizerConfig,
    convergence: ConvergenceConfig,
    state: OptimizerState,
    l1_factors: np.ndarray,
    l2_factors: np.ndarray | None = None,
) -> RunResult:
    """Epochs of shuffled mini-batches until convergence or the epoch cap.

    ``loss_grad(theta, batch) -> (loss, grad, touched)`` supplies the
    model; the accumulated per-epoch loss feeds the loss-EMA criterion and
    the post-epoch active set feeds the fluctuation criterion.
    """
    if n_data < 1:
        raise OptimizerError("no training data")
    l1_factors = np.asarray(l1_factors, dtype=np.float64)
    if l1_factors.shape[0] != len(state):
        raise OptimizerError("per-feature factors do not match state size")
    if l2_factors is not None:
        l2_factors = np.asarray(l2_factors, dtype=np.float64)

    rng = np.random.default_rng(config.seed)
    loss_ema = None
    active_prev = state.theta != 0.0
    # seeded with the dimension count: everything counts as fluctuating
    # before epoch one, giving the criterion its intended inertia
    fluct_ema = float(len(state))
    reason = REASON_EPOCH_CAP
    epochs = 0
    epoch_loss = float("nan")

    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(n_data)
        epoch_loss = 0.0
        for start in range(0, n_data, config.batch_size):
            batch = perm[start : start + config.batch_size]
            loss, grad, touched = loss_grad(state.theta, batch)
            epoch_loss += loss
            step(state, config, grad, touched, l1_factors, l2_factors)
        epochs = epoch
        state.epoch_count += 1

        prev_ema = loss_ema
        if loss_ema is None:
            loss_ema = epoch_loss
        else:
            loss_ema = (
                convergence.loss_ema_decay * loss_ema
                + (1 - convergence.loss_ema_decay) * epoch_loss
            )
        active_now = state.theta != 0.0
        fluct = int(np.count_nonzero(active_prev ^ active_now))
        active_prev = active_now
        fluct_ema = (
            convergence.active_ema_decay * fluct_ema
            + (1 - convergence.active_ema_decay) * fluct
        )

        if prev_ema is not None and abs(loss_ema - prev_ema) < convergence.loss_tol:
            reason = REASON_LOSS
            break
        if fluct_ema < convergence.active_tol:
            reason = REASON_ACTIVE_SET
            break

    return RunResult(state.theta, state, epochs, reason, epoch_loss)
