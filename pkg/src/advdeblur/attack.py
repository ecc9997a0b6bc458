"""L-infinity bounded PGD with Adam updates against a deblurring operator."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .grad import Targeted, Untargeted, loss_and_grad
from .imaging import MetricsRecord, as_image, evaluate, save_raw
from .reconstructors import Reconstructor, reconstruct

STEP_SIZE = 1e-3
STEPS_UNTARGETED = 250
STEPS_TARGETED = 500
EPSILONS_255 = (4, 8, 12)
EPSILONS = tuple(e / 255 for e in EPSILONS_255)

MODES = ("targeted", "untargeted")
INITS = ("zeros", "uniform")


@dataclass(frozen=True)
class AttackConfig:
    """PGD hyperparameters.

    ``num_steps=None`` and ``init=None`` pick per-mode defaults. Untargeted
    attacks start from a uniform random point because their loss has a zero
    gradient at ``delta = 0``.
    """

    mode: str = "untargeted"
    epsilon: float = 4 / 255
    num_steps: Optional[int] = None
    step_size: float = STEP_SIZE
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    init: Optional[str] = None
    clamp_input: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.init is None:
            object.__setattr__(self, "init", "zeros" if self.mode == "targeted" else "uniform")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}, got {self.init!r}")
        if self.num_steps is None:
            steps = STEPS_TARGETED if self.mode == "targeted" else STEPS_UNTARGETED
            object.__setattr__(self, "num_steps", steps)
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.num_steps < 0:
            raise ValueError("num_steps must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")


@dataclass(frozen=True, eq=False)
class AttackResult:
    delta: np.ndarray
    objective_trace: list
    best_step: int
    adversarial_input: np.ndarray
    adversarial_output: np.ndarray
    linf_trace: list = field(default_factory=list)
    target: Optional[np.ndarray] = None

    @property
    def best_objective(self) -> float:
        return self.objective_trace[self.best_step]


def project_linf(delta, epsilon: float) -> np.ndarray:
    return np.clip(delta, -epsilon, epsilon)


def _initial_delta(shape, cfg: AttackConfig) -> np.ndarray:
    if cfg.init == "zeros" or cfg.epsilon == 0:
        return np.zeros(shape)
    rng = np.random.default_rng(cfg.seed)
    return rng.uniform(-cfg.epsilon, cfg.epsilon, size=shape)


def pgd_attack(r: Reconstructor, y, cfg: AttackConfig, target=None, loss_scale: float = 1.0) -> AttackResult:
    """Minimize the attack loss over the L-infinity ball of radius ``epsilon``.

    Each step takes an Adam step on ``delta`` and then projects back onto the
    ball; Adam moments are never reset or projected. The iterate with the
    lowest loss seen (step 0 included) is returned, not the last one.
    ``loss_scale`` multiplies the objective and exists for invariance checks.
    """
    y = as_image(y)
    if cfg.mode == "targeted":
        if target is None:
            raise ValueError("targeted attack needs a target image")
        target = as_image(target)
        loss = Targeted(target)
    else:
        if target is not None:
            raise ValueError("untargeted attack takes no target")
        loss = Untargeted(reconstruct(r, y))

    eps = cfg.epsilon
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2

    def constrain(d):
        d = project_linf(d, eps)
        if cfg.clamp_input:
            d = project_linf(np.clip(y + d, 0.0, 1.0) - y, eps)
        return d

    delta = constrain(_initial_delta(y.shape, cfg))
    m = np.zeros_like(delta)
    v = np.zeros_like(delta)
    trace, linf = [], []
    best, best_step, best_delta = np.inf, 0, delta
    for t in range(cfg.num_steps + 1):
        value, g = loss_and_grad(r, y, delta, loss, scale=loss_scale)
        if not (np.isfinite(value) and np.all(np.isfinite(g))):
            raise FloatingPointError(f"non-finite loss or gradient at PGD step {t}")
        trace.append(value)
        linf.append(float(np.max(np.abs(delta))))
        if value < best:
            best, best_step, best_delta = value, t, delta
        if t == cfg.num_steps:
            break
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** (t + 1))
        vhat = v / (1 - b2 ** (t + 1))
        delta = constrain(delta - cfg.step_size * mhat / (np.sqrt(vhat) + cfg.adam_eps))

    adv_in = y + best_delta
    return AttackResult(
        delta=best_delta,
        objective_trace=trace,
        best_step=best_step,
        adversarial_input=adv_in,
        adversarial_output=reconstruct(r, adv_in),
        linf_trace=linf,
        target=target,
    )


def transfer_eval(r_craft: Reconstructor, r_eval: Reconstructor, result: AttackResult, y, source) -> MetricsRecord:
    """Metrics of ``r_eval(y + delta)`` for a ``delta`` crafted against ``r_craft``."""
    if r_craft.kind != r_eval.kind or r_craft.kernel is not r_eval.kernel:
        raise ValueError("craft and eval reconstructors must differ only in configuration")
    y = as_image(y)
    if result.delta.shape != y.shape:
        raise ValueError(f"delta shape {result.delta.shape} != input shape {y.shape}")
    out = reconstruct(r_eval, y + result.delta)
    return evaluate(out, source, result.target)


def save_result(result: AttackResult, directory) -> dict:
    """Write delta, adversarial input/output (DBIM) and the loss trace (CSV)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "delta": d / "delta.dbim",
        "adversarial_input": d / "adv_input.dbim",
        "adversarial_output": d / "adv_output.dbim",
        "trace": d / "trace.csv",
    }
    save_raw(result.delta, paths["delta"])
    save_raw(result.adversarial_input, paths["adversarial_input"])
    save_raw(result.adversarial_output, paths["adversarial_output"])
    with open(paths["trace"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(result.objective_trace):
            w.writerow([i, repr(v)])
    return paths
