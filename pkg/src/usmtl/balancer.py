"""Temperature-based task sampling and dynamic loss weights driven by loss EMAs."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .heads import Family
from .losses import REWEIGHTED_FAMILIES

LOSS_FLOOR = 1e-8


@dataclass
class BalancerConfig:
    temperature: float = 0.7
    ema_beta: float = 0.98
    gamma: float = 0.5
    clamp_lo: float = 0.25
    clamp_hi: float = 4.0
    ema_init: float = 1.0

    def to_dict(self):
        return asdict(self)


class TaskBalancer:
    """Holds per-task frequencies and loss EMAs; draws task ids from a seeded stream.

    Frequencies come from the static dataset sizes passed at construction.
    """

    def __init__(self, task_sizes: dict[str, int], families: dict[str, Family] | None = None,
                 config: BalancerConfig | None = None, seed: int = 42):
        if not task_sizes:
            raise ValueError("TaskBalancer needs at least one task")
        self.config = config or BalancerConfig()
        self.task_ids = list(task_sizes)
        counts = np.array([task_sizes[t] for t in self.task_ids], dtype=np.float64)
        if np.any(counts <= 0):
            raise ValueError(f"task sizes must be positive: {task_sizes}")
        self.counts = counts
        self.frequency = counts / counts.sum()
        self.ema = np.full(len(self.task_ids), float(self.config.ema_init))
        self.families = {t: Family.parse(f) for t, f in (families or {}).items()}
        self._index = {t: i for i, t in enumerate(self.task_ids)}
        self.rng = np.random.default_rng(seed)

    def _idx(self, task: str) -> int:
        try:
            return self._index[task]
        except KeyError:
            raise KeyError(f"unknown task {task!r}; registered: {self.task_ids}") from None

    def update_ema(self, task: str, observed_loss: float) -> None:
        if not np.isfinite(observed_loss) or observed_loss < 0:
            raise ValueError(f"update_ema: loss for {task} must be finite and >= 0, got {observed_loss}")
        i = self._idx(task)
        beta = self.config.ema_beta
        self.ema[i] = beta * self.ema[i] + (1.0 - beta) * max(observed_loss, LOSS_FLOOR)

    def probabilities(self) -> np.ndarray:
        """p_k proportional to (f_k * m_k / mean(m)) ** (1 / temperature)."""
        rel = self.ema / self.ema.mean()
        score = self.frequency * rel
        exponent = 0.0 if np.isinf(self.config.temperature) else 1.0 / self.config.temperature
        # normalize in log space so small temperatures cannot underflow
        logits = exponent * np.log(score)
        w = np.exp(logits - logits.max())
        return w / w.sum()

    def probability_map(self) -> dict[str, float]:
        return dict(zip(self.task_ids, self.probabilities().tolist()))

    def sample_task(self) -> str:
        p = self.probabilities()
        u = self.rng.random()
        i = int(np.searchsorted(np.cumsum(p), u, side="right"))
        return self.task_ids[min(i, len(p) - 1)]

    def dynamic_weight(self, task: str) -> float:
        family = self.families.get(task)
        if family is not None and family not in REWEIGHTED_FAMILIES:
            raise ValueError(f"dynamic weighting applies to classification/detection only; {task} is {family.value}")
        rel = self.ema[self._idx(task)] / self.ema.mean()
        return float(np.clip(rel**self.config.gamma, self.config.clamp_lo, self.config.clamp_hi))

    def state(self) -> dict:
        return {
            "task_ids": list(self.task_ids),
            "frequency": self.frequency.tolist(),
            "ema": self.ema.tolist(),
        }
