"""Composed classifiers: sensors alone, or sensors followed by the reasoning layer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .em import Example, TrainConfig, TrainedModel, train
from .synth import Dataset, SensorBank, Task


@dataclass
class MainOnly:
    """Argmax of the main sensor."""

    bank: SensorBank

    def __call__(self, X) -> np.ndarray:
        return np.argmax(self.bank.main.logits(np.atleast_2d(X)), axis=1)


@dataclass
class Care:
    """Sensors, then the trained posterior, then argmax over the class group."""

    bank: SensorBank
    model: TrainedModel

    def __post_init__(self):
        self._cls = np.asarray(self.model.graph.groups[self.model.rules.main_group])

    def from_confidences(self, Z) -> np.ndarray:
        q = self.model.posterior(np.atleast_2d(Z))
        return np.argmax(q[:, self._cls], axis=1)

    def __call__(self, X) -> np.ndarray:
        return self.from_confidences(self.bank.sense(X))


def reasoning_examples(task: Task, bank: SensorBank, data: Dataset, sigma: float, copies: int,
                       rng: np.random.Generator) -> list[Example]:
    """Confidences of noisy training inputs paired with their ground-truth worlds."""
    X = np.concatenate([data.X] * copies)
    y = np.tile(data.y, copies)
    if sigma > 0:
        X = X + rng.normal(0.0, sigma, X.shape)
    Z = bank.sense(X)
    W = task.truth_world(y)
    return [Example(z, w) for z, w in zip(Z, W)]


def train_reasoning(task: Task, rules, bank: SensorBank, data: Dataset, sigma: float,
                    config: TrainConfig, copies: int = 1) -> TrainedModel:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 20]))
    return train(rules, reasoning_examples(task, bank, data, sigma, copies, rng), config)
