"""
Weight-versioning strategies for delayed gradients.

A layer whose gradient arrives k updates late computes its backward pass
against some version of its weights. Exact stashing keeps the historical
copies; the latest strategy uses the live weights; the EMA strategies rebuild
the historical weights from the live ones and a running mean of recent
gradients:

    W(t - k) ~= W(t) + lr * k * mean(G)

k is the layer's round-trip staleness 2S(l)+1, always odd. The analytic
schedule beta(n) = n / (n + 1) turns the moving average into the exact running
mean; capping n at k - 1 turns it into a mean over the last k gradients, which
is the window the reconstruction has to undo.
"""

import logging
from abc import ABC, abstractmethod
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np

from delaypipe.delay_planner import DelayAssignment, WeightStrategy
from delaypipe.errors import ColdAveragerError, HistoryGapError, MissingSnapshotError, ShapeError, StashError, StrategyError
from delaypipe.nn_core import AppliedUpdate, LayerGrads, Tensor

logger = logging.getLogger(__name__)

DEFAULT_FIXED_BETA = 0.9


def beta(n: int) -> float:
    if n < 0:
        raise ValueError(f"beta(n) needs n >= 0, got {n}")
    return n / (n + 1)


def beta_complement(n: int) -> float:
    if n < 0:
        raise ValueError(f"beta(n) needs n >= 0, got {n}")
    return 1 / (n + 1)


class AveragerMode(str, Enum):
    ANALYTIC = "analytic-beta"
    FIXED = "fixed-beta"


@dataclass
class GradientAverager:
    """Moving average of one layer's gradients.

    In analytic mode without a window the mean is the exact mean of every
    gradient seen. With ``window=k`` the schedule stops growing at beta(k - 1),
    so the newest gradient always carries weight 1/k.
    """

    mode: AveragerMode = AveragerMode.ANALYTIC
    fixed_beta: float = DEFAULT_FIXED_BETA
    mean: Optional[Tensor] = None
    count: int = 0
    window: Optional[int] = None

    def __post_init__(self) -> None:
        if self.mode is AveragerMode.FIXED and not 0 <= self.fixed_beta < 1:
            raise StrategyError(f"Fixed beta must be in [0, 1), got {self.fixed_beta}")
        if self.window is not None and self.window < 1:
            raise StrategyError(f"Averaging window must be positive, got {self.window}")

    @property
    def is_warm(self) -> bool:
        return self.count >= 1

    def update(self, g: Tensor) -> "GradientAverager":
        if self.mean is None:
            self.mean = np.zeros_like(g, dtype=np.result_type(g, np.float64))
        elif self.mean.shape != g.shape:
            raise ShapeError(f"Gradient shape {g.shape} does not match average {self.mean.shape}")
        if self.mode is AveragerMode.ANALYTIC:
            n = self.count if self.window is None else min(self.count, self.window - 1)
            b, c = beta(n), beta_complement(n)
        else:
            b, c = self.fixed_beta, 1.0 - self.fixed_beta
        self.mean = b * self.mean + c * g
        self.count += 1
        return self


def update_average(a: GradientAverager, g: Tensor) -> GradientAverager:
    return a.update(g)


def reconstruct(current: Tensor, averager: GradientAverager, lr: float, k: int) -> Tensor:
    """Estimate the weights ``k`` updates ago: W + lr * k * mean.

    ``k`` is a round-trip staleness and must be odd; ``k == 0`` (no delay)
    returns ``current`` untouched.
    """
    if k < 0:
        raise ValueError(f"Staleness must be nonnegative, got {k}")
    if k == 0:
        return current
    if k % 2 == 0:
        raise ValueError(f"Staleness must be odd (2n+1), got {k}")
    if not averager.is_warm:
        raise ColdAveragerError("Gradient averager has not observed any gradient yet")
    return current + (lr * k) * averager.mean


def reconstruction_error_bound(window: Sequence[Tensor], mean: Tensor, lr: float) -> float:
    """lr * k * max ||G - mean|| over a logged window of k gradients."""
    if not window:
        return 0.0
    return lr * len(window) * max(float(np.linalg.norm(g - mean)) for g in window)


class StashBuffer:
    """Weight snapshots keyed by version, oldest first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise StashError(f"Stash capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._entries: "OrderedDict[int, Tensor]" = OrderedDict()
        self.peak = 0

    def put(self, version: int, weights: Tensor) -> None:
        if self._entries and version <= next(reversed(self._entries)):
            raise StashError(f"Stash versions must increase; got {version} after {next(reversed(self._entries))}")
        if len(self._entries) >= self.capacity:
            raise StashError(f"Stash overflow: capacity {self.capacity} exceeded by version {version}")
        self._entries[version] = weights.copy()
        self.peak = max(self.peak, len(self._entries))

    def get(self, version: int) -> Tensor:
        try:
            return self._entries[version]
        except KeyError:
            raise MissingSnapshotError(f"No stashed weights for version {version}; held {list(self._entries)}") from None

    def drop(self, version: int) -> None:
        self._entries.pop(version, None)

    def versions(self) -> List[int]:
        return list(self._entries)

    def __contains__(self, version: int) -> bool:
        return version in self._entries

    def __len__(self) -> int:
        return len(self._entries)


@dataclass(frozen=True)
class StrategySpec:
    strategy: WeightStrategy
    beta: float = DEFAULT_FIXED_BETA

    @classmethod
    def parse(cls, text: str) -> "StrategySpec":
        """Parse ``stash``, ``latest``, ``ema-fixed[:<beta>]`` or ``ema-pipeline``."""
        strategy = WeightStrategy.parse(text)
        if ":" not in text:
            return cls(strategy)
        if strategy is not WeightStrategy.FIXED_EMA:
            raise StrategyError(f"Only ema-fixed takes a parameter, got '{text}'")
        try:
            value = float(text.split(":", 1)[1])
        except ValueError:
            raise StrategyError(f"Cannot parse beta in '{text}'") from None
        if not 0 <= value < 1:
            raise StrategyError(f"Fixed beta must be in [0, 1), got {value}")
        return cls(strategy, value)

    @property
    def label(self) -> str:
        if self.strategy is WeightStrategy.FIXED_EMA:
            return f"ema-fixed:{self.beta:g}"
        return {WeightStrategy.EXACT_STASH: "stash", WeightStrategy.LATEST: "latest", WeightStrategy.PIPELINE_EMA: "ema-pipeline"}[self.strategy]


class WeightProvider(ABC):
    """Supplies the weights a delayed backward pass runs against.

    Call order per layer and tick: ``on_forward`` for the tick's forward,
    ``provide`` then ``release`` for its backward, ``before_update`` and
    ``after_update`` around the weight update. ``staleness[l]`` is the number
    of updates layer l sees between a forward and the update its gradient feeds.
    """

    strategy: WeightStrategy

    def __init__(self, staleness: Sequence[int]):
        self.staleness = list(staleness)
        self.logger = logging.getLogger(type(self).__name__)

    def on_forward(self, layer: int, version: int) -> None:
        pass

    def release(self, layer: int, version: int) -> None:
        pass

    def before_update(self, layer: int, version: int, live: Tensor) -> None:
        pass

    def after_update(self, layer: int, grads: LayerGrads, update: AppliedUpdate, lr: float) -> None:
        pass

    @abstractmethod
    def provide(self, layer: int, t: int, k: int, live: Tensor, lr: float) -> Tensor:
        """Weights for version ``max(0, t - k)`` given live weights at version ``t``."""

    def stashed_copies(self, layer: int) -> int:
        return 0

    def peak_copies(self) -> List[int]:
        return [0] * len(self.staleness)

    def accumulators(self) -> int:
        return 0


class ExactStashProvider(WeightProvider):
    strategy = WeightStrategy.EXACT_STASH

    def __init__(self, staleness: Sequence[int]):
        super().__init__(staleness)
        self.buffers = [StashBuffer(k + 1) for k in self.staleness]
        self.pending: List[Dict[int, int]] = [{} for _ in self.staleness]

    def on_forward(self, layer: int, version: int) -> None:
        refs = self.pending[layer]
        refs[version] = refs.get(version, 0) + 1

    def release(self, layer: int, version: int) -> None:
        refs = self.pending[layer]
        if refs.get(version, 0) < 1:
            raise StashError(f"Layer {layer}: version {version} released more often than it was used")
        refs[version] -= 1
        if not refs[version]:
            del refs[version]
            self.buffers[layer].drop(version)

    def before_update(self, layer: int, version: int, live: Tensor) -> None:
        # The live weights are about to change; keep them while a backward still needs them.
        if self.pending[layer].get(version):
            self.buffers[layer].put(version, live)

    def provide(self, layer: int, t: int, k: int, live: Tensor, lr: float) -> Tensor:
        target = max(0, t - k)
        if target == t:
            return live
        return self.buffers[layer].get(target)

    def stashed_copies(self, layer: int) -> int:
        return len(self.buffers[layer])

    def peak_copies(self) -> List[int]:
        return [b.peak for b in self.buffers]


class LatestProvider(WeightProvider):
    strategy = WeightStrategy.LATEST

    def provide(self, layer: int, t: int, k: int, live: Tensor, lr: float) -> Tensor:
        return live


class EmaProvider(WeightProvider):
    """Reconstructs historical weights from an averaged gradient.

    ``accumulate='gradient'`` averages raw weight gradients and scales the
    mean by the current lr. ``'update'`` averages the applied descent steps
    themselves (lr already folded in), which follows the true parameter
    trajectory under momentum, weight decay and a changing lr. In analytic mode
    each averager covers a window of exactly its layer's staleness. Until an
    averager has seen ``max(warmup, k)`` updates the live weights are used.
    """

    def __init__(self, staleness: Sequence[int], mode: AveragerMode, fixed_beta: float = DEFAULT_FIXED_BETA, warmup: int = 0, accumulate: str = "gradient"):
        super().__init__(staleness)
        if accumulate not in ("gradient", "update"):
            raise StrategyError(f"Unknown accumulation mode '{accumulate}'")
        self.strategy = WeightStrategy.PIPELINE_EMA if mode is AveragerMode.ANALYTIC else WeightStrategy.FIXED_EMA
        self.warmup = warmup
        self.accumulate = accumulate
        self.averagers: Dict[int, GradientAverager] = {
            l: GradientAverager(mode, fixed_beta, window=k if mode is AveragerMode.ANALYTIC else None)
            for l, k in enumerate(self.staleness)
            if k > 0
        }
        self.fallbacks = 0

    def after_update(self, layer: int, grads: LayerGrads, update: AppliedUpdate, lr: float) -> None:
        averager = self.averagers.get(layer)
        if averager is None:
            return
        averager.update(grads.dW if self.accumulate == "gradient" else -update.dW)

    def provide(self, layer: int, t: int, k: int, live: Tensor, lr: float) -> Tensor:
        if k == 0:
            return live
        averager = self.averagers[layer]
        if averager.count < max(self.warmup, k):
            self.fallbacks += 1
            return live
        return reconstruct(live, averager, lr if self.accumulate == "gradient" else 1.0, k)

    def accumulators(self) -> int:
        return len(self.averagers)


def make_provider(spec: StrategySpec, assignment: DelayAssignment, warmup: int = 0, accumulate: str = "gradient") -> WeightProvider:
    staleness = [assignment.staleness(l) for l in range(assignment.num_layers)]
    logger.debug(f"Building {spec.label} provider for staleness {staleness}")
    if spec.strategy is WeightStrategy.EXACT_STASH:
        return ExactStashProvider(staleness)
    if spec.strategy is WeightStrategy.LATEST:
        return LatestProvider(staleness)
    mode = AveragerMode.ANALYTIC if spec.strategy is WeightStrategy.PIPELINE_EMA else AveragerMode.FIXED
    return EmaProvider(staleness, mode, spec.beta, warmup, accumulate)


def provide(provider: WeightProvider, layer: int, t: int, k: int, live: Tensor, lr: float) -> Tensor:
    return provider.provide(layer, t, k, live, lr)


@dataclass(frozen=True)
class UpdateRecord:
    """W(version + 1) = W(version) + update."""

    version: int
    update: Tensor


class UpdateLog:
    """Per-layer log of applied updates, kept for the exact-history oracle."""

    def __init__(self, num_layers: int):
        self.records: List[Dict[int, UpdateRecord]] = [{} for _ in range(num_layers)]

    def record(self, layer: int, version: int, update: Tensor) -> None:
        self.records[layer][version] = UpdateRecord(version, update.copy())

    def window(self, layer: int, t: int, k: int) -> List[UpdateRecord]:
        return [self.records[layer][v] for v in range(t - k, t) if v in self.records[layer]]


def exact_history_oracle(current: Tensor, records: Sequence[UpdateRecord], t: int, k: int) -> Tensor:
    """Rebuild W(t - k) from W(t) by undoing logged updates newest first."""
    by_version = {r.version: r for r in records}
    missing = [v for v in range(t - k, t) if v not in by_version]
    if missing:
        raise HistoryGapError(f"Update log is missing versions {missing}")
    w = current
    for v in range(t - 1, t - k - 1, -1):
        w = w - by_version[v].update
    return w
