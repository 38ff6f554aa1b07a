"""
Closed-form delay and storage planning for a stage partition.

Delay(l) = 2 * S(l), where S(l) counts the stage boundaries downstream of
layer l. The graph-level stash depths are S(l) stage round trips. With one
microbatch entering per tick a round trip spans staleness(l) = 2S(l)+1 weight
updates, so exact stashing holds staleness(l) live copies per layer (O(L * n))
while EMA reconstruction holds one accumulator per delayed layer.
"""

import json
import logging
from dataclasses import asdict, dataclass
from enum import Enum
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Sequence, Tuple

from delaypipe.errors import PartitionError, StrategyError

if TYPE_CHECKING:
    from delaypipe.retimer import StagePartition

logger = logging.getLogger(__name__)


class WeightStrategy(str, Enum):
    EXACT_STASH = "exact-stash"
    LATEST = "latest"
    FIXED_EMA = "fixed-ema"
    PIPELINE_EMA = "pipeline-aware-ema"

    @classmethod
    def parse(cls, text: str) -> "WeightStrategy":
        """Accept canonical ids and CLI spellings (stash, ema-fixed[:beta], ema-pipeline)."""
        key = text.strip().split(":", 1)[0]
        aliases = {"stash": cls.EXACT_STASH, "ema-fixed": cls.FIXED_EMA, "ema-pipeline": cls.PIPELINE_EMA}
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            choices = sorted([s.value for s in cls] + list(aliases))
            raise StrategyError(f"Unknown weight strategy '{text}'. Choose from: {', '.join(choices)}") from None

    @property
    def uses_averager(self) -> bool:
        return self in (WeightStrategy.FIXED_EMA, WeightStrategy.PIPELINE_EMA)


@dataclass(frozen=True)
class DelayAssignment:
    gradient_delay: Tuple[int, ...]
    weight_stash_depth: Tuple[int, ...]
    activation_stash_depth: Tuple[int, ...]

    def __post_init__(self) -> None:
        n = len(self.gradient_delay)
        if len(self.weight_stash_depth) != n or len(self.activation_stash_depth) != n:
            raise PartitionError("Per-layer delay lists must have equal length")
        if any(d < 0 or d % 2 for d in self.gradient_delay):
            raise PartitionError(f"Gradient delays must be nonnegative and even, got {list(self.gradient_delay)}")

    @property
    def num_layers(self) -> int:
        return len(self.gradient_delay)

    def stages_after(self, layer: int) -> int:
        return self.gradient_delay[layer] // 2

    def staleness(self, layer: int) -> int:
        """Round-trip staleness 2S(l)+1 in slots; 0 for the output-most stage."""
        s = self.stages_after(layer)
        return 2 * s + 1 if s else 0

    def stash_copies(self, layer: int) -> int:
        """Weight versions an exact stash keeps alive for layer l in steady state."""
        return self.staleness(layer)

    def activation_slots(self, layer: int) -> int:
        """Forward caches in flight for layer l, counting the one being consumed."""
        return self.staleness(layer) + 1

    @property
    def delayed_layers(self) -> List[int]:
        return [l for l, d in enumerate(self.gradient_delay) if d > 0]


@dataclass(frozen=True)
class StorageCost:
    stashed_weight_copies: int
    stashed_activation_slots: int
    ema_accumulators: int


def derive_delays(num_layers: int, p: "StagePartition") -> DelayAssignment:
    if p.num_layers != num_layers:
        raise PartitionError(f"Partition covers {p.num_layers} layers, network has {num_layers}")
    s = [p.stages_after(l) for l in range(num_layers)]
    logger.debug(f"Stages after each layer for partition {p}: {s}")
    return DelayAssignment(tuple(2 * k for k in s), tuple(s), tuple(s))


def storage_cost(a: DelayAssignment, strategy: WeightStrategy) -> StorageCost:
    if not isinstance(strategy, WeightStrategy):
        strategy = WeightStrategy.parse(str(strategy))
    slots = sum(a.activation_slots(l) for l in range(a.num_layers))
    if strategy is WeightStrategy.EXACT_STASH:
        return StorageCost(sum(a.stash_copies(l) for l in range(a.num_layers)), slots, 0)
    if strategy is WeightStrategy.LATEST:
        return StorageCost(0, slots, 0)
    return StorageCost(0, slots, len(a.delayed_layers))


def stash_weight_bytes(a: DelayAssignment, strategy: WeightStrategy, weight_bytes: Sequence[int]) -> int:
    """Bytes of stashed weight copies given each layer's weight matrix size."""
    if strategy is not WeightStrategy.EXACT_STASH:
        return 0
    return sum(a.stash_copies(l) * b for l, b in enumerate(weight_bytes))


def accumulator_bytes(a: DelayAssignment, strategy: WeightStrategy, weight_bytes: Sequence[int]) -> int:
    if not strategy.uses_averager:
        return 0
    return sum(weight_bytes[l] for l in a.delayed_layers)


def stash_activation_bytes(a: DelayAssignment, input_bytes: Sequence[int]) -> int:
    """Bytes held by the activation stash when every slot is full.

    ``input_bytes[l]`` is the size of one forward cache of layer l.
    """
    return sum(a.activation_slots(l) * b for l, b in enumerate(input_bytes))


def is_refinement(fine: "StagePartition", coarse: "StagePartition") -> bool:
    """True when ``fine`` splits stages of ``coarse`` without moving any boundary."""
    return fine.is_refinement_of(coarse)


def plan_to_dict(a: DelayAssignment, strategies: Optional[Sequence[WeightStrategy]] = None) -> Dict[str, Any]:
    strategies = list(strategies or WeightStrategy)
    layers = []
    for l in range(a.num_layers):
        layers.append(
            {
                "layer": l,
                "stages_after": a.stages_after(l),
                "gradient_delay": a.gradient_delay[l],
                "staleness": a.staleness(l),
                "weight_stash_depth": a.weight_stash_depth[l],
                "stash_copies": a.stash_copies(l),
                "activation_stash_depth": a.activation_stash_depth[l],
            }
        )
    return {"layers": layers, "storage": {s.value: asdict(storage_cost(a, s)) for s in strategies}}


def format_plan_table(a: DelayAssignment, strategies: Optional[Sequence[WeightStrategy]] = None) -> str:
    header = f"{'layer':>5} {'S(l)':>5} {'delay':>6} {'stale':>6} {'w-stash':>8} {'a-stash':>8} {'copies':>7}"
    lines = [header, "-" * len(header)]
    for l in range(a.num_layers):
        lines.append(
            f"{l:>5} {a.stages_after(l):>5} {a.gradient_delay[l]:>6} {a.staleness(l):>6} "
            f"{a.weight_stash_depth[l]:>8} {a.activation_stash_depth[l]:>8} {a.stash_copies(l):>7}"
        )
    lines.append("")
    lines.append(f"{'strategy':<20} {'weight copies':>14} {'act slots':>10} {'accumulators':>13}")
    for s in strategies or WeightStrategy:
        cost = storage_cost(a, s)
        lines.append(f"{s.value:<20} {cost.stashed_weight_copies:>14} {cost.stashed_activation_slots:>10} {cost.ema_accumulators:>13}")
    return "\n".join(lines)


def plan_to_json(a: DelayAssignment, strategies: Optional[Sequence[WeightStrategy]] = None) -> str:
    return json.dumps(plan_to_dict(a, strategies), indent=2)
