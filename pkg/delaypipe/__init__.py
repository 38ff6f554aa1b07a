"""
Pipelined backpropagation with delayed gradients: derivation, planning and simulation
"""

from delaypipe.delay_planner import DelayAssignment, WeightStrategy, derive_delays
from delaypipe.pipeline_exec import PipelineExecutor, PipelineSchedule
from delaypipe.retimer import StagePartition, derive_by_retiming

__version__ = "0.1.0"

__all__ = [
    'DelayAssignment',
    'PipelineExecutor',
    'PipelineSchedule',
    'StagePartition',
    'WeightStrategy',
    'derive_by_retiming',
    'derive_delays',
]
