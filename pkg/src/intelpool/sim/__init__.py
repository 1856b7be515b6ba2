"""Historical-data driven mHealth simulator."""

from .environment import (
    EnvConfig,
    HeterogeneityScenario,
    MHealthSimulator,
    SimClock,
    SimState,
    SimUserProfile,
    default_feature_map,
    effect_features,
    generate_reward,
    get_location,
    get_temperature,
    recruit_schedule,
    sample_availability,
    step_statistics,
)
from .history import (
    HistoricalDataset,
    HistoryRecord,
    SparseHistoryError,
    SynthConfig,
    find_match,
    state_functions,
    synth_historical_dataset,
)
from .rng import stream

__all__ = [
    "EnvConfig", "HeterogeneityScenario", "MHealthSimulator", "SimClock", "SimState",
    "SimUserProfile", "default_feature_map", "effect_features", "generate_reward",
    "get_location", "get_temperature", "recruit_schedule", "sample_availability",
    "step_statistics", "HistoricalDataset", "HistoryRecord", "SparseHistoryError",
    "SynthConfig", "find_match", "state_functions", "synth_historical_dataset", "stream",
]
