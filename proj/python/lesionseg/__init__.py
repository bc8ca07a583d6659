from ._core import (
    ConfigError,
    DataError,
    GeometryError,
    SelectionError,
    __version__,
    channel_stats,
    connected_components,
    count_parameters,
    describe_network,
    dice,
    false_negative_volume,
    false_positive_volume,
    generate_study,
    normalize,
    run_cli,
    select_hard_samples,
)

__all__ = [
    "ConfigError",
    "DataError",
    "GeometryError",
    "SelectionError",
    "__version__",
    "channel_stats",
    "connected_components",
    "count_parameters",
    "describe_network",
    "dice",
    "false_negative_volume",
    "false_positive_volume",
    "generate_study",
    "normalize",
    "run_cli",
    "select_hard_samples",
]
