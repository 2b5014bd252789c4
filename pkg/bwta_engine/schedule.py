"""
Stage schedules for smooth multi-stage training.

The final (ternary) stage gets half of the epoch budget, rounded up; the other half is
split evenly over the earlier stages with any leftover epochs going to the latest of them.
"""

from typing import List, Sequence

import structlog

from .errors import ScheduleError
from .models import LevelConvention, Schedule, ScheduleKind, Stage, TrainConfig

logger = structlog.get_logger(__name__)


def allocate_epochs(n_stages: int, total_epochs: int) -> List[int]:
    if n_stages < 1:
        raise ScheduleError("schedule has no stages")
    if total_epochs < n_stages:
        raise ScheduleError(f"{total_epochs} epochs cannot cover {n_stages} stages")
    if n_stages == 1:
        return [total_epochs]

    final = -(-total_epochs // 2)
    rest = total_epochs - final
    earlier = n_stages - 1
    base, leftover = divmod(rest, earlier)
    if base == 0:
        # too few epochs for an even split: one each, the final stage keeps the remainder
        return [1] * earlier + [total_epochs - earlier]
    epochs = [base] * earlier
    for i in range(earlier - leftover, earlier):
        epochs[i] += 1
    return epochs + [final]


def _schedule(levels: Sequence[int], total_epochs: int) -> Schedule:
    epochs = allocate_epochs(len(levels), total_epochs)
    schedule = Schedule(tuple(Stage(L, e) for L, e in zip(levels, epochs)))
    logger.debug("built schedule", **schedule.to_dict())
    return schedule


def build_schedule(L0: int, stride: int, total_epochs: int) -> Schedule:
    """Levelwise schedule L0, L0 - stride, ... down to 1."""
    if L0 < 1:
        raise ScheduleError(f"L0 must be >= 1, got {L0}")
    if stride < 1:
        raise ScheduleError(f"stride must be >= 1, got {stride}")
    levels = list(range(L0, 0, -stride))
    if levels[-1] != 1:
        levels.append(1)
    return _schedule(levels, total_epochs)


def build_bitwise_schedule(L0: int, total_epochs: int) -> Schedule:
    """Baseline that halves L each stage (4, 2, 1)."""
    if L0 < 1:
        raise ScheduleError(f"L0 must be >= 1, got {L0}")
    levels = [L0]
    while levels[-1] > 1:
        levels.append(levels[-1] // 2)
    return _schedule(levels, total_epochs)


def level_from_count(n_levels: int) -> int:
    """Half-range L of a grid with n_levels = 2L + 1 integers."""
    if n_levels < 3 or n_levels % 2 == 0:
        raise ScheduleError(f"a symmetric grid has an odd level count >= 3, got {n_levels}")
    return (n_levels - 1) // 2


def build_schedule_from_levels(
    levels: Sequence[int],
    total_epochs: int,
    convention: LevelConvention = LevelConvention.HALF_RANGE,
) -> Schedule:
    """Explicit stage list, e.g. 19,15,11,7,3 read as level counts."""
    if not levels:
        raise ScheduleError("empty stage list")
    if convention is LevelConvention.LEVEL_COUNT:
        levels = [level_from_count(n) for n in levels]
    return _schedule(list(levels), total_epochs)


def schedule_from_config(config: TrainConfig) -> Schedule:
    if config.stages:
        return build_schedule_from_levels(config.stages, config.total_epochs, config.level_convention)
    if config.schedule is ScheduleKind.BITWISE:
        return build_bitwise_schedule(config.L0, config.total_epochs)
    return build_schedule(config.L0, config.stride, config.total_epochs)
