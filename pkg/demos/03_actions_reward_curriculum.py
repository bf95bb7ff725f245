"""
Actions, reward and curriculum
==============================

How a policy output becomes a velocity command, what the reward pays for,
and how the level moves with success and crash rates.
"""

import numpy as np

from dcenav.env import (CurriculumConfig, CurriculumState, Outcome, RewardParams,
                        compute_reward, curriculum_update, reward_at_level)
from dcenav.vehicle import ActionLimits, action_to_command

limits = ActionLimits()
for a in ([-1, 0, 0], [1, 0, 0], [1, 1, 0], [0, -1, 1]):
    vx, vy, vz, wz = action_to_command(np.array(a, float), limits)
    print(f"a={a!s:12} v=({vx:.2f}, {vy:.2f}, {vz:.2f}) m/s  yaw rate {np.degrees(wz):.0f} deg/s")

# Shaping weights grow linearly with the level. The training preset shifts the
# level by one (so level 0 is not reward-free) and pays for closing distance.
preset = RewardParams(level_offset=1.0, progress_sign=-1.0)
a = np.array([[0.5, 0.0, 0.0]])
for level in (0, 5, 10):
    p = reward_at_level(preset, level)
    closer = compute_reward([5.0], [4.9], a, a, p, [False], limits)[0]
    away = compute_reward([5.0], [5.1], a, a, p, [False], limits)[0]
    crash = compute_reward([5.0], [4.9], a, a, p, [True], limits)[0]
    print(f"level {level:2}: closer {closer:+.3f}  away {away:+.3f}  crash {crash:+.3f}")

# The curriculum looks at a window of episodes at the current level.
cfg = CurriculumConfig(min_episodes=10)
for succ, crash in ((8, 1), (3, 4), (6, 2)):
    s = CurriculumState(level=4)
    for _ in range(succ):
        s = s.record(Outcome.SUCCESS)
    for _ in range(crash):
        s = s.record(Outcome.CRASH)
    for _ in range(10 - succ - crash):
        s = s.record(Outcome.TIMEOUT)
    print(f"{succ}/10 success, {crash}/10 crash: level 4 -> {curriculum_update(s, cfg).level}")
