"""
Worlds, depth and collision images
==================================

Build a panel world, look at it through the simulated depth camera and turn
the depth image into a collision image, the target the encoder learns.
"""

import time

import numpy as np
from scipy.spatial.transform import Rotation

from dcenav.camera import CameraIntrinsics, SensorNoiseParams, apply_sensor_noise, render_depth
from dcenav.collision_image import collision_image, valid_mask
from dcenav.world import RobotBox, generate_world, sample_start_goal

# Levels below 5 are panel corridors; higher levels add free-floating boxes.
world = generate_world(level=3, seed=7)
print(f"room {np.round(world.room_dims, 2)} m, {len(world.obstacles)} obstacles")

start, goal = sample_start_goal(world, seed=7)
print("start", np.round(start, 2), "goal", np.round(goal, 2))

# Camera looks along +x of the robot; point it at the goal.
yaw = np.arctan2(goal[1] - start[1], goal[0] - start[0])
quat = Rotation.from_euler("z", yaw).as_quat()
intr = CameraIntrinsics(96, 72)
depth = render_depth(world, start, quat, intr)
print(f"depth range {depth.min():.2f}..{depth.max():.2f} m")

# Real sensors are noisy and drop pixels. Dropped pixels read 0.
noisy = apply_sensor_noise(depth, SensorNoiseParams(), seed=0, intr=intr)
print(f"invalid pixels after noise: {1 - valid_mask(noisy).mean():.1%}")

# Each collision-image pixel holds the nearest range at which the robot box,
# centred on that ray, would touch something.
robot = RobotBox()
coll = collision_image(depth, intr, robot)
print(f"mean depth {depth.mean():.2f} m -> mean collision range {coll[coll > 0].mean():.2f} m")

# The fast path is a sparse-table range-minimum query; it agrees exactly with
# the per-pixel loop.
stack = np.stack([apply_sensor_noise(depth, SensorNoiseParams(), seed=s, intr=intr) for s in range(20)])
t0 = time.perf_counter()
fast = collision_image(stack, intr, robot)
t1 = time.perf_counter()
slow = collision_image(stack, intr, robot, naive=True)
t2 = time.perf_counter()
print(f"identical: {np.array_equal(fast, slow)}  fast {t1 - t0:.3f}s  naive {t2 - t1:.3f}s")

# A coarse ASCII view of both images on a shared scale (blank = close).
lo, hi = coll[coll > 0].min(), depth.max()


def ascii(img, cols=48, rows=12):
    ramp = " .:-=+*#%@"
    small = img[:: img.shape[0] // rows, :: img.shape[1] // cols]
    idx = np.clip(((small - lo) / (hi - lo) * (len(ramp) - 1)).astype(int), 0, len(ramp) - 1)
    return "\n".join("".join(ramp[i] for i in row) for row in idx)

print(ascii(depth))
print()
print(ascii(coll))
