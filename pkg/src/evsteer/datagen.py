"""Synthetic recording generation.

Each seeded recording drives the predator with a scripted operator-style
policy (track / sweep / lose / pause phases) while the prey wanders between
random waypoints, with per-recording randomized lighting gain, speeds, start
poses, and distractor placement. Ground-truth label lines come from the true
prey bearing, written every render step, so dataset labels need no hand work.
Recordings land on disk in the event/APS/label formats of evsteer.frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from evsteer.behavior import VelocityCmd
from evsteer.frames import (EVENT_DTYPE, Recording, aps_resize)
from evsteer.runner import WaypointPolicy
from evsteer.sim import (Distractor, RobotState, SimConfig, WorldSim,
                         _wall_distances, wrap_angle)


@dataclass
class DatagenConfig:
    sim: SimConfig
    duration_s: float = 8.0
    prey_speed_range: tuple = (0.25, 0.7)
    predator_speed_range: tuple = (0.5, 1.3)
    light_gain_range: tuple = (0.65, 1.3)


class ChaseScript:
    """Operator-style predator driver with phase variety for label coverage.

    track:  steer proportional to the prey bearing, close distance
    offset: track while holding the prey deliberately off-center (L/R labels)
    chase:  replica of the runtime controller (pi/3 bang-bang at full speed),
            so training covers the closed loop's own optic flow
    spin:   rotate-mode replica (1.5 rad/s, zero linear), prey sweeping by
    sweep:  constant turn across the prey, producing L/C/R transitions
    lose:   turn away until the prey leaves the view (non-visible labels)
    pause:  full stop, letting leak noise fill DVS histograms
    """

    PHASES = ("track", "offset", "chase", "spin", "sweep", "lose", "pause")
    CENTER_HALF = math.radians(13.5)

    def __init__(self, rng, arena, base_speed):
        self.rng = rng
        self.arena = arena
        self.base_speed = base_speed
        self.phase = "track"
        self.until = float(rng.uniform(1.5, 3.0))
        self.sweep_sign = 1.0
        self.offset = 0.0
        self.phase_speed = base_speed

    def _next_phase(self, t_s):
        r = self.rng.random()
        if r < 0.20:
            self.phase, dur = "track", self.rng.uniform(1.5, 3.0)
        elif r < 0.42:
            self.phase, dur = "offset", self.rng.uniform(1.5, 3.0)
            side = 1.0 if self.rng.random() < 0.5 else -1.0
            self.offset = side * float(self.rng.uniform(0.28, 0.62))
        elif r < 0.60:
            self.phase, dur = "chase", self.rng.uniform(1.5, 3.0)
        elif r < 0.72:
            self.phase, dur = "spin", self.rng.uniform(1.2, 2.6)
            self.sweep_sign = 1.0 if self.rng.random() < 0.5 else -1.0
        elif r < 0.80:
            self.phase, dur = "sweep", self.rng.uniform(0.8, 1.8)
            self.sweep_sign = 1.0 if self.rng.random() < 0.5 else -1.0
        elif r < 0.93:
            self.phase, dur = "lose", self.rng.uniform(2.0, 3.5)
            self.sweep_sign = 1.0 if self.rng.random() < 0.5 else -1.0
        else:
            self.phase, dur = "pause", self.rng.uniform(1.0, 1.8)
        self.phase_speed = self.base_speed * float(self.rng.uniform(0.6, 1.25))
        self.until = t_s + float(dur)

    def command(self, t_s, state: RobotState, prey: RobotState) -> VelocityCmd:
        if t_s >= self.until:
            self._next_phase(t_s)
        bearing = wrap_angle(math.atan2(prey.y - state.y, prey.x - state.x)
                             - state.heading)
        dist = math.hypot(prey.x - state.x, prey.y - state.y)
        # damp forward speed near walls and when closing on the prey
        d_fwd = float(_wall_distances(self.arena, state.x, state.y,
                                      np.array([state.heading]))[0][0])
        wall_scale = min(max((d_fwd - 0.6) / 1.5, 0.0), 1.0)
        approach_scale = min(max((dist - 0.9) / 1.2, 0.0), 1.0)

        if self.phase == "pause":
            return VelocityCmd(0.0, 0.0)
        if self.phase == "spin":
            return VelocityCmd(0.0, self.sweep_sign * 1.5)
        if self.phase == "chase":
            close_scale = min(max((dist - 0.5) / 1.0, 0.0), 1.0)
            lin = 1.5 * wall_scale * close_scale
            if abs(bearing) > 0.5 * math.radians(81.0):
                return VelocityCmd(0.0, math.copysign(1.5, bearing))
            if abs(bearing) > self.CENTER_HALF:
                return VelocityCmd(lin, math.copysign(math.pi / 3.0, bearing))
            return VelocityCmd(lin, 0.0)
        if self.phase == "sweep":
            return VelocityCmd(0.35 * self.phase_speed * wall_scale,
                               self.sweep_sign * float(self.rng.uniform(0.8, 1.4)))
        if self.phase == "lose":
            away = -math.copysign(1.2, bearing if bearing != 0 else self.sweep_sign)
            return VelocityCmd(0.3 * self.phase_speed * wall_scale, away)
        target = bearing - (self.offset if self.phase == "offset" else 0.0)
        noise = float(self.rng.normal(0.0, 0.22))
        ang = max(-1.05, min(1.05, 1.4 * target + noise))
        lin = self.phase_speed * wall_scale * approach_scale
        return VelocityCmd(lin, ang)


def _random_start(rng, arena):
    px = float(rng.uniform(1.2, arena.width - 1.2))
    py = float(rng.uniform(1.2, arena.depth - 1.2))
    heading = float(rng.uniform(-math.pi, math.pi))
    dist = float(rng.uniform(1.5, 4.5))
    bearing = heading + float(rng.uniform(-0.5, 0.5))
    qx = min(max(px + dist * math.cos(bearing), 1.0), arena.width - 1.0)
    qy = min(max(py + dist * math.sin(bearing), 1.0), arena.depth - 1.0)
    predator = RobotState(x=px, y=py, heading=heading)
    prey = RobotState(x=qx, y=qy, heading=float(rng.uniform(-math.pi, math.pi)))
    return predator, prey


def generate_recording(cfg: DatagenConfig, seed: int) -> Recording:
    """One deterministic scripted chase; returns the in-memory recording."""
    seq = np.random.SeedSequence(seed)
    world_seed, script_seed, prey_seed, scene_seed = seq.spawn(4)
    scene_rng = np.random.default_rng(scene_seed)

    sim_cfg = replace(cfg.sim,
                      light_gain=float(scene_rng.uniform(*cfg.light_gain_range)))
    predator, prey = _random_start(scene_rng, sim_cfg.arena)
    world = WorldSim(sim_cfg, world_seed, predator, prey)
    if sim_cfg.arena.distractors and world.scene.distractors:
        box = world.scene.distractors[0]
        box.x = float(scene_rng.uniform(0.7, 1.6))
        box.y = float(scene_rng.uniform(sim_cfg.arena.depth - 1.6,
                                        sim_cfg.arena.depth - 0.7))

    script = ChaseScript(np.random.default_rng(script_seed), sim_cfg.arena,
                         base_speed=float(scene_rng.uniform(*cfg.predator_speed_range)))
    prey_policy = WaypointPolicy(np.random.default_rng(prey_seed), sim_cfg.arena,
                                 speed=float(scene_rng.uniform(*cfg.prey_speed_range)))

    event_chunks = []
    aps_t, aps_raw = [], []
    label_t, label_x = [0], [-1 if world.ground_truth() is None
                             else world.ground_truth()]
    predator_cmd = VelocityCmd(0.0, 0.0)
    prey_cmd = VelocityCmd(0.0, 0.0)
    n_steps = int(round(cfg.duration_s * 1e6 / sim_cfg.timestep_us))

    for _ in range(n_steps):
        world.set_commands(predator_cmd, prey_cmd)
        batch = world.step()
        if batch is None:
            continue
        t_now = world.t_us
        predator_cmd = script.command(t_now / 1e6, world.predator, world.prey)
        prey_cmd = prey_policy.command(world.prey, t_now / 1e6)
        if len(batch.events):
            event_chunks.append(batch.events)
        if batch.aps is not None:
            t_aps, image = batch.aps
            aps_t.append(t_aps)
            aps_raw.append(aps_resize(image).astype(np.float32))
        target = world.ground_truth()
        label_t.append(t_now)
        label_x.append(-1 if target is None else target)

    events = (np.concatenate(event_chunks) if event_chunks
              else np.zeros(0, dtype=EVENT_DTYPE))
    return Recording(events=events,
                     aps_t=np.array(aps_t, dtype=np.uint32),
                     aps_raw=(np.stack(aps_raw) if aps_raw
                              else np.zeros((0, 36, 36), dtype=np.float32)),
                     label_t=np.array(label_t, dtype=np.uint32),
                     label_x=np.array(label_x, dtype=np.int16))
