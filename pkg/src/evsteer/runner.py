"""Closed-loop runner: sensors -> CNN -> decision filter -> behavior -> wheels.

The world advances on a fixed 1 ms kinematics step; rendering and event
synthesis run on a coarser grid (default 5 ms) with event timestamps
interpolated inside the interval. Completed constant-count DVS histograms and
APS captures form a frame queue processed in timestamp order under the 240 Hz
processing cap; each frame yields one decision, one log line, and one UDP
datagram record.

Run logs are line-oriented text, one record per line:

    # evsteer-runlog v1
    DEC <t_us> <APS|DVS> <raw> <filtered>
    GT <t_us> <target_x_36|N> <label>
    UDP <t_us> <seq> <direction>
    MODE <t_us> <mode> <decision> <d_min>
    CATCH <t_us> <true_distance>
    END <t_us>
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from evsteer.behavior import (BehaviorConfig, BehaviorController, Mode,
                              VelocityCmd)
from evsteer.decision import DecisionFilter, FilterConfig
from evsteer.frames import (DEFAULT_CAPACITY, DvsAccumulator, SOURCE_APS,
                            SOURCE_DVS, SOURCE_NAMES, aps_normalize,
                            aps_resize, dvs_normalize, label_from_target)
from evsteer.nnet import Decision, decision_from_logits
from evsteer.sim import (RobotState, SimConfig, WorldSim, wrap_angle)
from evsteer.wire import DecisionEncoder

RUNLOG_MAGIC = "# evsteer-runlog v1"


@dataclass
class RunnerConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    behavior: BehaviorConfig = field(default_factory=BehaviorConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    capacity: int = DEFAULT_CAPACITY
    rate_cap_hz: float = 240.0
    scenario: str = "chase"  # chase | static | rate_test
    prey_policy: str = "circle"  # circle | waypoint | parked
    prey_speed: float = 0.5
    circle_radius: float = 1.8
    duration_s: float = 30.0


class CirclePolicy:
    """Scripted orbit: P-control onto the tangent of a fixed circle."""

    def __init__(self, center, radius, speed, ccw=True):
        self.center = center
        self.radius = radius
        self.speed = speed
        self.ccw = ccw

    def command(self, state: RobotState, t_s: float) -> VelocityCmd:
        cx, cy = self.center
        pos_ang = math.atan2(state.y - cy, state.x - cx)
        r_err = math.hypot(state.x - cx, state.y - cy) - self.radius
        side = 1.0 if self.ccw else -1.0
        desired = pos_ang + side * (math.pi / 2.0 + max(-0.8, min(0.8, 0.9 * r_err)))
        ang = max(-2.0, min(2.0, 2.5 * wrap_angle(desired - state.heading)))
        return VelocityCmd(self.speed, ang)


class WaypointPolicy:
    """Semi-random wall-avoiding wander: waypoints resampled every 3-6 s."""

    def __init__(self, rng, arena, speed, margin=1.0):
        self.rng = rng
        self.arena = arena
        self.speed = speed
        self.margin = margin
        self.waypoint = self._sample()
        self.next_resample = float(rng.uniform(3.0, 6.0))

    def _sample(self):
        return (float(self.rng.uniform(self.margin, self.arena.width - self.margin)),
                float(self.rng.uniform(self.margin, self.arena.depth - self.margin)))

    def command(self, state: RobotState, t_s: float) -> VelocityCmd:
        if t_s >= self.next_resample or \
                math.hypot(self.waypoint[0] - state.x, self.waypoint[1] - state.y) < 0.3:
            self.waypoint = self._sample()
            self.next_resample = t_s + float(self.rng.uniform(3.0, 6.0))
        err = wrap_angle(math.atan2(self.waypoint[1] - state.y,
                                    self.waypoint[0] - state.x) - state.heading)
        ang = max(-1.8, min(1.8, 2.0 * err))
        lin = self.speed * max(0.15, math.cos(err))
        return VelocityCmd(lin, ang)


class ParkedPolicy:
    def command(self, state, t_s):
        return VelocityCmd(0.0, 0.0)


@dataclass
class RunResult:
    lines: list
    decisions: int
    catches: int

    def text(self):
        return "\n".join(self.lines) + "\n"


def _make_prey_policy(cfg: RunnerConfig, rng, arena):
    if cfg.scenario in ("static", "rate_test") or cfg.prey_policy == "parked":
        return ParkedPolicy()
    if cfg.prey_policy == "circle":
        center = (arena.width / 2.0, arena.depth / 2.0)
        return CirclePolicy(center, cfg.circle_radius, cfg.prey_speed)
    return WaypointPolicy(rng, arena, cfg.prey_speed)


def _start_states(cfg: RunnerConfig):
    arena = cfg.sim.arena
    cxc, cyc = arena.width / 2.0, arena.depth / 2.0
    if cfg.scenario in ("static", "rate_test"):
        predator = RobotState(x=cxc - 2.0, y=cyc, heading=0.0)
        prey = RobotState(x=cxc + 1.5, y=cyc, heading=math.pi / 2)
        return predator, prey
    prey = RobotState(x=cxc + cfg.circle_radius, y=cyc, heading=math.pi / 2)
    predator = RobotState(x=cxc - 1.2, y=cyc, heading=0.0)
    return predator, prey


def run_closed_loop(net, cfg: RunnerConfig, seed: int,
                    on_datagram=None) -> RunResult:
    """Run one seeded episode and return its log. Pure in (net, cfg, seed).

    on_datagram, when given, is called as on_datagram(t_us, DecisionDatagram)
    for every decision; the serve command uses it to feed the live sender.
    """
    seq = np.random.SeedSequence(seed)
    world_seed, prey_seed, behavior_seed = seq.spawn(3)
    predator, prey = _start_states(cfg)
    world = WorldSim(cfg.sim, world_seed, predator, prey)
    prey_policy = _make_prey_policy(cfg, np.random.default_rng(prey_seed),
                                    cfg.sim.arena)
    behavior = BehaviorController(cfg.behavior,
                                  seed=int(behavior_seed.generate_state(1)[0]))
    filt = DecisionFilter(cfg.filter)
    encoder = DecisionEncoder(cfg.rate_cap_hz)
    acc = DvsAccumulator(cfg.capacity)

    lines = [RUNLOG_MAGIC, f"# seed {seed}"]
    predator_cmd = VelocityCmd(0.0, 0.0)
    prey_cmd = VelocityCmd(0.0, 0.0)
    n_steps = int(round(cfg.duration_s * 1e6 / cfg.sim.timestep_us))
    decisions = 0
    catches = 0
    prev_mode = behavior.mode

    def process_frame(t_frame, source, values):
        nonlocal predator_cmd, decisions, catches, prev_mode
        raw = net.predict(values)
        filtered = filt.update(raw, behavior.mode)
        t_dec, datagram = encoder.offer(filtered, t_frame)
        target = world.ground_truth()
        label = label_from_target(target)
        scan = world.laser()
        cmd = behavior.step(filtered, scan, now=t_dec / 1e6)
        predator_cmd = cmd
        decisions += 1
        lines.append(f"DEC {t_dec} {SOURCE_NAMES[source]} {raw.name} {filtered.name}")
        lines.append(f"GT {t_dec} {'N' if target is None else target} {label.name}")
        lines.append(f"UDP {t_dec} {datagram.seq} {int(datagram.direction)}")
        if on_datagram is not None:
            on_datagram(t_dec, datagram)
        if behavior.mode is not prev_mode:
            d_min = scan.min_range(cfg.behavior.center_laser_fov)
            lines.append(f"MODE {t_dec} {behavior.mode.name} {filtered.name} {d_min:.3f}")
            if behavior.mode is Mode.PREY_CAUGHT:
                catches += 1
                lines.append(f"CATCH {t_dec} {world.prey_distance():.3f}")
            prev_mode = behavior.mode

    for _ in range(n_steps):
        world.set_commands(predator_cmd, prey_cmd)
        batch = world.step()
        if batch is None:
            continue
        t_now = world.t_us
        prey_cmd = prey_policy.command(world.prey, t_now / 1e6)

        queue = []
        if len(batch.events):
            for t_emit, hist in acc.add_batch(batch.events):
                queue.append((t_emit, SOURCE_DVS, dvs_normalize(hist, t_emit).values))
        if batch.aps is not None:
            t_aps, image = batch.aps
            raw36 = aps_resize(image)
            queue.append((t_aps, SOURCE_APS, aps_normalize(raw36, t_aps).values))
        queue.sort(key=lambda item: (item[0], item[1]))
        for t_frame, source, values in queue:
            process_frame(t_frame, source, values)

    lines.append(f"END {world.t_us}")
    return RunResult(lines=lines, decisions=decisions, catches=catches)


def parse_runlog(text: str):
    """Split a run log into typed record lists."""
    out = {"DEC": [], "GT": [], "UDP": [], "MODE": [], "CATCH": [], "END": None}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        kind = parts[0]
        if kind == "DEC":
            out["DEC"].append((int(parts[1]), parts[2],
                               Decision.from_name(parts[3]),
                               Decision.from_name(parts[4])))
        elif kind == "GT":
            target = None if parts[2] == "N" else int(parts[2])
            out["GT"].append((int(parts[1]), target, Decision.from_name(parts[3])))
        elif kind == "UDP":
            out["UDP"].append((int(parts[1]), int(parts[2]), int(parts[3])))
        elif kind == "MODE":
            out["MODE"].append((int(parts[1]), parts[2], parts[3], float(parts[4])))
        elif kind == "CATCH":
            out["CATCH"].append((int(parts[1]), float(parts[2])))
        elif kind == "END":
            out["END"] = int(parts[1])
    return out


def runlog_eval_records(parsed, use_filtered=False):
    """EvalRecords joining DEC and GT lines (emitted pairwise by the runner)."""
    from evsteer.evaluation import EvalRecord
    from evsteer.frames import SOURCE_APS as APS, SOURCE_DVS as DVS

    records = []
    for (t, src, raw, filt), (_, target, label) in zip(parsed["DEC"], parsed["GT"]):
        records.append(EvalRecord(decision=filt if use_filtered else raw,
                                  truth_label=label, truth_target_x=target,
                                  source=APS if src == "APS" else DVS, t=t))
    return records
