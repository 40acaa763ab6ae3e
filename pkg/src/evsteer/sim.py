"""Deterministic 2-D arena simulator.

A schematic world: a 9.5 x 6.7 m arena with a striped specular floor, walls,
background clutter above the walls, an optional dark box and high-contrast
poster as distractors, and two robots. The predator carries a 240x180 camera
with an 81 degree horizontal field of view mounted at wheel-top height; the
projection is equiangular (column position linear in bearing), which matches
a wide-angle lens well enough at this fidelity.

Event synthesis is the standard log-intensity threshold model: per pixel, the
log intensity is compared against a memory value; each theta crossing emits
one ON/OFF event with a timestamp interpolated inside the render interval and
moves the memory by theta. Reset-switch leakage adds Poisson ON events, and
each APS capture can inject a burst of scan-line-band events (shutter
coupling). Everything is a pure function of (config, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from evsteer.behavior import LaserScan
from evsteer.frames import EVENT_DTYPE, SENSOR_HEIGHT, SENSOR_WIDTH

ARENA_DIAGONAL = math.hypot(9.5, 6.7)
ROBOT_RADIUS = 0.375  # half the 0.75 m footprint length
PREY_RADIUS = 0.33
PREY_HEIGHT = 0.37
CAMERA_HEIGHT = 0.37


@dataclass
class ArenaConfig:
    width: float = 9.5
    depth: float = 6.7
    wall_height: float = 0.5
    distractors: bool = True
    moving_distractor: bool = False


@dataclass
class CameraConfig:
    width: int = SENSOR_WIDTH
    height: int = SENSOR_HEIGHT
    hfov_deg: float = 81.0
    mount_height: float = CAMERA_HEIGHT


@dataclass
class NoiseConfig:
    leak_rate: float = 0.1  # ON events per pixel per second
    aps_burst: int = 150  # events injected at each APS capture
    threshold: float = 0.15  # log-intensity units per event


@dataclass
class SimConfig:
    arena: ArenaConfig = field(default_factory=ArenaConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    timestep_us: int = 1000  # kinematics step
    render_every: int = 5  # render/event-synthesis cadence in timesteps
    aps_period_us: int = 66_667  # ~15 fps, quantized onto the render grid
    light_gain: float = 1.0
    corrupt_aps_prob: float = 0.0  # blank-stripe fault injection
    static_scene: bool = False  # skip re-rendering; noise events only
    rate_profile: tuple = ()  # ((duration_s, events_per_s), ...) leak override


@dataclass
class RobotState:
    x: float
    y: float
    heading: float
    linear: float = 0.0
    angular: float = 0.0

    @property
    def pose(self):
        return (self.x, self.y, self.heading)


def wrap_angle(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def kinematics_step(state: RobotState, dt: float, arena: ArenaConfig,
                    radius: float = ROBOT_RADIUS) -> RobotState:
    """Integrate one step: turn first, then advance along the new heading.

    Wall contact clamps position (zero restitution), robots never exit.
    """
    heading = wrap_angle(state.heading + state.angular * dt)
    x = state.x + state.linear * dt * math.cos(heading)
    y = state.y + state.linear * dt * math.sin(heading)
    x = min(max(x, radius), arena.width - radius)
    y = min(max(y, radius), arena.depth - radius)
    return RobotState(x=x, y=y, heading=heading,
                      linear=state.linear, angular=state.angular)


# ---------------------------------------------------------------------------
# scene description and rendering
# ---------------------------------------------------------------------------


@dataclass
class Distractor:
    x: float
    y: float
    radius: float = 0.35
    height: float = 0.5
    shade: float = 0.12  # dark box, deliberately prey-like at distance


@dataclass
class Poster:
    """High-contrast bar pattern mounted on the north wall (y = depth)."""

    x0: float = 6.0
    x1: float = 7.6
    bar_width: float = 0.22


@dataclass
class Scene:
    arena: ArenaConfig
    prey: RobotState
    distractors: list = field(default_factory=list)
    poster: Poster | None = None
    light_gain: float = 1.0
    moving_distractor: Distractor | None = None

    def obstacle_circles(self):
        """(x, y, radius) of everything the laser can hit besides walls."""
        out = [(self.prey.x, self.prey.y, PREY_RADIUS)]
        out += [(d.x, d.y, d.radius) for d in self.distractors]
        if self.moving_distractor is not None:
            d = self.moving_distractor
            out.append((d.x, d.y, d.radius))
        return out


class Camera:
    """Equiangular projection helpers shared by the renderer and labeling."""

    def __init__(self, cfg: CameraConfig):
        self.cfg = cfg
        self.hfov = math.radians(cfg.hfov_deg)
        self.vfov = self.hfov * cfg.height / cfg.width
        w, h = cfg.width, cfg.height
        # column bearings: +hfov/2 at column 0 (left), -hfov/2 at the right
        self.col_phi = (0.5 - (np.arange(w) + 0.5) / w) * self.hfov
        self.k_v = h / self.vfov  # rows per radian
        self.horizon = (h - 1) / 2.0
        self.rows = np.arange(h, dtype=np.float32)
        # background block pattern: value = 0.40 + 0.16 * ((a_idx + r_idx) % 3)
        self.bg_row_mod = ((np.arange(h) // 24) % 3).astype(np.int16)[:, None]
        self.bg_lut = (0.40 + 0.16 * (np.arange(5) % 3)).astype(np.float32)
        psi = ((self.rows + 0.5) - h / 2.0) / self.k_v  # >0 below horizon
        with np.errstate(divide="ignore"):
            g = cfg.mount_height / np.tan(np.maximum(psi, 1e-9))
        g[psi <= 0] = np.inf
        self.ground_dist = np.minimum(g, 60.0)

    def column_of_bearing(self, phi):
        return self.cfg.width * (0.5 - phi / self.hfov)

    def bearing_visible(self, phi):
        return abs(phi) <= self.hfov / 2.0


def _wall_distances(arena, x, y, ang):
    """Distance to the arena boundary along each ray, plus the hit points."""
    cos_a, sin_a = np.cos(ang), np.sin(ang)
    with np.errstate(divide="ignore"):
        tx = np.where(cos_a > 0, (arena.width - x) / cos_a,
                      np.where(cos_a < 0, (0.0 - x) / cos_a, np.inf))
        ty = np.where(sin_a > 0, (arena.depth - y) / sin_a,
                      np.where(sin_a < 0, (0.0 - y) / sin_a, np.inf))
    d = np.minimum(tx, ty)
    hx = x + cos_a * d
    hy = y + sin_a * d
    return d, hx, hy, ty <= tx


def render_camera(scene: Scene, camera: Camera, pose, want_mask=False):
    """Synthesize one 180x240 gray frame in [0, 1] from the predator's pose.

    Returns (image, prey_mask or None). Deterministic given poses.
    """
    cfg = camera.cfg
    cx, cy, heading = pose
    h, w = cfg.height, cfg.width
    ang = heading + camera.col_phi
    d_wall, wall_hx, wall_hy, hit_y_wall = _wall_distances(scene.arena, cx, cy, ang)

    hc = cfg.mount_height
    r_wall_top = (camera.horizon
                  - np.arctan2(scene.arena.wall_height - hc, d_wall)
                  * camera.k_v).astype(np.float32)
    r_wall_bot = (camera.horizon
                  + np.arctan2(hc, d_wall) * camera.k_v).astype(np.float32)

    rows = camera.rows[:, None]  # (h, 1)

    # background clutter above the walls: angle/row block pattern
    a_mod = (np.floor(ang * (1.0 / 0.17)).astype(np.int64) % 3).astype(np.int16)
    img = np.take(camera.bg_lut, a_mod[None, :] + camera.bg_row_mod)

    # wall band, slightly darker with distance
    wall_shade = (0.33 + 0.10 / (1.0 + 0.25 * d_wall)).astype(np.float32)
    in_wall = (rows >= r_wall_top[None, :]) & (rows < r_wall_bot[None, :])
    np.copyto(img, np.broadcast_to(wall_shade[None, :], img.shape), where=in_wall)

    # poster: bright/dark vertical bars on the north wall segment
    if scene.poster is not None:
        p = scene.poster
        on_poster_col = hit_y_wall & (wall_hy > scene.arena.depth - 1e-6) & \
            (wall_hx >= p.x0) & (wall_hx <= p.x1)
        if np.any(on_poster_col):
            bars = np.floor(wall_hx / p.bar_width) % 2
            poster_shade = np.where(bars > 0, 0.95, 0.06).astype(np.float32)
            np.copyto(img, np.broadcast_to(poster_shade[None, :], img.shape),
                      where=in_wall & on_poster_col[None, :])

    # floor: world-anchored stripes plus two specular highlight blobs;
    # rows strictly below the horizon only, everything above is wall or sky
    r_floor0 = int(camera.horizon) + 1
    g = camera.ground_dist[r_floor0:, None].astype(np.float32)
    wx = np.float32(cx) + np.cos(ang).astype(np.float32)[None, :] * g
    wy = np.float32(cy) + np.sin(ang).astype(np.float32)[None, :] * g
    floor = 0.64 + 0.14 * (np.floor(wx * np.float32(1.0 / 0.55)) % 2)
    for bx, by in ((2.6, 2.1), (6.8, 4.4)):
        r2 = (wx - np.float32(bx)) ** 2 + (wy - np.float32(by)) ** 2
        bump = np.maximum(np.float32(1.0) - r2 * np.float32(1.0 / 0.36), 0.0)
        floor += np.float32(0.22) * bump * bump
    on_floor = rows[r_floor0:] >= r_wall_bot[None, :]
    np.copyto(img[r_floor0:], floor, where=on_floor)

    # sprites, drawn far to near so closer bodies occlude
    mask = np.zeros((h, w), dtype=bool) if want_mask else None
    sprites = []
    for dd in scene.distractors:
        sprites.append(("box", dd.x, dd.y, dd.radius, dd.height, dd.shade))
    if scene.moving_distractor is not None:
        dd = scene.moving_distractor
        sprites.append(("box", dd.x, dd.y, dd.radius, dd.height, dd.shade))
    sprites.append(("prey", scene.prey.x, scene.prey.y, PREY_RADIUS, PREY_HEIGHT, 0.22))

    def dist_of(s):
        return math.hypot(s[1] - cx, s[2] - cy)

    for kind, ox, oy, rad, oh, shade in sorted(sprites, key=dist_of, reverse=True):
        d = math.hypot(ox - cx, oy - cy)
        if d < rad + 0.05:
            d = rad + 0.05
        bearing = wrap_angle(math.atan2(oy - cy, ox - cx) - heading)
        half = math.atan2(rad, d)
        if abs(bearing) - half > camera.hfov / 2.0:
            continue
        cols = np.abs(wrap_angle(camera.col_phi - bearing)) <= half
        if not np.any(cols):
            continue
        r_top = camera.horizon - math.atan2(oh - hc, d) * camera.k_v
        r_bot = camera.horizon + math.atan2(hc, d) * camera.k_v
        r0 = max(0, int(math.ceil(r_top)))
        r1 = min(h, int(math.ceil(r_bot)))
        if r1 <= r0:
            continue
        img[r0:r1, cols] = shade
        if kind == "prey":
            # two near-black wheels at the bottom corners, bright top edge
            span = r1 - r0
            wheel_r0 = r1 - max(1, int(0.38 * span))
            center = camera.column_of_bearing(bearing)
            half_cols = half / camera.hfov * w
            col_idx = np.arange(w)
            for side in (-1.0, 1.0):
                c0 = center + side * 0.55 * half_cols - 0.28 * half_cols
                c1 = center + side * 0.55 * half_cols + 0.28 * half_cols
                wheel_cols = (col_idx >= c0) & (col_idx <= c1) & cols
                img[wheel_r0:r1, wheel_cols] = 0.04
            stripe_r1 = r0 + max(1, int(0.16 * span))
            img[r0:stripe_r1, cols] = 0.88
            if want_mask:
                mask[r0:r1, cols] = True
    if scene.light_gain != 1.0:
        img *= np.float32(scene.light_gain)
    np.clip(img, 0.0, 1.0, out=img)
    return img, mask


def corrupt_frame(img, rng, n_stripes=3):
    """Blank horizontal stripes, mimicking dropped transfer bursts."""
    out = img.copy()
    h = img.shape[0]
    for _ in range(n_stripes):
        top = int(rng.integers(0, h - 12))
        out[top:top + int(rng.integers(6, 14)), :] = 0.0
    return out


# ---------------------------------------------------------------------------
# event synthesis
# ---------------------------------------------------------------------------


class EventSynth:
    """Per-pixel log-intensity memory with linear-ramp threshold crossings."""

    LOG_EPS = 0.02

    def __init__(self, threshold: float):
        if threshold <= 0:
            raise ValueError("threshold must be positive")
        self.threshold = threshold
        self.memory = None

    def update(self, image, t0_us: int, t1_us: int):
        """Events for the interval (t0, t1] given the new rendered image."""
        log_img = np.log(image + self.LOG_EPS)
        if self.memory is None:
            self.memory = log_img.copy()
            return np.zeros(0, dtype=EVENT_DTYPE)
        diff = log_img - self.memory
        n = np.floor(np.abs(diff) / self.threshold).astype(np.int64)
        ys, xs = np.nonzero(n)
        if len(ys) == 0:
            return np.zeros(0, dtype=EVENT_DTYPE)
        counts = n[ys, xs]
        total = int(counts.sum())
        rep_y = np.repeat(ys, counts)
        rep_x = np.repeat(xs, counts)
        rep_diff = np.repeat(diff[ys, xs], counts)
        offsets = np.repeat(np.cumsum(counts) - counts, counts)
        k = np.arange(total) - offsets + 1
        frac = (k * self.threshold) / np.abs(rep_diff)
        ts = t0_us + frac * (t1_us - t0_us)
        events = np.zeros(total, dtype=EVENT_DTYPE)
        events["t"] = np.minimum(np.round(ts), t1_us).astype(np.uint32)
        events["x"] = rep_x.astype(np.uint16)
        events["y"] = rep_y.astype(np.uint16)
        events["polarity"] = (rep_diff > 0).astype(np.uint8)
        sign = np.sign(diff[ys, xs])
        self.memory[ys, xs] += sign * counts * self.threshold
        return events[np.argsort(events["t"], kind="stable")]


def leak_events(rng, rate_per_pixel: float, t0_us: int, t1_us: int,
                width=SENSOR_WIDTH, height=SENSOR_HEIGHT):
    """Poisson reset-switch leakage: ON events at random addresses."""
    dt_s = (t1_us - t0_us) / 1e6
    lam = rate_per_pixel * width * height * dt_s
    count = int(rng.poisson(lam))
    if count == 0:
        return np.zeros(0, dtype=EVENT_DTYPE)
    events = np.zeros(count, dtype=EVENT_DTYPE)
    ts = t0_us + 1 + rng.random(count) * (t1_us - t0_us - 1)
    events["t"] = np.sort(ts).astype(np.uint32)
    events["x"] = rng.integers(0, width, count).astype(np.uint16)
    events["y"] = rng.integers(0, height, count).astype(np.uint16)
    events["polarity"] = 1
    return events


def burst_events(rng, count: int, t_us: int,
                 width=SENSOR_WIDTH, height=SENSOR_HEIGHT):
    """Shutter-coupling burst: events concentrated in a few scan-line bands."""
    if count <= 0:
        return np.zeros(0, dtype=EVENT_DTYPE)
    n_bands = int(rng.integers(2, 6))
    band_tops = rng.integers(0, height - 3, n_bands)
    events = np.zeros(count, dtype=EVENT_DTYPE)
    events["t"] = t_us
    events["x"] = rng.integers(0, width, count).astype(np.uint16)
    band = band_tops[rng.integers(0, n_bands, count)]
    events["y"] = (band + rng.integers(0, 3, count)).astype(np.uint16)
    events["polarity"] = rng.integers(0, 2, count).astype(np.uint8)
    return events


# ---------------------------------------------------------------------------
# laser
# ---------------------------------------------------------------------------


def simulate_laser(scene: Scene, pose, fov_deg=180.0, step_deg=1.0) -> LaserScan:
    """Ray-cast ranges to walls and obstacle circles over a forward sector."""
    x, y, heading = pose
    angles = np.radians(np.arange(-fov_deg / 2.0, fov_deg / 2.0 + 1e-9, step_deg))
    ray_ang = heading + angles
    d, _, _, _ = _wall_distances(scene.arena, x, y, ray_ang)
    cos_a, sin_a = np.cos(ray_ang), np.sin(ray_ang)
    for ox, oy, rad in scene.obstacle_circles():
        dx, dy = ox - x, oy - y
        proj = dx * cos_a + dy * sin_a
        perp2 = (dx * dx + dy * dy) - proj * proj
        hit = (perp2 <= rad * rad) & (proj > 0)
        reach = proj - np.sqrt(np.maximum(rad * rad - perp2, 0.0))
        d = np.where(hit & (reach > 0) & (reach < d), reach, d)
    return LaserScan(angles=angles, ranges=d)


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------


def prey_target_column(scene: Scene, camera: Camera, pose):
    """36-scale target column of the prey center, or None when non-visible.

    Non-visible means outside the field of view or occluded by a distractor.
    """
    cx, cy, heading = pose
    bearing = wrap_angle(math.atan2(scene.prey.y - cy, scene.prey.x - cx) - heading)
    if not camera.bearing_visible(bearing):
        return None
    d_prey = math.hypot(scene.prey.x - cx, scene.prey.y - cy)
    cos_b, sin_b = math.cos(heading + bearing), math.sin(heading + bearing)
    circles = [(d.x, d.y, d.radius) for d in scene.distractors]
    if scene.moving_distractor is not None:
        md = scene.moving_distractor
        circles.append((md.x, md.y, md.radius))
    for ox, oy, rad in circles:
        dx, dy = ox - cx, oy - cy
        proj = dx * cos_b + dy * sin_b
        if 0 < proj < d_prey:
            perp2 = dx * dx + dy * dy - proj * proj
            if perp2 <= rad * rad:
                return None  # occluded
    col240 = camera.column_of_bearing(bearing)
    col36 = int(col240 * 36 / SENSOR_WIDTH)
    return min(max(col36, 0), 35)


# ---------------------------------------------------------------------------
# world stepping
# ---------------------------------------------------------------------------


def default_scene(cfg: SimConfig, prey: RobotState) -> Scene:
    distractors = []
    poster = None
    if cfg.arena.distractors:
        distractors = [Distractor(x=0.9, y=cfg.arena.depth - 0.9)]
        poster = Poster()
    moving = Distractor(x=4.0, y=0.8, radius=0.25, height=1.7, shade=0.30) \
        if cfg.arena.moving_distractor else None
    return Scene(arena=cfg.arena, prey=prey, distractors=distractors,
                 poster=poster, light_gain=cfg.light_gain,
                 moving_distractor=moving)


class RateProfile:
    """Piecewise-constant total event rate, cycled; overrides leak noise."""

    def __init__(self, phases):
        self.phases = [(float(d), float(r)) for d, r in phases]
        self.cycle = sum(d for d, _ in self.phases)

    def rate_at(self, t_s: float) -> float:
        t = t_s % self.cycle
        for dur, rate in self.phases:
            if t < dur:
                return rate
            t -= dur
        return self.phases[-1][1]

    def per_pixel(self, t_s: float) -> float:
        return self.rate_at(t_s) / (SENSOR_WIDTH * SENSOR_HEIGHT)


@dataclass
class SensorBatch:
    """Output of one world step: events plus an APS frame when due."""

    events: np.ndarray
    aps: tuple | None = None  # (t_us, 240x180 image)


class WorldSim:
    """Owns robot poses, the camera, noise streams, and sensor schedules."""

    def __init__(self, cfg: SimConfig, seed: int, predator: RobotState,
                 prey: RobotState):
        self.cfg = cfg
        self.camera = Camera(cfg.camera)
        self.predator = predator
        self.prey = prey
        self.scene = default_scene(cfg, prey)
        self.synth = EventSynth(cfg.noise.threshold)
        seq = seed if isinstance(seed, np.random.SeedSequence) \
            else np.random.SeedSequence(seed)
        noise_seed, misc_seed = seq.spawn(2)
        self.rng_noise = np.random.default_rng(noise_seed)
        self.rng_misc = np.random.default_rng(misc_seed)
        self.t_us = 0
        self._last_render_us = 0
        self._aps_k = 1
        self._next_aps_us = self._quantize_aps(cfg.aps_period_us)
        self._moving_phase = 0.0
        self.rate_profile = RateProfile(cfg.rate_profile) if cfg.rate_profile else None
        self._static_image = None

    def _quantize_aps(self, t_us):
        # captures land on the render grid but keep the long-run average rate
        grid = self.cfg.timestep_us * self.cfg.render_every
        return max(grid, int(round(t_us / grid)) * grid)

    def set_commands(self, predator_cmd, prey_cmd):
        self.predator.linear = predator_cmd.linear
        self.predator.angular = predator_cmd.angular
        self.prey.linear = prey_cmd.linear
        self.prey.angular = prey_cmd.angular

    def _render(self, want_mask=False):
        self.scene.prey = self.prey
        if self.scene.moving_distractor is not None:
            md = self.scene.moving_distractor
            md.x = 4.0 + 1.6 * math.sin(self._moving_phase)
        return render_camera(self.scene, self.camera, self.predator.pose,
                             want_mask=want_mask)

    def _leak_rate(self, t_s):
        if self.rate_profile is not None:
            return self.rate_profile.per_pixel(t_s)
        return self.cfg.noise.leak_rate

    def step(self) -> SensorBatch | None:
        """Advance one timestep; sensor output only on render-grid steps."""
        dt = self.cfg.timestep_us / 1e6
        self.predator = kinematics_step(self.predator, dt, self.cfg.arena)
        self.prey = kinematics_step(self.prey, dt, self.cfg.arena)
        self.t_us += self.cfg.timestep_us
        if (self.t_us // self.cfg.timestep_us) % self.cfg.render_every != 0:
            return None

        t0, t1 = self._last_render_us, self.t_us
        self._last_render_us = t1
        self._moving_phase += 0.9 * (t1 - t0) / 1e6

        chunks = []
        image = None
        if self.cfg.static_scene:
            if self._static_image is None:
                self._static_image, _ = self._render()
                self.synth.update(self._static_image, t0, t1)
            image = self._static_image
        else:
            image, _ = self._render()
            chunks.append(self.synth.update(image, t0, t1))
        leak = leak_events(self.rng_noise, self._leak_rate(t1 / 1e6), t0, t1)
        if len(leak):
            chunks.append(leak)

        aps = None
        if t1 >= self._next_aps_us:
            self._aps_k += 1
            self._next_aps_us = self._quantize_aps(self._aps_k * self.cfg.aps_period_us)
            img = image  # capture reuses the render at this exact instant
            if (self.cfg.corrupt_aps_prob > 0
                    and self.rng_misc.random() < self.cfg.corrupt_aps_prob):
                img = corrupt_frame(img, self.rng_misc)
            aps = (t1, img)
            burst = burst_events(self.rng_noise, self.cfg.noise.aps_burst, t1)
            if len(burst):
                chunks.append(burst)

        if not chunks:
            events = np.zeros(0, dtype=EVENT_DTYPE)
        elif len(chunks) == 1:
            events = chunks[0]
        else:
            events = np.concatenate(chunks)
            events = events[np.argsort(events["t"], kind="stable")]
        return SensorBatch(events=events, aps=aps)

    def laser(self) -> LaserScan:
        self.scene.prey = self.prey
        return simulate_laser(self.scene, self.predator.pose)

    def ground_truth(self):
        self.scene.prey = self.prey
        return prey_target_column(self.scene, self.camera, self.predator.pose)

    def prey_distance(self):
        return math.hypot(self.prey.x - self.predator.x,
                          self.prey.y - self.predator.y)
