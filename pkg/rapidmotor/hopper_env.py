"""
Planar spring-leg hopper.

Generalized coordinates are (x, z, pitch, leg_angle, leg_length): body CoM
position, body pitch, absolute leg angle and prismatic leg length. The mass
matrix is diagonal; every force enters through the Jacobian of its point of
application, so the passive system is conservative. The hip joint angle is
leg_angle - pitch.
"""

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .terrain import local_height


logger = logging.getLogger(__name__)

RUNNING = "running"
FELL = "fell"
TIMEOUT = "timeout"

FACTOR_NAMES = ("friction", "payload", "com_offset", "motor_hip", "motor_leg", "kp", "kd", "terrain_height")
OBSERVATION_NAMES = ("hip_angle", "leg_length", "hip_rate", "leg_rate", "pitch", "pitch_rate",
                     "body_height", "vz", "contact", "leg_angle")

DEPLOY_KP = 55.0
DEPLOY_KD = 0.8
A1_BODY_LENGTH = 0.4
A1_BODY_MASS = 12.0


class SimulationDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class HopperParams:
    body_mass: float = 1.0
    body_inertia: float = 0.03
    body_length: float = 0.2
    leg_inertia: float = 0.02
    foot_mass: float = 0.2
    gravity: float = 9.81
    leg_rest: float = 0.30
    leg_stiffness: float = 600.0
    leg_min: float = 0.18
    leg_max: float = 0.36
    hip_limit: float = 0.8
    hip_stop_stiffness: float = 200.0
    leg_stop_stiffness: float = 2000.0
    ground_stiffness: float = 5000.0
    ground_damping: float = 30.0
    tangential_stiffness: float = 5000.0
    tangential_damping: float = 20.0
    gain_scale: tuple = (1.0, 10.0)
    torque_limit: tuple = (6.0, 60.0)
    action_nominal: tuple = (0.0, 0.30)
    action_scale: tuple = (0.4, 0.06)

    @property
    def standing_height(self):
        return self.leg_rest

    @property
    def a1_length_ratio(self):
        return self.body_length / A1_BODY_LENGTH


@dataclass(frozen=True)
class EpisodeConfig:
    max_steps: int = 1000
    control_dt: float = 0.01
    physics_substeps: int = 4
    min_height: float = 0.24
    max_pitch: float = 0.2
    resample_prob: float = 0.004

    @property
    def substep_dt(self):
        return self.control_dt / self.physics_substeps


# ------------------------------------------------------------------------------
# Environment factors
# ------------------------------------------------------------------------------

@dataclass(frozen=True)
class EnvFactors:
    friction: float
    payload: float
    com_offset: float
    motor_strength: tuple
    kp: float
    kd: float
    terrain_height: float = 0.0

    def to_vector(self):
        return np.array([self.friction, self.payload, self.com_offset, self.motor_strength[0],
                         self.motor_strength[1], self.kp, self.kd, self.terrain_height])

    @classmethod
    def from_vector(cls, vector):
        v = [float(a) for a in vector]
        return cls(friction=v[0], payload=v[1], com_offset=v[2], motor_strength=(v[3], v[4]),
                   kp=v[5], kd=v[6], terrain_height=v[7])

    def with_values(self, **values):
        if "motor_hip" in values or "motor_leg" in values:
            hip = values.pop("motor_hip", self.motor_strength[0])
            leg = values.pop("motor_leg", self.motor_strength[1])
            values["motor_strength"] = (hip, leg)
        return replace(self, **values)


@dataclass(frozen=True)
class FactorRanges:
    """(low, high) per factor; terrain_height is only used for normalization."""

    friction: tuple
    payload: tuple
    com_offset: tuple
    motor_hip: tuple
    motor_leg: tuple
    kp: tuple
    kd: tuple
    terrain_height: tuple = (-0.3, 0.3)

    def bounds(self):
        table = np.array([getattr(self, name) for name in FACTOR_NAMES], dtype=np.float64)
        return table[:, 0], table[:, 1]

    def midpoints(self):
        low, high = self.bounds()
        mid = 0.5 * (low + high)
        mid[-1] = 0.0
        return EnvFactors.from_vector(mid)

    def scaled(self, scale):
        """Shrink every half-width except terrain about its midpoint."""
        scale = min(max(scale, 0.0), 1.0)
        values = {}
        for name in FACTOR_NAMES[:-1]:
            low, high = getattr(self, name)
            mid = 0.5 * (low + high)
            half = 0.5 * (high - low) * scale
            values[name] = (mid - half, mid + half)
        return replace(self, **values)

    def fixed(self, **values):
        return replace(self, **{k: (float(v), float(v)) for k, v in values.items()})

    def normalize(self, vector):
        low, high = self.bounds()
        mid = 0.5 * (low + high)
        half = np.where(high > low, 0.5 * (high - low), 1.0)
        return (np.asarray(vector, dtype=np.float64) - mid) / half

    def contains(self, factors, tol=1e-12):
        low, high = self.bounds()
        v = factors.to_vector()[:-1]
        return bool(np.all(v >= low[:-1] - tol) and np.all(v <= high[:-1] + tol))


def factor_ranges(range_set, params=None):
    params = params or HopperParams()
    mass = params.body_mass
    ratio = params.a1_length_ratio
    if range_set == "train":
        return FactorRanges(friction=(0.05, 4.5), payload=(0.0, 0.5 * mass),
                            com_offset=(-0.15 * ratio, 0.15 * ratio), motor_hip=(0.90, 1.10),
                            motor_leg=(0.90, 1.10), kp=(50.0, 60.0), kd=(0.4, 0.8))
    if range_set == "test":
        return FactorRanges(friction=(0.04, 6.0), payload=(0.0, 0.58 * mass),
                            com_offset=(-0.18 * ratio, 0.18 * ratio), motor_hip=(0.88, 1.22),
                            motor_leg=(0.88, 1.22), kp=(45.0, 65.0), kd=(0.3, 0.9))
    raise ValueError(f"unknown range set {range_set!r}")


def _resolve_ranges(range_set, params):
    if isinstance(range_set, FactorRanges):
        return range_set
    return factor_ranges(range_set, params)


def sample_env_factors(rng, range_set="train", scale=1.0, params=None):
    ranges = _resolve_ranges(range_set, params)
    if scale != 1.0:
        ranges = ranges.scaled(scale)
    low, high = ranges.bounds()
    u = rng.uniform(size=7)
    values = low[:7] + u * (high[:7] - low[:7])
    return EnvFactors.from_vector([*values, 0.0])


def maybe_resample(factors, rng, resample_prob, range_set="train", profile=None, foot_x=0.0,
                   scale=1.0, params=None):
    """Redraw all factors with probability resample_prob; always refresh terrain height."""
    if rng.random() < resample_prob:
        factors = sample_env_factors(rng, range_set, scale, params)
    terrain = local_height(profile, [foot_x]) if profile is not None else 0.0
    return replace(factors, terrain_height=terrain)


def deployment_gains(factors):
    return replace(factors, kp=DEPLOY_KP, kd=DEPLOY_KD)


# ------------------------------------------------------------------------------
# State and kinematics
# ------------------------------------------------------------------------------

@dataclass(frozen=True)
class RobotState:
    x: float
    z: float
    pitch: float
    leg_angle: float
    leg_length: float
    vx: float = 0.0
    vz: float = 0.0
    pitch_rate: float = 0.0
    leg_angle_rate: float = 0.0
    leg_rate: float = 0.0
    body_height: float = 0.0
    contact: bool = False
    anchor: float = math.nan

    @property
    def hip_angle(self):
        return self.leg_angle - self.pitch

    @property
    def hip_rate(self):
        return self.leg_angle_rate - self.pitch_rate

    @property
    def joint_pos(self):
        return (self.hip_angle, self.leg_length)

    @property
    def joint_vel(self):
        return (self.hip_rate, self.leg_rate)

    @property
    def body_pitch(self):
        return self.pitch

    @property
    def body_vel(self):
        return (self.vx, self.vz)

    @property
    def foot_contact(self):
        return self.contact


@dataclass(frozen=True)
class StepInfo:
    grf: tuple
    foot_vel: float
    contact: bool
    torques: tuple
    work: float
    slipping: bool = False


def foot_position(state, com_offset=0.0):
    hip_x = state.x - com_offset * math.cos(state.pitch)
    hip_z = state.z - com_offset * math.sin(state.pitch)
    return (hip_x + state.leg_length * math.sin(state.leg_angle),
            hip_z - state.leg_length * math.cos(state.leg_angle))


def standing_state(profile=None, params=None, factors=None, x=0.0, drop=0.0):
    params = params or HopperParams()
    c = factors.com_offset if factors is not None else 0.0
    ground = profile.height_at(x - c) if profile is not None else 0.0
    z = ground + params.leg_rest + drop
    body_ground = profile.height_at(x) if profile is not None else 0.0
    return RobotState(x=x, z=z, pitch=0.0, leg_angle=0.0, leg_length=params.leg_rest,
                      body_height=z - body_ground, contact=False)


OBS_OFFSET = np.array([0.0, 0.30, 0.0, 0.0, 0.0, 0.0, 0.30, 0.0, 0.5, 0.0])
OBS_SCALE = np.array([1.25, 1.0 / 0.06, 0.2, 1.0, 5.0, 0.5, 1.0 / 0.06, 1.0, 2.0, 1.25])


def observe(state):
    raw = np.array([state.hip_angle, state.leg_length, state.hip_rate, state.leg_rate, state.pitch,
                    state.pitch_rate, state.body_height, state.vz, float(state.contact), state.leg_angle])
    return (raw - OBS_OFFSET) * OBS_SCALE


# ------------------------------------------------------------------------------
# Actuation
# ------------------------------------------------------------------------------

def action_to_targets(action, params=None):
    params = params or HopperParams()
    hip = params.action_nominal[0] + params.action_scale[0] * float(action[0])
    leg = params.action_nominal[1] + params.action_scale[1] * float(action[1])
    hip = min(max(hip, -params.hip_limit), params.hip_limit)
    leg = min(max(leg, params.leg_min), params.leg_max)
    return (hip, leg)


def pd_torque(targets, state, factors, params=None):
    """tau_i = strength_i * clamp(kp*g_i*(q_hat - q) + kd*g_i*(0 - qdot), +-tau_max_i).

    g = params.gain_scale maps the sampled angular gains onto each joint: 1 for
    the hip (rad), 10 for the prismatic leg (m). kp, kd are the factor values.
    """
    params = params or HopperParams()
    torques = []
    for i, (target, q, qdot) in enumerate(zip(targets, state.joint_pos, state.joint_vel)):
        gain = params.gain_scale[i]
        limit = params.torque_limit[i]
        raw = factors.kp * gain * (target - q) + factors.kd * gain * (0.0 - qdot)
        torques.append(factors.motor_strength[i] * min(max(raw, -limit), limit))
    return tuple(torques)


def friction_cone_force(normal, requested, friction):
    """Clip a tangential force to the Coulomb cone; returns (applied, slipping)."""
    limit = friction * max(normal, 0.0)
    if abs(requested) <= limit:
        return requested, False
    return math.copysign(limit, requested), True


# ------------------------------------------------------------------------------
# Integration
# ------------------------------------------------------------------------------

def step(state, action_targets, factors, profile, params=None, config=None):
    """Advance one control step; action_targets of None leaves the actuators passive."""
    params = params or HopperParams()
    config = config or EpisodeConfig()
    dt = config.substep_dt

    mass = params.body_mass + factors.payload
    inertia = params.body_inertia * mass / params.body_mass
    c = factors.com_offset
    kg, bg = params.ground_stiffness, params.ground_damping
    kt, bt = params.tangential_stiffness, params.tangential_damping

    x, z, th, ph, l = state.x, state.z, state.pitch, state.leg_angle, state.leg_length
    vx, vz, w, wph, vl = state.vx, state.vz, state.pitch_rate, state.leg_angle_rate, state.leg_rate
    anchor = state.anchor

    work = 0.0
    torque_sum = [0.0, 0.0]
    fx = fz = 0.0
    foot_vx = 0.0
    slipping = False

    for _ in range(config.physics_substeps):
        sth, cth = math.sin(th), math.cos(th)
        sph, cph = math.sin(ph), math.cos(ph)
        foot_x = x - c * cth + l * sph
        foot_z = z - c * sth - l * cph
        foot_vx = vx + c * sth * w + l * cph * wph + sph * vl
        foot_vz = vz - c * cth * w + l * sph * wph - cph * vl

        penetration = profile.height_at(foot_x) - foot_z
        if penetration > 0.0:
            fz = max(0.0, kg * penetration - bg * foot_vz)
            if math.isnan(anchor):
                anchor = foot_x
            fx, slip = friction_cone_force(fz, -kt * (foot_x - anchor) - bt * foot_vx, factors.friction)
            if slip:
                anchor = foot_x + fx / kt
                slipping = True
        else:
            fx = fz = 0.0
            anchor = math.nan

        alpha, alpha_rate = ph - th, wph - w
        if action_targets is None:
            tau_hip = tau_leg = 0.0
        else:
            tau_hip, tau_leg = pd_torque(action_targets, _JointView(alpha, l, alpha_rate, vl), factors, params)

        stop_hip = 0.0
        if alpha > params.hip_limit:
            stop_hip = -params.hip_stop_stiffness * (alpha - params.hip_limit)
        elif alpha < -params.hip_limit:
            stop_hip = -params.hip_stop_stiffness * (alpha + params.hip_limit)
        stop_leg = 0.0
        if l > params.leg_max:
            stop_leg = -params.leg_stop_stiffness * (l - params.leg_max)
        elif l < params.leg_min:
            stop_leg = -params.leg_stop_stiffness * (l - params.leg_min)
        spring = -params.leg_stiffness * (l - params.leg_rest)

        q_x = fx
        q_z = fz - mass * params.gravity
        q_th = c * sth * fx - c * cth * fz - tau_hip - stop_hip
        q_ph = l * cph * fx + l * sph * fz + tau_hip + stop_hip
        q_l = sph * fx - cph * fz + tau_leg + spring + stop_leg

        vx += dt * q_x / mass
        vz += dt * q_z / mass
        w += dt * q_th / inertia
        wph += dt * q_ph / params.leg_inertia
        vl += dt * q_l / params.foot_mass

        x += dt * vx
        z += dt * vz
        th += dt * w
        ph += dt * wph
        l += dt * vl

        work += abs(tau_hip * dt * (wph - w)) + abs(tau_leg * dt * vl)
        torque_sum[0] += tau_hip
        torque_sum[1] += tau_leg

    values = (x, z, th, ph, l, vx, vz, w, wph, vl)
    if not all(math.isfinite(v) for v in values) or abs(z) > 1e3 or max(abs(vx), abs(vz), abs(w), abs(wph), abs(vl)) > 1e4:
        logger.debug(f"[ENV] Simulation diverged at x={x}, z={z}")
        raise SimulationDiverged(f"hopper state diverged (x={x}, z={z}, pitch={th})")

    foot_x = x - c * math.cos(th) + l * math.sin(ph)
    foot_z = z - c * math.sin(th) - l * math.cos(ph)
    contact = profile.height_at(foot_x) - foot_z > 0.0
    if not contact:
        anchor = math.nan

    n = config.physics_substeps
    next_state = RobotState(x=x, z=z, pitch=th, leg_angle=ph, leg_length=l, vx=vx, vz=vz, pitch_rate=w,
                            leg_angle_rate=wph, leg_rate=vl, body_height=z - profile.height_at(x),
                            contact=contact, anchor=anchor)
    info = StepInfo(grf=(fx, fz), foot_vel=foot_vx, contact=contact,
                    torques=(torque_sum[0] / n, torque_sum[1] / n), work=work, slipping=slipping)
    return next_state, info


@dataclass(frozen=True)
class _JointView:
    hip_angle: float
    leg_length: float
    hip_rate: float
    leg_rate: float

    @property
    def joint_pos(self):
        return (self.hip_angle, self.leg_length)

    @property
    def joint_vel(self):
        return (self.hip_rate, self.leg_rate)


def mechanical_energy(state, factors, profile, params=None):
    """Kinetic plus potential energy of the passive system (gravity, springs, contact)."""
    params = params or HopperParams()
    mass = params.body_mass + factors.payload
    inertia = params.body_inertia * mass / params.body_mass
    kinetic = 0.5 * (mass * (state.vx ** 2 + state.vz ** 2) + inertia * state.pitch_rate ** 2
                     + params.leg_inertia * state.leg_angle_rate ** 2 + params.foot_mass * state.leg_rate ** 2)
    potential = mass * params.gravity * state.z
    potential += 0.5 * params.leg_stiffness * (state.leg_length - params.leg_rest) ** 2
    if state.leg_length > params.leg_max:
        potential += 0.5 * params.leg_stop_stiffness * (state.leg_length - params.leg_max) ** 2
    elif state.leg_length < params.leg_min:
        potential += 0.5 * params.leg_stop_stiffness * (state.leg_length - params.leg_min) ** 2
    foot_x, foot_z = foot_position(state, factors.com_offset)
    penetration = profile.height_at(foot_x) - foot_z
    if penetration > 0.0:
        potential += 0.5 * params.ground_stiffness * penetration ** 2
        if not math.isnan(state.anchor):
            potential += 0.5 * params.tangential_stiffness * (foot_x - state.anchor) ** 2
    return kinetic + potential


def check_termination(state, step_count, config=None):
    config = config or EpisodeConfig()
    if state.body_height < config.min_height or abs(state.pitch) > config.max_pitch:
        return FELL
    if step_count >= config.max_steps:
        return TIMEOUT
    return RUNNING


# ------------------------------------------------------------------------------
# Episode wrapper
# ------------------------------------------------------------------------------

class HopperEnv:
    """One randomized episode stream: factors, terrain, state and step counter."""

    def __init__(self, profile, rng, range_set="train", scale=1.0, params=None, config=None,
                 fixed_gains=False):
        self.profile = profile
        self.rng = rng
        self.range_set = range_set
        self.scale = scale
        self.params = params or HopperParams()
        self.config = config or EpisodeConfig()
        self.fixed_gains = fixed_gains
        self.state = None
        self.factors = None
        self.steps = 0
        self.status = RUNNING

    def reset(self, factors=None):
        if factors is None:
            factors = sample_env_factors(self.rng, self.range_set, self.scale, self.params)
        if self.fixed_gains:
            factors = deployment_gains(factors)
        self.state = standing_state(self.profile, self.params, factors)
        foot_x, _ = foot_position(self.state, factors.com_offset)
        self.factors = replace(factors, terrain_height=local_height(self.profile, [foot_x]))
        self.steps = 0
        self.status = RUNNING
        return observe(self.state)

    def observation(self):
        return observe(self.state)

    def foot_x(self):
        return foot_position(self.state, self.factors.com_offset)[0]

    def set_factors(self, **values):
        self.factors = self.factors.with_values(**values)

    def step(self, action):
        """Returns (info, status); info is None when the physics diverged."""
        targets = None if action is None else action_to_targets(action, self.params)
        try:
            self.state, info = step(self.state, targets, self.factors, self.profile, self.params, self.config)
        except SimulationDiverged as e:
            logger.warning(f"[ENV] {e}; ending episode as a fall")
            self.steps += 1
            self.status = FELL
            return None, FELL
        self.steps += 1
        self.status = check_termination(self.state, self.steps, self.config)
        factors = maybe_resample(self.factors, self.rng, self.config.resample_prob, self.range_set,
                                 self.profile, self.foot_x(), self.scale, self.params)
        self.factors = deployment_gains(factors) if self.fixed_gains else factors
        return info, self.status
