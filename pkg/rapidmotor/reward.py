"""Ten-term locomotion reward and the penalty curriculum."""

from dataclasses import astuple, dataclass, fields, replace

import numpy as np


FORWARD_CAP = 0.35
REWARD_SCALES = (20.0, 21.0, 0.002, 0.02, 0.001, 0.07, 0.002, 1.5, 2.0, 0.8)
CURRICULUM_K0 = 0.03
CURRICULUM_EXPONENT = 0.997


@dataclass(frozen=True)
class RewardTerms:
    forward: float = 0.0
    lateral_rot: float = 0.0
    work: float = 0.0
    ground_impact: float = 0.0
    smoothness: float = 0.0
    action_mag: float = 0.0
    joint_speed: float = 0.0
    orientation: float = 0.0
    z_accel: float = 0.0
    foot_slip: float = 0.0

    @classmethod
    def names(cls):
        return [f.name for f in fields(cls)]

    def as_array(self):
        return np.array(astuple(self))


@dataclass(frozen=True)
class PreviousStep:
    action: tuple = (0.0, 0.0)
    torques: tuple = (0.0, 0.0)
    grf: tuple = (0.0, 0.0)


@dataclass(frozen=True)
class CurriculumState:
    k: float = CURRICULUM_K0
    iteration: int = 0


def _sq(values):
    return float(np.dot(values, values))


def compute_terms(step_info, state, prev, action, forward_cap=FORWARD_CAP):
    torques = np.asarray(step_info.torques)
    grf = np.asarray(step_info.grf)
    slip = step_info.foot_vel if step_info.contact else 0.0
    return RewardTerms(
        forward=min(state.vx, forward_cap),
        lateral_rot=0.0,
        work=-abs(step_info.work),
        ground_impact=-_sq(grf - np.asarray(prev.grf)),
        smoothness=-_sq(torques - np.asarray(prev.torques)),
        action_mag=-_sq(np.asarray(action, dtype=np.float64)),
        joint_speed=-_sq(np.asarray(state.joint_vel)),
        orientation=-state.pitch ** 2,
        z_accel=-state.vz ** 2,
        foot_slip=-slip * slip,
    )


def scaled_terms(terms, curriculum, scales=REWARD_SCALES):
    """Per-term contributions; penalties (terms 3-10) carry the curriculum multiplier."""
    raw = terms.as_array()
    weights = np.asarray(scales, dtype=np.float64).copy()
    weights[2:] *= curriculum.k
    return raw * weights


def scale_and_sum(terms, curriculum, scales=REWARD_SCALES):
    raw = terms.as_array()
    s = np.asarray(scales, dtype=np.float64)
    task = s[0] * raw[0] + s[1] * raw[1]
    penalty = float(np.dot(s[2:], raw[2:]))
    return float(task + curriculum.k * penalty)


def task_reward(terms, scales=REWARD_SCALES):
    return scales[0] * terms.forward + scales[1] * terms.lateral_rot


def advance_curriculum(c, exponent=CURRICULUM_EXPONENT):
    return replace(c, k=c.k ** exponent, iteration=c.iteration + 1)


def curriculum_at(iteration, k0=CURRICULUM_K0, exponent=CURRICULUM_EXPONENT):
    return CurriculumState(k=k0 ** (exponent ** iteration), iteration=iteration)


def difficulty_schedule(iteration, total_iters):
    if total_iters <= 0:
        return 1.0
    return min(max(iteration / total_iters, 0.0), 1.0)
