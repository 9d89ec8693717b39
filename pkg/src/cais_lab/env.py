"""Surrogate infant-mobile environment.

Twelve actuated limb joints are modelled as independent damped torsional
springs.  The mobile is a point mass on a spring anchored at the origin.  An
invisible tether couples the angular velocity of one limb's joints to a force
on the mobile, and in the noisy condition a randomly directed force of fixed
magnitude is applied at every physics substep.  A fixed random linear map
stands in for the pretrained visual encoder and turns the mobile state into a
latent observation vector.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field

import numba
import numpy as np
from scipy.linalg import expm

from .errors import ConfigError, ContractError, NumericalInstabilityError

JOINT_NAMES = (
    "right_shoulder1",
    "right_shoulder2",
    "left_shoulder1",
    "left_shoulder2",
    "right_elbow",
    "left_elbow",
    "right_hip1",
    "right_hip2",
    "left_hip1",
    "left_hip2",
    "right_knee",
    "left_knee",
)
N_JOINTS = len(JOINT_NAMES)

NO_TORQUE = 0
MOVE = 1

LIMB_JOINTS = {
    "RightArm": ("right_shoulder1", "right_shoulder2", "right_elbow"),
    "LeftArm": ("left_shoulder1", "left_shoulder2", "left_elbow"),
    "RightLeg": ("right_hip1", "right_hip2", "right_knee"),
    "LeftLeg": ("left_hip1", "left_hip2", "left_knee"),
}
LIMBS = tuple(LIMB_JOINTS)

ANGLE_LIMIT = 1.5
MOBILE_FEATURES = 6


def limb_joint_indices(limb: str) -> np.ndarray:
    return np.array([JOINT_NAMES.index(j) for j in LIMB_JOINTS[limb]], dtype=np.int64)


class Condition(str, enum.Enum):
    FREE = "FreeMobile"
    NOISY = "NoisyMobile"

    @classmethod
    def _missing_(cls, value):
        # short aliases used on the command line and in sweep grids
        aliases = {"free": cls.FREE, "noisy": cls.NOISY}
        return aliases.get(value.lower()) if isinstance(value, str) else None


class TetherMode(str, enum.Enum):
    # force along the rope follows the signed summed limb velocity
    SIGNED = "signed"
    # a rope only pulls: each joint of the limb tugs with its angular speed
    TAUT = "taut"


@dataclass
class EnvConfig:
    substep_dt: float = 0.005
    substeps_per_step: int = 120
    action_substeps: int = 40
    condition: Condition = Condition.FREE
    noise_force_magnitude: float = 400.0
    joint_inertia: float = 0.01
    joint_damping: float = 0.4
    joint_stiffness: float = 4.0
    max_torque: float = 1.5
    mobile_mass: float = 1e-4
    mobile_damping: float = 0.4
    mobile_anchor_stiffness: float = 400.0
    tether_gain: float = 55.0
    tether_mode: TetherMode = TetherMode.TAUT
    attached_limb: str = "LeftLeg"
    latent_dim: int = 64
    observation_noise_std: float = 0.01
    rtl_checkpoint_every: int = 10
    seed: int = 0

    def __post_init__(self):
        self.condition = _coerce_enum(Condition, self.condition, "env.condition")
        self.tether_mode = _coerce_enum(TetherMode, self.tether_mode, "env.tether_mode")
        for name in ("substeps_per_step", "action_substeps", "latent_dim", "rtl_checkpoint_every"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ConfigError(f"env.{name}", f"expected an integer, got {value!r}")
            if value < 1:
                raise ConfigError(f"env.{name}", f"must be >= 1, got {value}")
        if self.action_substeps > self.substeps_per_step:
            raise ConfigError(
                "env.action_substeps",
                f"{self.action_substeps} exceeds substeps_per_step={self.substeps_per_step}",
            )
        for name in (
            "substep_dt",
            "noise_force_magnitude",
            "joint_inertia",
            "joint_damping",
            "joint_stiffness",
            "max_torque",
            "mobile_mass",
            "mobile_damping",
            "mobile_anchor_stiffness",
            "tether_gain",
        ):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ConfigError(f"env.{name}", f"expected a finite number, got {value!r}")
            if value <= 0:
                raise ConfigError(f"env.{name}", f"must be strictly positive, got {value}")
        if not isinstance(self.observation_noise_std, (int, float)) or not self.observation_noise_std >= 0:
            raise ConfigError("env.observation_noise_std", f"must be >= 0, got {self.observation_noise_std!r}")
        if self.attached_limb not in LIMB_JOINTS:
            raise ConfigError("env.attached_limb", f"unknown limb {self.attached_limb!r}; choose from {LIMBS}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ConfigError("env.seed", f"expected an unsigned integer, got {self.seed!r}")

    @property
    def step_seconds(self) -> float:
        return self.substep_dt * self.substeps_per_step

    def to_dict(self) -> dict:
        d = asdict(self)
        d["condition"] = self.condition.value
        d["tether_mode"] = self.tether_mode.value
        return d


def _coerce_enum(kind, value, path):
    try:
        return kind(value)
    except ValueError:
        choices = ", ".join(m.value for m in kind)
        raise ConfigError(path, f"unknown value {value!r}; choose from {choices}") from None


@dataclass
class JointState:
    angle: np.ndarray
    angular_velocity: np.ndarray


@dataclass
class MobileState:
    position: np.ndarray
    velocity: np.ndarray

    def features(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])


@dataclass
class Observation:
    proprio: np.ndarray
    latent: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.proprio, self.latent])


@dataclass
class StepOutcome:
    observation: Observation
    mobile_path_length: float
    torque_signs: np.ndarray
    phase_attached: bool
    # latents every ``rtl_checkpoint_every`` substeps, endpoints included
    latent_checkpoints: np.ndarray = field(repr=False, default=None)
    # latent of the substep-averaged mobile state
    latent_mean: np.ndarray = field(repr=False, default=None)


@numba.njit(cache=True)
def _integrate(
    theta, omega, pos, vel, torque, n_sub, n_act, dt,
    inertia, damping, stiffness, limit,
    attached, limb_idx, rope_dir, gain, taut,
    noise, phi, gamma, checkpoint_every, checkpoints, mean_state,
):
    """Advance joints and mobile by ``n_sub`` substeps.

    Joints use semi-implicit Euler.  The mobile is linear, so each axis is
    propagated exactly with the zero-order-hold matrices ``phi`` (2x2) and
    ``gamma`` (2,) for the force held constant over the substep.

    Mutates the state arrays in place; returns the mobile path length.
    ``checkpoints`` receives [position; velocity] rows at substep 0 and every
    ``checkpoint_every`` substeps thereafter; ``mean_state`` receives the
    [position; velocity] average over all substeps.
    """
    n_joints = theta.shape[0]
    path = 0.0
    for d in range(3):
        checkpoints[0, d] = pos[d]
        checkpoints[0, 3 + d] = vel[d]
    row = 1
    mean_state[:] = 0.0
    for k in range(n_sub):
        active = k < n_act
        for j in range(n_joints):
            tq = torque[j] if active else 0.0
            acc = (tq - damping * omega[j] - stiffness * theta[j]) / inertia
            omega[j] += dt * acc
            theta[j] += dt * omega[j]
            if theta[j] > limit:
                theta[j] = limit
                if omega[j] > 0.0:
                    omega[j] = 0.0
            elif theta[j] < -limit:
                theta[j] = -limit
                if omega[j] < 0.0:
                    omega[j] = 0.0
        drive = 0.0
        if attached:
            if taut:
                for j in limb_idx:
                    drive += abs(omega[j])
            else:
                for j in limb_idx:
                    drive += omega[j]
        step_len = 0.0
        for d in range(3):
            f = gain * drive * rope_dir[d] + noise[k, d]
            x_new = phi[0, 0] * pos[d] + phi[0, 1] * vel[d] + gamma[0] * f
            v_new = phi[1, 0] * pos[d] + phi[1, 1] * vel[d] + gamma[1] * f
            dx = x_new - pos[d]
            pos[d] = x_new
            vel[d] = v_new
            step_len += dx * dx
        path += math.sqrt(step_len)
        for d in range(3):
            mean_state[d] += pos[d] / n_sub
            mean_state[3 + d] += vel[d] / n_sub
        if (k + 1) % checkpoint_every == 0 and row < checkpoints.shape[0]:
            for d in range(3):
                checkpoints[row, d] = pos[d]
                checkpoints[row, 3 + d] = vel[d]
            row += 1
    return path


def mobile_transition(cfg: EnvConfig) -> tuple[np.ndarray, np.ndarray]:
    """Exact one-substep propagator of a mobile axis under a constant force.

    For state ``s = [x, v]`` with ``s' = A s + b f``, returns ``(expm(A dt),
    integral_0^dt expm(A t) dt @ b)``, computed together from one augmented
    matrix exponential.
    """
    m, c, k = cfg.mobile_mass, cfg.mobile_damping, cfg.mobile_anchor_stiffness
    aug = np.zeros((3, 3))
    aug[0, 1] = 1.0
    aug[1, 0] = -k / m
    aug[1, 1] = -c / m
    aug[1, 2] = 1.0 / m
    e = expm(aug * cfg.substep_dt)
    return np.ascontiguousarray(e[:2, :2]), np.ascontiguousarray(e[:2, 2])


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    m = rng.standard_normal((n, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


class MobileEnv:
    """One environment instance; owns its state and PRNG streams."""

    def __init__(self, config: EnvConfig, seed: int | None = None):
        self.config = config
        self.reset(seed)

    def reset(self, seed: int | None = None) -> Observation:
        cfg = self.config
        if seed is None:
            seed = cfg.seed
        if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)) or seed < 0:
            raise ConfigError("seed", f"expected an unsigned integer, got {seed!r}")
        self.seed = int(seed)
        geometry, signs, noise, obs = np.random.SeedSequence(self.seed).spawn(4)
        geometry_rng = np.random.default_rng(geometry)
        self.observer_matrix = _unit_rows(geometry_rng, cfg.latent_dim, MOBILE_FEATURES)
        self.rope_directions = {limb: _unit_rows(geometry_rng, 1, 3)[0] for limb in LIMBS}
        self._sign_rng = np.random.default_rng(signs)
        self._noise_rng = np.random.default_rng(noise)
        self._obs_rng = np.random.default_rng(obs)

        self.joints = JointState(np.zeros(N_JOINTS), np.zeros(N_JOINTS))
        self.mobile = MobileState(np.zeros(3), np.zeros(3))
        self._limb_idx = limb_joint_indices(cfg.attached_limb)
        self._n_checkpoints = 1 + cfg.substeps_per_step // cfg.rtl_checkpoint_every
        self._phi, self._gamma = mobile_transition(cfg)
        self.steps_taken = 0
        self.observation = self.observe()
        return self.observation

    @property
    def attached_joints(self) -> np.ndarray:
        return self._limb_idx.copy()

    def latent_observe(self, mobile: MobileState, noise: bool = True) -> np.ndarray:
        latent = self.observer_matrix @ mobile.features()
        std = self.config.observation_noise_std
        if noise and std > 0:
            latent = latent + std * self._obs_rng.standard_normal(self.config.latent_dim)
        return latent

    def _noisy(self, latent: np.ndarray) -> np.ndarray:
        std = self.config.observation_noise_std
        if std > 0:
            latent = latent + std * self._obs_rng.standard_normal(latent.shape)
        return latent

    def observe(self) -> Observation:
        return Observation(self.joints.angle.copy(), self.latent_observe(self.mobile))

    def step(self, action, attached: bool) -> StepOutcome:
        cfg = self.config
        action = np.asarray(action)
        if action.shape != (N_JOINTS,):
            raise ContractError(f"action must have {N_JOINTS} entries, got shape {action.shape}")
        if not np.all((action == NO_TORQUE) | (action == MOVE)):
            raise ContractError("action entries must be NO_TORQUE (0) or MOVE (1)")

        signs = np.where(self._sign_rng.random(N_JOINTS) < 0.5, -1.0, 1.0)
        torque = np.where(action == MOVE, signs * cfg.max_torque, 0.0)
        n_sub = cfg.substeps_per_step
        if cfg.condition is Condition.NOISY:
            noise = _unit_rows(self._noise_rng, n_sub, 3) * cfg.noise_force_magnitude
        else:
            noise = np.zeros((n_sub, 3))
        checkpoints = np.zeros((self._n_checkpoints, MOBILE_FEATURES))
        mean_state = np.zeros(MOBILE_FEATURES)

        path = _integrate(
            self.joints.angle, self.joints.angular_velocity,
            self.mobile.position, self.mobile.velocity, torque,
            n_sub, cfg.action_substeps, cfg.substep_dt,
            cfg.joint_inertia, cfg.joint_damping, cfg.joint_stiffness, ANGLE_LIMIT,
            bool(attached), self._limb_idx, self.rope_directions[cfg.attached_limb],
            cfg.tether_gain, cfg.tether_mode is TetherMode.TAUT,
            noise, self._phi, self._gamma,
            cfg.rtl_checkpoint_every, checkpoints, mean_state,
        )
        self.steps_taken += 1
        if not (
            math.isfinite(path)
            and np.all(np.isfinite(self.joints.angular_velocity))
            and np.all(np.isfinite(self.mobile.velocity))
            and np.all(np.isfinite(self.mobile.position))
        ):
            raise NumericalInstabilityError(
                "non-finite environment state",
                step=self.steps_taken,
                diagnostics={
                    "angles": self.joints.angle.tolist(),
                    "mobile_position": self.mobile.position.tolist(),
                    "mobile_velocity": self.mobile.velocity.tolist(),
                },
            )
        self.observation = self.observe()
        return StepOutcome(
            observation=self.observation,
            mobile_path_length=float(path),
            torque_signs=signs,
            phase_attached=bool(attached),
            latent_checkpoints=self._noisy(checkpoints @ self.observer_matrix.T),
            latent_mean=self._noisy(self.observer_matrix @ mean_state),
        )

    def kinetic_energy(self) -> float:
        cfg = self.config
        return 0.5 * cfg.joint_inertia * float(self.joints.angular_velocity @ self.joints.angular_velocity) + (
            0.5 * cfg.mobile_mass * float(self.mobile.velocity @ self.mobile.velocity)
        )
