"""Parameterized pendulum-on-cart environment.

A single pole balances on a force-driven cart. Seven parameters randomize
the family: reward shaping (distance penalty, goal position), initial cart
placement, control gain and polarity, gravity, and a hard force clamp.
Control is continuous in [-1, 1]; integration is semi-implicit Euler at a
fixed dt. An episode ends after `horizon` steps or once the pole leaves the
upright half-plane (|angle| > pi/2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DT = 0.05
HORIZON = 100
TRACK_LIMIT = 2.5
CART_MASS = 1.0
POLE_MASS = 0.1
POLE_HALF_LENGTH = 0.5
RESET_NOISE = 0.05


@dataclass(frozen=True)
class EnvParams:
    """One sampled task from the environment family."""

    distance_penalty: float
    goal_position: float
    start_position: float
    motor_torque_scale: float
    inverted_control: bool
    gravity: float
    motor_actuation: float


def reward_bounds(params):
    """Analytic (min, max) of the raw reward over the reachable state box."""
    goal = abs(params.goal_position)
    max_sq = (TRACK_LIMIT + goal) ** 2
    min_sq = max(goal - TRACK_LIMIT, 0.0) ** 2
    r_min = 0.0 - params.distance_penalty * max_sq
    r_max = 1.0 - params.distance_penalty * min_sq
    return r_min, r_max


def normalize_reward(raw, params):
    r_min, r_max = reward_bounds(params)
    return (raw - r_min) / (r_max - r_min)


class CartPendulum:
    """State is (cart position, cart velocity, pole angle, pole angular velocity)."""

    def __init__(self, params: EnvParams):
        self.params = params
        self.state = None
        self.steps = 0
        self.done = True
        self.clip_warnings = 0

    def reset(self, rng):
        """Start near upright: cart at start_position, small random perturbation."""
        x = self.params.start_position
        xdot, theta, thetadot = rng.uniform(-RESET_NOISE, RESET_NOISE, size=3)
        self.state = np.array([x, xdot, theta, thetadot])
        self.steps = 0
        self.done = False
        return self.state.copy()

    def step(self, action):
        if self.done:
            raise RuntimeError("step() called on a finished episode; reset first")
        a = float(action)
        if a < -1.0 or a > 1.0:
            self.clip_warnings += 1
            a = float(np.clip(a, -1.0, 1.0))
        p = self.params
        force = a * p.motor_torque_scale * (-1.0 if p.inverted_control else 1.0)
        force = float(np.clip(force, -p.motor_actuation, p.motor_actuation))

        x, xdot, theta, thetadot = self.state
        sin_t = np.sin(theta)
        cos_t = np.cos(theta)
        total_mass = CART_MASS + POLE_MASS
        pole_ml = POLE_MASS * POLE_HALF_LENGTH
        tmp = (force + pole_ml * thetadot**2 * sin_t) / total_mass
        theta_acc = (p.gravity * sin_t - cos_t * tmp) / (
            POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos_t**2 / total_mass)
        )
        x_acc = tmp - pole_ml * theta_acc * cos_t / total_mass

        xdot += DT * x_acc
        x += DT * xdot
        thetadot += DT * theta_acc
        theta += DT * thetadot
        if x < -TRACK_LIMIT:
            x, xdot = -TRACK_LIMIT, 0.0
        elif x > TRACK_LIMIT:
            x, xdot = TRACK_LIMIT, 0.0
        self.state = np.array([x, xdot, theta, thetadot])

        uprightness = max(np.cos(theta), 0.0)
        raw_reward = uprightness - p.distance_penalty * (x - p.goal_position) ** 2

        self.steps += 1
        if abs(theta) > np.pi / 2 or self.steps >= HORIZON:
            self.done = True
        return self.state.copy(), raw_reward, self.done
