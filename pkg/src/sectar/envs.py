"""2D navigation, differential-drive (wheeled) and block-manipulation environments.

Every observation is the full environment state as a flat float vector, so any
observation can be fed back to :meth:`Env.reset` to restore that state.
Goal progress is not part of the observation; it lives in the
:class:`WaypointTask`, which can also be replayed over predicted states.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

ARENA = 1.0
REACH_RADIUS = 0.1
NAV_STEP = 0.05
PICKUP_RADIUS = 0.1
WHEEL_RADIUS = 0.1
AXLE = 0.2
OMEGA_MAX = 5.0
WHEELED_DT = 0.05
N_BLOCKS = 4
N_GOALS = 6

# unit moves for the four cardinal actions
MOVES = np.array([[0.0, 1.0], [0.0, -1.0], [1.0, 0.0], [-1.0, 0.0]])
ACTION_NAMES = ("north", "south", "east", "west", "pickup", "drop")
BLOCK_HOME = np.array([[-0.5, -0.5], [0.5, -0.5], [-0.5, 0.5], [0.5, 0.5]])

ENV_KINDS = ("nav2d", "wheeled", "blocks")


@dataclass
class WaypointTask:
    """Ordered goals; ``targets[i]`` is the state column where goal i's tracked (x, y) starts.

    Reaching goal ``i`` (0-based) pays 1 when ``(i + 1) % reward_every == 0``.
    """

    goals: np.ndarray
    targets: np.ndarray
    radius: float = REACH_RADIUS
    reward_every: int = 3
    index: int = 0

    def __post_init__(self) -> None:
        self.goals = np.asarray(self.goals, dtype=np.float64).reshape(-1, 2)
        self.targets = np.asarray(self.targets, dtype=np.int64).reshape(-1)
        if len(self.targets) != len(self.goals):
            raise ValueError("one target column per goal required")

    @property
    def n_goals(self) -> int:
        return len(self.goals)

    @property
    def done(self) -> bool:
        return self.index >= self.n_goals

    @property
    def max_return(self) -> int:
        return self.n_goals // self.reward_every

    def copy(self) -> "WaypointTask":
        return replace(self, goals=self.goals.copy(), targets=self.targets.copy())

    def update(self, state: np.ndarray) -> float:
        """Advance past the current goal if ``state`` reaches it; returns the reward."""
        if self.done:
            return 0.0
        col = self.targets[self.index]
        if np.hypot(*(state[col:col + 2] - self.goals[self.index])) < self.radius:
            self.index += 1
            return 1.0 if self.index % self.reward_every == 0 else 0.0
        return 0.0


def waypoint_reward(task: WaypointTask, state: np.ndarray) -> tuple[float, WaypointTask]:
    """Functional form of :meth:`WaypointTask.update`: the input task is not modified."""
    task = task.copy()
    return task.update(state), task


def eval_reward_on_states(task: WaypointTask, states: np.ndarray, gamma: float = 1.0) -> tuple[float, WaypointTask]:
    """Replay goal bookkeeping over ``states[1:]``; ``states[0]`` is where the agent already is.

    Transition k (into ``states[k + 1]``) is discounted by ``gamma ** k``.
    """
    states = np.asarray(states, dtype=np.float64)
    if len(states) < 2:
        return 0.0, task.copy()
    returns, index = eval_reward_batch(task, states[None], gamma)
    out = task.copy()
    out.index = int(index[0])
    return float(returns[0]), out


def eval_reward_batch(task: WaypointTask, states: np.ndarray, gamma: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`eval_reward_on_states` over candidates ``states`` of shape (K, N, S).

    Returns per-candidate discounted returns and final goal indices.
    """
    k_count, n = states.shape[:2]
    index = np.full(k_count, task.index, dtype=np.int64)
    returns = np.zeros(k_count)
    m = task.n_goals
    if m == 0:
        return returns, index
    rows = np.arange(k_count)
    goals = np.vstack([task.goals, np.full((1, 2), np.inf)])
    cols = np.append(task.targets, 0)
    for k in range(1, n):
        active = index < m
        if not active.any():
            break
        col = cols[index]
        pos = np.stack([states[rows, k, col], states[rows, k, col + 1]], axis=1)
        d = pos - goals[index]
        # same test as WaypointTask.update so replays match live rewards bit-for-bit
        reached = active & (np.hypot(d[:, 0], d[:, 1]) < task.radius)
        index = index + reached
        paid = reached & (index % task.reward_every == 0)
        returns += paid * gamma ** (k - 1)
    return returns, index


def sample_task(kind: str, rng: np.random.Generator, n_goals: int = N_GOALS) -> WaypointTask:
    """Random goal layout: uniform goals for navigation, one goal per block (random order) for blocks."""
    if kind == "blocks":
        order = rng.permutation(N_BLOCKS)
        goals = rng.uniform(-0.8, 0.8, size=(N_BLOCKS, 2))
        return blocks_task(order, goals)
    goals = rng.uniform(-ARENA, ARENA, size=(n_goals, 2))
    return WaypointTask(goals, np.zeros(n_goals, dtype=np.int64))


# fixed layouts used when no goal file is given; every goal is far from the start
DEFAULT_NAV_GOALS = np.array([[0.8, 0.8], [-0.8, 0.8], [-0.8, -0.8], [0.8, -0.8], [0.8, 0.0], [0.0, 0.8]])
DEFAULT_BLOCK_GOALS = -0.8 * np.sign(BLOCK_HOME)


def default_task(kind: str) -> WaypointTask:
    if kind == "blocks":
        return blocks_task(np.arange(N_BLOCKS), DEFAULT_BLOCK_GOALS)
    if kind not in ENV_KINDS:
        raise ValueError(f"unknown env kind {kind!r}; choose from {ENV_KINDS}")
    return WaypointTask(DEFAULT_NAV_GOALS, np.zeros(len(DEFAULT_NAV_GOALS), dtype=np.int64))


def blocks_task(order, goals) -> WaypointTask:
    """Goal ``i`` asks block ``order[i]`` to reach ``goals[i]``; every placement pays."""
    order = np.asarray(order, dtype=np.int64)
    return WaypointTask(goals, 2 + 2 * order, reward_every=1)


def read_goals(path: str | Path, kind: str) -> WaypointTask:
    """Goal file: one ``x y`` per line (blocks: ``block_index x y``); ``#`` starts a comment."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            rows.append([float(v) for v in line.split()])
    if kind == "blocks":
        if any(len(r) != 3 for r in rows):
            raise ValueError(f"{path}: blocks goal lines need 'block_index x y'")
        arr = np.array(rows)
        return blocks_task(arr[:, 0].astype(np.int64), arr[:, 1:])
    if any(len(r) != 2 for r in rows):
        raise ValueError(f"{path}: goal lines need 'x y'")
    return WaypointTask(np.array(rows), np.zeros(len(rows), dtype=np.int64))


def write_goals(path: str | Path, task: WaypointTask, kind: str) -> None:
    lines = []
    for g, col in zip(task.goals, task.targets):
        if kind == "blocks":
            lines.append(f"{(col - 2) // 2} {float(g[0])!r} {float(g[1])!r}")
        else:
            lines.append(f"{float(g[0])!r} {float(g[1])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


class Env:
    """Base class; subclasses define ``state_dim``, ``action_dim``, ``discrete`` and the dynamics."""

    kind: str = ""
    state_dim: int = 0
    action_dim: int = 0
    discrete: bool = True

    def __init__(self, task: WaypointTask | None = None):
        self.task = task.copy() if task is not None else WaypointTask(np.zeros((0, 2)), np.zeros(0))
        self.state = self.default_state()

    def default_state(self) -> np.ndarray:
        raise NotImplementedError

    def validate_state(self, state: np.ndarray) -> None:
        state = np.asarray(state, dtype=np.float64)
        if state.shape != (self.state_dim,):
            raise ValueError(f"{self.kind}: state must have shape ({self.state_dim},), got {state.shape}")
        if not np.isfinite(state).all():
            raise ValueError(f"{self.kind}: non-finite state")

    def reset(self, state: np.ndarray | None = None, task_index: int = 0) -> np.ndarray:
        if state is None:
            state = self.default_state()
        else:
            state = np.array(state, dtype=np.float64)
            self.validate_state(state)
        self.state = state
        self.task.index = task_index
        return self.observe()

    def observe(self) -> np.ndarray:
        return self.state.copy()

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        self.state = self.transition(self.state, action)
        reward = self.task.update(self.state)
        return self.observe(), reward, self.task.done

    def transition(self, state: np.ndarray, action) -> np.ndarray:
        raise NotImplementedError

    def action_to_vector(self, action) -> np.ndarray:
        """Storage form of an action: one-hot for discrete envs."""
        if self.discrete:
            vec = np.zeros(self.action_dim)
            vec[int(action)] = 1.0
            return vec
        return np.asarray(action, dtype=np.float64).reshape(self.action_dim)

    def _check_discrete(self, action) -> int:
        a = int(action)
        if a != action or not 0 <= a < self.action_dim:
            raise ValueError(f"{self.kind}: action {action!r} outside 0..{self.action_dim - 1}")
        return a

    def agent_xy(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(states)[..., :2]


class Nav2d(Env):
    kind = "nav2d"
    state_dim = 2
    action_dim = 4
    discrete = True

    def __init__(self, task: WaypointTask | None = None, step_size: float = NAV_STEP):
        self.step_size = step_size
        super().__init__(task)

    def default_state(self) -> np.ndarray:
        return np.zeros(2)

    def validate_state(self, state):
        super().validate_state(state)
        if np.any(np.abs(state) > ARENA):
            raise ValueError(f"nav2d: position {state} outside the arena")

    def transition(self, state, action):
        a = self._check_discrete(action)
        return np.clip(state + self.step_size * MOVES[a], -ARENA, ARENA)


def wrap_angle(theta):
    """Map to (-pi, pi]."""
    return math.pi - np.mod(math.pi - theta, 2.0 * math.pi)


class Wheeled(Env):
    """State ``[x, y, heading, linear velocity, angular velocity]``; actions are wheel angular velocities."""

    kind = "wheeled"
    state_dim = 5
    action_dim = 2
    discrete = False

    def __init__(self, task: WaypointTask | None = None, dt: float = WHEELED_DT,
                 wheel_radius: float = WHEEL_RADIUS, axle: float = AXLE, omega_max: float = OMEGA_MAX):
        self.dt, self.wheel_radius, self.axle, self.omega_max = dt, wheel_radius, axle, omega_max
        super().__init__(task)

    def default_state(self):
        return np.zeros(5)

    def validate_state(self, state):
        super().validate_state(state)
        if np.any(np.abs(state[:2]) > ARENA):
            raise ValueError(f"wheeled: position {state[:2]} outside the arena")
        if not -math.pi < state[2] <= math.pi:
            raise ValueError(f"wheeled: heading {state[2]} not in (-pi, pi]")

    def transition(self, state, action):
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.shape != (2,) or not np.isfinite(action).all():
            raise ValueError(f"wheeled: action must be 2 finite wheel speeds, got {action}")
        w_left, w_right = np.clip(action, -self.omega_max, self.omega_max)
        v = self.wheel_radius * (w_left + w_right) / 2.0
        omega = self.wheel_radius * (w_right - w_left) / self.axle
        x, y, theta = state[0], state[1], state[2]
        x = x + v * math.cos(theta) * self.dt
        y = y + v * math.sin(theta) * self.dt
        theta = wrap_angle(theta + omega * self.dt)
        return np.array([np.clip(x, -ARENA, ARENA), np.clip(y, -ARENA, ARENA), theta, v, omega])


class Blocks(Env):
    """State ``[agent xy, 4 block xy, held one-hot(4)]`` (14 dims); actions: 4 moves, pickup, drop."""

    kind = "blocks"
    state_dim = 2 + 2 * N_BLOCKS + N_BLOCKS
    action_dim = 6
    discrete = True

    def __init__(self, task: WaypointTask | None = None, step_size: float = NAV_STEP,
                 pickup_radius: float = PICKUP_RADIUS):
        self.step_size, self.pickup_radius = step_size, pickup_radius
        super().__init__(task)

    def default_state(self):
        return np.concatenate([np.zeros(2), BLOCK_HOME.reshape(-1), np.zeros(N_BLOCKS)])

    @staticmethod
    def held(state) -> int | None:
        flags = state[2 + 2 * N_BLOCKS:]
        return int(np.argmax(flags)) if flags.max() > 0.5 else None

    def validate_state(self, state):
        super().validate_state(state)
        flags = state[2 + 2 * N_BLOCKS:]
        if not np.all((flags == 0.0) | (flags == 1.0)) or flags.sum() > 1:
            raise ValueError(f"blocks: held flags {flags} must be one-hot or empty")
        if np.any(np.abs(state[:2 + 2 * N_BLOCKS]) > ARENA):
            raise ValueError("blocks: positions outside the arena")
        k = self.held(state)
        if k is not None and not np.array_equal(state[2 + 2 * k:4 + 2 * k], state[:2]):
            raise ValueError(f"blocks: held block {k} is not at the agent position")

    def transition(self, state, action):
        a = self._check_discrete(action)
        state = state.copy()
        k = self.held(state)
        if a < 4:
            state[:2] = np.clip(state[:2] + self.step_size * MOVES[a], -ARENA, ARENA)
            if k is not None:
                state[2 + 2 * k:4 + 2 * k] = state[:2]
        elif a == 4 and k is None:
            blocks = state[2:2 + 2 * N_BLOCKS].reshape(N_BLOCKS, 2)
            dist = np.hypot(*(blocks - state[:2]).T)
            j = int(np.argmin(dist))
            if dist[j] < self.pickup_radius:
                state[2 + 2 * j:4 + 2 * j] = state[:2]
                state[2 + 2 * N_BLOCKS + j] = 1.0
        elif a == 5 and k is not None:
            state[2 + 2 * N_BLOCKS + k] = 0.0
        return state


ENV_CLASSES = {"nav2d": Nav2d, "wheeled": Wheeled, "blocks": Blocks}


def make_env(kind: str, task: WaypointTask | None = None) -> Env:
    try:
        return ENV_CLASSES[kind](task)
    except KeyError:
        raise ValueError(f"unknown env kind {kind!r}; choose from {ENV_KINDS}") from None


def grid_entropy(xy: np.ndarray, bins: int = 20) -> float:
    """Entropy (nats) of positions binned on a ``bins`` x ``bins`` grid over the arena."""
    counts = occupancy(xy, bins)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def occupancy(xy: np.ndarray, bins: int = 20) -> np.ndarray:
    xy = np.asarray(xy).reshape(-1, 2)
    edges = np.linspace(-ARENA, ARENA, bins + 1)
    counts, _, _ = np.histogram2d(xy[:, 0], xy[:, 1], bins=[edges, edges])
    return counts
