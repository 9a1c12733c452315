"""Box Pushing: two robots, one big box that only moves under a joint push.

Layout on an N x N grid (row 0 is the goal row at the top)::

    big box      row N//2, columns N/2-1 and N/2
    small boxes  row N//2, columns 1 and N-2
    waypoints    the cell directly below each box cell
    robots       row N-1, columns N//4 and 3N//4, facing north

Each robot observes only the cell in front of it.  Primitive ticks are
resolved in agent order, so robot 0 moves before robot 1 within a tick.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from ..core import EnvSpec, MacroEnv, Obs, TickResult

NORTH, EAST, SOUTH, WEST = range(4)
DIRS = ((-1, 0), (0, 1), (1, 0), (0, -1))

TURN_LEFT, TURN_RIGHT, STAY, MOVE_SMALL, MOVE_BIG, PUSH = range(6)
ACTION_NAMES = (
    "Turn-left",
    "Turn-right",
    "Stay",
    "Move-to-small-box",
    "Move-to-big-box",
    "Push",
)

EMPTY, TEAMMATE, BOUNDARY, SMALL_BOX, BIG_BOX = range(5)
OBS_NAMES = ("empty", "teammate", "boundary", "small_box", "big_box")

DEFAULT_HORIZONS = {10: 100, 30: 300}

# vertical moves first when several neighbours are equally close
_NAV_ORDER = (NORTH, SOUTH, WEST, EAST)

Cell = tuple[int, int]


@dataclass(frozen=True)
class BPConfig:
    grid_size: int = 10
    horizon: int | None = None
    big_reward: float = 100.0
    small_reward: float = 10.0
    penalty: float = -5.0
    step_reward: float = -0.1

    def __post_init__(self):
        n = self.grid_size
        if n < 6 or n % 2:
            raise ValueError(f"grid_size must be an even integer >= 6, got {n}")
        if self.horizon is None:
            object.__setattr__(self, "horizon", DEFAULT_HORIZONS.get(n, 10 * n))
        if self.horizon < n:
            raise ValueError(f"horizon {self.horizon} shorter than grid size {n}")


@dataclass
class BPState:
    pos: list[Cell]
    facing: list[int]
    big: Cell  # left cell; the box also covers (row, col + 1)
    small: list[Cell]
    delivered: str | None = None
    clock: int = 0
    running: list[int | None] = field(default_factory=lambda: [None, None])

    def big_cells(self) -> tuple[Cell, Cell]:
        r, c = self.big
        return (r, c), (r, c + 1)


class BoxPushing(MacroEnv):
    def __init__(self, config: BPConfig | None = None):
        self.config = config or BPConfig()
        self.n = self.config.grid_size
        self.spec = EnvSpec(
            name=f"bp{self.n}",
            n_actions=(6, 6),
            obs_cards=((5,), (5,)),
            horizon=self.config.horizon,
            action_names=(ACTION_NAMES, ACTION_NAMES),
        )
        self.state = self._initial_state()
        # BFS maps keyed by (target, box layout); the layout changes rarely
        self._dist_cache: dict = {}

    def _initial_state(self) -> BPState:
        n = self.n
        row = n // 2
        return BPState(
            pos=[(n - 1, n // 4), (n - 1, 3 * n // 4)],
            facing=[NORTH, NORTH],
            big=(row, n // 2 - 1),
            small=[(row, 1), (row, n - 2)],
        )

    @property
    def clock(self) -> int:
        return self.state.clock

    def reset(self, seed: int | None = None) -> list[Obs]:
        # the layout is fixed; seed is accepted for interface uniformity
        self.state = self._initial_state()
        return [self.observe(0), self.observe(1)]

    def begin(self, agent: int, action: int) -> None:
        self.state.running[agent] = action

    # -- geometry -----------------------------------------------------

    def in_grid(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.n and 0 <= cell[1] < self.n

    def content(self, cell: Cell, viewer: int) -> int:
        s = self.state
        if not self.in_grid(cell):
            return BOUNDARY
        if cell in s.big_cells():
            return BIG_BOX
        if cell in s.small:
            return SMALL_BOX
        if cell == s.pos[1 - viewer]:
            return TEAMMATE
        return EMPTY

    def front(self, agent: int) -> Cell:
        (r, c), (dr, dc) = self.state.pos[agent], DIRS[self.state.facing[agent]]
        return r + dr, c + dc

    def observe(self, agent: int) -> Obs:
        return (self.content(self.front(agent), agent),)

    def waypoint(self, agent: int, action: int) -> Cell:
        s = self.state
        if action == MOVE_SMALL:
            r, c = s.small[agent]
        else:
            r, c = s.big_cells()[agent]
        return r + 1, c

    def _distances(self, target: Cell) -> dict[Cell, int]:
        s = self.state
        key = (target, s.big, tuple(s.small))
        if key in self._dist_cache:
            return self._dist_cache[key]
        blocked = set(s.big_cells()) | set(s.small)
        dist = {target: 0}
        queue = deque([target])
        while queue:
            cell = queue.popleft()
            for dr, dc in DIRS:
                nxt = (cell[0] + dr, cell[1] + dc)
                if self.in_grid(nxt) and nxt not in blocked and nxt not in dist:
                    dist[nxt] = dist[cell] + 1
                    queue.append(nxt)
        self._dist_cache[key] = dist
        return dist

    def _nav_step(self, agent: int, target: Cell) -> Cell | None:
        here = self.state.pos[agent]
        dist = self._distances(target)
        if here not in dist:
            return None
        for d in _NAV_ORDER:
            dr, dc = DIRS[d]
            nxt = (here[0] + dr, here[1] + dc)
            if dist.get(nxt) == dist[here] - 1:
                return nxt
        return None

    # -- dynamics -----------------------------------------------------

    def _joint_push(self) -> bool:
        s = self.state
        if s.running != [PUSH, PUSH] or s.facing != [NORTH, NORTH]:
            return False
        below = tuple((r + 1, c) for r, c in s.big_cells())
        return set(s.pos) == set(below)

    def tick(self) -> TickResult:
        s = self.state
        cfg = self.config
        reward = cfg.step_reward
        terminated = [False, False]
        joint = self._joint_push()
        if joint:
            r, c = s.big
            ahead = [(r - 1, c), (r - 1, c + 1)]
            if all(self.in_grid(x) and x not in s.small for x in ahead):
                s.big = (r - 1, c)
                s.pos = [(pr - 1, pc) for pr, pc in s.pos]
                if s.big[0] == 0:
                    s.delivered = "big"
                    reward += cfg.big_reward
            else:
                terminated = [True, True]
        for i in range(2):
            action = s.running[i]
            if joint and action == PUSH:
                continue
            if action in (TURN_LEFT, TURN_RIGHT):
                s.facing[i] = (s.facing[i] + (3 if action == TURN_LEFT else 1)) % 4
                terminated[i] = True
            elif action == STAY:
                terminated[i] = True
            elif action in (MOVE_SMALL, MOVE_BIG):
                terminated[i] = self._navigate(i, self.waypoint(i, action))
            elif action == PUSH:
                done, penalty, bonus = self._push(i)
                terminated[i] = done
                reward += penalty + bonus
            else:
                raise RuntimeError(f"robot {i} has no running macro-action")
        s.clock += 1
        return TickResult(reward, tuple(terminated), s.delivered is not None)

    def _navigate(self, agent: int, target: Cell) -> bool:
        s = self.state
        if s.pos[agent] != target:
            nxt = self._nav_step(agent, target)
            if nxt is None:
                return True
            if nxt != s.pos[1 - agent]:
                s.pos[agent] = nxt
            if s.pos[agent] != target:
                return False
        s.facing[agent] = NORTH
        return True

    def _push(self, agent: int) -> tuple[bool, float, float]:
        s = self.state
        cfg = self.config
        ahead = self.front(agent)
        kind = self.content(ahead, agent)
        if kind in (BOUNDARY, BIG_BOX):
            return True, cfg.penalty, 0.0
        if kind == TEAMMATE:
            return True, 0.0, 0.0
        if kind == EMPTY:
            s.pos[agent] = ahead
            return False, 0.0, 0.0
        # small box: only moves north onto a free cell
        dest = (ahead[0] - 1, ahead[1])
        if (
            s.facing[agent] != NORTH
            or not self.in_grid(dest)
            or self.content(dest, agent) != EMPTY
        ):
            return True, 0.0, 0.0
        k = s.small.index(ahead)
        s.small[k] = dest
        s.pos[agent] = ahead
        if dest[0] == 0:
            s.delivered = "small"
            return True, 0.0, cfg.small_reward
        return False, 0.0, 0.0

    def render(self) -> str:
        s = self.state
        grid = [["." for _ in range(self.n)] for _ in range(self.n)]
        for r, c in s.big_cells():
            grid[r][c] = "B"
        for r, c in s.small:
            grid[r][c] = "b"
        arrows = "^>v<"
        for i, (r, c) in enumerate(s.pos):
            grid[r][c] = f"{arrows[s.facing[i]]}"
        lines = ["".join(row) for row in grid]
        return f"t={s.clock}\n" + "\n".join(lines)
