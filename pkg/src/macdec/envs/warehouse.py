"""Warehouse Tool Delivery: a fixed gray manipulator, two mobile robots and one human.

The human runs a 4-step assembly (18 work ticks per step) and needs tool k
before starting step k+1.  The gray robot searches tools and stages them in a
FIFO area beside the table (capacity 2), then passes the head of the queue to
a mobile robot waiting at its table waypoint.  Mobiles carry tools to the
workshop; the human accepts only the next-needed tool and holds one at a time.

Agents are ordered ``[mobile 0, mobile 1, gray]``.

Within a primitive tick, effects resolve in this order:

1. mobiles travel (an arrival counts as being at the destination this tick);
2. the gray robot progresses; a finishing Search stages its tool if there is
   room, a finishing Pass hands over the queue head or incurs the penalty;
3. the human takes a delivery, then works one tick, then starts the next step
   if its tool is in hand;
4. macro-action terminations are evaluated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from ..core import EnvSpec, MacroEnv, Obs, TickResult

GO_WS, GO_TR, GET_TOOL = range(3)
MOBILE_ACTIONS = ("Go-to-WS", "Go-to-TR", "Get-Tool")

WAIT_M, SEARCH_1, SEARCH_2, SEARCH_3, PASS_0, PASS_1 = range(6)
GRAY_ACTIONS = (
    "Wait-M",
    "Search-Tool(1)",
    "Search-Tool(2)",
    "Search-Tool(3)",
    "Pass-to-M(0)",
    "Pass-to-M(1)",
)

TR, WS, TABLE, TRANSIT = range(4)
LOCATION_NAMES = ("TR", "WS", "TABLE", "TRANSIT")
UNKNOWN_STEP = 4
UNKNOWN_COUNT = 3
GRAY = 2
N_TOOLS = 3
N_STEPS = 4

Point = tuple[float, float]


@dataclass(frozen=True)
class WTDConfig:
    speed: float = 0.6
    human_step_ticks: int = 18
    staging_capacity: int = 2
    search_ticks: int = 6
    pass_ticks: int = 4
    wait_m_ticks: int = 1
    get_tool_timeout: int = 10
    horizon: int = 150
    step_reward: float = -1.0
    failed_pass_penalty: float = -10.0
    delivery_bonus: float = 100.0
    table_waypoints: tuple[Point, Point] = ((1.0, 1.0), (2.0, 1.0))
    tool_room: Point = (4.0, 2.5)
    workshop: Point = (2.5, 6.5)
    tool_room_max_y: float = 3.5

    def __post_init__(self):
        ticks = (
            self.human_step_ticks,
            self.search_ticks,
            self.pass_ticks,
            self.wait_m_ticks,
            self.get_tool_timeout,
            self.horizon,
        )
        if min(ticks) <= 0 or self.speed <= 0:
            raise ValueError("durations and speed must be positive")
        if self.staging_capacity != 2:
            raise ValueError("staging capacity is fixed at 2")

    def travel_ticks(self, a: Point, b: Point) -> int:
        d = math.dist(a, b)
        # guard exact multiples against float noise
        return max(1, math.ceil(d / self.speed - 1e-9))


@dataclass
class Mobile:
    index: int
    loc: int = TR
    dest: int = TR
    travel_left: int = 0
    basket: list[int] = field(default_factory=list)
    action: int | None = None
    waiting: bool = False
    wait_left: int = 0
    received: bool = False
    arrived: bool = False


@dataclass
class Human:
    step: int = 1
    work_left: int = 18
    delivered: int = 0

    @property
    def holding(self) -> bool:
        return self.delivered >= self.step

    @property
    def next_tool(self) -> int:
        return self.delivered + 1


@dataclass
class Gray:
    action: int | None = None
    remaining: int = 0


@dataclass
class WTDState:
    human: Human
    mobiles: list[Mobile]
    gray: Gray
    staging: list[int] = field(default_factory=list)
    clock: int = 0


class Warehouse(MacroEnv):
    def __init__(self, config: WTDConfig | None = None):
        self.config = config or WTDConfig()
        cfg = self.config
        mobile_cards = (4, 5, 2, 2, 2, 4)
        self.spec = EnvSpec(
            name="wtd",
            n_actions=(3, 3, 6),
            obs_cards=(mobile_cards, mobile_cards, (4, 3)),
            horizon=cfg.horizon,
            action_names=(MOBILE_ACTIONS, MOBILE_ACTIONS, GRAY_ACTIONS),
        )
        self.state = self._initial_state()

    def _initial_state(self) -> WTDState:
        return WTDState(
            human=Human(work_left=self.config.human_step_ticks),
            mobiles=[Mobile(0), Mobile(1)],
            gray=Gray(),
        )

    @property
    def clock(self) -> int:
        return self.state.clock

    def reset(self, seed: int | None = None) -> list[Obs]:
        # deterministic domain; seed kept for interface uniformity
        self.state = self._initial_state()
        return [self.observe(i) for i in range(3)]

    def point(self, mobile: int, loc: int) -> Point:
        cfg = self.config
        if loc == TR:
            return cfg.tool_room
        if loc == WS:
            return cfg.workshop
        if loc == TABLE:
            return cfg.table_waypoints[mobile]
        raise ValueError("transit has no coordinates")

    def in_tool_room(self, mobile: int, loc: int) -> bool:
        return loc != TRANSIT and self.point(mobile, loc)[1] <= self.config.tool_room_max_y

    # -- macro-action starts -------------------------------------------

    def begin(self, agent: int, action: int) -> None:
        s = self.state
        if agent == GRAY:
            cfg = self.config
            s.gray.action = action
            if action == WAIT_M:
                s.gray.remaining = cfg.wait_m_ticks
            elif action in (SEARCH_1, SEARCH_2, SEARCH_3):
                s.gray.remaining = cfg.search_ticks
            else:
                s.gray.remaining = cfg.pass_ticks
            return
        m = s.mobiles[agent]
        m.action = action
        m.waiting = False
        m.received = False
        target = {GO_WS: WS, GO_TR: TR, GET_TOOL: TABLE}[action]
        if m.loc == target:
            if action == GET_TOOL:
                m.travel_left = 0
                m.waiting = True
                m.wait_left = self.config.get_tool_timeout
            else:
                # already there: spend one tick in place
                m.dest = target
                m.travel_left = 1
            return
        m.travel_left = self.config.travel_ticks(
            self.point(agent, m.loc), self.point(agent, target)
        )
        m.dest = target
        m.loc = TRANSIT

    # -- one primitive tick ----------------------------------------------

    def tick(self) -> TickResult:
        s = self.state
        cfg = self.config
        reward = cfg.step_reward

        for m in s.mobiles:
            m.arrived = False
            m.received = False
            if m.travel_left > 0:
                m.travel_left -= 1
                if m.travel_left == 0:
                    m.loc = m.dest
                    m.arrived = True

        g = s.gray
        if g.action is None:
            raise RuntimeError("gray robot has no running macro-action")
        g.remaining -= 1
        if g.remaining == 0:
            if g.action in (SEARCH_1, SEARCH_2, SEARCH_3):
                if len(s.staging) < cfg.staging_capacity:
                    s.staging.append(g.action - SEARCH_1 + 1)
            elif g.action in (PASS_0, PASS_1):
                m = s.mobiles[g.action - PASS_0]
                if m.loc == TABLE:
                    if s.staging:
                        m.basket.append(s.staging.pop(0))
                        m.received = True
                else:
                    reward += cfg.failed_pass_penalty

        reward += cfg.delivery_bonus * self.human_tick()

        terminated = []
        for m in s.mobiles:
            if m.action is None:
                raise RuntimeError(f"mobile {m.index} has no running macro-action")
            if m.action != GET_TOOL:
                terminated.append(m.travel_left == 0)
                continue
            if m.received:
                terminated.append(True)
            elif m.waiting:
                m.wait_left -= 1
                terminated.append(m.wait_left == 0)
            else:
                if m.arrived:
                    m.waiting = True
                    m.wait_left = cfg.get_tool_timeout
                terminated.append(False)
        terminated.append(g.remaining == 0)

        s.clock += 1
        return TickResult(reward, tuple(terminated), s.human.delivered == N_TOOLS)

    def human_tick(self) -> int:
        """Deliveries then one work tick; returns the number of tools handed over."""
        s = self.state
        h = s.human
        handed = 0
        for m in s.mobiles:
            if h.delivered >= N_TOOLS or h.holding:
                break
            if m.loc == WS and h.next_tool in m.basket:
                m.basket.remove(h.next_tool)
                h.delivered += 1
                handed += 1
        if h.work_left > 0:
            h.work_left -= 1
        if h.work_left == 0 and h.step < N_STEPS and h.holding:
            h.step += 1
            h.work_left = self.config.human_step_ticks
        return handed

    # -- observations ----------------------------------------------------

    def observe(self, agent: int) -> Obs:
        s = self.state
        if agent == GRAY:
            at0, at1 = (m.loc == TABLE for m in s.mobiles)
            return (int(at0) + 2 * int(at1), len(s.staging))
        m = s.mobiles[agent]
        step = s.human.step - 1 if m.loc == WS else UNKNOWN_STEP
        staged = len(s.staging) if self.in_tool_room(agent, m.loc) else UNKNOWN_COUNT
        has = tuple(int(k in m.basket) for k in range(1, N_TOOLS + 1))
        return (m.loc, step, *has, staged)

    def snapshot(self) -> dict:
        s = self.state
        return {
            "clock": s.clock,
            "human": {"step": s.human.step, "work_left": s.human.work_left,
                      "delivered": s.human.delivered},
            "staging": list(s.staging),
            "mobiles": [
                {"loc": LOCATION_NAMES[m.loc], "basket": list(m.basket)}
                for m in s.mobiles
            ],
        }

    def render(self) -> str:
        snap = self.snapshot()
        mob = " ".join(f"M{i}@{m['loc']}{m['basket']}" for i, m in enumerate(snap["mobiles"]))
        h = snap["human"]
        return (
            f"t={snap['clock']} human step {h['step']} ({h['work_left']} left, "
            f"{h['delivered']} tools) staging={snap['staging']} {mob}"
        )
