"""Partially observed box pushing on a small walled grid.

Cells take values 0 empty, 1 wall, 2 box, 3 target, 4 agent, 5 box on
target, 6 agent on target (text characters ``.#BTA*+``).  The agent moves
up/down/left/right or waits; walking into a box pushes it if the cell behind
is free.  Pushing a box onto a target pays +1, off a target -1, and covering
the last target pays a further +10 and freezes the level for the rest of the
episode.

Levels are produced by reverse play: boxes start on their targets and the
agent walks backwards, optionally pulling a box, which guarantees that every
level can be solved.

Observations show the 3x3 window around the agent exactly; every other cell
is independently blanked to ``empty`` with probability ``p_mask``.

Inside the vectorized environment a level is an ``int64`` code: agent cell,
sorted box cells and sorted target cells as digits of a mixed-radix number
over interior cell indices.  Only border walls are supported there.
"""

import math
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from ..errors import CapacityError, ConstructionError, GenerationError, InputError
from ..policy import StateFeaturizer, TabularPolicy

EMPTY, WALL, BOX, TARGET, AGENT, BOX_ON_TARGET, AGENT_ON_TARGET = range(7)
UNKNOWN = 7
CHARS = ".#BTA*+"
ACTIONS = ("up", "down", "left", "right", "noop")
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))


@dataclass(frozen=True)
class GridPushConfig:
    width: int = 5
    height: int = 5
    n_boxes: int = 1
    horizon: int = 12
    p_mask: float = 0.7
    window: int = 1                 # reveal radius; 1 means a 3x3 window
    push_on: float = 1.0
    push_off: float = -1.0
    solve_bonus: float = 10.0
    max_attempts: int = 1000
    state_cap: int = 10**6          # for exact enumeration and the solvability search

    def __post_init__(self):
        if not 0.0 <= self.p_mask <= 1.0:
            raise ConstructionError("p_mask must lie in [0, 1]")
        if self.width < 3 or self.height < 3:
            raise ConstructionError("grid needs at least one interior cell")
        if self.horizon < 1 or self.window < 0 or self.n_boxes < 0:
            raise ConstructionError("horizon, window and n_boxes must be non-negative")
        if 2 * self.n_boxes + 1 > (self.width - 2) * (self.height - 2):
            raise ConstructionError("grid too small for the requested boxes and targets")

    @property
    def interior(self):
        return (self.height - 2) * (self.width - 2)


def desk_preset(**kw):
    return GridPushConfig(**{**dict(width=5, height=5, n_boxes=1, horizon=12, p_mask=0.7), **kw})


def large_preset(**kw):
    return GridPushConfig(**{**dict(width=10, height=10, n_boxes=3, horizon=50, p_mask=0.9), **kw})


# --------------------------------------------------------------------------
# levels as value types


@dataclass(frozen=True)
class GridPushLevel:
    width: int
    height: int
    agent: tuple
    boxes: tuple
    targets: tuple
    walls: frozenset = None
    step: int = 0

    def __post_init__(self):
        walls = self.walls
        if walls is None:
            walls = frozenset(border_cells(self.width, self.height))
        object.__setattr__(self, "walls", frozenset(map(tuple, walls)))
        object.__setattr__(self, "agent", tuple(self.agent))
        object.__setattr__(self, "boxes", tuple(sorted(map(tuple, self.boxes))))
        object.__setattr__(self, "targets", tuple(sorted(map(tuple, self.targets))))
        if not border_cells(self.width, self.height) <= self.walls:
            raise ConstructionError("border cells must be walls")
        if len(self.boxes) != len(self.targets):
            raise ConstructionError("number of boxes differs from number of targets")
        if len(set(self.boxes)) != len(self.boxes) or len(set(self.targets)) != len(self.targets):
            raise ConstructionError("two boxes or two targets share a cell")
        occupied = [self.agent, *self.boxes, *self.targets]
        for r, c in occupied:
            if not (0 <= r < self.height and 0 <= c < self.width) or (r, c) in self.walls:
                raise ConstructionError(f"entity at {(r, c)} is outside the free area")
        if self.agent in self.boxes:
            raise ConstructionError("agent and box share a cell")

    @property
    def solved(self):
        return set(self.boxes) == set(self.targets)

    def grid(self):
        g = np.zeros((self.height, self.width), dtype=np.uint8)
        for r, c in self.walls:
            g[r, c] = WALL
        for r, c in self.targets:
            g[r, c] = TARGET
        for r, c in self.boxes:
            g[r, c] = BOX_ON_TARGET if g[r, c] == TARGET else BOX
        r, c = self.agent
        g[r, c] = AGENT_ON_TARGET if g[r, c] == TARGET else AGENT
        return g

    def to_text(self):
        return "".join("".join(CHARS[v] for v in row) + "\n" for row in self.grid())

    @classmethod
    def from_text(cls, text):
        rows = text.split("\n")
        if rows and rows[-1] == "":
            rows = rows[:-1]
        if not rows or len({len(r) for r in rows}) != 1:
            raise InputError("level rows must be non-empty and of equal length")
        agents, boxes, targets, walls = [], [], [], []
        for r, row in enumerate(rows):
            for c, ch in enumerate(row):
                if ch not in CHARS:
                    raise InputError(f"unknown level character {ch!r} at row {r}, column {c}")
                v = CHARS.index(ch)
                if v == WALL:
                    walls.append((r, c))
                if v in (AGENT, AGENT_ON_TARGET):
                    agents.append((r, c))
                if v in (BOX, BOX_ON_TARGET):
                    boxes.append((r, c))
                if v in (TARGET, BOX_ON_TARGET, AGENT_ON_TARGET):
                    targets.append((r, c))
        if len(agents) != 1:
            raise InputError(f"a level needs exactly one agent, found {len(agents)}")
        try:
            return cls(len(rows[0]), len(rows), agents[0], boxes, targets, frozenset(walls))
        except ConstructionError as exc:
            raise InputError(str(exc)) from None


def border_cells(width, height):
    cells = {(0, c) for c in range(width)} | {(height - 1, c) for c in range(width)}
    return cells | {(r, 0) for r in range(height)} | {(r, width - 1) for r in range(height)}


def _step_rules(walls, agent, boxes, targets, action, cfg):
    """Shared by the scalar and the search code: returns (agent, boxes, reward)."""
    boxes = set(boxes)
    if boxes == set(targets):
        return agent, boxes, 0.0
    dr, dc = MOVES[action]
    if (dr, dc) == (0, 0):
        return agent, boxes, 0.0
    nxt = (agent[0] + dr, agent[1] + dc)
    if nxt in walls:
        return agent, boxes, 0.0
    reward = 0.0
    if nxt in boxes:
        dest = (nxt[0] + dr, nxt[1] + dc)
        if dest in walls or dest in boxes:
            return agent, boxes, 0.0
        boxes.discard(nxt)
        boxes.add(dest)
        tg = set(targets)
        reward += (cfg.push_on if dest in tg else 0.0) + (cfg.push_off if nxt in tg else 0.0)
        if boxes == tg:
            reward += cfg.solve_bonus
    return nxt, boxes, reward


def step(level, action, cfg=None):
    """One move.  Illegal moves leave the level unchanged; solved levels are frozen."""
    if action not in range(len(ACTIONS)):
        raise InputError(f"action must be one of 0..{len(ACTIONS) - 1}")
    cfg = cfg or GridPushConfig(level.width, level.height, len(level.boxes))
    agent, boxes, reward = _step_rules(level.walls, level.agent, level.boxes, level.targets, action, cfg)
    return replace(level, agent=agent, boxes=tuple(boxes), step=level.step + 1), reward


def in_window(cfg, agent, r, c):
    return abs(r - agent[0]) <= cfg.window and abs(c - agent[1]) <= cfg.window


def observe(level, cfg, rng):
    """Noisy view: cells outside the agent's window blank with probability ``p_mask``."""
    g = level.grid()
    rr, cc = np.indices(g.shape)
    outside = (np.abs(rr - level.agent[0]) > cfg.window) | (np.abs(cc - level.agent[1]) > cfg.window)
    mask = rng.random(g.shape) < cfg.p_mask
    g[outside & mask] = EMPTY
    return g


def _dead_corner(walls, cell):
    r, c = cell
    vert = (r - 1, c) in walls or (r + 1, c) in walls
    horiz = (r, c - 1) in walls or (r, c + 1) in walls
    return vert and horiz


def solvable_check(level, cap=10**6):
    """Breadth-first search over (agent, boxes) for a push sequence covering all targets."""
    if level.solved:
        return True
    targets = set(level.targets)
    if any(_dead_corner(level.walls, b) and b not in targets for b in level.boxes):
        return False
    start = (level.agent, tuple(sorted(level.boxes)))
    seen = {start}
    queue = deque([start])
    while queue:
        agent, boxes = queue.popleft()
        bset = set(boxes)
        for dr, dc in MOVES[:4]:
            nxt = (agent[0] + dr, agent[1] + dc)
            if nxt in level.walls:
                continue
            if nxt in bset:
                dest = (nxt[0] + dr, nxt[1] + dc)
                if dest in level.walls or dest in bset:
                    continue
                if _dead_corner(level.walls, dest) and dest not in targets:
                    continue
                nb = tuple(sorted((bset - {nxt}) | {dest}))
                if set(nb) == targets:
                    return True
                state = (nxt, nb)
            else:
                state = (nxt, boxes)
            if state not in seen:
                if len(seen) >= cap:
                    raise CapacityError(f"solvability search exceeded {cap} states")
                seen.add(state)
                queue.append(state)
    return False


# --------------------------------------------------------------------------
# reverse-play generation


def _reverse_moves(walls, agent, boxes):
    """Legal backward moves: plain walks and walks that pull a box along."""
    out = []
    bset = set(boxes)
    for d, (dr, dc) in enumerate(MOVES[:4]):
        nxt = (agent[0] + dr, agent[1] + dc)
        if nxt in walls or nxt in bset:
            continue
        out.append((nxt, boxes))
        behind = (agent[0] - dr, agent[1] - dc)
        if behind in bset:
            out.append((nxt, tuple(sorted((bset - {behind}) | {agent}))))
    return out


def _interior(cfg):
    return [(r, c) for r in range(1, cfg.height - 1) for c in range(1, cfg.width - 1)]


def generate_level(cfg, rng):
    """Random solvable level by reverse play from a solved configuration."""
    walls = frozenset(border_cells(cfg.width, cfg.height))
    cells = _interior(cfg)
    for _ in range(cfg.max_attempts):
        pick = rng.choice(len(cells), size=cfg.n_boxes, replace=False)
        targets = tuple(sorted(cells[i] for i in pick))
        free = [c for c in cells if c not in targets]
        agent = free[int(rng.integers(len(free)))]
        boxes = targets
        k = int(rng.integers(3, 3 * cfg.width + 1))
        for _ in range(k):
            moves = _reverse_moves(walls, agent, boxes)
            if not moves:
                break
            agent, boxes = moves[int(rng.integers(len(moves)))]
        level = GridPushLevel(cfg.width, cfg.height, agent, boxes, targets, walls)
        if cfg.n_boxes == 0:
            return level
        if not level.solved:
            return level
    raise GenerationError(f"no unsolved level after {cfg.max_attempts} attempts")


# --------------------------------------------------------------------------
# integer codes


class LevelCodec:
    """Bijection between border-walled levels and ``int64`` codes."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.iw = cfg.width - 2
        self.n = cfg.interior
        self.k = cfg.n_boxes
        digits = 1 + 2 * self.k
        if self.n ** digits >= 2**62:
            raise CapacityError("grid too large for integer state codes")
        self.radix = self.n ** np.arange(digits - 1, -1, -1, dtype=np.int64)
        self.n_codes = self.n ** digits

    def cell_index(self, rc):
        return (rc[0] - 1) * self.iw + (rc[1] - 1)

    def cell_rc(self, i):
        return (int(i) // self.iw + 1, int(i) % self.iw + 1)

    def encode_parts(self, agent, boxes, targets):
        """Vectorized: ``agent (B,)``, ``boxes (B,k)``, ``targets (B,k)`` interior indices."""
        boxes = np.sort(boxes, axis=1)
        targets = np.sort(targets, axis=1)
        digits = np.concatenate([np.asarray(agent)[:, None], boxes, targets], axis=1)
        return digits.astype(np.int64) @ self.radix

    def decode(self, codes):
        codes = np.asarray(codes, dtype=np.int64)
        digits = (codes[..., None] // self.radix) % self.n
        return digits[..., 0], digits[..., 1:1 + self.k], digits[..., 1 + self.k:]

    def encode(self, level):
        if level.walls != frozenset(border_cells(level.width, level.height)):
            raise ConstructionError("only border-walled levels have integer codes")
        a = np.array([self.cell_index(level.agent)])
        b = np.array([[self.cell_index(x) for x in level.boxes]]).reshape(1, self.k)
        t = np.array([[self.cell_index(x) for x in level.targets]]).reshape(1, self.k)
        return int(self.encode_parts(a, b, t)[0])

    def level(self, code, step=0):
        a, b, t = self.decode(np.array([code]))
        return GridPushLevel(self.cfg.width, self.cfg.height, self.cell_rc(a[0]),
                             [self.cell_rc(x) for x in b[0]], [self.cell_rc(x) for x in t[0]], step=step)


def level_distribution(cfg):
    """Exact law of :func:`generate_level` as ``(codes, probs)`` sorted by code.

    Propagates the reverse-play chain over every reachable configuration,
    averages over the uniform number of steps and conditions on the level
    not being solved, exactly as the redraw loop does.
    """
    codec = LevelCodec(cfg)
    walls = frozenset(border_cells(cfg.width, cfg.height))
    cells = _interior(cfg)
    n_start = math.comb(len(cells), cfg.n_boxes) * (len(cells) - cfg.n_boxes)
    if n_start > cfg.state_cap:
        raise CapacityError("level distribution too large to enumerate; use the sampler")
    import itertools
    dist = {}
    for targets in itertools.combinations(cells, cfg.n_boxes):
        free = [c for c in cells if c not in targets]
        for agent in free:
            key = (agent, targets, targets)
            dist[key] = dist.get(key, 0.0) + 1.0 / (math.comb(len(cells), cfg.n_boxes) * len(free))
    k_lo, k_hi = 3, 3 * cfg.width
    total = {}
    moves_cache = {}
    for k in range(1, k_hi + 1):
        nxt = {}
        for (agent, boxes, targets), p in dist.items():
            mk = (agent, boxes)
            if mk not in moves_cache:
                moves_cache[mk] = _reverse_moves(walls, agent, boxes)
            moves = moves_cache[mk]
            if not moves:
                nxt[(agent, boxes, targets)] = nxt.get((agent, boxes, targets), 0.0) + p
                continue
            q = p / len(moves)
            for a2, b2 in moves:
                key = (a2, b2, targets)
                nxt[key] = nxt.get(key, 0.0) + q
        dist = nxt
        if len(dist) > cfg.state_cap:
            raise CapacityError("level distribution too large to enumerate; use the sampler")
        if k >= k_lo:
            for key, p in dist.items():
                total[key] = total.get(key, 0.0) + p / (k_hi - k_lo + 1)
    if cfg.n_boxes > 0:
        total = {k: p for k, p in total.items() if set(k[1]) != set(k[2])}
    codes, probs = [], []
    for (agent, boxes, targets), p in total.items():
        a = np.array([codec.cell_index(agent)])
        b = np.array([[codec.cell_index(x) for x in boxes]]).reshape(1, cfg.n_boxes)
        t = np.array([[codec.cell_index(x) for x in targets]]).reshape(1, cfg.n_boxes)
        codes.append(int(codec.encode_parts(a, b, t)[0]))
        probs.append(p)
    codes = np.array(codes, dtype=np.int64)
    probs = np.array(probs)
    order = np.argsort(codes)
    codes, probs = codes[order], probs[order]
    return codes, probs / math.fsum(probs)


def degenerate_distribution(cfg, codes, probs):
    """Each level with one box moved to a free, non-target interior corner.

    The box and the corner are chosen uniformly; levels without such a move
    are dropped and the rest renormalized.
    """
    codec = LevelCodec(cfg)
    corners = [(1, 1), (1, cfg.width - 2), (cfg.height - 2, 1), (cfg.height - 2, cfg.width - 2)]
    corners = sorted(set(corners))
    out = {}
    for code, p in zip(codes.tolist(), probs.tolist()):
        lv = codec.level(code)
        taken = {lv.agent, *lv.boxes, *lv.targets}
        free = [c for c in corners if c not in taken]
        if not free or not lv.boxes:
            continue
        q = p / (len(free) * len(lv.boxes))
        for i in range(len(lv.boxes)):
            for corner in free:
                boxes = list(lv.boxes)
                boxes[i] = corner
                new = codec.encode(replace(lv, boxes=tuple(boxes)))
                out[new] = out.get(new, 0.0) + q
    if not out:
        raise GenerationError("no level admits a box-to-corner move")
    keys = np.array(sorted(out), dtype=np.int64)
    vals = np.array([out[k] for k in keys.tolist()])
    return keys, vals / math.fsum(vals)


# --------------------------------------------------------------------------
# vectorized environment


class GridPomdp:
    """The grid world behind the vectorized POMDP protocol used by rollouts."""

    posterior_method = "particle"
    obs_dtype = np.uint8
    actions = ACTIONS
    n_actions = len(ACTIONS)
    transition_probs = np.ones(1)

    def __init__(self, cfg, prior=None):
        self.cfg = cfg
        self.codec = LevelCodec(cfg)
        self.horizon = cfg.horizon
        self.obs_shape = (cfg.height, cfg.width)
        self.obs_noise_shape = (cfg.height, cfg.width)
        self._prior = prior
        per_step = [0.0, cfg.push_on, cfg.push_off, cfg.push_on + cfg.solve_bonus,
                    cfg.push_on + cfg.push_off, cfg.push_on + cfg.push_off + cfg.solve_bonus]
        self.reward_values = tuple(sorted(set(per_step)))
        self.reward_min = min(self.reward_values)
        self.reward_max = max(self.reward_values)
        rr, cc = np.divmod(np.arange(cfg.interior), cfg.width - 2)
        self._rc = np.stack([rr + 1, cc + 1], axis=1)
        border = np.zeros(self.obs_shape, dtype=np.uint8)
        for r, c in border_cells(cfg.width, cfg.height):
            border[r, c] = WALL
        self._background = border

    def __repr__(self):
        return f"GridPomdp({self.cfg!r})"

    # scenario prior ---------------------------------------------------------

    def prior(self):
        if self._prior is None:
            self._prior = level_distribution(self.cfg)
        return self._prior

    @property
    def enumerable(self):
        try:
            self.prior()
        except CapacityError:
            return False
        return True

    def sample_initial(self, u, rng=None):
        try:
            codes, probs = self.prior()
        except CapacityError:
            if rng is None:
                raise
            return np.array([self.codec.encode(generate_level(self.cfg, rng)) for _ in range(len(u))],
                            dtype=np.int64)
        cdf = np.cumsum(probs)
        idx = np.minimum(np.searchsorted(cdf, np.asarray(u) * cdf[-1], side="right"), len(codes) - 1)
        return codes[idx]

    def prior_candidates(self, first_obs, prior=None):
        """(episode, code, log prior) pairs whose agent cell matches the first view."""
        codes, probs = prior if prior is not None else self.prior()
        keep = probs > 0
        codes, logp = codes[keep], np.log(probs[keep])
        agent = self.codec.decode(codes)[0]
        order = np.argsort(agent, kind="stable")
        codes, logp, agent = codes[order], logp[order], agent[order]
        lo = np.searchsorted(agent, np.arange(self.cfg.interior), side="left")
        hi = np.searchsorted(agent, np.arange(self.cfg.interior), side="right")
        seen = self.agent_from_obs(first_obs)
        counts = hi[seen] - lo[seen]
        ep = np.repeat(np.arange(len(first_obs)), counts)
        offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        idx = np.repeat(lo[seen], counts) + offs
        return ep, codes[idx], logp[idx]

    # dynamics ---------------------------------------------------------------

    def sample_transition_noise(self, u):
        return np.zeros(np.shape(u), dtype=np.int64)

    def step(self, s, a, u_s=None):
        cfg, codec = self.cfg, self.codec
        agent, boxes, targets = codec.decode(s)
        a = np.asarray(a, dtype=np.int64)
        solved = np.all(np.sort(boxes, axis=1) == targets, axis=1) if codec.k else np.ones(len(s), bool)
        rc = self._rc[agent]
        d = np.asarray(MOVES)[a]
        nxt = rc + d
        iw, ih = cfg.width - 2, cfg.height - 2
        inside = (nxt[:, 0] >= 1) & (nxt[:, 0] <= ih) & (nxt[:, 1] >= 1) & (nxt[:, 1] <= iw)
        nxt_idx = np.where(inside, (nxt[:, 0] - 1) * iw + (nxt[:, 1] - 1), -1)
        hit = boxes == nxt_idx[:, None]                      # (B, k)
        has_box = hit.any(axis=1)
        dest = nxt + d
        dest_in = (dest[:, 0] >= 1) & (dest[:, 0] <= ih) & (dest[:, 1] >= 1) & (dest[:, 1] <= iw)
        dest_idx = np.where(dest_in, (dest[:, 0] - 1) * iw + (dest[:, 1] - 1), -2)
        dest_free = dest_in & ~(boxes == dest_idx[:, None]).any(axis=1)
        moving = (a != 4) & inside & ~solved & (~has_box | dest_free)
        push = moving & has_box
        new_boxes = np.where(hit & push[:, None], dest_idx[:, None], boxes)
        new_agent = np.where(moving, nxt_idx, agent)
        on_t = lambda idx: (targets == idx[:, None]).any(axis=1)
        reward = np.zeros(len(s))
        reward += np.where(push & on_t(dest_idx), cfg.push_on, 0.0)
        reward += np.where(push & on_t(nxt_idx), cfg.push_off, 0.0)
        if codec.k:
            now_solved = np.all(np.sort(new_boxes, axis=1) == targets, axis=1)
            reward += np.where(push & now_solved, cfg.solve_bonus, 0.0)
        return codec.encode_parts(new_agent, new_boxes, targets), reward

    def transition_fn(self, s, a, u_s=None):
        return self.step(s, a, u_s)[0]

    def reward(self, s, a):
        return self.step(s, a)[1]

    def reward_index(self, r):
        return np.searchsorted(np.asarray(self.reward_values), r)

    # observations -----------------------------------------------------------

    def render(self, s):
        """True grids ``(B, h, w)`` and the in-window mask for codes ``s``."""
        agent, boxes, targets = self.codec.decode(s)
        n = len(agent)
        g = np.broadcast_to(self._background, (n,) + self.obs_shape).copy()
        rows = np.arange(n)
        for j in range(self.codec.k):
            r, c = self._rc[targets[:, j]].T
            g[rows, r, c] = TARGET
        for j in range(self.codec.k):
            r, c = self._rc[boxes[:, j]].T
            g[rows, r, c] = np.where(g[rows, r, c] == TARGET, BOX_ON_TARGET, BOX)
        ar, ac = self._rc[agent].T
        g[rows, ar, ac] = np.where(g[rows, ar, ac] == TARGET, AGENT_ON_TARGET, AGENT)
        rr = np.arange(self.cfg.height)[None, :, None]
        cc = np.arange(self.cfg.width)[None, None, :]
        w = self.cfg.window
        win = (np.abs(rr - ar[:, None, None]) <= w) & (np.abs(cc - ac[:, None, None]) <= w)
        return g, win

    def sample_obs_noise(self, u):
        return np.asarray(u) < self.cfg.p_mask

    def observe(self, s, u_o):
        g, win = self.render(s)
        g[np.asarray(u_o, bool) & ~win] = EMPTY
        return g

    def obs_loglik(self, s, o):
        g, win = self.render(s)
        o = np.asarray(o)
        p = self.cfg.p_mask
        bad = (win | (g == EMPTY)) & (o != g)
        bad |= ~win & (g != EMPTY) & (o != g) & (o != EMPTY)
        kept = (~win & (g != EMPTY) & (o == g)).sum(axis=(1, 2))
        blanked = (~win & (g != EMPTY) & (o == EMPTY)).sum(axis=(1, 2))
        with np.errstate(divide="ignore", invalid="ignore"):
            ll = np.where(kept > 0, kept * math.log1p(-p) if p < 1 else -np.inf, 0.0)
            ll = ll + np.where(blanked > 0, blanked * math.log(p) if p > 0 else -np.inf, 0.0)
        return np.where(bad.any(axis=(1, 2)), -np.inf, ll)

    def obs_noise_posterior(self, s, o, u):
        g, win = self.render(s)
        bits = np.asarray(u) < self.cfg.p_mask
        informative = ~win & (g != EMPTY)
        return np.where(informative, np.asarray(o) == EMPTY, bits)

    def agent_from_obs(self, obs):
        obs = np.asarray(obs)
        flat = obs.reshape(len(obs), -1)
        pos = np.argmax((flat == AGENT) | (flat == AGENT_ON_TARGET), axis=1)
        r, c = np.divmod(pos, self.cfg.width)
        return (r - 1) * (self.cfg.width - 2) + (c - 1)

    def default_featurizer(self, include_step=False):
        return GridMemoryFeaturizer(self.cfg.width, self.cfg.height, include_step, self.horizon)


def as_pomdp(cfg):
    """Grid world as a POMDP whose initial state follows the level generator."""
    return GridPomdp(cfg)


# --------------------------------------------------------------------------
# history features and the expert


_HASH_MUL = np.uint64(0x9E3779B97F4A7C15)


@dataclass(frozen=True)
class GridMemoryFeaturizer:
    """Key = remembered content of every interior cell (+ step index).

    Window cells overwrite the memory exactly; a non-empty cell outside the
    window is exact too and is remembered; blank outside cells are ambiguous
    and leave the memory untouched.  Never-seen cells read as unknown.
    """

    width: int
    height: int
    include_step: bool = False
    horizon: int = 0
    window: int = 1
    privileged = False

    def start(self, n):
        return np.full((n, (self.height - 2) * (self.width - 2)), UNKNOWN, dtype=np.uint8)

    def step(self, mem, obs, state, t, prev_action=None, prev_reward_index=None):
        obs = np.asarray(obs)
        inner = obs[:, 1:-1, 1:-1].reshape(len(obs), -1)
        agent_cell = np.argmax((inner == AGENT) | (inner == AGENT_ON_TARGET), axis=1)
        iw = self.width - 2
        ar, ac = np.divmod(agent_cell, iw)
        idx = np.arange(inner.shape[1])
        rr, cc = np.divmod(idx, iw)
        win = (np.abs(rr[None] - ar[:, None]) <= self.window) & (np.abs(cc[None] - ac[:, None]) <= self.window)
        update = win | (inner != EMPTY)
        mem = np.where(update, inner, mem).astype(np.uint8)
        n_cells = mem.shape[1]
        if 3 * n_cells <= 60:
            key = np.zeros(len(mem), dtype=np.int64)
            for j in range(n_cells):
                key = key * 8 + mem[:, j]
        else:
            h = np.zeros(len(mem), dtype=np.uint64)
            with np.errstate(over="ignore"):
                for j in range(n_cells):
                    h = (h ^ mem[:, j].astype(np.uint64)) * _HASH_MUL
            key = (h >> np.uint64(2)).astype(np.int64)
        if self.include_step:
            key = key * (self.horizon + 1) + t
        return mem, key

    def describe(self):
        return {"kind": "grid_memory", "width": self.width, "height": self.height,
                "include_step": int(self.include_step), "horizon": self.horizon}


def expert_policy(env):
    """Optimal finite-horizon policy of the fully observed grid (privileged).

    Dynamic programming over every code reachable from the level prior.
    All optimal actions share the probability mass equally.
    """
    codes, _ = env.prior()
    T = env.horizon
    states = np.unique(codes)
    frontier = states
    for _ in range(T - 1):
        nxt = np.concatenate([env.step(frontier, np.full(len(frontier), a))[0] for a in range(5)])
        new = np.setdiff1d(nxt, states)
        if len(states) + len(new) > env.cfg.state_cap:
            raise CapacityError("state space too large for the expert's dynamic programme")
        states = np.union1d(states, new)
        frontier = new
        if len(new) == 0:
            break
    S = len(states)
    nxt = np.zeros((S, 5), dtype=np.int64)
    rew = np.zeros((S, 5))
    for a in range(5):
        s2, r = env.step(states, np.full(S, a))
        nxt[:, a] = np.searchsorted(states, s2)
        rew[:, a] = r
    feat = StateFeaturizer(T, include_step=True)
    v = np.zeros(S)
    keys, logits = [], []
    for t in range(T - 1, 0, -1):
        q = rew + v[nxt]
        best = q.max(axis=1, keepdims=True)
        opt = np.isclose(q, best, rtol=0, atol=1e-9)
        keys.append(states * (T + 1) + t)
        logits.append(np.where(opt, 0.0, -np.inf))
        v = best[:, 0]
    return TabularPolicy(feat, 5, np.concatenate(keys), np.concatenate(logits), ACTIONS)


def expert_value(env, codes=None, probs=None):
    """Expected expert return under a scenario prior (exact)."""
    pol = expert_policy(env)
    if codes is None:
        codes, probs = env.prior()
    T = env.horizon
    dist = {int(c): float(p) for c, p in zip(codes, probs)}
    total = 0.0
    for t in range(1, T):
        keys = np.array(list(dist), dtype=np.int64)
        w = np.array([dist[k] for k in keys.tolist()])
        pr = pol.probs(keys * (T + 1) + t)
        new = {}
        for a in range(5):
            s2, r = env.step(keys, np.full(len(keys), a))
            total += float(np.sum(w * pr[:, a] * r))
            for k, q in zip(s2.tolist(), (w * pr[:, a]).tolist()):
                if q > 0:
                    new[k] = new.get(k, 0.0) + q
        dist = new
    return total
