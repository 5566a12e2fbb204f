"""Grid mazes with first-person raycast observations.

Maps are ASCII files bundled under ``capsem/maps``::

    name: mini
    heading: E
    goal: 5,5
    starts: 1,1; 1,2; ...
    ---
    #######
    #aaaaa#
    ...

``#`` is a wall; a lowercase letter is a floor cell belonging to that room.
Rows and columns are zero-based and include the outer wall.  The sparse start
is the floor cell farthest from the goal by breadth-first search.
"""

from __future__ import annotations

import colorsys
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .tensor import ContractError

WALL = "#"
HEADINGS = "NESW"
_DELTAS = ((-1, 0), (0, 1), (1, 0), (0, -1))

FORWARD, TURN_LEFT, TURN_RIGHT, NOOP = range(4)
ACTIONS = ("forward", "turn_left", "turn_right", "noop")
MAX_STEPS = 2100
N_DENSE_STARTS = 17

SCENARIOS = ("mwh", "mwh_m", "mwh_g", "mini", "mini_m")
SPARSITY = ("dense", "sparse")
TEXTURES = ("uniform", "varied")

FRAME = 42
FOV = np.pi / 3
WALL_SCALE = 0.8  # projected wall height is FRAME * WALL_SCALE / distance
CEILING = np.array([0.55, 0.6, 0.7])
FLOOR = np.array([0.35, 0.33, 0.3])
GOAL_FLOOR = np.array([0.1, 0.85, 0.2])
UNIFORM_TEXTURE = (np.array([0.7, 0.55, 0.4]), np.array([0.45, 0.35, 0.25]))
STRIPES = 4


class MapError(ValueError):
    """Malformed or unknown map."""


@dataclass(frozen=True)
class MapLayout:
    name: str
    grid: tuple[str, ...]
    goal: tuple[int, int]
    starts: tuple[tuple[int, int], ...]
    heading: int = 1

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.grid), len(self.grid[0])

    def array(self) -> np.ndarray:
        return np.array([list(row) for row in self.grid])

    def rooms(self) -> list[str]:
        return sorted({ch for row in self.grid for ch in row if ch != WALL})

    def floor_cells(self) -> list[tuple[int, int]]:
        return [(r, c) for r, row in enumerate(self.grid) for c, ch in enumerate(row) if ch != WALL]

    def is_floor(self, r: int, c: int) -> bool:
        return 0 <= r < len(self.grid) and 0 <= c < len(self.grid[0]) and self.grid[r][c] != WALL


def _parse_cell(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise MapError(f"bad cell {text!r}, expected 'row,col'") from None
    return r, c


def parse_map(text: str) -> MapLayout:
    head, sep, body = text.partition("\n---\n")
    if not sep:
        raise MapError("map file needs a '---' line between header and grid")
    meta = {}
    for line in head.splitlines():
        if line.strip():
            key, colon, value = line.partition(":")
            if not colon:
                raise MapError(f"bad header line {line!r}")
            meta[key.strip()] = value.strip()
    for key in ("name", "goal", "starts"):
        if key not in meta:
            raise MapError(f"map header is missing {key!r}")
    grid = tuple(line.rstrip() for line in body.splitlines() if line.strip())
    if not grid or len({len(row) for row in grid}) != 1:
        raise MapError("grid rows must be non-empty and equally long")
    bad = {ch for row in grid for ch in row if ch != WALL and not ch.islower()}
    if bad:
        raise MapError(f"unknown grid characters {sorted(bad)}")
    heading = meta.get("heading", "E")
    if heading not in HEADINGS:
        raise MapError(f"heading must be one of {HEADINGS}, got {heading!r}")
    layout = MapLayout(
        name=meta["name"],
        grid=grid,
        goal=_parse_cell(meta["goal"]),
        starts=tuple(_parse_cell(s) for s in meta["starts"].split(";") if s.strip()),
        heading=HEADINGS.index(heading),
    )
    for cell in (layout.goal, *layout.starts):
        if not layout.is_floor(*cell):
            raise MapError(f"cell {cell} is not a floor cell")
    if layout.goal in layout.starts:
        raise MapError("the goal cell cannot be a start cell")
    return layout


def format_map(layout: MapLayout) -> str:
    head = [
        f"name: {layout.name}",
        f"heading: {HEADINGS[layout.heading]}",
        f"goal: {layout.goal[0]},{layout.goal[1]}",
        "starts: " + "; ".join(f"{r},{c}" for r, c in layout.starts),
    ]
    return "\n".join(head) + "\n---\n" + "\n".join(layout.grid) + "\n"


def rotate_layout(layout: MapLayout, name: str | None = None) -> MapLayout:
    """Rotate a layout a quarter turn counter-clockwise (as ``np.rot90``)."""
    w = layout.shape[1]
    grid = tuple("".join(row) for row in np.rot90(layout.array()))

    def move(cell):
        return w - 1 - cell[1], cell[0]

    return MapLayout(
        name=name or layout.name + "_m",
        grid=grid,
        goal=move(layout.goal),
        starts=tuple(move(s) for s in layout.starts),
        heading=(layout.heading - 1) % 4,
    )


def bfs_distances(layout: MapLayout, source: tuple[int, int]) -> dict[tuple[int, int], int]:
    dist = {source: 0}
    queue = deque([source])
    while queue:
        r, c = queue.popleft()
        for dr, dc in _DELTAS:
            nxt = (r + dr, c + dc)
            if nxt not in dist and layout.is_floor(*nxt):
                dist[nxt] = dist[(r, c)] + 1
                queue.append(nxt)
    return dist


def sparse_start(layout: MapLayout) -> tuple[int, int]:
    dist = bfs_distances(layout, layout.goal)
    return max(sorted(dist), key=lambda cell: dist[cell])


def room_palette(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Base and stripe colour per room, evenly spaced in hue."""
    out = []
    for k in range(n):
        h = k / n
        base = np.array(colorsys.hsv_to_rgb(h, 0.65, 0.95))
        stripe = np.array(colorsys.hsv_to_rgb(h, 0.65, 0.55))
        out.append((base, stripe))
    return out


@dataclass(frozen=True, eq=False)
class MazeSpec:
    layout: MapLayout
    texture_mode: str
    start_cells_dense: tuple[tuple[int, int], ...]
    start_cell_sparse: tuple[int, int]
    sparsity: str = "dense"
    frameskip: int = 1
    max_steps: int = MAX_STEPS
    _frames: dict = field(default_factory=dict, repr=False)

    @property
    def name(self) -> str:
        return self.layout.name

    @property
    def goal(self) -> tuple[int, int]:
        return self.layout.goal

    @property
    def room_count(self) -> int:
        return len(self.layout.rooms())

    @property
    def texture_palette(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        rooms = self.layout.rooms()
        if self.texture_mode == "uniform":
            return {room: UNIFORM_TEXTURE for room in rooms}
        return dict(zip(rooms, room_palette(len(rooms))))

    def start_cells(self) -> tuple[tuple[int, int], ...]:
        return self.start_cells_dense if self.sparsity == "dense" else (self.start_cell_sparse,)

    def frame(self, pose: tuple[int, int, int]) -> np.ndarray:
        """Rendered observation for ``pose``; cached because the maze is static."""
        img = self._frames.get(pose)
        if img is None:
            img = raycast(self, pose)
            img.flags.writeable = False
            self._frames[pose] = img
        return img


@dataclass
class EnvState:
    pose: tuple[int, int, int] = (0, 0, 0)  # row, col, heading index into HEADINGS
    steps_taken: int = 0
    done: bool = True
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    episode_reward: float = 0.0


def _map_text(name: str) -> str:
    path = resources.files("capsem") / "maps" / f"{name}.map"
    try:
        return path.read_text()
    except FileNotFoundError:
        raise MapError(f"unknown scenario {name!r}; bundled: {', '.join(SCENARIOS)}") from None


def build_spec(layout: MapLayout, sparsity: str = "dense", texture: str = "varied", frameskip: int = 1,
               max_steps: int = MAX_STEPS) -> MazeSpec:
    if sparsity not in SPARSITY:
        raise MapError(f"sparsity must be one of {SPARSITY}, got {sparsity!r}")
    if texture not in TEXTURES:
        raise MapError(f"texture must be one of {TEXTURES}, got {texture!r}")
    if frameskip < 1:
        raise MapError("frameskip must be >= 1")
    if len(layout.starts) != N_DENSE_STARTS or len(set(layout.starts)) != N_DENSE_STARTS:
        raise MapError(f"{layout.name}: expected {N_DENSE_STARTS} distinct dense starts, got {len(set(layout.starts))}")
    reach = bfs_distances(layout, layout.goal)
    sparse = sparse_start(layout)
    for cell in (*layout.starts, sparse):
        if cell not in reach:
            raise MapError(f"{layout.name}: goal is unreachable from start {cell}")
    return MazeSpec(layout, texture, layout.starts, sparse, sparsity, frameskip, max_steps)


def load_layout(name_or_path: str | Path) -> MapLayout:
    p = Path(name_or_path)
    text = p.read_text() if p.suffix == ".map" else _map_text(str(name_or_path))
    return parse_map(text)


def load_scenario(name: str, sparsity: str = "dense", texture: str = "varied", seed: int = 0,
                  frameskip: int = 1) -> tuple[MazeSpec, EnvState]:
    """Build a bundled scenario (or a ``.map`` path) and a fresh seeded state."""
    spec = build_spec(load_layout(name), sparsity, texture, frameskip)
    return spec, EnvState(rng=np.random.default_rng(seed))


def reset(spec: MazeSpec, st: EnvState) -> np.ndarray:
    starts = spec.start_cells()
    r, c = starts[int(st.rng.integers(len(starts)))] if len(starts) > 1 else starts[0]
    st.pose = (r, c, spec.layout.heading)
    st.steps_taken = 0
    st.done = False
    st.episode_reward = 0.0
    return spec.frame(st.pose)


def _move(spec: MazeSpec, pose, action: int):
    r, c, h = pose
    if action == FORWARD:
        dr, dc = _DELTAS[h]
        if spec.layout.is_floor(r + dr, c + dc):
            return r + dr, c + dc, h
        return pose
    if action == TURN_LEFT:
        return r, c, (h - 1) % 4
    if action == TURN_RIGHT:
        return r, c, (h + 1) % 4
    if action == NOOP:
        return pose
    raise ContractError(f"action must be in 0..3, got {action}")


def step(spec: MazeSpec, st: EnvState, action: int) -> tuple[np.ndarray, float, bool]:
    if st.done:
        raise ContractError("episode is done; call reset() first")
    reward = 0.0
    for _ in range(spec.frameskip):
        st.pose = _move(spec, st.pose, int(action))
        st.steps_taken += 1
        if st.pose[:2] == spec.goal:
            reward, st.done = 1.0, True
        elif st.steps_taken >= spec.max_steps:
            st.done = True
        if st.done:
            break
    st.episode_reward += reward
    return spec.frame(st.pose), reward, st.done


def render_frame(spec: MazeSpec, st: EnvState) -> np.ndarray:
    return spec.frame(st.pose)


def raycast(spec: MazeSpec, pose: tuple[int, int, int]) -> np.ndarray:
    """Render a [3, FRAME, FRAME] view from the centre of a cell.

    One ray per column (grid DDA); walls take the texture of the room the ray
    leaves, striped along the wall face and shaded by ``1 / (1 + d)``.
    """
    layout = spec.layout
    palette = spec.texture_palette
    r0, c0, h = pose
    py, px = r0 + 0.5, c0 + 0.5
    dy, dx = _DELTAS[h]
    # rays sweep the camera plane from left to right; the right vector is (dx, -dy)
    cam = (2 * (np.arange(FRAME) + 0.5) / FRAME - 1) * np.tan(FOV / 2)
    ray_y = dy + dx * cam
    ray_x = dx - dy * cam

    img = np.empty((FRAME, FRAME, 3))
    half = FRAME / 2
    rows = np.arange(FRAME) + 0.5
    img[:] = CEILING
    # floor casting: the row-distance of each pixel below the horizon
    below = rows > half
    row_dist = np.where(below, FRAME * WALL_SCALE / (2 * np.maximum(rows - half, 1e-9)), np.inf)

    for col in range(FRAME):
        ry, rx = ray_y[col], ray_x[col]
        cell_r, cell_c = r0, c0
        step_r = 1 if ry > 0 else -1
        step_c = 1 if rx > 0 else -1
        ddr = abs(1 / ry) if ry else np.inf
        ddc = abs(1 / rx) if rx else np.inf
        side_r = ((cell_r + 1 - py) if ry > 0 else (py - cell_r)) * ddr
        side_c = ((cell_c + 1 - px) if rx > 0 else (px - cell_c)) * ddc
        room = layout.grid[cell_r][cell_c]
        while True:
            if side_r < side_c:
                dist, side_r, cell_r, vertical = side_r, side_r + ddr, cell_r + step_r, False
            else:
                dist, side_c, cell_c, vertical = side_c, side_c + ddc, cell_c + step_c, True
            if not layout.is_floor(cell_r, cell_c):
                break
            room = layout.grid[cell_r][cell_c]
        hit = (py + dist * ry) if vertical else (px + dist * rx)
        u = hit - np.floor(hit)
        base, stripe = palette[room]
        color = stripe if int(u * STRIPES) % 2 else base
        height = FRAME * WALL_SCALE / max(dist, 1e-9)
        top, bottom = half - height / 2, half + height / 2
        wall = (rows >= top) & (rows < bottom)
        img[wall, col] = color / (1.0 + dist)
        # floor below the wall
        floor_rows = below & (rows >= bottom)
        if floor_rows.any():
            d = row_dist[floor_rows]
            fy = np.floor(py + d * ry).astype(int)
            fx = np.floor(px + d * rx).astype(int)
            goal = (fy == spec.goal[0]) & (fx == spec.goal[1])
            img[floor_rows, col] = np.where(goal[:, None], GOAL_FLOOR, FLOOR)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def to_ppm(frame: np.ndarray) -> bytes:
    """Encode a [3, H, W] frame in [0, 1] as binary PPM (P6)."""
    _, hgt, wid = frame.shape
    pixels = np.clip(np.round(frame.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    return f"P6\n{wid} {hgt}\n255\n".encode() + pixels.tobytes()


def read_ppm(data: bytes) -> np.ndarray:
    magic, dims, maxval, pixels = data.split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise MapError("not an 8-bit binary PPM")
    wid, hgt = (int(v) for v in dims.split())
    return np.frombuffer(pixels, np.uint8).reshape(hgt, wid, 3)


class MazeEnv:
    """Stateful wrapper around one scenario and one seeded state."""

    n_actions = len(ACTIONS)

    def __init__(self, spec: MazeSpec, seed: int = 0):
        self.spec = spec
        self.state = EnvState(rng=np.random.default_rng(seed))

    @classmethod
    def from_scenario(cls, name: str, sparsity: str = "dense", texture: str = "varied", seed: int = 0,
                      frameskip: int = 1) -> "MazeEnv":
        spec, _ = load_scenario(name, sparsity, texture, seed, frameskip)
        return cls(spec, seed)

    @property
    def done(self) -> bool:
        return self.state.done

    def reset(self) -> np.ndarray:
        return reset(self.spec, self.state)

    def reset_to(self, cell: tuple[int, int], heading: int | None = None) -> np.ndarray:
        """Start an episode at a given cell (used for exhaustive evaluation)."""
        self.state.pose = (*cell, self.spec.layout.heading if heading is None else heading)
        self.state.steps_taken = 0
        self.state.done = False
        self.state.episode_reward = 0.0
        return self.spec.frame(self.state.pose)

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        return step(self.spec, self.state, action)

    def render(self) -> np.ndarray:
        return render_frame(self.spec, self.state)
