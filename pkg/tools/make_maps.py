"""Regenerate the bundled map files under src/capsem/maps.

Rooms are 3x3 blocks on a slot grid joined by one-cell doors; dense starts are
17 floor cells spread evenly by breadth-first distance from the goal.
"""

from pathlib import Path

import numpy as np

from capsem.maze import (N_DENSE_STARTS, WALL, MapLayout, bfs_distances, format_map, parse_map,
                         rotate_layout)

OUT = Path(__file__).resolve().parents[1] / "src" / "capsem" / "maps"
ROOM = 3


def slot_grid(slots: list[str], edges: list[tuple[str, str]]) -> np.ndarray:
    n_r, n_c = len(slots), len(slots[0])
    g = np.full((n_r * (ROOM + 1) + 1, n_c * (ROOM + 1) + 1), WALL)
    where = {}
    for i, row in enumerate(slots):
        for j, ch in enumerate(row):
            if ch != ".":
                r0, c0 = 1 + i * (ROOM + 1), 1 + j * (ROOM + 1)
                g[r0:r0 + ROOM, c0:c0 + ROOM] = ch
                where[ch] = (i, j)
    for a, b in edges:
        (i1, j1), (i2, j2) = where[a], where[b]
        assert abs(i1 - i2) + abs(j1 - j2) == 1, (a, b)
        if i1 == i2:
            r, c = 1 + i1 * (ROOM + 1) + ROOM // 2, (ROOM + 1) * max(j1, j2)
        else:
            r, c = (ROOM + 1) * max(i1, i2), 1 + j1 * (ROOM + 1) + ROOM // 2
        g[r, c] = a
    return g


def spread_starts(grid: tuple[str, ...], goal: tuple[int, int]) -> tuple[tuple[int, int], ...]:
    probe = MapLayout("probe", grid, goal, ())
    dist = bfs_distances(probe, goal)
    cells = sorted((d, cell) for cell, d in dist.items() if cell != goal)
    idx = np.round(np.linspace(0, len(cells) - 1, N_DENSE_STARTS)).astype(int)
    return tuple(cells[k][1] for k in idx)


def make(name: str, grid: np.ndarray, goal: tuple[int, int], heading: int = 1) -> MapLayout:
    rows = tuple("".join(r) for r in grid)
    return MapLayout(name, rows, goal, spread_starts(rows, goal), heading)


def tree_edges(slots: list[str], seed: int) -> list[tuple[str, str]]:
    rng = np.random.default_rng(seed)
    pos = {ch: (i, j) for i, row in enumerate(slots) for j, ch in enumerate(row) if ch != "."}
    at = {v: k for k, v in pos.items()}
    start = min(pos)
    seen, stack, edges = {start}, [start], []
    while stack:
        i, j = pos[stack[-1]]
        nbrs = [at[(i + di, j + dj)] for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1))
                if (i + di, j + dj) in at and at[(i + di, j + dj)] not in seen]
        if not nbrs:
            stack.pop()
            continue
        nxt = nbrs[int(rng.integers(len(nbrs)))]
        edges.append((stack[-1], nxt))
        seen.add(nxt)
        stack.append(nxt)
    return edges


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    mwh = make("mwh", slot_grid(["abc", "def", "g.h"],
                                [("a", "b"), ("b", "c"), ("c", "f"), ("e", "f"), ("d", "e"), ("d", "g"), ("f", "h")]),
               goal=(1, 1))
    giant_slots = ["abcde", "f.ghi", "jkl.m", "n.opq", "rs..."]
    giant = make("mwh_g", slot_grid(giant_slots, tree_edges(giant_slots, seed=7)), goal=(1, 1))
    mini_grid = np.array([list(r) for r in (
        "#######",
        "#aaaaa#",
        "#a###b#",
        "#a#bbb#",
        "#a#b#b#",
        "#aab#b#",
        "#######",
    )])
    mini = make("mini", mini_grid, goal=(5, 5))
    for layout in (mwh, rotate_layout(mwh, "mwh_m"), giant, mini, rotate_layout(mini, "mini_m")):
        text = format_map(layout)
        assert parse_map(text) == layout
        (OUT / f"{layout.name}.map").write_text(text)
        print(layout.name, layout.shape, len(layout.rooms()), "rooms")


if __name__ == "__main__":
    main()
