from collections import Counter, deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from capsem.maze import (FORWARD, FRAME, HEADINGS, MAX_STEPS, NOOP, SCENARIOS, TURN_LEFT, TURN_RIGHT, EnvState,
                         MapError, MazeEnv, build_spec, format_map, load_layout, load_scenario, parse_map, read_ppm,
                         raycast, reset, rotate_layout, step, to_ppm)
from capsem.tensor import ContractError


def bfs(grid, src):
    """Plain breadth-first search over non-wall cells."""
    seen, todo = {src: 0}, deque([src])
    while todo:
        r, c = todo.popleft()
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            n = (r + dr, c + dc)
            if 0 <= n[0] < len(grid) and 0 <= n[1] < len(grid[0]) and grid[n[0]][n[1]] != "#" and n not in seen:
                seen[n] = seen[(r, c)] + 1
                todo.append(n)
    return seen


@pytest.fixture(scope="module")
def mini():
    return build_spec(load_layout("mini"))


def test_room_counts_and_dense_starts():
    spec, _ = load_scenario("mwh", "dense", "varied", 0)
    assert spec.room_count == 8 and len(spec.start_cells()) == 17 == len(set(spec.start_cells()))
    giant, _ = load_scenario("mwh_g", "dense", "uniform", 0)
    assert giant.room_count == 19
    textures = list(giant.texture_palette.values())
    assert all(np.array_equal(t[0], textures[0][0]) and np.array_equal(t[1], textures[0][1]) for t in textures)


@pytest.mark.parametrize("name", SCENARIOS)
def test_varied_textures_pairwise_distinct(name):
    spec = build_spec(load_layout(name), texture="varied")
    bases = [tuple(np.round(b, 12)) for b, _ in spec.texture_palette.values()]
    assert len(set(bases)) == spec.room_count


@pytest.mark.parametrize("name", SCENARIOS)
def test_goal_reachable_from_every_start(name):
    spec = build_spec(load_layout(name))
    dist = bfs(spec.layout.grid, spec.goal)
    for cell in (*spec.start_cells_dense, spec.start_cell_sparse):
        assert cell in dist
    # the sparse start is as far from the goal as any floor cell
    assert dist[spec.start_cell_sparse] == max(dist.values())


@pytest.mark.parametrize("base,rotated", [("mwh", "mwh_m"), ("mini", "mini_m")])
def test_mirrored_map_is_rotation(base, rotated):
    a, b = load_layout(base), load_layout(rotated)
    expect = np.rot90(np.array([list(r) for r in a.grid]))
    assert np.array_equal(np.array([list(r) for r in b.grid]), expect)
    w = a.shape[1]
    assert b.goal == (w - 1 - a.goal[1], a.goal[0])
    assert set(b.starts) == {(w - 1 - c, r) for r, c in a.starts}
    assert b.heading == (a.heading - 1) % 4
    assert rotate_layout(a, rotated) == b


def test_map_round_trip_and_errors(tmp_path):
    layout = load_layout("mwh")
    assert parse_map(format_map(layout)) == layout
    with pytest.raises(MapError):
        load_layout("nowhere")
    with pytest.raises(MapError):
        parse_map("name: x\ngoal: 1,1\nstarts: 1,2\n#####\n")
    with pytest.raises(MapError):
        parse_map("name: x\ngoal: 0,0\nstarts: 1,2\n---\n####\n#aa#\n####\n")
    with pytest.raises(MapError):
        parse_map("name: x\ngoal: 1,1\nstarts: 1,2\n---\n####\n#a?#\n####\n")
    with pytest.raises(MapError):
        build_spec(parse_map("name: x\ngoal: 1,1\nstarts: 1,2\n---\n####\n#aa#\n####\n"))
    path = tmp_path / "mwh.map"
    path.write_text(format_map(layout))
    assert load_layout(path) == layout


def test_dense_reset_is_uniform():
    spec, st = load_scenario("mwh", "dense", "varied", 42)
    counts = Counter()
    for _ in range(17_000):
        reset(spec, st)
        counts[st.pose[:2]] += 1
    assert set(counts) == set(spec.start_cells_dense)
    assert all(900 <= n <= 1100 for n in counts.values())


def test_sparse_reset_is_fixed():
    poses = set()
    for seed in (0, 1, 99):
        spec, st = load_scenario("mwh", "sparse", "varied", seed)
        reset(spec, st)
        poses.add(st.pose)
        assert st.steps_taken == 0 and not st.done
    assert len(poses) == 1


def test_frame_shape_and_range():
    env = MazeEnv.from_scenario("mwh", seed=3)
    obs = env.reset()
    assert obs.shape == (3, FRAME, FRAME) and obs.dtype == np.float64
    assert obs.min() >= 0 and obs.max() <= 1


def test_noop_and_turns(mini):
    env = MazeEnv(mini, 0)
    env.reset_to((3, 3), 0)
    pose = env.state.pose
    _, r, d = env.step(NOOP)
    assert env.state.pose == pose and r == 0 and not d
    env.step(TURN_LEFT)
    assert HEADINGS[env.state.pose[2]] == "W"
    env.step(TURN_RIGHT)
    env.step(TURN_RIGHT)
    assert HEADINGS[env.state.pose[2]] == "E"
    env.step(FORWARD)
    assert env.state.pose == (3, 4, 1)
    env.reset_to((3, 3), 3)
    env.step(FORWARD)  # wall to the west
    assert env.state.pose == (3, 3, 3)
    with pytest.raises(ContractError):
        env.step(7)


def test_step_cap(mini):
    env = MazeEnv(mini, 0)
    env.reset()
    total = 0.0
    for i in range(MAX_STEPS):
        _, r, done = env.step(NOOP)
        total += r
        assert done == (i == MAX_STEPS - 1)
    assert total == 0 and env.state.steps_taken == 2100
    with pytest.raises(ContractError):
        env.step(NOOP)


def test_goal_reward(mini):
    env = MazeEnv(mini, 0)
    env.reset_to((4, 5), HEADINGS.index("S"))
    _, r, done = env.step(FORWARD)
    assert r == 1.0 and done and env.state.episode_reward == 1.0
    with pytest.raises(ContractError):
        env.step(FORWARD)


@given(st.integers(0, 2 ** 31), st.lists(st.integers(0, 3), min_size=1, max_size=300))
def test_reward_structure(seed, actions):
    spec = _SPEC.setdefault("s", build_spec(load_layout("mini"), max_steps=150))
    st_ = EnvState(rng=np.random.default_rng(seed))
    reset(spec, st_)
    total, n = 0.0, 0
    for a in actions:
        before = st_.pose[:2]
        _, r, done = step(spec, st_, a)
        n += 1
        assert r in (0.0, 1.0)
        if r:
            assert st_.pose[:2] == spec.goal and before != spec.goal and done
        total += r
        if done:
            break
    assert total in (0.0, 1.0) and n <= 150 and st_.steps_taken <= 150


_SPEC = {}


def test_determinism_per_seed():
    def run(seed):
        env = MazeEnv.from_scenario("mwh", seed=seed)
        rng = np.random.default_rng(5)
        out = []
        for _ in range(3):
            frames = [env.reset()]
            while not env.done and len(frames) < 60:
                o, r, d = env.step(int(rng.integers(4)))
                frames.append(o)
                out.append((r, d))
            out.append(np.stack(frames).tobytes())
        return out
    assert run(11) == run(11)


def test_render_is_deterministic(mini):
    fresh = build_spec(load_layout("mini"))
    pose = (3, 3, 1)
    a, b = raycast(mini, pose), raycast(fresh, pose)
    assert np.array_equal(a, b) and np.array_equal(mini.frame(pose), a)


def test_center_column_shows_facing_wall():
    spec = build_spec(load_layout("mwh"), texture="varied")
    pose = (1, 2, HEADINGS.index("N"))  # the border wall is directly ahead
    assert not spec.layout.is_floor(0, 2)
    img = spec.frame(pose)
    room = spec.layout.grid[1][2]
    base, stripe = spec.texture_palette[room]
    # the wall face is half a cell away; centre columns straddle stripe boundary u = 0.5
    np.testing.assert_allclose(img[:, :, FRAME // 2 - 1].T, np.tile(stripe / 1.5, (FRAME, 1)), rtol=0, atol=1e-12)
    np.testing.assert_allclose(img[:, :, FRAME // 2].T, np.tile(base / 1.5, (FRAME, 1)), rtol=0, atol=1e-12)


def test_uniform_vs_varied_pixel_diff():
    """Poses in different rooms that look alike in uniform mode must differ in varied mode."""
    layout = load_layout("mwh")
    uni, var = build_spec(layout, texture="uniform"), build_spec(layout, texture="varied")
    poses = [(r, c, h) for r, c in layout.floor_cells() for h in range(4)]
    by_frame = {}
    for p in poses:
        by_frame.setdefault(uni.frame(p).tobytes(), []).append(p)
    pairs = 0
    for group in by_frame.values():
        for i, p in enumerate(group):
            for q in group[i + 1:]:
                if layout.grid[p[0]][p[1]] != layout.grid[q[0]][q[1]]:
                    pairs += 1
                    assert np.abs(var.frame(p) - var.frame(q)).max() > 0.05
    assert pairs >= 8


def test_ppm_round_trip(mini):
    img = mini.frame((3, 3, 1))
    data = to_ppm(img)
    assert data.startswith(b"P6\n42 42\n255\n") and len(data) == 13 + 42 * 42 * 3
    back = read_ppm(data)
    assert np.array_equal(back, np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8))
