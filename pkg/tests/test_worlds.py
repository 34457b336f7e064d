import numpy as np
import pytest
from numpy.testing import assert_allclose

from fencoder.numerics import Prng
from fencoder.worlds import (FunctionContext1D, GridContext, GridState, WorldSpec,
                             banded_grid_contexts, context_family, expert_1d, expert_episode, expert_policy,
                             generate_dataset, generate_world, grid_expert, grid_step,
                             read_datasets, rollout, sample_contexts, write_datasets)


def test_expert_1d_examples():
    assert expert_1d(FunctionContext1D(0, 0, 0), 1.7) == 0.0
    assert expert_1d(FunctionContext1D(0, 0, 1), 2.0) == 2.0
    assert expert_1d(FunctionContext1D(1, 1, 0), 0.0) == 1.0
    with pytest.raises(ValueError):
        FunctionContext1D(4, 0, 0)


def test_grid_step_examples():
    s = GridState([0.5, 0.5], [0.0, 0.0])
    assert_allclose(grid_step(s, [1, 0], GridContext(0.0, 1.0)).pos, [0.55, 0.5])
    assert_allclose(grid_step(s, [1, 0], GridContext(np.pi / 2, 1.0)).pos, [0.5, 0.55], atol=1e-15)
    edge = GridState([0.99, 0.5], [0.0, 0.0])
    assert_allclose(grid_step(edge, [1, 0], GridContext(0.0, 1.0)).pos, [1.0, 0.5])
    with pytest.raises(ValueError):
        grid_step(s, [1.5, 0], GridContext(0.0, 1.0))


def test_grid_expert_examples():
    s = GridState([0.0, 0.0], [1.0, 0.0])
    assert_allclose(grid_expert(s, GridContext(0.0, 1.0)), [1.0, 0.0])
    assert_allclose(grid_expert(s, GridContext(0.0, 2.0)), [1.0, 0.0])
    assert_allclose(grid_expert(GridState([0.3, 0.3], [0.3, 0.3]), GridContext(1.0, 1.5)), [0.0, 0.0])


def test_expert_succeeds_everywhere():
    rng = Prng(0)
    for i in range(100):
        ctx = GridContext(rng.uniform(0, 2 * np.pi), rng.uniform(0.5, 2.0))
        _, ok = rollout(expert_policy(ctx), ctx, rng.uniform(0, 1, (2,)), rng.uniform(0, 1, (2,)), 80)
        assert ok


def test_expert_distance_non_increasing():
    rng = Prng(1)
    for _ in range(20):
        ctx = GridContext(rng.uniform(0, 2 * np.pi), rng.uniform(0.5, 2.0))
        goal = rng.uniform(0, 1, (2,))
        traj, _ = rollout(expert_policy(ctx), ctx, rng.uniform(0, 1, (2,)), goal, 80)
        d = [np.linalg.norm(o[:2] - goal) for o in traj.obs]
        assert all(b <= a + 1e-12 for a, b in zip(d, d[1:]))


def test_zero_policy_fails_unless_at_goal():
    ctx = GridContext(0.3, 1.0)
    zero = lambda o: np.zeros(2)
    assert not rollout(zero, ctx, [0.1, 0.1], [0.9, 0.9], 80)[1]
    assert rollout(zero, ctx, [0.5, 0.5], [0.52, 0.5], 80)[1]


def test_wrong_context_expert_fails():
    # M' = -M is a rotation by theta + pi with the same scale
    rng = Prng(2)
    for _ in range(20):
        ctx = GridContext(rng.uniform(0, np.pi), rng.uniform(0.5, 2.0))
        wrong = GridContext(ctx.theta + np.pi, ctx.scale)
        start = rng.uniform(0, 1, (2,))
        goal = rng.uniform(0, 1, (2,))
        if np.linalg.norm(goal - start) < 0.1:
            continue
        assert not rollout(expert_policy(wrong), ctx, start, goal, 80)[1]


def test_nonfinite_policy_is_failure():
    ctx = GridContext(0.0, 1.0)
    _, ok = rollout(lambda o: np.array([np.nan, 0.0]), ctx, [0.1, 0.1], [0.9, 0.9], 10)
    assert not ok


def test_context_identifiability():
    ctxs, _ = sample_contexts(WorldSpec(), 3)
    probes = Prng(4).uniform(0, 1, (20, 4))
    acts = [np.array([expert_policy(c)(p) for p in probes]) for c in ctxs]
    dists = [np.abs(a - b).max() for i, a in enumerate(acts) for b in acts[i + 1:]]
    assert min(dists) > 0


def test_unnormalized_grid_family_is_linear():
    rng = Prng(5)
    probes = rng.uniform(0, 1, (30, 4))
    feats = lambda c: np.concatenate([c.inverse @ (p[2:] - p[:2]) for p in probes])
    gens = [GridContext(rng.uniform(0, 2 * np.pi), rng.uniform(0.5, 2.0)) for _ in range(4)]
    A = np.stack([feats(c) for c in gens], axis=1)
    for _ in range(5):
        target = feats(GridContext(rng.uniform(0, 2 * np.pi), rng.uniform(0.5, 2.0)))
        coef, *_ = np.linalg.lstsq(A, target, rcond=None)
        assert np.abs(A @ coef - target).max() < 1e-10


def test_1d_datasets_lie_in_family_span():
    spec = WorldSpec(kind="1d", n_train=6, n_holdout=1, trajectories_per_context=1, horizon=200)
    _, _, tr, ho = generate_world(spec, 1)
    for ds in tr + ho:
        x = ds.obs[:, 0]
        Phi = np.stack([np.sin(3 * x), np.cos(2 * x), x], axis=1)
        coef = np.linalg.solve(Phi.T @ Phi, Phi.T @ ds.act[:, 0])
        assert np.abs(Phi @ coef - ds.act[:, 0]).max() < 1e-10


def test_grid_dataset_counts():
    spec = WorldSpec(n_train=8, n_holdout=4, trajectories_per_context=20, horizon=40)
    _, _, tr, ho = generate_world(spec, 1)
    assert len(tr) == 8 and len(ho) == 4
    assert all(len(d) == 800 and d.split == "train" for d in tr)
    assert all(d.split == "ood" for d in ho)
    assert_allclose(sum(d.mixture_weight for d in tr), 1.0)


def test_1d_training_contexts_well_conditioned():
    spec = WorldSpec(kind="1d", n_train=6, n_holdout=1, trajectories_per_context=1, horizon=10)
    tr, _ = sample_contexts(spec, 9)
    assert np.linalg.cond(np.array([[c.a, c.b, c.d] for c in tr])) <= spec.max_train_cond


def test_dataset_files_deterministic(tmp_path):
    spec = WorldSpec(n_train=2, n_holdout=1, trajectories_per_context=2, horizon=10)
    for name in ("a", "b"):
        tc, hc, tr, ho = generate_world(spec, 7)
        write_datasets(tmp_path / name, tr + ho, spec, tc + hc, 7)
    for f in ("data.jsonl", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    back, manifest = read_datasets(tmp_path / "a")
    assert manifest["seed"] == 7
    assert np.array_equal(back[0].obs, tr[0].obs) and np.array_equal(back[0].act, tr[0].act)
    assert [d.split for d in back] == ["train", "train", "ood"]


def test_label_noise_changes_actions():
    spec = WorldSpec(kind="1d", n_train=3, trajectories_per_context=1, horizon=50, label_noise=0.1)
    ctx = [FunctionContext1D(1, 0, 0, "f")]
    noisy = generate_dataset(spec, ctx, 1, 3)[0]
    x = noisy.obs[:, 0]
    resid = noisy.act[:, 0] - np.sin(3 * x)
    assert 0 < np.abs(resid).mean() < 0.5


def test_banded_contexts_and_family_labels():
    ctxs = banded_grid_contexts(3, 12, 0.3, Prng(1))
    fams = [context_family(c, 3) for c in ctxs]
    assert fams == [i % 3 for i in range(12)]


def test_expert_episode_resamples_goals():
    ctx = GridContext(0.7, 1.2)
    ep = expert_episode(ctx, Prng(6), 200)
    goals = {tuple(o[2:]) for o in ep.obs}
    assert len(ep.obs) == 200 and len(goals) > 1
    idle = np.mean(np.abs(ep.act).max(axis=1) == 0)
    assert idle == 0.0
    fixed = expert_episode(ctx, Prng(6), 200, resample_goals=False)
    assert len({tuple(o[2:]) for o in fixed.obs}) == 1
    again = expert_episode(ctx, Prng(6), 200)
    assert np.array_equal(again.obs, ep.obs) and np.array_equal(again.act, ep.act)
