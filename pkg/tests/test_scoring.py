"""Neighborhood scoring vs. a flat-search oracle, routing, and the flat baseline."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cadbench import featstore as fs
from cadbench import membank as mb
from cadbench import scoring as sc


def random_bank(rng, gh=4, gw=5, m=3, dim=6, task_id="t00"):
    return mb.TaskMemoryBank(
        task_id=task_id,
        rho=0.1,
        train_count=m,
        threshold=0.5,
        prototype=rng.standard_normal(dim).astype(np.float32),
        vectors=rng.standard_normal((gh, gw, m, dim)).astype(np.float32),
    )


def random_grid(rng, gh=4, gw=5, dim=6, image_id="q"):
    return fs.FeatureGrid(
        image_id,
        fs.LABEL_NORMAL,
        rng.standard_normal(dim).astype(np.float32),
        rng.standard_normal((gh, gw, dim)).astype(np.float32),
    )


def global_nn_oracle(grid, bank):
    """Float64 brute force over every stored vector, ignoring spatial indexing."""
    allv = bank.vectors.reshape(-1, bank.dim).astype(np.float64)
    gh, gw, _ = grid.patches.shape
    out = np.empty((gh, gw))
    for i in range(gh):
        for j in range(gw):
            q = grid.patches[i, j].astype(np.float64)
            out[i, j] = np.sqrt(((allv - q) ** 2).sum(axis=1).min())
    return out


# --- neighborhoods -----------------------------------------------------------


def test_radius_zero_is_center_only():
    nb = sc.neighborhood(2, 3, 0, 8, 8)
    assert nb.cells == ((2, 3),)


def test_corner_clipping_14x14_r3():
    nb = sc.neighborhood(0, 0, 3, 14, 14)
    assert len(nb.cells) == 16  # 4x4 survives clipping


def test_neighborhood_bound_and_membership():
    nb = sc.neighborhood(5, 5, 2, 14, 14)
    assert len(nb.cells) == 25 <= (2 * 2 + 1) ** 2
    assert all(abs(i - 5) <= 2 and abs(j - 5) <= 2 for i, j in nb.cells)


def test_neighborhood_validates():
    with pytest.raises(ValueError, match="radius"):
        sc.neighborhood(0, 0, -1, 4, 4)
    with pytest.raises(ValueError, match="outside"):
        sc.neighborhood(4, 0, 1, 4, 4)


# --- routing -----------------------------------------------------------------


def proto_bank(proto, task_id):
    return mb.TaskMemoryBank(
        task_id=task_id, rho=0.1, train_count=1, threshold=0.0,
        prototype=np.asarray(proto, dtype=np.float32),
        vectors=np.zeros((1, 1, 1, len(proto)), dtype=np.float32),
    )


def test_route_single_task_always_wins():
    reg = mb.BankRegistry([proto_bank([5.0, 0.0], "only")])
    assert sc.route(np.array([100.0, -3.0]), reg) == "only"


def test_route_midpoint_geometry():
    delta = 2.0
    reg = mb.BankRegistry(
        [proto_bank([0.0, 0.0, 0.0], "t1"), proto_bank([delta, 0.0, 0.0], "t2")]
    )
    assert sc.route(np.array([0.4 * delta, 0, 0]), reg) == "t1"
    assert sc.route(np.array([0.6 * delta, 0, 0]), reg) == "t2"


def test_route_tie_prefers_earliest():
    reg = mb.BankRegistry(
        [proto_bank([1.0, 0.0], "first"), proto_bank([-1.0, 0.0], "second")]
    )
    assert sc.route(np.array([0.0, 0.0]), reg) == "first"


def test_route_empty_registry():
    with pytest.raises(ValueError, match="empty registry"):
        sc.route(np.zeros(2), mb.BankRegistry())


def test_route_unaffected_by_farther_tasks():
    rng = np.random.default_rng(0)
    q = rng.standard_normal(4)
    reg = mb.BankRegistry([proto_bank(q + 0.01, "near")])
    assert sc.route(q, reg) == "near"
    reg.add(proto_bank(q + 10.0, "far"))
    assert sc.route(q, reg) == "near"


# --- neighborhood scoring ----------------------------------------------------


def test_self_match_scores_exactly_zero():
    spec = fs.SyntheticSpec(seed=3, n_tasks=1, n_train=5, n_test_normal=1,
                            n_test_anomalous=0, grid_h=3, grid_w=4, dim=6)
    (train, _), = fs.generate_synthetic(spec)
    bank = mb.fit_task(train, rho=1.0, radius=2)
    for r in (0, 1, 3):
        rep = sc.score_image(train.features[2], bank, r)
        assert (rep.patch_scores == 0.0).all()
        assert rep.image_score == 0.0
        assert rep.decision == fs.LABEL_NORMAL  # strict >: 0 is not > 0


def test_large_radius_equals_flat_search():
    rng = np.random.default_rng(9)
    bank = random_bank(rng, gh=5, gw=4, m=4, dim=7)
    for k in range(5):
        grid = random_grid(rng, gh=5, gw=4, dim=7, image_id=f"g{k}")
        want = global_nn_oracle(grid, bank)
        r = max(5, 4) - 1
        got = sc.score_image(grid, bank, r).patch_scores
        assert np.abs(got - want).max() < 1e-6
        got_batch = sc.score_patch_maps(grid.patches[None], bank, r)[0]
        assert np.abs(got_batch - want).max() < 1e-6


def test_synthetic_anomaly_localized_at_argmax():
    spec = fs.SyntheticSpec(seed=8, n_tasks=1, n_train=30, n_test_normal=5,
                            n_test_anomalous=8, grid_h=5, grid_w=5, dim=16,
                            anomaly_delta=10 * 0.05 * np.sqrt(16))
    (train, test), = fs.generate_synthetic(spec)
    bank = mb.fit_task(train, rho=0.10, radius=3)
    for g in test.features:
        cell = fs.anomaly_cell(g.image_id)
        if cell is None:
            continue
        rep = sc.score_image(g, bank, 3)
        got = np.unravel_index(np.argmax(rep.patch_scores), rep.patch_scores.shape)
        assert tuple(got) == cell
        assert rep.decision == fs.LABEL_ANOMALOUS


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_r_monotonicity_property(seed):
    rng = np.random.default_rng(seed)
    gh, gw = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    m, dim = int(rng.integers(1, 5)), int(rng.integers(2, 8))
    bank = random_bank(rng, gh, gw, m, dim)
    grid = random_grid(rng, gh, gw, dim)
    prev = None
    for r in range(5):
        cur = sc.score_image(grid, bank, r).patch_scores
        if prev is not None:
            assert (cur <= prev).all()
        prev = cur


def test_image_score_is_max_and_scores_nonnegative():
    rng = np.random.default_rng(2)
    bank = random_bank(rng)
    grid = random_grid(rng)
    rep = sc.score_image(grid, bank, 1)
    assert rep.image_score == rep.patch_scores.max()
    assert (rep.patch_scores >= 0).all()
    assert rep.latency_ns > 0


def test_batch_path_agrees_with_single_path():
    rng = np.random.default_rng(4)
    bank = random_bank(rng, gh=6, gw=3, m=5, dim=9)
    grids = [random_grid(rng, 6, 3, 9, image_id=f"im{k}") for k in range(7)]
    patches = np.stack([g.patches for g in grids])
    for r in (0, 2, 4):
        batch = sc.score_patch_maps(patches, bank, r)
        for k, g in enumerate(grids):
            single = sc.score_image(g, bank, r).patch_scores
            assert np.abs(batch[k] - single).max() < 1e-9


def test_scoring_deterministic_bitwise():
    rng = np.random.default_rng(6)
    bank = random_bank(rng)
    grid = random_grid(rng)
    a = sc.score_image(grid, bank, 2).patch_scores
    b = sc.score_image(grid, bank, 2).patch_scores
    assert a.tobytes() == b.tobytes()


def test_shape_mismatch_rejected():
    rng = np.random.default_rng(7)
    bank = random_bank(rng, gh=4, gw=5, dim=6)
    grid = random_grid(rng, gh=5, gw=4, dim=6)
    with pytest.raises(ValueError, match="does not match bank"):
        sc.score_image(grid, bank, 1)


def test_infer_routes_and_applies_routed_threshold():
    spec = fs.SyntheticSpec(seed=12, n_tasks=3, n_train=12, n_test_normal=6,
                            n_test_anomalous=6, grid_h=4, grid_w=4, dim=16,
                            anomaly_delta=10 * 0.05 * np.sqrt(16))
    tasks = fs.generate_synthetic(spec)
    reg = mb.BankRegistry([mb.fit_task(tr, 0.2, 2) for tr, _ in tasks])
    hits = total = 0
    for t, (_, test) in enumerate(tasks):
        want = fs.synthetic_task_id(t)
        for g in test.features:
            rep = sc.infer(g, reg, 2)
            hits += rep.routed_task == want
            total += 1
            oracle = sc.infer(g, reg, 2, task_id=want)
            assert oracle.routed_task == want
    assert hits == total  # separation is 10 sigma: routing is perfect


def test_score_dataset_matches_infer():
    spec = fs.SyntheticSpec(seed=13, n_tasks=2, n_train=8, n_test_normal=4,
                            n_test_anomalous=4, grid_h=3, grid_w=3, dim=8)
    tasks = fs.generate_synthetic(spec)
    reg = mb.BankRegistry([mb.fit_task(tr, 0.5, 1) for tr, _ in tasks])
    _, test = tasks[0]
    reports = sc.score_dataset(test, reg, 1)
    for g, rep in zip(test.features, reports):
        one = sc.infer(g, reg, 1)
        assert rep.routed_task == one.routed_task
        assert rep.image_score == pytest.approx(one.image_score, abs=1e-9)
        assert rep.decision == one.decision


# --- flat baseline -----------------------------------------------------------


def test_flat_minimum_coreset_size():
    spec = fs.SyntheticSpec(seed=14, n_tasks=1, n_train=20, n_test_normal=1,
                            n_test_anomalous=1, grid_h=5, grid_w=5, dim=4)
    (train, _), = fs.generate_synthetic(spec)
    # pool = 20*25 = 500 patches; 5% = 25 < 500 -> min size wins, capped at pool
    flat = sc.fit_flat_bank(train, min_size=400)
    assert flat.size == 400
    flat_full = sc.fit_flat_bank(train)  # min 500 == pool size
    assert flat_full.size == 500


def test_flat_self_score_zero():
    spec = fs.SyntheticSpec(seed=15, n_tasks=1, n_train=1, n_test_normal=1,
                            n_test_anomalous=0, grid_h=3, grid_w=3, dim=5)
    (train, _), = fs.generate_synthetic(spec)
    flat = sc.fit_flat_bank(train)
    rep = sc.flat_score_image(train.features[0], flat)
    assert rep.image_score == 0.0
    assert (rep.patch_scores == 0.0).all()


def test_flat_equals_spatial_before_reweighting():
    spec = fs.SyntheticSpec(seed=16, n_tasks=1, n_train=12, n_test_normal=4,
                            n_test_anomalous=4, grid_h=4, grid_w=3, dim=6)
    (train, test), = fs.generate_synthetic(spec)
    bank = mb.fit_task(train, rho=0.5, radius=1)
    flat = sc.FlatBank(
        task_ids=("t00",),
        vectors=bank.vectors.reshape(-1, bank.dim),
        threshold=0.0,
    )
    r_full = max(bank.grid_h, bank.grid_w) - 1
    for g in test.features:
        spatial = sc.score_image(g, bank, r_full).patch_scores
        raw = sc.flat_nn_distances(g, flat)
        assert np.abs(spatial - raw).max() < 1e-9


def test_flat_fit_and_score_with_replay():
    spec = fs.SyntheticSpec(seed=17, n_tasks=3, n_train=6, n_test_normal=3,
                            n_test_anomalous=3, grid_h=3, grid_w=3, dim=6,
                            anomaly_delta=10 * 0.05 * np.sqrt(6))
    tasks = fs.generate_synthetic(spec)
    trains = [tr for tr, _ in tasks]
    rep = sc.flat_bank_fit_and_score(trains, tasks[-1][1].features[0], replay_per_task=2)
    assert rep.patch_scores.shape == (3, 3)
    assert rep.image_score == rep.patch_scores.max()
    with pytest.raises(ValueError, match="empty bank"):
        sc.flat_bank_fit_and_score([], tasks[0][1].features[0])


def test_flat_reweight_keeps_scores_nonnegative_and_bounded():
    rng = np.random.default_rng(19)
    vecs = rng.standard_normal((40, 5)).astype(np.float32)
    flat = sc.FlatBank(task_ids=("t",), vectors=vecs, threshold=0.0)
    grid = random_grid(rng, 3, 3, 5)
    w_scores = sc._reweighted_scores(grid.patches, flat)
    raw = sc.flat_nn_distances(grid, flat).reshape(-1)
    assert (w_scores >= 0).all()
    assert (w_scores <= raw + 1e-12).all()  # weight is in [0, 1)
