"""Feature-file byte layout, round-trips, and the synthetic generator oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cadbench import featstore as fs


def make_grid(rng, gh=3, gw=4, dim=5, image_id="img", label=fs.LABEL_NORMAL):
    return fs.FeatureGrid(
        image_id,
        label,
        rng.standard_normal(dim).astype(np.float32),
        rng.standard_normal((gh, gw, dim)).astype(np.float32),
    )


def make_dataset(rng, n=3, split=fs.SPLIT_TRAIN, **kw):
    feats = [make_grid(rng, image_id=f"img-{k}", **kw) for k in range(n)]
    return fs.TaskDataset("t00", split, tuple(feats))


# --- byte layout -----------------------------------------------------------


def test_hand_computed_file_size(tmp_path):
    # header 19 B + record (label 1 + len 2 + id 1 + cls 3*4 + patches 2*2*3*4) = 83 B
    rng = np.random.default_rng(0)
    ds = fs.TaskDataset(
        "t00",
        fs.SPLIT_TRAIN,
        (make_grid(rng, gh=2, gw=2, dim=3, image_id="a"),),
    )
    n = fs.write_feature_file(ds, tmp_path / "one.cadf")
    assert n == 83
    assert (tmp_path / "one.cadf").stat().st_size == 83


def test_header_is_19_bytes():
    rng = np.random.default_rng(1)
    blob = fs.dataset_to_bytes(make_dataset(rng, n=1))
    assert blob[:4] == b"CADF"
    # version 1, split train (0)
    assert blob[4:8] == (1).to_bytes(4, "little")
    assert blob[8] == 0


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty dataset"):
        fs.TaskDataset("t", fs.SPLIT_TRAIN, ())


def test_shape_heterogeneity_rejected():
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError, match="heterogeneity"):
        fs.TaskDataset(
            "t", fs.SPLIT_TEST, (make_grid(rng, gh=2), make_grid(rng, gh=3))
        )


def test_train_split_must_be_normal():
    rng = np.random.default_rng(3)
    with pytest.raises(ValueError, match="anomalous"):
        make_dataset(rng, label=fs.LABEL_ANOMALOUS)


def test_roundtrip_50_random_grids(tmp_path):
    rng = np.random.default_rng(1234)
    ds = fs.TaskDataset(
        "t00",
        fs.SPLIT_TEST,
        tuple(
            make_grid(
                rng,
                image_id=f"im{k:02d}",
                label=fs.LABEL_ANOMALOUS if k % 3 == 0 else fs.LABEL_NORMAL,
            )
            for k in range(50)
        ),
    )
    p = tmp_path / "x.cadf"
    fs.write_feature_file(ds, p)
    back = fs.read_feature_file(p)
    assert fs.datasets_equal(ds, back)
    assert back.split == fs.SPLIT_TEST


@settings(max_examples=25, deadline=None)
@given(
    gh=st.integers(1, 5),
    gw=st.integers(1, 5),
    dim=st.integers(1, 8),
    n=st.integers(1, 4),
    seed=st.integers(0, 2**32 - 1),
    split=st.sampled_from([fs.SPLIT_TRAIN, fs.SPLIT_TEST]),
)
def test_roundtrip_property(gh, gw, dim, n, seed, split):
    rng = np.random.default_rng(seed)
    ds = fs.TaskDataset(
        "t",
        split,
        tuple(make_grid(rng, gh, gw, dim, image_id=f"i{k}") for k in range(n)),
    )
    assert fs.datasets_equal(ds, fs.dataset_from_bytes(fs.dataset_to_bytes(ds)))


def test_bad_magic(tmp_path):
    rng = np.random.default_rng(4)
    blob = bytearray(fs.dataset_to_bytes(make_dataset(rng)))
    blob[:4] = b"XXXX"
    p = tmp_path / "bad.cadf"
    p.write_bytes(bytes(blob))
    with pytest.raises(fs.FormatError, match="bad magic"):
        fs.read_feature_file(p)


def test_version_mismatch():
    rng = np.random.default_rng(5)
    blob = bytearray(fs.dataset_to_bytes(make_dataset(rng)))
    blob[4:8] = (9).to_bytes(4, "little")
    with pytest.raises(fs.FormatError, match="version"):
        fs.dataset_from_bytes(bytes(blob))


def test_truncated_mid_record():
    rng = np.random.default_rng(6)
    blob = fs.dataset_to_bytes(make_dataset(rng))
    with pytest.raises(fs.FormatError, match="truncated"):
        fs.dataset_from_bytes(blob[: len(blob) - 7])


def test_trailing_bytes_rejected():
    rng = np.random.default_rng(7)
    blob = fs.dataset_to_bytes(make_dataset(rng))
    with pytest.raises(fs.FormatError, match="trailing"):
        fs.dataset_from_bytes(blob + b"\x00")


def test_nonfinite_rejected():
    rng = np.random.default_rng(8)
    ds = make_dataset(rng, n=1)
    blob = bytearray(fs.dataset_to_bytes(ds))
    # poke a NaN into the cls floats (after 19 B header + 1 B label + 2 B len + 5 B id)
    nan = np.array([np.nan], dtype="<f4").tobytes()
    off = 19 + 3 + len("img-0")
    blob[off : off + 4] = nan
    with pytest.raises(fs.FormatError, match="non-finite"):
        fs.dataset_from_bytes(bytes(blob))


# --- synthetic generator ---------------------------------------------------


SPEC = fs.SyntheticSpec(
    seed=1,
    n_tasks=2,
    n_train=6,
    n_test_normal=4,
    n_test_anomalous=4,
    grid_h=4,
    grid_w=5,
    dim=8,
    cluster_spread=0.05,
    anomaly_delta=10 * 0.05 * np.sqrt(8),
    task_separation=0.5,
)


def test_synthetic_deterministic():
    a = fs.generate_synthetic(SPEC)
    b = fs.generate_synthetic(SPEC)
    for (tr1, te1), (tr2, te2) in zip(a, b):
        assert fs.datasets_equal(tr1, tr2)
        assert fs.datasets_equal(te1, te2)


def test_synthetic_train_all_normal_and_shapes():
    for train, test in fs.generate_synthetic(SPEC):
        assert not train.labels().any()
        assert train.grid_h == 4 and train.grid_w == 5 and train.dim == 8
        assert len(train) == 6 and len(test) == 8
        assert test.labels().sum() == 4


def test_zero_delta_only_differs_by_nothing():
    # same seed, delta=0 vs delta>0: identical everywhere except the perturbed cell
    base = fs.SyntheticSpec(seed=9, n_tasks=1, n_train=3, n_test_normal=2,
                            n_test_anomalous=3, grid_h=3, grid_w=3, dim=6,
                            anomaly_delta=0.0)
    bumped = fs.SyntheticSpec(seed=9, n_tasks=1, n_train=3, n_test_normal=2,
                              n_test_anomalous=3, grid_h=3, grid_w=3, dim=6,
                              anomaly_delta=4.0)
    (_, test0), = fs.generate_synthetic(base)
    (_, testd), = fs.generate_synthetic(bumped)
    for g0, gd in zip(test0.features, testd.features):
        cell = fs.anomaly_cell(gd.image_id)
        if cell is None:
            assert (g0.patches == gd.patches).all()
            continue
        i, j = cell
        mask = np.ones((3, 3), dtype=bool)
        mask[i, j] = False
        assert (g0.patches[mask] == gd.patches[mask]).all()
        diff = gd.patches[i, j].astype(np.float64) - g0.patches[i, j].astype(np.float64)
        assert np.linalg.norm(diff) == pytest.approx(4.0, rel=1e-5)
        assert (g0.cls == gd.cls).all()


def test_large_delta_separates_by_brute_force():
    # every anomalous patch sits farther from its cell's train pool than any
    # normal test patch sits from its own cell's pool
    for train, test in fs.generate_synthetic(SPEC):
        pools = np.stack([g.patches for g in train.features]).astype(np.float64)
        worst_normal = 0.0
        best_anomaly = np.inf
        for g in test.features:
            cell = fs.anomaly_cell(g.image_id)
            p = g.patches.astype(np.float64)
            if cell is None:
                for i in range(test.grid_h):
                    for j in range(test.grid_w):
                        d = np.linalg.norm(pools[:, i, j] - p[i, j], axis=1).min()
                        worst_normal = max(worst_normal, d)
            else:
                i, j = cell
                d = np.linalg.norm(pools[:, i, j] - p[i, j], axis=1).min()
                best_anomaly = min(best_anomaly, d)
        assert best_anomaly > worst_normal


def test_cls_tokens_cluster_at_task_centers():
    for t, (train, _) in enumerate(fs.generate_synthetic(SPEC)):
        mu = fs.task_center(SPEC, t)
        for g in train.features:
            resid = g.cls.astype(np.float64) - mu
            assert np.abs(resid).max() < 6 * SPEC.cluster_spread
    assert np.linalg.norm(fs.task_center(SPEC, 1) - fs.task_center(SPEC, 0)) == 0.5


def test_anomaly_cell_parser():
    assert fs.anomaly_cell("t00-anom-0003@2,7") == (2, 7)
    assert fs.anomaly_cell("t00-norm-0003") is None


# --- manifests ---------------------------------------------------------------


def test_manifest_roundtrip(tmp_path):
    entries = [
        fs.ManifestEntry("a", fs.Path("a-train.cadf"), fs.Path("a-test.cadf")),
        fs.ManifestEntry("b", fs.Path("b-train.cadf"), fs.Path("b-test.cadf")),
    ]
    mp = tmp_path / "manifest.json"
    fs.write_manifest(mp, entries)
    back = fs.load_manifest(mp)
    assert [e.task_id for e in back] == ["a", "b"]
    assert back[0].train_file == tmp_path / "a-train.cadf"


def test_materialize_synthetic(tmp_path):
    mp = fs.materialize_synthetic(SPEC, tmp_path / "synth")
    entries = fs.load_manifest(mp)
    assert [e.task_id for e in entries] == ["t00", "t01"]
    ds = fs.read_feature_file(entries[0].train_file)
    assert ds.split == fs.SPLIT_TRAIN and len(ds) == 6
    fresh = fs.generate_synthetic(SPEC)[0][0]
    assert fs.datasets_equal(ds, fresh)
