import functools
import itertools

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from reba import teacher as T
from reba.backbone import OptimizerConfig, checksum, reference_backbone
from reba.datagen import HC, TEST, TRAIN, Atlas, DatasetConfig, DiseaseConfig, SubjectRecord, generate_cohort, make_synthetic_atlas
from reba.parcellate import NoiseSpec, RegionMask, one_hot

SHAPE = (16, 16, 16)


def _records(n, split=TRAIN, cohort=HC):
    return [SubjectRecord(f"s{i}", 30.0 + i, cohort, split, np.full(4, 30.0 + i)) for i in range(n)]


def constant_teacher(bias=50.0):
    model = reference_backbone(SHAPE, seed=0, age_bias=bias)
    with torch.no_grad():
        model.age_head.weight.zero_()
    return model.freeze()


class MeanIntensityTeacher(reference_backbone(SHAPE).__class__):
    """Frozen analytic teacher: age is an affine function of mean intensity in a fixed voxel set."""

    def __init__(self, weights, bias=0.0):
        super().__init__(SHAPE, d_m=4)
        self.register_buffer("w", torch.as_tensor(weights, dtype=torch.float32))
        with torch.no_grad():
            self.age_head.bias.fill_(bias)
        self.freeze()

    def embed(self, x):
        return (x * self.w).flatten(1).sum(1, keepdim=True).repeat(1, 4)

    def head(self, e):
        return self.age_head.bias + e[:, 0]


def test_teacher_loss_examples():
    assert T.teacher_loss([50, 52], [51, 50]) == pytest.approx(1.5)
    assert T.teacher_loss([40, 60], [40, 60]) == 0.0


@pytest.mark.parametrize(
    "d_sign,rho_sign", list(itertools.product((-1.0, 0.0, 1.0), repeat=2)), ids=lambda v: str(v)
)
def test_correction_truth_table(d_sign, rho_sign):
    y_init = np.array([[50.0]])
    y_whole = np.array([50.0 + 5.0 * d_sign])
    rho = np.array([2.0 * rho_sign])
    out = T.apply_correction(y_whole, y_init, rho, alpha=1.0)
    applied = d_sign * rho_sign > 0
    assert out[0, 0] == (50.0 + rho[0] if applied else 50.0)


def test_correction_worked_examples():
    assert T.apply_correction([50.0], [[45.0]], [2.0], 1.0)[0, 0] == 47.0
    assert T.apply_correction([50.0], [[55.0]], [2.0], 1.0)[0, 0] == 55.0
    assert T.apply_correction([50.0], [[45.0]], [0.0], 1.0)[0, 0] == 45.0
    with pytest.raises(ValueError):
        T.apply_correction([50.0], [[45.0]], [1.0], -1.0)


@given(
    st.lists(st.floats(0, 100), min_size=1, max_size=5),
    st.lists(st.floats(-5, 5), min_size=3, max_size=3),
    st.floats(0, 3),
    st.integers(0, 2**31 - 1),
)
def test_soft_label_dichotomy_and_alpha_zero(whole, rho, alpha, seed):
    rng = np.random.default_rng(seed)
    whole = np.asarray(whole)
    init = rng.uniform(0, 100, (len(whole), 3))
    rho = np.asarray(rho)
    soft = T.apply_correction(whole, init, rho, alpha)
    shifted = init + alpha * rho
    assert np.all((soft == init) | (soft == shifted))
    np.testing.assert_array_equal(T.apply_correction(whole, init, rho, 0.0), init)


def test_initial_reba_with_full_mask_equals_whole_prediction():
    teacher = reference_backbone(SHAPE, seed=0, age_bias=50, age_scale=10).freeze()
    vol = np.random.default_rng(0).random(SHAPE).astype(np.float32)
    full = np.ones(SHAPE, bool)
    y = T.initial_reba(teacher, vol, [RegionMask(1, full, full)], NoiseSpec(0.0))
    assert y[0] == pytest.approx(T.predict_whole(teacher, vol[None])[0], abs=1e-4)


def test_constant_teacher_gives_flat_reba_and_zero_rho(small_atlas):
    atlas, _ = small_atlas
    teacher = constant_teacher(37.0)
    masks = one_hot(atlas)
    vols = np.random.default_rng(1).random((3, *SHAPE)).astype(np.float32)
    np.testing.assert_allclose(T.initial_reba(teacher, vols[0], masks, NoiseSpec()), 37.0)
    rho = T.correction_vector(teacher, _records(3), vols, masks, NoiseSpec())
    np.testing.assert_array_equal(rho.rho, 0.0)
    assert rho.n_subjects_used == 3


def test_single_signal_region_dominates_rho(small_atlas):
    atlas, _ = small_atlas
    masks = one_hot(atlas)
    # the teacher only looks at region 2
    weights = -100.0 * masks[1].mask / masks[1].mask.sum()
    teacher = MeanIntensityTeacher(weights, bias=100.0)
    vols = 0.5 + 0.05 * np.random.default_rng(2).random((4, *SHAPE)).astype(np.float32)
    vols[:, atlas.labels == 0] = 0
    rho = T.correction_vector(teacher, _records(4), vols, masks, NoiseSpec(0.1, 0)).rho
    assert abs(rho[1]) > 10 * np.max(np.abs(np.delete(rho, 1)))
    # closed form: rho = -100 * mean intensity of region 2 (occluding noise has mean ~0)
    expected = -100.0 * vols[:, masks[1].mask].mean()
    assert rho[1] == pytest.approx(expected, abs=1.0)


def test_rho_is_invariant_to_head_bias_shift(small_atlas):
    atlas, _ = small_atlas
    masks = one_hot(atlas)
    vols = np.random.default_rng(3).random((3, *SHAPE)).astype(np.float32)
    rhos = []
    for shift in (0.0, 7.5):
        teacher = reference_backbone(SHAPE, seed=0, age_bias=50 + shift, age_scale=10).freeze()
        rhos.append(T.correction_vector(teacher, _records(3), vols, masks, NoiseSpec(0.1, 4)).rho)
    np.testing.assert_allclose(rhos[0], rhos[1], atol=1e-4)


def test_rho_is_deterministic(small_atlas):
    atlas, _ = small_atlas
    masks = one_hot(atlas)
    teacher = reference_backbone(SHAPE, seed=0, age_scale=10).freeze()
    vols = np.random.default_rng(4).random((2, *SHAPE)).astype(np.float32)
    a = T.correction_vector(teacher, _records(2), vols, masks, NoiseSpec(0.1, 1)).rho
    b = T.correction_vector(teacher, _records(2), vols, masks, NoiseSpec(0.1, 1)).rho
    np.testing.assert_array_equal(a, b)


def test_training_split_must_be_healthy_training_subjects():
    vols = np.zeros((2, *SHAPE), np.float32)
    factory = functools.partial(reference_backbone, SHAPE)
    with pytest.raises(T.CohortError, match="offending"):
        T.train_teacher(_records(2, cohort="disease:PD"), vols, factory, OptimizerConfig(epochs=1), 0)
    with pytest.raises(T.CohortError):
        T.train_teacher(_records(2, split=TEST), vols, factory, OptimizerConfig(epochs=1), 0)
    with pytest.raises(T.CohortError, match="empty"):
        T.correction_vector(constant_teacher(), [], vols[:0], [], NoiseSpec())


def test_unfrozen_teacher_is_rejected(small_atlas):
    atlas, _ = small_atlas
    with pytest.raises(ValueError, match="frozen"):
        T.initial_reba(reference_backbone(SHAPE), np.zeros(SHAPE, np.float32), one_hot(atlas), NoiseSpec())


@pytest.fixture(scope="module")
def trained_small():
    cfg = DatasetConfig(shape=list(SHAPE), n_regions=4, n_networks=2, n_hc_train=40, n_hc_test=10,
                        noise_sigma=0.0, diseases=[DiseaseConfig("PD", [1], n=4)])
    manifest, vols = generate_cohort(cfg)
    train = manifest.select(split=TRAIN)
    x = np.stack([vols[r.id] for r in train])
    factory = functools.partial(reference_backbone, SHAPE, 32, 0)
    torch.set_num_threads(1)
    model, hist = T.train_teacher(train, x, factory, OptimizerConfig(lr=1e-3, epochs=60), seed=0)
    return manifest, vols, model, hist


def test_noise_free_teacher_reaches_desk_scale_accuracy(trained_small):
    manifest, vols, model, hist = trained_small
    assert model.frozen
    train = manifest.select(split=TRAIN)
    pred = T.predict_whole(model, np.stack([vols[r.id] for r in train]))
    assert T.teacher_loss(pred, [r.chronological_age for r in train]) <= 3.0
    assert hist[-1]["loss"] < hist[0]["loss"]


def test_soft_labels_cover_every_subject_and_leave_teacher_intact(trained_small, tmp_path):
    manifest, vols, model, _ = trained_small
    atlas, _ = make_synthetic_atlas(SHAPE, 4, 2, 0)
    masks = one_hot(atlas)
    noise = NoiseSpec(0.1, 0)
    train = manifest.select(split=TRAIN)
    x = np.stack([vols[r.id] for r in train])
    before = checksum(model)
    rho = T.correction_vector(model, train, x, masks, noise)
    table = T.soft_labels(model, train, x, masks, noise, rho, alpha=1.0)
    assert checksum(model) == before
    assert table.y_soft.shape == (len(train), 4) and np.isfinite(table.y_init).all()
    assert np.all((table.y_soft == table.y_init) | (table.y_soft == table.y_init + rho.rho))
    # cached whole-brain predictions match a fresh pass
    np.testing.assert_allclose(table.y_whole, T.predict_whole(model, x), atol=1e-4)

    everyone = manifest.subjects
    all_table = T.soft_labels(model, everyone, np.stack([vols[r.id] for r in everyone]), masks, noise, rho, 1.0)
    assert np.isfinite(all_table.y_init).all()

    table.to_csv(tmp_path / "soft_labels.csv")
    back = T.SoftLabelTable.from_csv(tmp_path / "soft_labels.csv")
    assert back.ids == table.ids
    np.testing.assert_array_equal(back.y_soft, table.y_soft)
    assert list(back.to_frame().columns[:3]) == ["id", "y_whole", "y_init_r1"]

    T.write_rho(tmp_path / "rho.json", rho, 1.0, 0.1)
    rho2, alpha, eta = T.read_rho(tmp_path / "rho.json")
    np.testing.assert_array_equal(rho2.rho, rho.rho)
    assert (alpha, eta, rho2.n_subjects_used) == (1.0, 0.1, len(train))
