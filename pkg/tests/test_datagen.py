import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reba.datagen import (
    HC,
    TEST,
    TRAIN,
    Atlas,
    DatasetConfig,
    DiseaseConfig,
    GenerationError,
    IntensityParams,
    NetworkMap,
    SubjectRecord,
    brain_mask,
    generate_cohort,
    generate_subject_volume,
    load_dataset,
    make_synthetic_atlas,
)


def small_cohort(**kw):
    base = dict(
        shape=[16, 16, 16],
        n_regions=4,
        n_networks=2,
        n_hc_train=10,
        n_hc_test=6,
        diseases=[DiseaseConfig("PD", [2, 3], n=40), DiseaseConfig("AD", [4], n=5)],
    )
    base.update(kw)
    return DatasetConfig(**base)


def test_atlas_regions_are_all_present(small_atlas):
    atlas, nets = small_atlas
    counts = np.bincount(atlas.labels.ravel(), minlength=5)
    assert set(np.unique(atlas.labels)) == {0, 1, 2, 3, 4}
    assert (counts[1:] > 0).all()
    assert nets.n_networks == 2 and sorted(nets.assignments) == [1, 2, 3, 4]


def test_atlas_tiles_the_ellipsoid_foreground(small_atlas):
    atlas, _ = small_atlas
    np.testing.assert_array_equal(atlas.labels > 0, brain_mask(atlas.shape))
    assert not brain_mask(atlas.shape)[0, 0, 0]


def test_single_region_covers_foreground():
    atlas, nets = make_synthetic_atlas((8, 8, 8), 1, 1, 0)
    np.testing.assert_array_equal(atlas.labels == 1, brain_mask((8, 8, 8)))
    assert nets.groups() == [[1]]


def test_atlas_is_deterministic():
    a1, n1 = make_synthetic_atlas((16, 12, 10), 6, 3, 3)
    a2, n2 = make_synthetic_atlas((16, 12, 10), 6, 3, 3)
    np.testing.assert_array_equal(a1.labels, a2.labels)
    assert n1.assignments == n2.assignments


@given(st.integers(2, 10), st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_network_map_is_total_with_nonempty_networks(R, K, seed):
    K = min(K, R)
    atlas, nets = make_synthetic_atlas((10, 10, 10), R, K, seed)
    assert sorted(nets.assignments) == list(range(1, R + 1))
    assert all(nets.members(k) for k in range(1, K + 1))
    assert (np.bincount(atlas.labels.ravel(), minlength=R + 1)[1:] > 0).all()


@pytest.mark.parametrize(
    "shape,R,K",
    [((7, 16, 16), 4, 2), ((16, 16), 4, 2), ((16, 16, 16), 4, 5), ((16, 16, 16), 0, 1), ((8, 8, 8), 10**6, 1)],
)
def test_atlas_rejects_invalid_requests(shape, R, K):
    with pytest.raises(GenerationError):
        make_synthetic_atlas(shape, R, K, 0)


def test_atlas_and_network_invariants_are_enforced():
    with pytest.raises(GenerationError):
        Atlas(np.array([[[0, 1, 3]]]), 3)  # region 2 empty
    with pytest.raises(GenerationError):
        Atlas(np.array([[[0, 1, 5]]]), 2)
    with pytest.raises(GenerationError):
        NetworkMap({1: 1, 2: 1}, 2)  # network 2 empty
    with pytest.raises(GenerationError):
        NetworkMap({1: 1, 3: 1}, 1)  # region 2 unassigned


def _record(ages):
    return SubjectRecord("s", float(np.mean(ages)), HC, TRAIN, np.asarray(ages, float))


def test_equal_planted_ages_give_equal_region_means(small_atlas):
    atlas, _ = small_atlas
    vol = generate_subject_volume(atlas, _record([40.0] * 4), IntensityParams(noise_sigma=0.0), 0)
    means = [vol[atlas.labels == r].mean() for r in range(1, 5)]
    np.testing.assert_allclose(means, means[0], atol=1e-6)
    assert (vol[atlas.labels == 0] == 0).all()


def test_twenty_year_gap_lowers_intensity_by_closed_form(small_atlas):
    atlas, _ = small_atlas
    params = IntensityParams(base_intensity=1.0, decay_rate=0.01, noise_sigma=0.0)
    vol = generate_subject_volume(atlas, _record([60.0, 40.0, 50.0, 50.0]), params, 0)
    gap = vol[atlas.labels == 2].mean() - vol[atlas.labels == 1].mean()
    assert gap == pytest.approx(20 * 0.01, abs=1e-6)


@given(st.lists(st.floats(0, 100), min_size=4, max_size=4))
def test_noise_free_intensity_law_is_exact_and_invertible(small_atlas, ages):
    atlas, _ = small_atlas
    params = IntensityParams(noise_sigma=0.0)
    vol = generate_subject_volume(atlas, _record(ages), params, 1)
    for r, age in enumerate(ages, start=1):
        mean = float(vol[atlas.labels == r].mean())
        assert mean == pytest.approx(float(params.mean_intensity(age)), abs=1e-6)
        assert float(params.age_from_intensity(params.mean_intensity(age))) == pytest.approx(age, abs=1e-9)


def test_subject_volume_is_seeded(small_atlas):
    atlas, _ = small_atlas
    rec = _record([30, 40, 50, 60])
    a = generate_subject_volume(atlas, rec, IntensityParams(), 5)
    b = generate_subject_volume(atlas, rec, IntensityParams(), 5)
    np.testing.assert_array_equal(a, b)
    assert np.isfinite(a).all()
    with pytest.raises(GenerationError):
        generate_subject_volume(atlas, _record([30, 40]), IntensityParams(), 5)


def test_default_cohort_sizes_and_disjoint_splits():
    cfg = DatasetConfig(shape=[8, 8, 8], n_regions=8, n_networks=3)
    manifest, vols = generate_cohort(cfg)
    assert len(manifest.subjects) == 100 + 50 + 30 + 30
    train, test = set(manifest.ids(split=TRAIN)), set(manifest.ids(split=TEST))
    assert not train & test
    assert all(manifest.record(i).cohort == HC for i in train)
    assert set(vols) == train | test


def test_disease_offset_lands_only_on_prior_regions():
    manifest, _ = generate_cohort(small_cohort(hc_jitter=4.0))
    pd_subjects = manifest.select(cohort="disease:PD")
    excess = np.mean([s.planted_regional_age - s.chronological_age for s in pd_subjects], axis=0)
    # network/region jitter is zero-mean uniform (half-width 4): 40 subjects -> se ~ 0.4
    np.testing.assert_allclose(excess[[1, 2]], 8.0, atol=1.5)
    np.testing.assert_allclose(excess[[0, 3]], 0.0, atol=1.5)


def test_hc_planted_ages_respect_jitter_bound_and_zero_jitter():
    manifest, _ = generate_cohort(small_cohort(hc_jitter=6.0))
    for s in manifest.select(cohort=HC):
        assert np.all(np.abs(s.planted_regional_age - s.chronological_age) <= 6.0 + 1e-9)
        assert 20.0 <= s.chronological_age <= 80.0
    manifest, _ = generate_cohort(small_cohort(hc_jitter=0.0))
    for s in manifest.select(cohort=HC):
        np.testing.assert_array_equal(s.planted_regional_age, s.chronological_age)


def test_offset_outside_region_range_names_the_disease():
    cfg = small_cohort(diseases=[DiseaseConfig("XD", [5])])
    with pytest.raises(GenerationError, match="XD"):
        generate_cohort(cfg)


def test_cohort_generation_is_bit_identical_and_roundtrips(tmp_path):
    cfg = small_cohort()
    m1, v1 = generate_cohort(cfg, tmp_path / "a")
    m2, v2 = generate_cohort(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()
    for sid in v1:
        assert (tmp_path / "a" / "volumes" / f"{sid}.vol").read_bytes() == (tmp_path / "b" / "volumes" / f"{sid}.vol").read_bytes()
    ds = load_dataset(tmp_path / "a")
    assert ds.manifest.ids() == m1.ids()
    for s in m1.subjects:
        loaded = ds.manifest.record(s.id)
        assert loaded.chronological_age == s.chronological_age
        np.testing.assert_array_equal(loaded.planted_regional_age, s.planted_regional_age)
        np.testing.assert_array_equal(ds.volume(s.id), v1[s.id])
    assert set(ds.priors) == {"PD", "AD"} and ds.priors["PD"].regions == (2, 3)


def test_unwritable_output_dir_is_a_generation_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(GenerationError):
        generate_cohort(small_cohort(), blocker / "sub")
