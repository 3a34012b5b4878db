import numpy as np
import pytest
from scipy import stats

from centroid_uda.data import (
    GeometryParams,
    Sample,
    augment_source,
    augment_target_heavy,
    batch_at,
    generate_corpus,
    load_corpus,
    make_split,
    read_manifest,
    sample_batches,
    save_corpus,
    steps_per_epoch,
    subject_folds,
)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(5, 3)


def test_deterministic(corpus):
    again = generate_corpus(5, 3)
    assert len(again) == len(corpus)
    assert all(np.array_equal(a.image, b.image) and np.array_equal(a.label, b.label) for a, b in zip(corpus, again))
    other = generate_corpus(5, 4)
    assert not np.array_equal(other[0].image, corpus[0].image)


def test_sample_contract(corpus):
    for s in corpus:
        assert s.image.shape == (1, 64, 64) and s.image.dtype == np.float32
        assert s.image.min() == pytest.approx(0.0, abs=1e-6) and s.image.max() == pytest.approx(1.0, abs=1e-6)
        assert s.label.shape == (64, 64) and s.label.min() >= 0 and s.label.max() <= 3
        oh = s.onehot
        assert oh.shape == (4, 64, 64) and np.all(oh.sum(0) == 1)


def test_slice_stacks(corpus):
    for dom in ("source", "target", "aux"):
        for sid in range(5):
            n = sum(1 for s in corpus if s.domain_tag == dom and s.subject_id == sid)
            assert 8 <= n <= 12


def test_mid_slices_contain_all_classes(corpus):
    for sid in range(5):
        stack = [s for s in corpus if s.domain_tag == "source" and s.subject_id == sid]
        mid = stack[len(stack) // 2]
        assert set(np.unique(mid.label)) == {0, 1, 2, 3}


def test_anatomy_shared_across_domains(corpus):
    src = [s for s in corpus if s.domain_tag == "source"]
    tgt = [s for s in corpus if s.domain_tag == "target"]
    assert all(np.array_equal(a.label, b.label) for a, b in zip(src, tgt))


def test_structure_size_varies_along_stack(corpus):
    stack = [s for s in corpus if s.domain_tag == "source" and s.subject_id == 0]
    lv = [int((s.label == 2).sum()) for s in stack]
    assert max(lv) > min(lv)


def test_domain_shift_is_real(corpus):
    src = np.concatenate([s.image.ravel() for s in corpus if s.domain_tag == "source"])
    tgt = np.concatenate([s.image.ravel() for s in corpus if s.domain_tag == "target"])
    assert stats.ks_2samp(src, tgt).statistic > 0.2


def test_geometry_validation():
    with pytest.raises(ValueError):
        generate_corpus(1, 0, geometry=GeometryParams(lv_radius=(0.0, 3.0)))
    with pytest.raises(ValueError):
        generate_corpus(0, 0)
    with pytest.raises(ValueError):
        generate_corpus(1, 0, domains=("nope",))


def test_folds_partition_subjects():
    folds = subject_folds(10, 5, 1)
    allx = np.concatenate(folds)
    assert sorted(allx.tolist()) == list(range(10))
    assert all(len(f) == 2 for f in folds)


@pytest.mark.parametrize("fold", range(5))
def test_no_subject_leakage(corpus, fold):
    sp = make_split(corpus, "full", fold, 5, 0)
    train = {s.subject_id for s in sp.source_train + sp.target_train + sp.aux_train}
    test = {s.subject_id for s in sp.source_test + sp.target_test}
    assert train and test and not train & test


def test_modes(corpus):
    one = make_split(corpus, "oneshot", 0)
    few = make_split(corpus, "fewshot", 0)
    full = make_split(corpus, "full", 0)
    assert len(one.target_train) == 1
    assert len({s.subject_id for s in few.target_train}) == 1 and len(few.target_train) >= 8
    assert len(full.target_train) > len(few.target_train)
    assert any(s is one.target_train[0] for s in few.target_train)
    with pytest.raises(ValueError):
        make_split(corpus, "twoshot", 0)


def test_affine_augmentation(corpus):
    s = corpus[5]
    changed = 0
    for seed in range(30):
        a = augment_source(s, seed)
        assert a.image.min() >= 0 and a.image.max() <= 1
        assert set(np.unique(a.label)) <= {0, 1, 2, 3}
        assert a.domain_tag == s.domain_tag and a.slice_id == s.slice_id
        changed += not np.array_equal(a.image, s.image)
    assert 5 < changed < 30
    assert augment_source(s, 0, p=0.0) is s


def test_heavy_augmentation(corpus):
    s = [x for x in corpus if x.domain_tag == "target"][5]
    assert augment_target_heavy(s, 0, p=0.0) is s
    diffs = 0
    for seed in range(100):
        a = augment_target_heavy(s, seed)
        assert a.image.min() >= 0 and a.image.max() <= 1
        assert set(np.unique(a.label)) <= {0, 1, 2, 3}
        diffs += np.abs(a.image - s.image).sum() > 0
    assert diffs >= 90


def test_batch_stream(corpus):
    sp = make_split(corpus, "oneshot", 0)
    ids = set()
    for t in sample_batches(sp, 8, 1, 0, n_steps=steps_per_epoch(len(sp.source_train), 8)):
        assert t.source.images.shape == (8, 1, 64, 64) and t.source.labels.shape == (8, 64, 64)
        assert t.target.images.shape == (1, 1, 64, 64) and t.target_aug.images.shape == (1, 1, 64, 64)
        ids.add((int(t.target.subject_ids[0]), int(t.target.slice_ids[0])))
    assert len(ids) == 1
    few = make_split(corpus, "fewshot", 0)
    subj = {int(t.target.subject_ids[0]) for t in sample_batches(few, 4, 1, 0, n_steps=10)}
    assert len(subj) == 1


def test_batch_at_is_pure(corpus):
    sp = make_split(corpus, "fewshot", 1)
    a, b = batch_at(sp, 17, 4, 1, 9), batch_at(sp, 17, 4, 1, 9)
    assert np.array_equal(a.source.images, b.source.images) and np.array_equal(a.target_aug.images, b.target_aug.images)
    stream = list(sample_batches(sp, 4, 1, 9, start_step=17, n_steps=1))[0]
    assert np.array_equal(stream.source.images, a.source.images)


def test_empty_pool_is_configuration_error(corpus):
    sp = make_split(corpus, "oneshot", 0)
    sp.target_train = []
    with pytest.raises(ValueError, match="empty target"):
        batch_at(sp, 0, 4, 1, 0)


def test_corpus_round_trip(tmp_path):
    corpus = generate_corpus(2, 5)
    save_corpus(corpus, tmp_path, 5, 2, n_folds=2)
    man = read_manifest(tmp_path / "manifest.txt")
    assert man["seed"] == "5" and man["n_samples"] == str(len(corpus))
    assert man["array.images"].endswith(f"{len(corpus)}x1x64x64")
    back = load_corpus(tmp_path)
    assert all(
        np.array_equal(a.image, b.image) and np.array_equal(a.label, b.label) and a.domain_tag == b.domain_tag
        and a.subject_id == b.subject_id and a.slice_id == b.slice_id
        for a, b in zip(corpus, back)
    )
