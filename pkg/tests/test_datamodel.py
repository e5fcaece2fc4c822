import os
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from glomseg.datamodel import (Approach, DataError, DatasetManifest, ImagePool, InvalidSampleError,
                               ManifestEntry, MissingDomainError, PatchSample, compose_training_set, ingest,
                               interleave_by_class, load_mask, load_sample, pool_feed, resize_mask,
                               split_by_patient, summary_table)
from glomseg.synth import emit_partial_dataset, random_phantom_spec
from glomseg.taxonomy import TAXONOMY


def _entries(n_patients, per_patient, task="GS", species="rodent"):
    return [ManifestEntry(f"/x/{p}_{k}.png", f"/x/{p}_{k}_mask.png", task, f"P{p:03d}", species)
            for p in range(n_patients) for k in range(per_patient)]


class Item:
    def __init__(self, uid, task):
        self.uid, self.task = uid, task

    def __repr__(self):
        return f"Item({self.uid}, {self.task})"


# ---- splitting

def test_split_ten_uniform_patients():
    m = DatasetManifest(_entries(10, 3))
    s = split_by_patient(m, (0.6, 0.1, 0.3), seed=7)
    assert (len(s.train), len(s.val), len(s.test)) == (6, 1, 3)


def test_split_deterministic():
    m = DatasetManifest(_entries(10, 3) + _entries(10, 2, task="HS"))
    assert split_by_patient(m, seed=7) == split_by_patient(m, seed=7)


def test_split_empty_manifest():
    with pytest.raises(ValueError):
        split_by_patient(DatasetManifest([]))


def test_split_bad_ratios():
    with pytest.raises(ValueError):
        split_by_patient(DatasetManifest(_entries(3, 1)), (0.5, 0.5, 0.5))


def test_split_single_patient_class_warns():
    m = DatasetManifest(_entries(10, 2) + _entries(1, 4, task="AH"))
    s = split_by_patient(m, seed=1)
    assert any("AH" in w for w in s.warnings)


def _table_like_manifest(seed=0):
    """Per-class counts of the dataset distribution table scaled by 1/10 over 120 patients."""
    counts = {"Cap": 798, "Tuft": 554, "Mes": 554, "Pod": 116, "Mec": 79, "AH": 9, "CD": 6, "GS": 75,
              "HS": 23, "ME": 23, "ML": 7, "MA": 26, "NS": 57, "SS": 27}
    rng = np.random.default_rng(seed)
    entries = []
    for code, n in counts.items():
        sp = "human" if code == "ME" else "rodent"
        pats = rng.integers(0, 120, size=n)
        entries += [ManifestEntry(f"/x/{code}{i}.png", f"/x/{code}{i}_mask.png", code, f"P{p:03d}", sp)
                    for i, p in enumerate(pats)]
    return DatasetManifest(entries)


def test_split_tracks_ratio_per_class():
    m = _table_like_manifest()
    s = split_by_patient(m, seed=3)
    for code, fracs in s.class_fractions.items():
        if sum(1 for e in m if e.task_code == code) >= 50:
            assert all(abs(f - r) <= 0.10 for f, r in zip(fracs, (0.6, 0.1, 0.3))), (code, fracs)
    tissue = {c.code for c in TAXONOMY.tissue()}
    train, val, test = s.apply(m.where(tasks=tissue))
    total = len(train) + len(val) + len(test)
    for part, target in ((train, 0.6), (val, 0.1), (test, 0.3)):
        assert abs(len(part) / total - target) <= 0.10


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 30), st.sampled_from(["GS", "HS", "Cap"])), min_size=1, max_size=120),
       st.integers(0, 1000))
def test_split_patient_disjoint(rows, seed):
    m = DatasetManifest([ManifestEntry(f"{i}.png", f"{i}_m.png", t, f"P{p}", "rodent")
                         for i, (p, t) in enumerate(rows)])
    s = split_by_patient(m, seed=seed, candidates=4)
    assert not (s.train & s.val) and not (s.train & s.test) and not (s.val & s.test)
    assert s.train | s.val | s.test == m.patients


# ---- image pool

def test_pool_56_samples_14_batches():
    stream = [Item(i, i % 14) for i in range(56)]
    batches = pool_feed(ImagePool(14, 4, seed=0), stream)
    assert len(batches) == 14
    assert all(len(b) == 4 for b in batches)
    assert Counter(x.uid for b in batches for x in b) == Counter(range(56))


def test_pool_never_surpassed_until_flush():
    pool = ImagePool(14, 4, seed=0)
    assert all(pool.push(Item(i, 0)) is None for i in range(4))
    assert len(pool.flush()) == 4


def test_pool_drop_last():
    assert pool_feed(ImagePool(14, 4, seed=0, drop_last=True), [Item(i, 0) for i in range(4)]) == []


def test_pool_deterministic():
    stream = [Item(i, i % 5) for i in range(37)]
    a = [[x.uid for x in b] for b in pool_feed(ImagePool(5, 4, seed=11), stream)]
    b = [[x.uid for x in b] for b in pool_feed(ImagePool(5, 4, seed=11), stream)]
    assert a == b


def test_pool_rejects_foreign_task():
    pool = ImagePool(5, 4, tasks=[0, 1])
    with pytest.raises(InvalidSampleError):
        pool.push(Item(0, 7))


def test_pool_capacity_precondition():
    with pytest.raises(ValueError):
        ImagePool(4, 4)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(0, 200), capacity=st.integers(5, 20), seed=st.integers(0, 10**6))
def test_pool_conservation_and_liveness(n, capacity, seed):
    pool = ImagePool(capacity, 4, seed=seed)
    emitted = []
    for i in range(n):
        before = len(pool)
        batch = pool.push(Item(i, 0))
        if batch is not None:
            assert before + 1 > 4
            assert len(batch) == 4
            emitted.append(batch)
        assert len(pool) <= capacity
    rest = pool.flush()
    if rest:
        assert len(rest) <= 4
        emitted.append(rest)
    assert sorted(x.uid for b in emitted for x in b) == list(range(n))


def test_interleave_round_robin():
    items = [Item(i, 0) for i in range(6)] + [Item(10 + i, 1) for i in range(2)]
    stream = interleave_by_class(items, np.random.default_rng(0))
    assert [x.task for x in stream[:4]] == [0, 1, 0, 1]
    assert sorted(x.uid for x in stream) == sorted(x.uid for x in items)


# ---- composition of transfer training sets

@pytest.fixture
def domains():
    tissue = _entries(3, 2, task="Cap") + _entries(3, 2, task="Tuft")
    rodent = DatasetManifest(tissue + _entries(4, 2, task="GS") + _entries(2, 2, task="AH"))
    human = DatasetManifest(_entries(3, 1, task="GS", species="human") + _entries(2, 1, task="Cap", species="human")
                            + _entries(2, 1, task="ME", species="human"))
    return {"rodent": rodent, "human": human}


def test_compose_missing_domain(domains):
    with pytest.raises(MissingDomainError):
        compose_training_set({"rodent": domains["rodent"]}, "H2H")


def test_compose_h2h(domains):
    m = compose_training_set(domains, Approach.H2H)
    assert m.tasks == {"GS", "ME"} and {e.species for e in m} == {"human"}


def test_compose_r2h(domains):
    m = compose_training_set(domains, "R2H")
    assert m.tasks == {"GS", "AH"} and {e.species for e in m} == {"rodent"}


def test_compose_rh2h(domains):
    m = compose_training_set(domains, "RH2H")
    assert len(m) == 12 + 5
    assert not m.tasks & {c.code for c in TAXONOMY.tissue()}


def test_compose_rh2h_t(domains):
    lesions = compose_training_set(domains, "RH2H")
    m = compose_training_set(domains, "RH2H_T")
    assert {"Cap", "Tuft"} <= m.tasks
    assert set(lesions.entries) < set(m.entries)


# ---- files

def test_manifest_round_trip(tmp_path):
    m = emit_partial_dataset([random_phantom_spec(s, 64) for s in range(6)], ["GS", "Cap"], 3, tmp_path / "d")
    m.norm_mean, m.norm_std = (0.5, 0.4, 0.3), (0.2, 0.2, 0.2)
    path = tmp_path / "m.tsv"
    m.save(path)
    text = path.read_text()
    assert text.startswith("# schema_version\t1\n# taxonomy_fingerprint\t")
    assert "image_path\tmask_path\ttask_code\tpatient_id\tspecies" in text
    back = DatasetManifest.load(path)
    assert back.fingerprint == m.fingerprint
    assert back.norm_mean == m.norm_mean
    assert [os.path.realpath(e.image_path) for e in back] == [os.path.realpath(e.image_path) for e in m]
    back.validate()


def test_manifest_taxonomy_mismatch():
    m = DatasetManifest(_entries(1, 1), taxonomy_fingerprint="deadbeef")
    with pytest.raises(DataError, match="taxonomy"):
        m.validate(check_files=False)


def test_mask_decoding_tolerates_any_nonzero(tmp_path):
    arr = np.array([[0, 1], [128, 255]], dtype=np.uint8)
    Image.fromarray(arr).save(tmp_path / "m.png")
    assert load_mask(tmp_path / "m.png").tolist() == [[False, True], [True, True]]


def test_resize_mask_stays_binary():
    m = np.zeros((64, 64), bool)
    m[10:30, 5:50] = True
    r = resize_mask(m, 512)
    assert r.dtype == bool and r.shape == (512, 512)
    assert abs(r.mean() - m.mean()) < 0.01


def test_load_sample_resizes_to_512(tmp_path):
    m = emit_partial_dataset([random_phantom_spec(0, 64)], ["Cap"], 3, tmp_path)
    s = load_sample(m.entries[0])
    assert isinstance(s, PatchSample)
    assert s.image.shape == (512, 512, 3) and s.mask.shape == (512, 512)
    assert s.task == TAXONOMY.index_of("Cap")


def test_ingest_synthetic_tree(tmp_path):
    emitted = emit_partial_dataset([random_phantom_spec(s, 64) for s in range(56)], TAXONOMY.codes, 10, tmp_path)
    res = ingest(tmp_path)
    assert len(res.manifest) == 56 and not res.warnings
    assert res.manifest.fingerprint == DatasetManifest(
        sorted(emitted.entries, key=lambda e: (e.species, e.task_code, e.patient_id, e.image_path))).fingerprint
    table = summary_table(res.manifest)
    assert "Rodent" in table and "Human" in table


def test_ingest_orphan(tmp_path):
    emit_partial_dataset([random_phantom_spec(s, 64) for s in range(56)], TAXONOMY.codes, 10, tmp_path)
    victim = next(p for p in sorted(tmp_path.rglob("*_mask.png")))
    victim.unlink()
    res = ingest(tmp_path)
    assert len(res.manifest) == 55
    assert len(res.warnings) == 1 and "orphan" in res.warnings[0]


def test_ingest_empty_dir(tmp_path):
    with pytest.raises(DataError):
        ingest(tmp_path)


def test_ingest_malformed_mask(tmp_path):
    emit_partial_dataset([random_phantom_spec(0, 64)], ["GS"], 3, tmp_path)
    next(tmp_path.rglob("*_mask.png")).write_bytes(b"not a png")
    with pytest.raises(DataError, match="decode"):
        ingest(tmp_path)
