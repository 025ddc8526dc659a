import filecmp
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from mitoforge.data import (
    SampleRecord,
    dataset_stats,
    dedup_exact,
    load_image,
    parse_manifest,
    save_png,
    stratified_kfold,
    synth_generate,
    write_manifest,
)
from mitoforge.errors import ContractError, ManifestError
from mitoforge.metrics import balanced_accuracy, confusion_matrix
from mitoforge.rng import rng_stream

# Per-source class counts listed for the training corpus.
CORPUS = {
    "midog2025": (10_191, 1_748),
    "amibr": (1_571, 428),
    "atnorm_br": (587, 124),
    "omg_octo": (378, 1_374),
}


def fixture_records(counts):
    return [
        SampleRecord(f"{name}/{i}.png", int(i >= n0), "d", name)
        for name, (n0, n1) in counts.items()
        for i in range(n0 + n1)
    ]


def write_csv(tmp_path, body):
    p = tmp_path / "m.csv"
    p.write_text("path,label,domain,dataset\n" + body)
    return p


# -- manifests -------------------------------------------------------------------------------------------
def test_parse_valid_manifest(tmp_path):
    p = write_csv(tmp_path, "a.png,normal,d0,s\nb.png,Atypical,d1,s\n/abs/c.png,ATYPICAL,d1,t\n")
    recs = parse_manifest(p)
    assert [r.label for r in recs] == [0, 1, 1]
    assert recs[0].path == str(tmp_path / "a.png") and recs[2].path == "/abs/c.png"


def test_parse_unknown_label_reports_line(tmp_path):
    p = write_csv(tmp_path, "a.png,normal,d0,s\nb.png,mitosis,d0,s\n")
    with pytest.raises(ManifestError, match="line 3"):
        parse_manifest(p)


def test_parse_missing_column(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("path,label,domain\na.png,normal,d0\n")
    with pytest.raises(ManifestError, match="dataset"):
        parse_manifest(p)


def test_manifest_round_trip(tmp_path):
    recs = [SampleRecord(str(tmp_path / f"{i}.png"), i % 2, f"d{i}", "s") for i in range(4)]
    write_manifest(recs, tmp_path / "out.csv", relative_to=str(tmp_path))
    assert parse_manifest(tmp_path / "out.csv") == recs


# -- dedup -----------------------------------------------------------------------------------------------
@pytest.fixture
def images(tmp_path):
    rng = rng_stream(0, "dedup")
    base = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    other = base.copy()
    other[0, 0, 0] ^= 1
    paths = {}
    for name, img in [("a", base), ("b", other), ("c", base), ("d", other), ("e", base[::-1].copy())]:
        paths[name] = tmp_path / f"{name}.png"
        save_png(img, paths[name])
    return [SampleRecord(str(paths[n]), 0, "d", "s") for n in "abcde"]


def test_dedup_exact(images):
    kept, removed = dedup_exact(images)
    assert removed == 2
    assert [r.path[-5] for r in kept] == ["a", "b", "e"]


def test_dedup_idempotent(images):
    once, _ = dedup_exact(images)
    twice, removed = dedup_exact(once)
    assert twice == once and removed == 0


def test_dedup_unreadable_names_path(tmp_path):
    missing = SampleRecord(str(tmp_path / "nope.png"), 0, "d", "s")
    with pytest.raises(OSError, match="nope.png"):
        dedup_exact([missing])


# -- folds -----------------------------------------------------------------------------------------------
def records_with(n0, n1, dataset="s"):
    return [SampleRecord(f"{i}.png", int(i >= n0), "d", dataset) for i in range(n0 + n1)]


def test_kfold_round_robin_counts():
    plan = stratified_kfold(records_with(12, 4), k=4, seed=0)
    recs = records_with(12, 4)
    for f in range(4):
        labels = Counter(recs[i].label for i in plan.val_indices(f))
        assert labels == {0: 3, 1: 1}


def test_kfold_holdout_excluded():
    recs = records_with(12, 4) + records_with(5, 5, dataset="external")
    plan = stratified_kfold(recs, 4, 0, ["external"])
    assert set(plan.holdout_indices) == set(range(16, 26))
    assert not set(plan.assignments) & set(plan.holdout_indices)


def test_kfold_determinism():
    recs = records_with(40, 10)
    assert stratified_kfold(recs, 4, 3).assignments == stratified_kfold(recs, 4, 3).assignments
    assert stratified_kfold(recs, 4, 3).assignments != stratified_kfold(recs, 4, 4).assignments


def test_kfold_too_few_per_class():
    with pytest.raises(ContractError):
        stratified_kfold(records_with(10, 3), k=4)


@settings(max_examples=100, deadline=None)
@given(st.integers(4, 60), st.integers(4, 30), st.integers(0, 20), st.integers(2, 4), st.integers(0, 2**31))
def test_kfold_partition_and_stratification(n0, n1, n_hold, k, seed):
    recs = records_with(n0, n1) + records_with(n_hold, 0, dataset="ext")
    plan = stratified_kfold(recs, k, seed, ["ext"] if n_hold else [])
    folds = [set(plan.val_indices(f)) for f in range(k)]
    assert set().union(*folds) | set(plan.holdout_indices) == set(range(len(recs)))
    assert sum(map(len, folds)) + len(plan.holdout_indices) == len(recs)
    for f in range(k):
        size = len(folds[f])
        aty = sum(recs[i].label for i in folds[f])
        assert abs(aty - size * n1 / (n0 + n1)) <= 1.0 + 1e-9


# -- stats -----------------------------------------------------------------------------------------------
def test_stats_corpus_fixture():
    stats = dataset_stats(fixture_records(CORPUS))
    total = stats["total"]
    # the per-source counts sum to 16,401 / 12,727 normal; the listed corpus total is 3 lower
    assert total["total"] == 16_401
    assert total["normal"] == 12_727
    assert total["atypical"] == 3_674
    assert [stats["datasets"][n]["total"] for n in CORPUS] == [11_939, 1_999, 711, 1_752]
    assert round(stats["datasets"]["midog2025"]["atypical_fraction"], 4) == 0.1464


def test_stats_empty():
    assert dataset_stats([])["total"] == {"normal": 0, "atypical": 0, "total": 0, "atypical_fraction": 0.0}


# -- synthetic generator ---------------------------------------------------------------------------------
@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    return out, parse_manifest(synth_generate(200, 0.2, 3, 11, out))


def test_synth_label_count_and_shape(synth):
    _, recs = synth
    assert sum(r.label for r in recs) == 40
    assert load_image(recs[0].path).shape == (128, 128, 3)
    assert {r.domain for r in recs} == {"domain0", "domain1", "domain2"}


def test_synth_rounding_contract(tmp_path):
    recs = parse_manifest(synth_generate(100, 0.2, 1, 0, tmp_path))
    assert sum(r.label for r in recs) == 20


def test_synth_deterministic(tmp_path):
    a = synth_generate(6, 0.5, 2, 4, tmp_path / "a")
    b = synth_generate(6, 0.5, 2, 4, tmp_path / "b")
    for ra, rb in zip(parse_manifest(a), parse_manifest(b)):
        assert filecmp.cmp(ra.path, rb.path, shallow=False)


def dark_components(img):
    # chromatin pixels relative to the crop's own background, then blobs larger than 3 px
    g = img.astype(np.float64).mean(2)
    mask = g / np.median(g) < 0.75
    lab, n = ndimage.label(mask)
    sizes = ndimage.sum(mask, lab, range(1, n + 1)) if n else np.zeros(0)
    return int((sizes > 3).sum())


def test_synth_atypical_figures_are_fragmented(synth):
    _, recs = synth
    counts = np.array([dark_components(load_image(r.path)) for r in recs])
    y = np.array([r.label for r in recs])
    assert counts[y == 1].mean() > 2 * counts[y == 0].mean()
    pred = (counts >= 2).astype(int)
    assert balanced_accuracy(confusion_matrix(pred, y)) > 0.8


def test_synth_domain_tints_differ(synth):
    _, recs = synth
    means = {}
    for r in recs:
        means.setdefault(r.domain, []).append(load_image(r.path).reshape(-1, 3).mean(0))
    avg = {d: np.mean(v, axis=0) for d, v in means.items()}
    names = sorted(avg)
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            assert np.abs(avg[names[i]] - avg[names[j]]).max() >= 10


def test_synth_rejects_bad_arguments(tmp_path):
    with pytest.raises(ContractError):
        synth_generate(0, 0.2, 1, 0, tmp_path)
    with pytest.raises(ContractError):
        synth_generate(5, 1.0, 1, 0, tmp_path)
