import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffid.assembly import (
    DistributionCurve,
    assemble,
    compute_identity_cdf,
    format_cdf,
    format_stats,
    rebalance,
    stats_report,
)
from diffid.errors import IntegrityError, InvalidArgument
from diffid.filters import FilterReport
from diffid.images import load_png
from diffid.manifest import (
    DatasetManifest,
    ManifestRecord,
    dumps_manifest,
    loads_manifest,
    read_manifest,
    write_manifest,
)
from diffid.samples import GeneratedSample

from oracles import oracle_cdf, oracle_stats


def record(path, identity, source="src", score=1.0, camera=None, split="train"):
    return ManifestRecord(path=path, identity=identity, source=source, camera=camera,
                          filter_kind="reid_ctf", score=score, split=split)


def manifest_from_counts(counts, crop=(32, 16), source="src"):
    records = []
    for identity, n in counts.items():
        for k in range(n):
            records.append(record(f"{source}/{identity}/{k}.png", identity, source))
    return DatasetManifest(records=tuple(records), crop_size=crop)


def kept_sample(identity, seed, score, source="src"):
    rng = np.random.default_rng(seed)
    return GeneratedSample(image=rng.uniform(size=(3, 8, 4)), identity=identity,
                           seed=seed, source=source, scores={"reid_ctf": score})


def report_of(samples, tau=0.0):
    return FilterReport(threshold=tau, kept=list(samples), discarded=[],
                        filter_kind="reid_ctf")


# --- manifest format ---

def test_manifest_text_round_trip(tmp_path):
    m = DatasetManifest(records=(
        record("a/x/0.png", "x", camera="c0", score=0.875),
        record("a/y/0.png", "y", score=0.1234567890123456789),
    ), crop_size=(64, 32))
    text = dumps_manifest(m)
    assert text.splitlines()[0] == "diffid-manifest v1\tcrop=64x32"
    back = loads_manifest(text)
    assert back == m
    write_manifest(m, tmp_path / "m.tsv")
    assert read_manifest(tmp_path / "m.tsv") == m


def test_manifest_invariants():
    with pytest.raises(InvalidArgument):
        DatasetManifest(records=(record("p.png", ""),))
    with pytest.raises(InvalidArgument):
        DatasetManifest(records=(record("p.png", "x", score=1.5),))
    with pytest.raises(InvalidArgument):
        DatasetManifest(records=(record("p.png", "x"), record("p.png", "y")))
    with pytest.raises(InvalidArgument):
        DatasetManifest(records=(), crop_size=(0, 10))


def test_manifest_bad_header_rejected():
    with pytest.raises(IntegrityError):
        loads_manifest("something else\n")


# --- assemble ---

def test_assemble_empty_reports(tmp_path):
    m = assemble([], tmp_path / "d", crop=(8, 4))
    assert len(m) == 0
    assert dumps_manifest(m).splitlines()[0] == "diffid-manifest v1\tcrop=8x4"


def test_assemble_writes_files_and_records(tmp_path):
    samples = [kept_sample("a", 1, 0.9), kept_sample("a", 2, 0.8), kept_sample("b", 3, 0.7)]
    m = assemble([report_of(samples)], tmp_path / "d", crop=(8, 4))
    assert len(m) == 3
    assert m.identities == ("a", "b")
    for rec in m.records:
        img = load_png(tmp_path / "d" / rec.path)
        assert img.shape == (3, 8, 4)
        assert 0.0 <= rec.score <= 1.0


def test_assemble_idempotent_rerun(tmp_path):
    samples = [kept_sample("a", 5, 0.6), kept_sample("b", 6, 0.4)]
    m1 = assemble([report_of(samples)], tmp_path / "d", crop=(8, 4))
    m2 = assemble([report_of(samples)], tmp_path / "d", crop=(8, 4))
    assert dumps_manifest(m1) == dumps_manifest(m2)


def test_assemble_order_insensitive(tmp_path):
    samples = [kept_sample("a", 5, 0.6), kept_sample("b", 6, 0.4), kept_sample("a", 7, 0.2)]
    m1 = assemble([report_of(samples)], tmp_path / "d1", crop=(8, 4))
    m2 = assemble([report_of(list(reversed(samples)))], tmp_path / "d2", crop=(8, 4))
    assert dumps_manifest(m1) == dumps_manifest(m2)


def test_assemble_path_collision(tmp_path):
    twin_a = kept_sample("a", 9, 0.5)
    twin_b = kept_sample("a", 9, 0.6)  # same identity+seed -> same sample_id
    with pytest.raises(IntegrityError):
        assemble([report_of([twin_a, twin_b])], tmp_path / "d", crop=(8, 4))


# --- identity CDF ---

def test_cdf_hand_case():
    m = manifest_from_counts({"a": 1, "b": 2, "c": 3})
    curve = compute_identity_cdf(m, [2])
    assert curve.points[0] == (2.0, pytest.approx(100.0 / 3.0))


def test_cdf_endpoints():
    m = manifest_from_counts({"a": 1, "b": 2, "c": 3})
    curve = compute_identity_cdf(m, [1, 4])
    assert curve.points[0] == (1.0, 0.0)
    assert curve.points[-1] == (4.0, 100.0)


def test_cdf_empty_manifest_rejected():
    with pytest.raises(InvalidArgument):
        compute_identity_cdf(DatasetManifest(), [1])


def test_curve_invariants_enforced():
    with pytest.raises(InvalidArgument):
        DistributionCurve(points=((1, 50.0), (2, 20.0)))
    with pytest.raises(InvalidArgument):
        DistributionCurve(points=((1, 120.0),))


@settings(max_examples=100)
@given(counts=st.dictionaries(st.text("abcdefgh", min_size=1, max_size=3),
                              st.integers(1, 40), min_size=1, max_size=12),
       thresholds=st.lists(st.integers(0, 50), min_size=1, max_size=8))
def test_cdf_matches_oracle(counts, thresholds):
    m = manifest_from_counts(counts)
    curve = compute_identity_cdf(m, thresholds)
    assert [(x, pytest.approx(y)) for x, y in oracle_cdf(m.records, thresholds)] \
        == list(curve.points)
    ys = [y for _, y in curve.points]
    assert ys == sorted(ys)


def test_cdf_export_format():
    m = manifest_from_counts({"a": 2, "b": 5})
    text = format_cdf(compute_identity_cdf(m, [1, 3, 6]))
    lines = text.strip().splitlines()
    assert len(lines) == 3
    x, y = lines[1].split("\t")
    assert float(x) == 3.0 and float(y) == 50.0


# --- stats ---

def test_stats_hand_range_case():
    m = manifest_from_counts({"a": 2, "b": 2})
    stats = stats_report(m, count_range=(1, 2), above=1)
    assert stats.share_in_range == 100.0
    assert stats.share_above == 100.0
    assert stats.images == 4 and stats.identities == 2
    assert stats.mean_per_identity == 2.0


@settings(max_examples=60, deadline=None)
@given(counts=st.dictionaries(st.text("abcdefgh", min_size=1, max_size=3),
                              st.integers(1, 60), min_size=1, max_size=15),
       lo=st.integers(0, 30), span=st.integers(0, 40), above=st.integers(0, 60),
       seed=st.integers(0, 100))
def test_stats_match_bruteforce_groupby(counts, lo, span, above, seed):
    # spread identities over two sources
    rng = np.random.default_rng(seed)
    records = []
    for identity, n in counts.items():
        source = "s1" if rng.random() < 0.5 else "s2"
        for k in range(n):
            records.append(record(f"{source}/{identity}/{k}.png", identity, source))
    m = DatasetManifest(records=tuple(records), crop_size=(32, 16))
    stats = stats_report(m, count_range=(lo, lo + span), above=above)
    expected = oracle_stats(m.records, (lo, lo + span), above)
    assert stats.images == expected["images"]
    assert stats.identities == expected["identities"]
    assert stats.mean_per_identity == pytest.approx(expected["mean"])
    assert stats.share_in_range == pytest.approx(expected["share_in_range"])
    assert stats.share_above == pytest.approx(expected["share_above"])
    assert stats.per_source == {k: tuple(v) for k, v in sorted(expected["per_source"].items())}


def test_stats_text_report_keys():
    m = manifest_from_counts({"a": 3, "b": 1})
    text = format_stats(stats_report(m))
    for key in ("images=", "scene=", "person_ids=", "labeled=", "environment=",
                "crop_size=", "mean_images_per_identity="):
        assert key in text


# --- rebalance ---

def test_rebalance_downsamples_by_score(tmp_path):
    records = tuple(record(f"s/a/{k}.png", "a", score=k / 10.0) for k in range(5))
    m = DatasetManifest(records=records, crop_size=(8, 4))
    result = rebalance(m, max_per_id=3, min_per_id=0, seed=0)
    kept_scores = sorted(r.score for r in result.manifest.records)
    assert kept_scores == [0.2, 0.3, 0.4]  # the 3 highest-scoring images


def test_rebalance_noop_and_unconstrained():
    m = manifest_from_counts({"a": 2, "b": 3})
    assert rebalance(m, max_per_id=3, min_per_id=0).manifest == m
    assert rebalance(m, max_per_id=None, min_per_id=0).manifest == m


def test_rebalance_deficiency_report():
    m = manifest_from_counts({"a": 2, "b": 8})
    result = rebalance(m, max_per_id=5, min_per_id=4, seed=1)
    assert result.deficiencies == {"a": 2}
    counts = result.manifest.identity_counts()
    assert counts == {"a": 2, "b": 5}


def test_rebalance_validation():
    m = manifest_from_counts({"a": 1})
    with pytest.raises(InvalidArgument):
        rebalance(m, max_per_id=1, min_per_id=3)


@settings(max_examples=50)
@given(counts=st.dictionaries(st.text("abcd", min_size=1, max_size=2),
                              st.integers(1, 20), min_size=1, max_size=6),
       max_per=st.integers(1, 25), seed=st.integers(0, 50))
def test_rebalance_never_increases_or_drops(counts, max_per, seed):
    m = manifest_from_counts(counts)
    result = rebalance(m, max_per_id=max_per, min_per_id=0, seed=seed)
    new_counts = result.manifest.identity_counts()
    assert set(new_counts) == set(counts)  # min=0 never drops an identity
    for identity, n in counts.items():
        assert new_counts[identity] == min(n, max_per)
