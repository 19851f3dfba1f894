import json

import numpy as np
import pytest

import patchsim as ps
from patchsim import dataset as ds
from patchsim import distort as dt
from patchsim.errors import ConfigurationError, MissingLabelError
from patchsim.imagecore import Rng


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    corpus = root / "corpus"
    ps.synthesize_corpus(corpus, count=3, height=128, width=128, seed=9)
    bank = dt.sample_distortion_bank(8, 12, Rng(42))
    out = root / "data"
    ds.build_2afc_dataset(corpus, bank, 25, 7, out, n_sentinels=15)
    ds.build_jnd_dataset(corpus, bank, 165, 7, out, sessions=1)
    return ds.DatasetStore(out)


# ---------------------------------------------------------------------------
# records and votes
# ---------------------------------------------------------------------------

def test_aggregate_votes_split_judges():
    t = ds.JudgmentTriplet("t0", "a", "b", "c", votes=[1, 0])
    assert ds.aggregate_votes(t) == 0.5


@pytest.mark.parametrize("votes,expect", [([1, 1], 1.0), ([1, 1, 0, 0, 1], 0.6)])
def test_aggregate_votes_values(votes, expect):
    assert ds.aggregate_votes(ds.JudgmentTriplet("t", "a", "b", "c", votes=votes)) == expect


def test_aggregate_votes_requires_votes():
    with pytest.raises(MissingLabelError):
        ds.aggregate_votes(ds.JudgmentTriplet("t", "a", "b", "c"))


def test_triplet_record_round_trip():
    t = ds.JudgmentTriplet("t9", "r.png", "p0.png", "p1.png", split="val",
                           provenance={"image": "x"}, votes=[1, 0, 1])
    again = ds.JudgmentTriplet.from_json(json.loads(json.dumps(t.to_json())))
    assert again == t


def test_h_mean_cache_matches_votes(built):
    recs = built.triplets()
    recs[0].votes = [1, 0, 1, 1]
    d = recs[0].to_json()
    assert d["h_mean"] == pytest.approx(np.mean(recs[0].votes))


def test_jnd_majority():
    p = ds.JndPair("j0", "a", "b", truly_same=False, votes_same=[True, True, False])
    assert p.majority_same() is True
    p2 = ds.JndPair("j1", "a", "b", truly_same=False, votes_same=[True, False])
    assert p2.majority_same() is None


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def test_build_counts_and_paths(built):
    recs = built.triplets()
    test_recs = [t for t in recs if not t.is_sentinel]
    assert len(test_recs) == 25
    assert sum(t.is_sentinel for t in recs) == 15
    for t in recs[:5]:
        for rel in (t.ref_path, t.p0_path, t.p1_path):
            patch = built.patch(rel)
            assert patch.shape == (3, 64, 64)


def test_build_split_fractions(built):
    recs = [t for t in built.triplets() if not t.is_sentinel]
    n_train = sum(1 for t in recs if t.split == "train")
    assert n_train == 20  # 25 * (1 - 0.2)


def test_build_empty_dataset(tmp_path, corpus_dir, small_bank):
    store = ds.build_2afc_dataset(corpus_dir, small_bank, 0, 1, tmp_path / "empty",
                                  n_sentinels=0)
    assert store.triplets() == []
    assert store.meta()["counts"]["triplets"] == 0


def test_build_requires_corpus(tmp_path, small_bank):
    (tmp_path / "none").mkdir()
    with pytest.raises(ConfigurationError):
        ds.build_2afc_dataset(tmp_path / "none", small_bank, 5, 1, tmp_path / "out")


def test_build_deterministic_bytes(tmp_path, corpus_dir, small_bank):
    a = ds.build_2afc_dataset(corpus_dir, small_bank, 6, 3, tmp_path / "a")
    b = ds.build_2afc_dataset(corpus_dir, small_bank, 6, 3, tmp_path / "b")
    assert (tmp_path / "a" / "index.jsonl").read_bytes() == \
        (tmp_path / "b" / "index.jsonl").read_bytes()
    for p in sorted((tmp_path / "a" / "patches").rglob("*.png")):
        q = tmp_path / "b" / p.relative_to(tmp_path / "a")
        assert p.read_bytes() == q.read_bytes()


def test_sentinels_low_severity_side_is_correct(corpus_dir):
    out = ds.make_sentinels_2afc(corpus_dir, 15, 3)
    assert len(out) == 15
    sides = set()
    for x, p0, p1, correct, prov in out:
        low = p0 if correct == 0 else p1
        high = p1 if correct == 0 else p0
        # the low-severity side stays closer to the reference
        assert np.abs(low - x).mean() < np.abs(high - x).mean()
        sides.add(correct)
    assert sides == {0, 1}  # side randomized across the batch


def test_sentinel_records_flagged(built):
    assert all(t.sentinel_correct in (0, 1)
               for t in built.triplets() if t.is_sentinel)


def test_meta_has_severity_hash(built):
    assert built.meta()["severity_table_sha256"] == dt.severity_table_hash()


# ---------------------------------------------------------------------------
# JND pools and session plans
# ---------------------------------------------------------------------------

def test_jnd_pools(built):
    pairs = built.jnd_pairs()
    by_phase = {}
    for p in pairs:
        by_phase.setdefault(p.phase, []).append(p)
    assert len(by_phase["test"]) == 165
    assert len(by_phase["sentinel"]) == 40
    assert len(by_phase["priming"]) == 10
    ident = [p for p in by_phase["sentinel"] if p.sentinel_kind == "identical"]
    noise = [p for p in by_phase["sentinel"] if p.sentinel_kind == "noise"]
    assert len(ident) == 32 and len(noise) == 8
    for p in ident[:5]:
        assert built.path(p.ref_path).read_bytes() == built.path(p.probe_path).read_bytes()


def test_jnd_priming_composition_primes_forty_percent(built):
    priming = [p for p in built.jnd_pairs() if p.phase == "priming"]
    same = [p for p in priming if p.priming_kind == "same"]
    assert len(same) / len(priming) == pytest.approx(0.4)
    assert sum(p.priming_kind == "obvious" for p in priming) == 1
    assert sum(p.priming_kind == "different" for p in priming) == 5


def test_jnd_session_plan(built):
    plan = ds.make_jnd_session(built, seed=5)
    assert len(plan) == 210
    pairs = {p.id: p for p in built.jnd_pairs()}
    phases = [pairs[i].phase for i in plan]
    assert all(ph == "priming" for ph in phases[:10])
    assert phases[10:].count("sentinel") == 40
    assert phases[10:].count("test") == 160
    # same seed, same order
    assert ds.make_jnd_session(built, seed=5) == plan
    assert ds.make_jnd_session(built, seed=6) != plan


def test_jnd_session_pool_exhaustion(built):
    with pytest.raises(ConfigurationError):
        ds.make_jnd_session(built, seed=5, n_pairs=500)


def test_2afc_session_plan(built):
    plan = ds.make_2afc_session(built, seed=5, n_judgments=20)
    assert len(plan) == 35
    trips = {t.id: t for t in built.triplets()}
    assert sum(trips[i].is_sentinel for i in plan) == 15
    assert ds.make_2afc_session(built, seed=5, n_judgments=20) == plan


# ---------------------------------------------------------------------------
# collation
# ---------------------------------------------------------------------------

def _fake_session(store, sid, passed, items, kind="2afc"):
    for item in items:
        store.append_vote({"session": sid, "kind": kind, "item": item,
                           "phase": "test", "choice": 1, "latency_ms": 300.0,
                           "suspect": False})
    store.append_session({"session": sid, "kind": kind, "status": "done",
                          "answered": len(items), "plan_length": len(items),
                          "sentinel_correct": 15 if passed else 10,
                          "sentinel_total": 15, "passed": passed})


def test_collate_excludes_failed_sessions(tmp_path, corpus_dir, small_bank):
    store = ds.build_2afc_dataset(corpus_dir, small_bank, 6, 3, tmp_path / "c")
    ids = [t.id for t in store.triplets() if not t.is_sentinel]
    _fake_session(store, "good", True, ids[:3])
    _fake_session(store, "bad", False, ids[3:])
    stats = ds.collate_votes(store)
    assert stats["merged"] == 3 and stats["skipped_session"] == 3
    votes = {t.id: t.votes for t in store.triplets()}
    assert all(votes[i] == [1] for i in ids[:3])
    assert all(votes[i] == [] for i in ids[3:])


def test_collate_keep_failed(tmp_path, corpus_dir, small_bank):
    store = ds.build_2afc_dataset(corpus_dir, small_bank, 4, 3, tmp_path / "k")
    ids = [t.id for t in store.triplets() if not t.is_sentinel]
    _fake_session(store, "bad", False, ids)
    stats = ds.collate_votes(store, keep_failed=True)
    assert stats["merged"] == 4


def test_collate_idempotent_high_water_mark(tmp_path, corpus_dir, small_bank):
    store = ds.build_2afc_dataset(corpus_dir, small_bank, 4, 3, tmp_path / "i")
    ids = [t.id for t in store.triplets() if not t.is_sentinel]
    _fake_session(store, "s1", True, ids[:2])
    ds.collate_votes(store)
    again = ds.collate_votes(store)
    assert again["merged"] == 0
    assert [t.votes for t in store.triplets() if t.id == ids[0]] == [[1]]


def test_collate_caps_at_quota(tmp_path, corpus_dir, small_bank):
    store = ds.build_2afc_dataset(corpus_dir, small_bank, 2, 3, tmp_path / "q",
                                  val_fraction=0.0)
    tid = [t.id for t in store.triplets() if not t.is_sentinel][0]
    for k in range(4):
        _fake_session(store, f"s{k}", True, [tid])
    stats = ds.collate_votes(store)
    rec = [t for t in store.triplets() if t.id == tid][0]
    assert len(rec.votes) == ds.TRAIN_VOTE_QUOTA
    assert stats["skipped_quota"] == 2


def test_audit_counts(built):
    report = built.audit()
    assert report["records"] == 25 + 15 + 215
    assert report["orphan_votes"] == 0


def test_labeled_views(tmp_path, corpus_dir, small_bank):
    store = ds.build_2afc_dataset(corpus_dir, small_bank, 5, 3, tmp_path / "v")
    recs = store.triplets()
    for t in recs:
        if not t.is_sentinel:
            t.votes = [0, 1]
    store.write_triplets(recs)
    labeled = ds.labeled_triplets(store)
    assert len(labeled) == 5
    assert all(lt.h == 0.5 for lt in labeled)
    x, x0, x1 = labeled[0].load()
    assert x.shape == (3, 64, 64)
