"""Persistent store for judgment triplets, JND pairs, votes, and sessions.

Layout under a dataset root:

    meta.json            tool version, seed, severity-table hash, counters
    index.jsonl          one 2AFC triplet record per line (includes sentinels)
    jnd/pairs.jsonl      one JND pair record per line (test/sentinel/priming)
    patches/ref|p0|p1    triplet patch PNGs
    patches/jnd_ref|jnd_probe
    votes.jsonl          append-only raw vote log (one line per accepted answer)
    sessions.jsonl       append-only finalized session records

Index files are UTF-8, one JSON object per line with a fixed key order and LF
terminators, so rebuilt datasets are byte-reproducible. Stored ``h_mean`` is a
cache; the votes array is authoritative.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import distort
from .errors import ConfigurationError, MissingLabelError
from .imagecore import (ImageBuffer, Rng, decode_image, encode_image, extract_patch,
                        from_tensor, load_image, to_tensor)

TOOL_NAME = "patchsim"
TOOL_VERSION = "0.1.0"

TRAIN_VOTE_QUOTA = 2
VAL_VOTE_QUOTA = 5
JND_VOTE_QUOTA = 3

SENTINELS_PER_2AFC_SESSION = 15
SENTINEL_PASS_MIN = 14  # "pass" needs at least 14 of 15 correct
SENTINEL_SEVERITIES = (0.1, 1.0)

JND_SESSION_PAIRS = 160
JND_SESSION_SENTINELS = 40
JND_SESSION_PRIMING = 10
JND_IDENTICAL_FRACTION = 0.8  # 32 identical + 8 heavy-noise sentinels
JND_PASS_IDENTICAL_MIN = 24
JND_PASS_NOISE_MIN = 6


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

@dataclass
class JudgmentTriplet:
    id: str
    ref_path: str
    p0_path: str
    p1_path: str
    split: str = "train"
    provenance: dict | str = "external"
    is_sentinel: bool = False
    sentinel_correct: int | None = None
    votes: list[int] = field(default_factory=list)

    def h_mean(self) -> float:
        """Fraction of votes for "x1 closer"; the BCE training target."""
        if not self.votes:
            raise MissingLabelError(f"triplet {self.id} has no votes")
        return float(np.mean(self.votes))

    def p0_fraction(self) -> float:
        """Fraction of votes for "x0 closer"."""
        return 1.0 - self.h_mean()

    def vote_quota(self) -> int:
        return VAL_VOTE_QUOTA if self.split == "val" else TRAIN_VOTE_QUOTA

    def to_json(self) -> dict:
        return {
            "id": self.id, "ref_path": self.ref_path,
            "p0_path": self.p0_path, "p1_path": self.p1_path,
            "split": self.split, "provenance": self.provenance,
            "is_sentinel": self.is_sentinel, "sentinel_correct": self.sentinel_correct,
            "votes": list(self.votes),
            "h_mean": float(np.mean(self.votes)) if self.votes else None,
        }

    @classmethod
    def from_json(cls, d: dict) -> "JudgmentTriplet":
        return cls(id=d["id"], ref_path=d["ref_path"], p0_path=d["p0_path"],
                   p1_path=d["p1_path"], split=d["split"], provenance=d["provenance"],
                   is_sentinel=d.get("is_sentinel", False),
                   sentinel_correct=d.get("sentinel_correct"),
                   votes=list(d.get("votes", [])))


@dataclass
class JndPair:
    id: str
    ref_path: str
    probe_path: str
    truly_same: bool
    phase: str = "test"  # test | sentinel | priming
    sentinel_kind: str | None = None  # identical | noise
    priming_kind: str | None = None  # same | obvious | different
    provenance: dict | str | None = None
    votes_same: list[bool] = field(default_factory=list)

    @property
    def is_sentinel(self) -> bool:
        return self.phase == "sentinel"

    def majority_same(self) -> bool | None:
        """Majority of collected votes; None on an even split."""
        if not self.votes_same:
            raise MissingLabelError(f"JND pair {self.id} has no votes")
        n_same = sum(1 for v in self.votes_same if v)
        n_diff = len(self.votes_same) - n_same
        if n_same == n_diff:
            return None
        return n_same > n_diff

    def to_json(self) -> dict:
        return {
            "id": self.id, "ref_path": self.ref_path, "probe_path": self.probe_path,
            "truly_same": self.truly_same, "phase": self.phase,
            "sentinel_kind": self.sentinel_kind, "priming_kind": self.priming_kind,
            "provenance": self.provenance, "votes_same": list(self.votes_same),
        }

    @classmethod
    def from_json(cls, d: dict) -> "JndPair":
        return cls(id=d["id"], ref_path=d["ref_path"], probe_path=d["probe_path"],
                   truly_same=d["truly_same"], phase=d.get("phase", "test"),
                   sentinel_kind=d.get("sentinel_kind"), priming_kind=d.get("priming_kind"),
                   provenance=d.get("provenance"), votes_same=list(d.get("votes_same", [])))


def aggregate_votes(t: JudgmentTriplet) -> float:
    """h = mean of the binary votes (1 = "x1 closer"); split judges give 0.5."""
    return t.h_mean()


# ---------------------------------------------------------------------------
# store
# ---------------------------------------------------------------------------

def _dump_jsonl(records) -> str:
    return "".join(json.dumps(r.to_json(), separators=(", ", ": ")) + "\n" for r in records)


class DatasetStore:
    """Filesystem-backed dataset. Reads are snapshot loads; vote/session appends
    are serialized through a single writer lock.
    """

    def __init__(self, root):
        self.root = Path(root)
        self._lock = threading.Lock()
        self._patch_cache: dict[str, np.ndarray] = {}
        self._vote_seq = self._count_lines("votes.jsonl")

    # -- paths ---------------------------------------------------------------

    def path(self, rel: str) -> Path:
        return self.root / rel

    def _count_lines(self, rel: str) -> int:
        p = self.path(rel)
        if not p.exists():
            return 0
        with p.open("rb") as f:
            return sum(1 for _ in f)

    # -- meta ----------------------------------------------------------------

    @classmethod
    def create(cls, root, seed: int) -> "DatasetStore":
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        store = cls(root)
        if not store.path("meta.json").exists():
            store.save_meta({
                "tool": TOOL_NAME, "version": TOOL_VERSION, "seed": int(seed),
                "severity_table_sha256": distort.severity_table_hash(),
                "counts": {}, "votes_merged_seq": 0,
            })
        return store

    def meta(self) -> dict:
        return json.loads(self.path("meta.json").read_text("utf-8"))

    def save_meta(self, meta: dict) -> None:
        text = json.dumps(meta, sort_keys=True, separators=(", ", ": ")) + "\n"
        self.path("meta.json").write_text(text, "utf-8")

    # -- records ---------------------------------------------------------------

    def triplets(self) -> list[JudgmentTriplet]:
        p = self.path("index.jsonl")
        if not p.exists():
            return []
        return [JudgmentTriplet.from_json(json.loads(line))
                for line in p.read_text("utf-8").splitlines() if line]

    def write_triplets(self, records: list[JudgmentTriplet]) -> None:
        self.path("index.jsonl").write_text(_dump_jsonl(records), "utf-8")

    def jnd_pairs(self) -> list[JndPair]:
        p = self.path("jnd/pairs.jsonl")
        if not p.exists():
            return []
        return [JndPair.from_json(json.loads(line))
                for line in p.read_text("utf-8").splitlines() if line]

    def write_jnd_pairs(self, records: list[JndPair]) -> None:
        self.path("jnd").mkdir(parents=True, exist_ok=True)
        self.path("jnd/pairs.jsonl").write_text(_dump_jsonl(records), "utf-8")

    # -- images ----------------------------------------------------------------

    def save_patch(self, rel: str, tensor: np.ndarray) -> None:
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(encode_image(from_tensor(tensor), "png"))

    def patch(self, rel: str) -> np.ndarray:
        if rel in self._patch_cache:
            return self._patch_cache[rel]
        t = to_tensor(decode_image(self.path(rel).read_bytes()))
        if len(self._patch_cache) >= 256:
            self._patch_cache.pop(next(iter(self._patch_cache)))
        self._patch_cache[rel] = t
        return t

    def image_bytes(self, rel: str) -> bytes:
        return self.path(rel).read_bytes()

    # -- votes / sessions --------------------------------------------------------

    def append_vote(self, record: dict) -> int:
        with self._lock:
            self._vote_seq += 1
            record = {"seq": self._vote_seq, **record}
            with self.path("votes.jsonl").open("a", encoding="utf-8") as f:
                f.write(json.dumps(record, separators=(", ", ": ")) + "\n")
            return self._vote_seq

    def votes(self) -> list[dict]:
        p = self.path("votes.jsonl")
        if not p.exists():
            return []
        return [json.loads(line) for line in p.read_text("utf-8").splitlines() if line]

    def append_session(self, record: dict) -> None:
        with self._lock:
            with self.path("sessions.jsonl").open("a", encoding="utf-8") as f:
                f.write(json.dumps(record, separators=(", ", ": ")) + "\n")

    def sessions(self) -> list[dict]:
        p = self.path("sessions.jsonl")
        if not p.exists():
            return []
        return [json.loads(line) for line in p.read_text("utf-8").splitlines() if line]

    # -- integrity ----------------------------------------------------------------

    def audit(self) -> dict:
        """Referential integrity: every stored vote must name a known record."""
        known = {t.id for t in self.triplets()} | {p.id for p in self.jnd_pairs()}
        votes = self.votes()
        orphans = [v for v in votes if v["item"] not in known]
        return {"votes": len(votes), "orphan_votes": len(orphans),
                "records": len(known), "sessions": len(self.sessions())}


# ---------------------------------------------------------------------------
# corpus loading
# ---------------------------------------------------------------------------

def load_corpus(source) -> list[tuple[str, ImageBuffer]]:
    """Accepts a directory of PNG/PPM files or a ready (name, ImageBuffer) list."""
    if isinstance(source, (list, tuple)):
        corpus = list(source)
    else:
        root = Path(source)
        paths = sorted(p for p in root.iterdir()
                       if p.suffix.lower() in (".png", ".ppm"))
        corpus = [(p.name, load_image(p)) for p in paths]
    if not corpus:
        raise ConfigurationError("image corpus is empty")
    return corpus


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def make_sentinels_2afc(corpus, n: int, seed: int, patch_size: int = 64):
    """Catch trials: heavy vs light Gaussian noise on the same patch.

    Yields (ref, p0, p1, correct_choice); the correct answer is always the
    low-severity side, with the side randomized per item.
    """
    corpus = load_corpus(corpus)
    rng = Rng(seed, stream=0x5E47)
    out = []
    for k in range(n):
        r = rng.derive(k)
        name, img = corpus[int(r.integers(0, len(corpus)))]
        x = extract_patch(img, size=patch_size, rng=r)
        low = distort.DistortionSpec("gaussian_noise", SENTINEL_SEVERITIES[0],
                                     seed=int(r.integers(0, 2 ** 63)))
        high = distort.DistortionSpec("gaussian_noise", SENTINEL_SEVERITIES[1],
                                      seed=int(r.integers(0, 2 ** 63)))
        low_img, high_img = distort.apply(low, x), distort.apply(high, x)
        if r.random() < 0.5:
            out.append((x, low_img, high_img, 0, {"image": name, "low": low.to_json(),
                                                  "high": high.to_json(), "low_side": 0}))
        else:
            out.append((x, high_img, low_img, 1, {"image": name, "low": low.to_json(),
                                                  "high": high.to_json(), "low_side": 1}))
    return out


def build_2afc_dataset(corpus, bank, n_triplets: int, seed: int, out_dir,
                       val_fraction: float = 0.2, patch_size: int = 64,
                       n_sentinels: int = SENTINELS_PER_2AFC_SESSION) -> DatasetStore:
    """Sample patch triplets (reference + two distorted variants) into a store.

    Votes start empty; they are collected later. Same seed reproduces the
    index and every patch file byte for byte.
    """
    corpus = load_corpus(corpus)
    if n_triplets < 0:
        raise ConfigurationError("n_triplets must be >= 0")
    store = DatasetStore.create(out_dir, seed)
    base = Rng(seed, stream=0x2AFC)
    n_train = int(round(n_triplets * (1.0 - val_fraction)))
    records = []
    for i in range(n_triplets):
        r = base.derive(i)
        name, img = corpus[int(r.integers(0, len(corpus)))]
        px = int(r.integers(0, img.width - patch_size + 1))
        py = int(r.integers(0, img.height - patch_size + 1))
        x = extract_patch(img, px, py, patch_size)
        picks = r.choice(len(bank), size=2, replace=False)
        d0, d1 = bank[int(picks[0])], bank[int(picks[1])]
        _, x0, x1 = distort.make_triplet(x, d0, d1)
        tid = f"t{i:06d}"
        rec = JudgmentTriplet(
            id=tid,
            ref_path=f"patches/ref/{tid}.png",
            p0_path=f"patches/p0/{tid}.png",
            p1_path=f"patches/p1/{tid}.png",
            split="train" if i < n_train else "val",
            provenance={"image": name, "x": px, "y": py,
                        "d0": d0.to_json(), "d1": d1.to_json()},
        )
        store.save_patch(rec.ref_path, x)
        store.save_patch(rec.p0_path, x0)
        store.save_patch(rec.p1_path, x1)
        records.append(rec)
    for k, (x, p0, p1, correct, prov) in enumerate(
            make_sentinels_2afc(corpus, n_sentinels, seed, patch_size)):
        sid = f"s{k:06d}"
        rec = JudgmentTriplet(
            id=sid,
            ref_path=f"patches/ref/{sid}.png",
            p0_path=f"patches/p0/{sid}.png",
            p1_path=f"patches/p1/{sid}.png",
            split="train", provenance=prov,
            is_sentinel=True, sentinel_correct=correct,
        )
        store.save_patch(rec.ref_path, x)
        store.save_patch(rec.p0_path, p0)
        store.save_patch(rec.p1_path, p1)
        records.append(rec)
    store.write_triplets(records)
    meta = store.meta()
    meta["counts"]["triplets"] = n_triplets
    meta["counts"]["twoafc_sentinels"] = n_sentinels
    meta["val_fraction"] = val_fraction
    store.save_meta(meta)
    return store


def build_jnd_dataset(corpus, bank, n_pairs: int, seed: int, out_dir,
                      patch_size: int = 64, sessions: int = 1) -> DatasetStore:
    """JND pools: `n_pairs` distorted test pairs plus per-session sentinel and
    priming pools (32 identical + 8 heavy-noise sentinels, 4/1/5 priming).
    """
    corpus = load_corpus(corpus)
    usable = [s for s in bank if distort.effective_severity(s) >= distort.JND_MIN_SEVERITY]
    if not usable:
        raise ConfigurationError("distortion bank has no specs above the JND severity floor")
    store = DatasetStore.create(out_dir, seed)
    base = Rng(seed, stream=0x04D)
    records = []

    def new_pair(idx, r, phase, truly_same, sentinel_kind=None, priming_kind=None,
                 spec=None) -> JndPair:
        name, img = corpus[int(r.integers(0, len(corpus)))]
        x = extract_patch(img, size=patch_size, rng=r)
        if truly_same:
            ref, probe = distort.make_jnd_pair(x, None, True)
            prov = {"image": name}
        else:
            ref, probe = distort.make_jnd_pair(x, spec, False)
            prov = {"image": name, "spec": spec.to_json()}
        pid = f"j{idx:06d}"
        rec = JndPair(id=pid, ref_path=f"patches/jnd_ref/{pid}.png",
                      probe_path=f"patches/jnd_probe/{pid}.png",
                      truly_same=truly_same, phase=phase,
                      sentinel_kind=sentinel_kind, priming_kind=priming_kind,
                      provenance=prov)
        store.save_patch(rec.ref_path, ref)
        store.save_patch(rec.probe_path, probe)
        return rec

    idx = 0
    for i in range(n_pairs):
        r = base.derive(idx)
        spec = usable[int(r.integers(0, len(usable)))]
        records.append(new_pair(idx, r, "test", False, spec=spec))
        idx += 1
    n_ident = int(round(JND_SESSION_SENTINELS * JND_IDENTICAL_FRACTION)) * sessions
    n_noise = JND_SESSION_SENTINELS * sessions - n_ident
    for i in range(n_ident):
        r = base.derive(idx)
        records.append(new_pair(idx, r, "sentinel", True, sentinel_kind="identical"))
        idx += 1
    for i in range(n_noise):
        r = base.derive(idx)
        spec = distort.DistortionSpec("gaussian_noise", 1.0, seed=int(r.integers(0, 2 ** 63)))
        records.append(new_pair(idx, r, "sentinel", False, sentinel_kind="noise", spec=spec))
        idx += 1
    for s in range(sessions):
        for kind, count in (("same", 4), ("obvious", 1), ("different", 5)):
            for i in range(count):
                r = base.derive(idx)
                if kind == "same":
                    records.append(new_pair(idx, r, "priming", True, priming_kind="same"))
                elif kind == "obvious":
                    spec = distort.DistortionSpec("gaussian_noise", 1.0,
                                                  seed=int(r.integers(0, 2 ** 63)))
                    records.append(new_pair(idx, r, "priming", False,
                                            priming_kind="obvious", spec=spec))
                else:
                    spec = usable[int(r.integers(0, len(usable)))]
                    records.append(new_pair(idx, r, "priming", False,
                                            priming_kind="different", spec=spec))
                idx += 1
    store.write_jnd_pairs(records)
    meta = store.meta()
    meta["counts"]["jnd_pairs"] = n_pairs
    meta["counts"]["jnd_sentinels"] = n_ident + n_noise
    meta["counts"]["jnd_priming"] = 10 * sessions
    store.save_meta(meta)
    return store


# ---------------------------------------------------------------------------
# session plans
# ---------------------------------------------------------------------------

def make_2afc_session(store: DatasetStore, seed: int, n_judgments: int = 60,
                      n_sentinels: int = SENTINELS_PER_2AFC_SESSION,
                      pending: dict[str, int] | None = None) -> list[str]:
    """Ordered plan of triplet ids: quota-hungry test triplets interleaved with
    sentinels, shuffled by seed.
    """
    pending = pending or {}
    triplets = store.triplets()
    test = [t for t in triplets if not t.is_sentinel]
    test = [t for t in test if len(t.votes) + pending.get(t.id, 0) < t.vote_quota()]
    test.sort(key=lambda t: (len(t.votes) + pending.get(t.id, 0), t.id))
    if len(test) < n_judgments:
        raise ConfigurationError(
            f"only {len(test)} triplets still need votes, session wants {n_judgments}")
    sentinels = [t for t in triplets if t.is_sentinel]
    if len(sentinels) < n_sentinels:
        raise ConfigurationError(
            f"dataset has {len(sentinels)} sentinels, session wants {n_sentinels}")
    rng = Rng(seed, stream=0x2AFC5E55)
    picks = rng.choice(len(sentinels), size=n_sentinels, replace=False)
    plan = [t.id for t in test[:n_judgments]] + [sentinels[int(i)].id for i in picks]
    rng.shuffle(plan)
    return plan


def make_jnd_session(store: DatasetStore, seed: int,
                     n_pairs: int = JND_SESSION_PAIRS,
                     n_sentinels: int = JND_SESSION_SENTINELS,
                     n_priming: int = JND_SESSION_PRIMING,
                     pending: dict[str, int] | None = None) -> list[str]:
    """Ordered JND plan: priming block first (its composition primes raters to
    expect roughly 40% identical pairs), then shuffled test pairs + sentinels.
    """
    pending = pending or {}
    pairs = store.jnd_pairs()

    def pool(pred):
        return sorted((p for p in pairs if pred(p)), key=lambda p: p.id)

    rng = Rng(seed, stream=0x04D5E55)

    def take(items, n, label):
        if len(items) < n:
            raise ConfigurationError(f"JND {label} pool exhausted: {len(items)} < {n}")
        picks = rng.choice(len(items), size=n, replace=False)
        return [items[int(i)] for i in picks]

    n_same = int(round(0.4 * n_priming))
    n_obvious = max(1, int(round(0.1 * n_priming))) if n_priming else 0
    n_diff = n_priming - n_same - n_obvious
    priming = (take(pool(lambda p: p.priming_kind == "same"), n_same, "priming-same")
               + take(pool(lambda p: p.priming_kind == "obvious"), n_obvious, "priming-obvious")
               + take(pool(lambda p: p.priming_kind == "different"), n_diff, "priming-different"))

    test_pool = [p for p in pool(lambda p: p.phase == "test")
                 if len(p.votes_same) + pending.get(p.id, 0) < JND_VOTE_QUOTA]
    test_pool.sort(key=lambda p: (len(p.votes_same) + pending.get(p.id, 0), p.id))
    if len(test_pool) < n_pairs:
        raise ConfigurationError(
            f"only {len(test_pool)} JND pairs still need votes, session wants {n_pairs}")
    test = test_pool[:n_pairs]

    n_ident = int(round(n_sentinels * JND_IDENTICAL_FRACTION))
    sent = (take(pool(lambda p: p.sentinel_kind == "identical"), n_ident, "identical-sentinel")
            + take(pool(lambda p: p.sentinel_kind == "noise"),
                   n_sentinels - n_ident, "noise-sentinel"))

    head = [p.id for p in priming]
    rng.shuffle(head)
    tail = [p.id for p in test] + [p.id for p in sent]
    rng.shuffle(tail)
    return head + tail


# ---------------------------------------------------------------------------
# vote collation
# ---------------------------------------------------------------------------

def collate_votes(store: DatasetStore, keep_failed: bool = False) -> dict:
    """Fold raw session votes into the index records.

    Only votes from finalized sessions are merged; sessions failing sentinel QA
    are dropped unless keep_failed. Priming and sentinel answers never land in
    records. Per-record quotas cap merged votes (train 2, val 5, JND 3).
    Incremental and idempotent via the votes_merged_seq high-water mark.
    """
    meta = store.meta()
    mark = meta.get("votes_merged_seq", 0)
    session_ok = {}
    for s in store.sessions():
        if s.get("status") != "done":
            continue
        session_ok[s["session"]] = bool(s.get("passed")) or keep_failed
    triplets = store.triplets()
    pairs = store.jnd_pairs()
    by_triplet = {t.id: t for t in triplets}
    by_pair = {p.id: p for p in pairs}
    stats = {"merged": 0, "skipped_session": 0, "skipped_quota": 0, "skipped_phase": 0}
    new_mark = mark
    for v in sorted(store.votes(), key=lambda v: v["seq"]):
        if v["seq"] <= mark:
            continue
        new_mark = max(new_mark, v["seq"])
        if not session_ok.get(v["session"], False):
            stats["skipped_session"] += 1
            continue
        if v.get("phase") != "test":
            stats["skipped_phase"] += 1
            continue
        if v["kind"] == "2afc":
            rec = by_triplet.get(v["item"])
            if rec is None or len(rec.votes) >= rec.vote_quota():
                stats["skipped_quota"] += 1
                continue
            rec.votes.append(int(v["choice"]))
        else:
            rec = by_pair.get(v["item"])
            if rec is None or len(rec.votes_same) >= JND_VOTE_QUOTA:
                stats["skipped_quota"] += 1
                continue
            rec.votes_same.append(bool(v["same"]))
        stats["merged"] += 1
    store.write_triplets(triplets)
    if pairs:
        store.write_jnd_pairs(pairs)
    meta["votes_merged_seq"] = new_mark
    store.save_meta(meta)
    return stats


# ---------------------------------------------------------------------------
# labeled views for training / evaluation
# ---------------------------------------------------------------------------

@dataclass
class LabeledTriplet:
    """One labeled training/eval example with lazy patch loading."""

    id: str
    h: float  # fraction of votes for "x1 closer"
    provenance_label: str
    load: Callable[[], tuple[np.ndarray, np.ndarray, np.ndarray]]

    @property
    def p0(self) -> float:
        return 1.0 - self.h


def _provenance_label(prov) -> str:
    if not isinstance(prov, dict):
        return str(prov)
    if "d0" in prov and "d1" in prov:
        k0 = distort.spec_kind_label(distort.spec_from_json(prov["d0"]))
        k1 = distort.spec_kind_label(distort.spec_from_json(prov["d1"]))
        return f"{k0}|{k1}"
    if "spec" in prov:
        return distort.spec_kind_label(distort.spec_from_json(prov["spec"]))
    return "external"


def labeled_triplets(store: DatasetStore, split: str | None = None) -> list[LabeledTriplet]:
    """Non-sentinel triplets that carry votes, as lazy-loading labeled records."""
    out = []
    for t in store.triplets():
        if t.is_sentinel or not t.votes:
            continue
        if split is not None and t.split != split:
            continue
        out.append(LabeledTriplet(
            id=t.id, h=t.h_mean(), provenance_label=_provenance_label(t.provenance),
            load=(lambda rec=t: (store.patch(rec.ref_path),
                                 store.patch(rec.p0_path),
                                 store.patch(rec.p1_path)))))
    return out


@dataclass
class LabeledJndPair:
    id: str
    human_same: bool
    type_label: str
    load: Callable[[], tuple[np.ndarray, np.ndarray]]


def labeled_jnd_pairs(store: DatasetStore) -> tuple[list[LabeledJndPair], int]:
    """Test-phase pairs with a majority label; returns (pairs, n_skipped_ties)."""
    out, ties = [], 0
    for p in store.jnd_pairs():
        if p.phase != "test" or not p.votes_same:
            continue
        label = p.majority_same()
        if label is None:
            ties += 1
            continue
        out.append(LabeledJndPair(
            id=p.id, human_same=label, type_label=_provenance_label(p.provenance),
            load=(lambda rec=p: (store.patch(rec.ref_path), store.patch(rec.probe_path)))))
    return out, ties
