"""Demonstration datasets built from the scripted embodiments.

Serialized layout (all integers and floats little-endian)::

    b"HIMOE-DATA\\n"
    header      one line of JSON (sorted keys): manifest, embodiments,
                record field list, record count
    records     fixed-width, one per recorded step, numpy dtype RECORD_DTYPE:
                episode u4, step u4, emb u2, target f8[2], state f8[24],
                state_mask u1[24], action f8[24], obs f8[2,2,6],
                stream_mask u1[2], instr u2[3]

state/action are unified (unnormalized) vectors; normalization statistics
are refit from the records on load.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import codec
from .codec import ActionSpace, Kind, NormStats, UNIFIED_DIM
from .context import ContextInput
from .embodiments import (FEAT_DIM, MAX_STREAMS, TOKENS_PER_STREAM, generate_episode,
                          get_embodiment)
from .objectives import EEF, JOINT

MAGIC = b"HIMOE-DATA\n"
RECORD_DTYPE = np.dtype([
    ("episode", "<u4"), ("step", "<u4"), ("emb", "<u2"),
    ("target", "<f8", (2,)),
    ("state", "<f8", (UNIFIED_DIM,)), ("state_mask", "u1", (UNIFIED_DIM,)),
    ("action", "<f8", (UNIFIED_DIM,)),
    ("obs", "<f8", (MAX_STREAMS, TOKENS_PER_STREAM, FEAT_DIM)),
    ("stream_mask", "u1", (MAX_STREAMS,)),
    ("instr", "<u2", (3,)),
])


@dataclass
class DatasetManifest:
    embodiments: list = field(default_factory=lambda: ["joint_a", "eef_a"])
    weights: list | None = None
    n_episodes: int = 200
    seed: int = 0
    horizon: int = 8
    normalization: str = "per_embodiment"   # or "global"

    def __post_init__(self):
        if self.weights is None:
            self.weights = [1.0 / len(self.embodiments)] * len(self.embodiments)
        if len(self.weights) != len(self.embodiments):
            raise ValueError("one weight per embodiment")
        if abs(sum(self.weights) - 1.0) > 1e-9 or min(self.weights) < 0:
            raise ValueError(f"mixture weights must be non-negative and sum to 1, got {self.weights}")
        if self.normalization not in ("per_embodiment", "global"):
            raise ValueError(f"unknown normalization scope {self.normalization!r}")

    def schedule(self) -> np.ndarray:
        """Embodiment index of every episode: smooth weighted round-robin."""
        w = np.asarray(self.weights, dtype=np.float64)
        credit = np.zeros_like(w)
        out = np.empty(self.n_episodes, dtype=np.int64)
        for n in range(self.n_episodes):
            credit += w
            k = int(np.argmax(credit))
            credit[k] -= 1.0
            out[n] = k
        return out

    def episode_counts(self) -> dict:
        counts = np.bincount(self.schedule(), minlength=len(self.embodiments))
        return {e: int(c) for e, c in zip(self.embodiments, counts)}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def validation(self, n_episodes: int | None = None) -> "DatasetManifest":
        """Held-out manifest: same mixture, disjoint episode seeds."""
        d = self.to_dict()
        d["seed"] = self.seed + 1_000_003
        d["n_episodes"] = n_episodes or max(len(self.embodiments), self.n_episodes // 4)
        return DatasetManifest(**d)


def episode_seed(seed: int, idx: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, idx])


@dataclass
class Batch:
    state: np.ndarray        # [B, 48] normalized values ⊕ mask
    actions: np.ndarray      # [B, H, 24] normalized
    ctx: ContextInput
    action_space: np.ndarray  # [B] EEF/JOINT codes
    emb: np.ndarray           # [B]


class Dataset:
    """Recorded steps plus per-episode bookkeeping and fitted normalizers."""

    def __init__(self, manifest: DatasetManifest, records: np.ndarray,
                 stats: dict | None = None):
        if len(records) == 0:
            raise ValueError("dataset has no records")
        self.manifest = manifest
        self.records = records
        self.embodiments = [get_embodiment(e) for e in manifest.embodiments]
        self.stats = stats or self.fit_stats()
        self._build_index()

    # -- normalization ----------------------------------------------------
    def fit_stats(self) -> dict:
        """{scope: {"state": NormStats, "action": NormStats}}; scope is an
        embodiment id or "global"."""
        r = self.records
        out = {}
        if self.manifest.normalization == "global":
            groups = {"global": np.ones(len(r), dtype=bool)}
        else:
            groups = {e.id: r["emb"] == k for k, e in enumerate(self.embodiments)}
        for name, sel in groups.items():
            if not sel.any():
                continue
            embs = [self.embodiments[k] for k in np.unique(r["emb"][sel])]
            smask = np.any([e.mapped_mask(Kind.STATE) for e in embs], axis=0)
            amask = np.any([e.mapped_mask(Kind.ACTION) for e in embs], axis=0)
            out[name] = {"state": codec.fit_normalizer(r["state"][sel], smask),
                         "action": codec.fit_normalizer(r["action"][sel], amask)}
        return out

    def stats_for(self, emb_id: str) -> dict:
        return self.stats["global"] if "global" in self.stats else self.stats[emb_id]

    def _build_index(self):
        r = self.records
        h = self.manifest.horizon
        n = len(r)
        ep = r["episode"]
        # last record index of each record's episode, for hold-last padding
        ends = np.empty(n, dtype=np.int64)
        boundaries = np.nonzero(np.diff(ep))[0]
        starts = np.concatenate([[0], boundaries + 1])
        stops = np.concatenate([boundaries, [n - 1]])
        for s, e in zip(starts, stops):
            ends[s:e + 1] = e
        self._chunk_idx = np.minimum(np.arange(n)[:, None] + np.arange(h)[None, :], ends[:, None])

        state = np.empty((n, UNIFIED_DIM))
        action = np.empty((n, UNIFIED_DIM))
        for k, e in enumerate(self.embodiments):
            sel = r["emb"] == k
            if not sel.any():
                continue
            st = self.stats_for(e.id)
            mask = r["state_mask"][sel].astype(bool)
            state[sel] = np.where(mask, st["state"].apply(r["state"][sel]), 0.0)
            action[sel] = st["action"].apply(r["action"][sel])
        self.state_features = np.concatenate([state, r["state_mask"].astype(np.float64)], axis=1)
        self.norm_actions = action
        codes = np.array([EEF if e.action_space is ActionSpace.EEF else JOINT for e in self.embodiments])
        self.action_space = codes[r["emb"]]

    def __len__(self) -> int:
        return len(self.records)

    def chunk(self, idx) -> np.ndarray:
        return self.norm_actions[self._chunk_idx[idx]]

    def raw_chunk(self, idx) -> np.ndarray:
        return self.records["action"][self._chunk_idx[idx]]

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx)
        r = self.records[idx]
        ctx = ContextInput(r["obs"], r["stream_mask"].astype(bool), r["instr"].astype(np.int64))
        return Batch(self.state_features[idx], self.chunk(idx), ctx, self.action_space[idx], r["emb"])

    def indices_for(self, emb_id: str) -> np.ndarray:
        k = [e.id for e in self.embodiments].index(emb_id)
        return np.nonzero(self.records["emb"] == k)[0]

    # -- serialization ----------------------------------------------------
    def header(self) -> dict:
        return {"format_version": 1,
                "manifest": self.manifest.to_dict(),
                "embodiments": [e.to_dict() for e in self.embodiments],
                "record_fields": [[name, RECORD_DTYPE.fields[name][0].str,
                                   list(RECORD_DTYPE.fields[name][0].shape)] for name in RECORD_DTYPE.names],
                "record_size": RECORD_DTYPE.itemsize,
                "n_records": len(self.records)}

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode()
        return MAGIC + head + b"\n" + self.records.tobytes()

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes, stats: dict | None = None) -> "Dataset":
        if not blob.startswith(MAGIC):
            raise ValueError("not a HiMoE dataset file")
        nl = blob.index(b"\n", len(MAGIC))
        head = json.loads(blob[len(MAGIC):nl])
        records = np.frombuffer(blob[nl + 1:], dtype=RECORD_DTYPE, count=head["n_records"]).copy()
        return cls(DatasetManifest.from_dict(head["manifest"]), records, stats)

    @classmethod
    def load(cls, path, stats: dict | None = None) -> "Dataset":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read(), stats)


def build_dataset(manifest: DatasetManifest, stats: dict | None = None) -> Dataset:
    """Generate every episode of ``manifest`` deterministically and encode it.

    ``stats`` overrides the fitted normalizers (use the training set's for
    validation data).
    """
    if manifest.n_episodes <= 0:
        raise ValueError("manifest requests zero episodes")
    embs = [get_embodiment(e) for e in manifest.embodiments]
    rows = []
    for n, k in enumerate(manifest.schedule()):
        emb = embs[k]
        ep = generate_episode(emb, episode_seed(manifest.seed, n))
        st = codec.encode(ep.states, emb, Kind.STATE)
        ac = codec.encode(ep.actions, emb, Kind.ACTION)
        rec = np.zeros(len(ep), dtype=RECORD_DTYPE)
        rec["episode"] = n
        rec["step"] = np.arange(len(ep))
        rec["emb"] = k
        rec["target"] = ep.target
        rec["state"] = st.values
        rec["state_mask"] = st.mask
        rec["action"] = ac.values
        rec["obs"] = ep.obs
        rec["stream_mask"] = ep.stream_mask
        rec["instr"] = ep.instruction
        rows.append(rec)
    return Dataset(manifest, np.concatenate(rows), stats)


def stats_to_dict(stats: dict) -> dict:
    return {k: {kk: v.to_dict() for kk, v in s.items()} for k, s in stats.items()}


def stats_from_dict(d: dict) -> dict:
    return {k: {kk: NormStats.from_dict(v) for kk, v in s.items()} for k, s in d.items()}
