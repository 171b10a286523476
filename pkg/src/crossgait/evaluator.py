"""Embedding extraction and probe/gallery retrieval protocols."""
from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .model import ModelConfig, Params, forward_batch
from .store import STREAM_OF, SequenceRecord
from .synthgen.dataset import CONDITION_KINDS, MODALITIES

EMB_MAGIC = b"CGEMB1"
EMB_VERSION = 1
REPORT_COLUMNS = ("protocol", "metric", "condition", "view_probe", "view_gallery", "value")
STREAM_LABEL = {"lidar": "LiDAR", "camera": "Camera"}


class ProtocolError(ValueError):
    pass


class EmbeddingFileError(ValueError):
    pass


@dataclass
class EmbeddingSet:
    sequence_ids: list[str]
    identities: np.ndarray
    conditions: list[str]
    views: np.ndarray
    modalities: list[str]
    vectors: np.ndarray  # (N, parts * C)
    num_parts: int = 1

    def __post_init__(self):
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.views = np.asarray(self.views, dtype=np.int64)
        self.vectors = np.asarray(self.vectors)
        n = len(self.sequence_ids)
        if not (len(self.identities) == len(self.conditions) == len(self.views)
                == len(self.modalities) == self.vectors.shape[0] == n):
            raise ValueError("embedding set columns have different lengths")
        if len(set(self.sequence_ids)) != n:
            raise ValueError("sequence ids are not unique")
        if self.vectors.ndim != 2 or (n and self.vectors.shape[1] % self.num_parts):
            raise ValueError(f"vector length {self.vectors.shape[-1]} is not a multiple of "
                             f"{self.num_parts} parts")

    def __len__(self):
        return len(self.sequence_ids)

    @property
    def streams(self) -> np.ndarray:
        return np.array([STREAM_OF[m] for m in self.modalities])

    def subset(self, mask) -> "EmbeddingSet":
        idx = np.flatnonzero(mask)
        return EmbeddingSet([self.sequence_ids[i] for i in idx], self.identities[idx],
                            [self.conditions[i] for i in idx], self.views[idx],
                            [self.modalities[i] for i in idx], self.vectors[idx], self.num_parts)

    @classmethod
    def concat(cls, sets: list["EmbeddingSet"]) -> "EmbeddingSet":
        parts = {s.num_parts for s in sets}
        if len(parts) != 1:
            raise ValueError(f"cannot merge embedding sets with part counts {sorted(parts)}")
        return cls(sum((s.sequence_ids for s in sets), []), np.concatenate([s.identities for s in sets]),
                   sum((s.conditions for s in sets), []), np.concatenate([s.views for s in sets]),
                   sum((s.modalities for s in sets), []), np.concatenate([s.vectors for s in sets]),
                   parts.pop())


# -- extraction -----------------------------------------------------------------

def extract_embeddings(records: list[SequenceRecord], params: Params, cfg: ModelConfig,
                       chunk: int = 32) -> EmbeddingSet:
    """Aligned embeddings for every record, batched by stream and sequence length."""
    if not records:
        raise ProtocolError("cannot extract embeddings from an empty split")
    vectors = [None] * len(records)
    groups: dict[tuple[str, int], list[int]] = {}
    for i, r in enumerate(records):
        groups.setdefault((r.stream, len(r.frames)), []).append(i)
    dtype = params["head.w"].dtype
    with nx.default_dtype(dtype):
        for (stream, _), idx in sorted(groups.items()):
            for lo in range(0, len(idx), chunk):
                part = idx[lo:lo + chunk]
                frames = np.stack([records[i].frames for i in part])
                _, aligned = forward_batch(frames, stream, params, cfg)
                for j, i in enumerate(part):
                    vectors[i] = aligned.data[j].reshape(-1)
    return EmbeddingSet([r.sequence_id for r in records], [r.identity for r in records],
                        [r.condition for r in records], [r.view for r in records],
                        [r.modality for r in records], np.stack(vectors).astype(np.float32),
                        cfg.total_parts)


# -- metrics --------------------------------------------------------------------

def pairwise_distances(probe: np.ndarray, gallery: np.ndarray, num_parts: int,
                       block: int = 256) -> np.ndarray:
    """Mean over parts of per-part Euclidean distances, (Np, Ng), in float64."""
    probe, gallery = np.asarray(probe, np.float64), np.asarray(gallery, np.float64)
    if probe.shape[1] != gallery.shape[1]:
        raise ValueError(f"vector lengths differ: {probe.shape[1]} vs {gallery.shape[1]}")
    c = probe.shape[1] // num_parts
    pp = probe.reshape(len(probe), num_parts, c)
    gp = gallery.reshape(len(gallery), num_parts, c)
    out = np.empty((len(probe), len(gallery)))
    g2 = np.einsum("gpc,gpc->gp", gp, gp)
    for lo in range(0, len(probe), block):
        a = pp[lo:lo + block]
        a2 = np.einsum("npc,npc->np", a, a)
        cross = np.einsum("npc,gpc->ngp", a, gp)
        sq = np.maximum(a2[:, None, :] + g2[None, :, :] - 2 * cross, 0.0)
        out[lo:lo + block] = np.sqrt(sq).mean(axis=-1)
    return out


def rank_k(dist: np.ndarray, probe_labels, gallery_labels, k: int,
           exclude: np.ndarray | None = None) -> float:
    """Percent of probes whose identity appears among the k nearest gallery rows.

    Ties go to the lower gallery index. ``exclude[i, j]`` removes gallery row j
    from probe i's ranking.
    """
    dist = np.asarray(dist, dtype=np.float64)
    pl, gl = np.asarray(probe_labels), np.asarray(gallery_labels)
    if dist.shape != (len(pl), len(gl)):
        raise ValueError(f"distance matrix {dist.shape} vs {len(pl)} probes, {len(gl)} gallery rows")
    if len(pl) == 0:
        raise ProtocolError("no probes")
    valid = np.ones(dist.shape, bool) if exclude is None else ~np.asarray(exclude, bool)
    match = (pl[:, None] == gl[None, :]) & valid
    missing = np.flatnonzero(~match.any(axis=1))
    if len(missing):
        raise ProtocolError(f"{len(missing)} probe(s) have no gallery entry of their identity "
                            f"(first: probe {missing[0]}, identity {pl[missing[0]]})")
    # rank of the best true match = number of valid rows strictly ahead of it
    d = np.where(valid, dist, np.inf)
    best = np.where(match, d, np.inf).min(axis=1)
    gidx = np.arange(len(gl))
    first = np.where(match & (d == best[:, None]), gidx[None, :], len(gl)).min(axis=1)
    ahead = valid & ((d < best[:, None]) | ((d == best[:, None]) & (gidx[None, :] < first[:, None])))
    ranks = ahead.sum(axis=1)
    return 100.0 * int(np.count_nonzero(ranks < k)) / len(pl)


@dataclass(frozen=True)
class Protocol:
    probe: str      # stream name: lidar or camera
    gallery: str
    cross_view: bool = False

    @property
    def name(self) -> str:
        return f"{STREAM_LABEL[self.probe]}->{STREAM_LABEL[self.gallery]}"

    @property
    def exclude_self(self) -> bool:
        return self.probe == self.gallery

    @classmethod
    def parse(cls, text: str, cross_view: bool = False) -> "Protocol":
        lookup = {v.lower(): k for k, v in STREAM_LABEL.items()}
        try:
            a, b = (lookup[s.strip().lower()] for s in text.replace("->", ">").split(">"))
        except (KeyError, ValueError):
            raise ProtocolError(f"bad protocol {text!r}; expected e.g. LiDAR->Camera") from None
        return cls(a, b, cross_view)


ALL_PROTOCOLS = (Protocol("lidar", "camera", True), Protocol("camera", "lidar", True),
                 Protocol("lidar", "lidar", True), Protocol("camera", "camera", True))


@dataclass
class ProtocolReport:
    protocol: str
    rank1: float
    rank5: float
    per_condition: dict[str, float] = field(default_factory=dict)
    view_matrix: dict[tuple[int, int], float] | None = None

    def rows(self) -> list[tuple]:
        out = [(self.protocol, "rank1", "all", "all", "all", self.rank1),
               (self.protocol, "rank5", "all", "all", "all", self.rank5)]
        for cond, v in sorted(self.per_condition.items()):
            out.append((self.protocol, "rank1", cond, "all", "all", v))
        if self.view_matrix is not None:
            for (u, g), v in sorted(self.view_matrix.items()):
                # identical-view cells are kept but flagged by their metric name
                metric = "rank1_view_same" if u == g else "rank1_view"
                out.append((self.protocol, metric, "all", str(u), str(g), v))
        return out


def _exclusion(probe: EmbeddingSet, gallery: EmbeddingSet, exclude_self: bool):
    if not exclude_self:
        return None
    ps, gs = np.array(probe.sequence_ids, dtype=object), np.array(gallery.sequence_ids, dtype=object)
    return ps[:, None] == gs[None, :]


def evaluate_sets(probe: EmbeddingSet, gallery: EmbeddingSet, name: str, exclude_self: bool,
                  cross_view: bool = False) -> ProtocolReport:
    if len(probe) == 0:
        raise ProtocolError(f"{name}: probe filter selected no sequences")
    if len(gallery) == 0:
        raise ProtocolError(f"{name}: gallery filter selected no sequences")
    if probe.num_parts != gallery.num_parts:
        raise ProtocolError(f"{name}: part counts differ ({probe.num_parts} vs {gallery.num_parts})")
    dist = pairwise_distances(probe.vectors, gallery.vectors, probe.num_parts)
    excl = _exclusion(probe, gallery, exclude_self)
    r1 = rank_k(dist, probe.identities, gallery.identities, 1, excl)
    r5 = rank_k(dist, probe.identities, gallery.identities, 5, excl)
    per_cond = {}
    conds = np.array(probe.conditions)
    for cond in sorted(set(probe.conditions)):
        rows = conds == cond
        per_cond[cond] = rank_k(dist[rows], probe.identities[rows], gallery.identities, 1,
                                None if excl is None else excl[rows])
    matrix = None
    if cross_view:
        matrix = {}
        for u in sorted(set(probe.views.tolist())):
            for v in sorted(set(gallery.views.tolist())):
                pr, gr = probe.views == u, gallery.views == v
                sub = dist[np.ix_(pr, gr)]
                sub_ex = None if excl is None else excl[np.ix_(pr, gr)]
                try:
                    matrix[(u, v)] = rank_k(sub, probe.identities[pr], gallery.identities[gr], 1, sub_ex)
                except ProtocolError:
                    matrix[(u, v)] = float("nan")
    return ProtocolReport(name, r1, r5, per_cond, matrix)


def evaluate_protocol(emb: EmbeddingSet, protocol: Protocol,
                      gallery: EmbeddingSet | None = None) -> ProtocolReport:
    """Probe rows of ``protocol.probe`` against gallery rows of ``protocol.gallery``."""
    gal_src = emb if gallery is None else gallery
    probe = emb.subset(emb.streams == protocol.probe)
    gal = gal_src.subset(gal_src.streams == protocol.gallery)
    if len(probe) == 0:
        raise ProtocolError(f"{protocol.name}: no {protocol.probe} sequences for the probe role")
    if len(gal) == 0:
        raise ProtocolError(f"{protocol.name}: no {protocol.gallery} sequences for the gallery role")
    return evaluate_sets(probe, gal, protocol.name, protocol.exclude_self, protocol.cross_view)


# -- files ----------------------------------------------------------------------

def write_embeddings(path: str | os.PathLike, emb: EmbeddingSet) -> None:
    vec_len = emb.vectors.shape[1] if len(emb) else 0
    parts = [EMB_MAGIC, struct.pack("<IQI", EMB_VERSION, len(emb), vec_len)]
    for i in range(len(emb)):
        sid = emb.sequence_ids[i].encode("utf-8")
        parts.append(struct.pack("<H", len(sid)) + sid)
        parts.append(struct.pack("<IBHB", int(emb.identities[i]), CONDITION_KINDS.index(emb.conditions[i]),
                                 int(emb.views[i]), MODALITIES.index(emb.modalities[i])))
        parts.append(np.ascontiguousarray(emb.vectors[i], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))
    # the binary layout has no part count; keep it beside the file
    Path(str(path) + ".json").write_text(json.dumps({"num_parts": emb.num_parts}))


def read_embeddings(path: str | os.PathLike, num_parts: int | None = None) -> EmbeddingSet:
    path = Path(path)
    buf = path.read_bytes()

    def fail(msg, off):
        raise EmbeddingFileError(f"{path}: {msg} at byte offset {off}")

    if buf[:len(EMB_MAGIC)] != EMB_MAGIC:
        fail(f"bad magic {buf[:len(EMB_MAGIC)]!r}", 0)
    pos = len(EMB_MAGIC)
    if len(buf) < pos + 16:
        fail("truncated header", len(buf))
    version, count, vec_len = struct.unpack_from("<IQI", buf, pos)
    if version != EMB_VERSION:
        fail(f"unsupported version {version}", len(EMB_MAGIC))
    pos += 16
    ids, idents, conds, views, mods = [], [], [], [], []
    vecs = np.empty((count, vec_len), dtype=np.float32) if count < 1 << 24 else None
    if vecs is None:
        fail(f"implausible row count {count}", len(EMB_MAGIC) + 4)
    for row in range(count):
        if pos + 2 > len(buf):
            fail(f"truncated row {row}", pos)
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + n + 8 + 4 * vec_len > len(buf):
            fail(f"truncated row {row}", pos)
        try:
            ids.append(buf[pos:pos + n].decode("utf-8"))
        except UnicodeDecodeError:
            fail(f"row {row}: sequence id is not utf-8", pos)
        pos += n
        ident, cond, view, mod = struct.unpack_from("<IBHB", buf, pos)
        if cond >= len(CONDITION_KINDS) or mod >= len(MODALITIES):
            fail(f"row {row}: condition code {cond} / modality code {mod} out of range", pos)
        pos += 8
        idents.append(ident)
        conds.append(CONDITION_KINDS[cond])
        views.append(view)
        mods.append(MODALITIES[mod])
        vecs[row] = np.frombuffer(buf, dtype="<f4", count=vec_len, offset=pos)
        pos += 4 * vec_len
    if pos != len(buf):
        fail(f"{len(buf) - pos} trailing bytes", pos)
    if num_parts is None:
        side = Path(str(path) + ".json")
        num_parts = json.loads(side.read_text())["num_parts"] if side.exists() else 1
    try:
        return EmbeddingSet(ids, idents, conds, views, mods, vecs, int(num_parts))
    except ValueError as exc:
        raise EmbeddingFileError(f"{path}: {exc}") from None


def write_report(report: ProtocolReport, path: str | os.PathLike, fmt: str = "csv") -> Path:
    path = Path(path)
    rows = report.rows()
    rank5_ok = report.rank5 >= report.rank1
    if not rank5_ok:
        raise AssertionError(f"{report.protocol}: rank-5 {report.rank5} below rank-1 {report.rank1}")
    if fmt == "csv":
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in rows:
                w.writerow([*r[:5], f"{r[5]:.2f}"])
    elif fmt == "json":
        doc = {"protocol": report.protocol, "rank1": round(report.rank1, 2),
               "rank5": round(report.rank5, 2),
               "per_condition": {k: round(v, 2) for k, v in report.per_condition.items()}}
        if report.view_matrix is not None:
            doc["view_matrix"] = [{"view_probe": u, "view_gallery": g, "rank1": round(v, 2),
                                   "same_view": u == g} for (u, g), v in sorted(report.view_matrix.items())]
        path.write_text(json.dumps(doc, indent=2) + "\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def read_report(path: str | os.PathLike) -> ProtocolReport:
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        matrix = None
        if "view_matrix" in doc:
            matrix = {(c["view_probe"], c["view_gallery"]): c["rank1"] for c in doc["view_matrix"]}
        return ProtocolReport(doc["protocol"], doc["rank1"], doc["rank5"], doc["per_condition"], matrix)
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    name = rows[0]["protocol"]
    rep = ProtocolReport(name, 0.0, 0.0, {}, None)
    for r in rows:
        val = float(r["value"])
        if r["metric"] in ("rank1", "rank5") and r["condition"] == "all":
            setattr(rep, r["metric"], val)
        elif r["metric"] == "rank1":
            rep.per_condition[r["condition"]] = val
        else:
            rep.view_matrix = rep.view_matrix or {}
            rep.view_matrix[(int(r["view_probe"]), int(r["view_gallery"]))] = val
    return rep
