"""Column index over link/wait variables, row index over observed cells, and
the sparse path-incidence matrix that maps variables to path travel times."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path as FsPath
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .afc import IntervalSpec
from .network import Direction, ExpandedNetwork, LinkKind, NodeKind, Path

MATRIX_MAGIC = b"URTCGA\x00\x00"
MATRIX_VERSION = 1
EXACT_RANK_MAX_COLUMNS = 2000


class VectorizeError(ValueError):
    pass


@dataclass(frozen=True)
class VariableIndex:
    link_ids: tuple[int, ...]
    wait_pairs: tuple[tuple[int, Direction], ...]
    n_intervals: int

    @property
    def n_links(self) -> int:
        return len(self.link_ids)

    @property
    def n_wait_pairs(self) -> int:
        return len(self.wait_pairs)

    @property
    def total_columns(self) -> int:
        return self.n_links + self.n_wait_pairs * self.n_intervals

    @property
    def link_columns(self) -> dict[int, int]:
        return {lid: i for i, lid in enumerate(self.link_ids)}

    @property
    def wait_columns(self) -> dict[tuple[int, Direction, int], int]:
        return {(node, d, h): self.wait_column(j, h)
                for j, (node, d) in enumerate(self.wait_pairs) for h in range(self.n_intervals)}

    def wait_column(self, pair_index: int, h: int) -> int:
        return self.n_links + pair_index * self.n_intervals + h

    def link_slice(self) -> slice:
        return slice(0, self.n_links)

    def wait_slice(self) -> slice:
        return slice(self.n_links, self.total_columns)

    def wait_matrix(self, t: np.ndarray) -> np.ndarray:
        """Wait part of ``t`` as an (N_v, H) array."""
        return np.asarray(t)[self.wait_slice()].reshape(self.n_wait_pairs, self.n_intervals)

    def names(self, net: ExpandedNetwork) -> list[str]:
        out = [net.describe_link(lid) for lid in self.link_ids]
        for node, d in self.wait_pairs:
            n = net.nodes[node]
            out.extend(f"Wait:{n.station_id}:L{n.line}:{d.name}:h{h}" for h in range(self.n_intervals))
        return out

    def to_json(self) -> dict:
        return {"link_ids": list(self.link_ids), "wait_pairs": [[n, int(d)] for n, d in self.wait_pairs],
                "n_intervals": self.n_intervals}

    @classmethod
    def from_json(cls, doc: Mapping) -> "VariableIndex":
        return cls(tuple(doc["link_ids"]), tuple((n, Direction(d)) for n, d in doc["wait_pairs"]),
                   doc["n_intervals"])


def build_variable_index(net: ExpandedNetwork, spec: IntervalSpec | int) -> VariableIndex:
    """Learnable links by link id, then one wait column per (platform, direction, interval).

    Only (platform, direction) pairs that have a Board link get wait columns.
    """
    n_intervals = spec if isinstance(spec, int) else spec.count
    links = tuple(a.link_id for a in net.links if a.learnable)
    pairs = sorted({(a.tail, a.direction) for a in net.links if a.kind is LinkKind.BOARD})
    for node, _ in pairs:
        if net.nodes[node].kind is not NodeKind.PLATFORM:
            raise VectorizeError(f"board link leaves non-platform node {node}")
    return VariableIndex(links, tuple(pairs), n_intervals)


@dataclass(frozen=True)
class RowIndex:
    """Observed (od, h) cells and, nested inside each, its path rows.

    Path rows are contiguous per cell: cell ``i`` owns path rows
    ``od_ptr[i]:od_ptr[i+1]``.
    """

    od_rows: tuple[tuple[int, int, int], ...]
    path_rows: tuple[tuple[int, int, int, int], ...]
    paths: tuple[Path, ...]
    od_ptr: np.ndarray

    @property
    def n_od_rows(self) -> int:
        return len(self.od_rows)

    @property
    def n_path_rows(self) -> int:
        return len(self.path_rows)

    @property
    def od_of_path(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_od_rows), np.diff(self.od_ptr))

    def interval_of_path(self) -> np.ndarray:
        return np.array([r[3] for r in self.path_rows], dtype=int)

    def path_rows_of(self, od_rows: np.ndarray) -> np.ndarray:
        lo, hi = self.od_ptr[od_rows], self.od_ptr[od_rows + 1]
        return np.concatenate([np.arange(a, b) for a, b in zip(lo, hi)]) if len(od_rows) else np.zeros(0, int)


def build_row_index(
    cells: Iterable[tuple[int, int, int]],
    paths: Mapping[tuple[int, int], Sequence[Path]],
) -> tuple[RowIndex, list[tuple[int, int, int]]]:
    """Row index for the observed cells; cells whose OD has no path are returned separately."""
    od_rows, path_rows, row_paths, ptr, skipped = [], [], [], [0], []
    for (o, d, h) in sorted(set(cells)):
        plist = paths.get((o, d), ())
        if not plist:
            skipped.append((o, d, h))
            continue
        od_rows.append((o, d, h))
        for k, p in enumerate(plist):
            path_rows.append((o, d, k, h))
            row_paths.append(p)
        ptr.append(len(path_rows))
    return RowIndex(tuple(od_rows), tuple(path_rows), tuple(row_paths), np.asarray(ptr, dtype=np.int64)), skipped


def path_columns(path: Path, net: ExpandedNetwork, index: VariableIndex, h: int,
                 link_cols: Mapping[int, int] | None = None,
                 pair_pos: Mapping[tuple[int, Direction], int] | None = None) -> list[int]:
    link_cols = index.link_columns if link_cols is None else link_cols
    pair_pos = {p: j for j, p in enumerate(index.wait_pairs)} if pair_pos is None else pair_pos
    cols = []
    for lid in path.links:
        if net.links[lid].learnable:
            if lid not in link_cols:
                raise VectorizeError(f"path {path.path_id}: link {lid} has no column")
            cols.append(link_cols[lid])
    for ev in path.wait_events:
        if ev not in pair_pos:
            raise VectorizeError(f"path {path.path_id}: wait at {ev} has no column")
        cols.append(index.wait_column(pair_pos[ev], h))
    return cols


def build_incidence(net: ExpandedNetwork, index: VariableIndex, rows: RowIndex) -> sp.csr_matrix:
    """0/1 CSR matrix, one row per (od, k, h) path row, one column per variable.

    The link-column block plays the role of the link incidence and the wait
    block the per-interval node incidence; they are column ranges of this one
    matrix rather than separate objects.
    """
    link_cols = index.link_columns
    pair_pos = {p: j for j, p in enumerate(index.wait_pairs)}
    indptr = [0]
    indices: list[int] = []
    for (o, d, k, h), path in zip(rows.path_rows, rows.paths):
        if not 0 <= h < index.n_intervals:
            raise VectorizeError(f"path {path.path_id}: interval {h} out of range")
        cols = sorted(path_columns(path, net, index, h, link_cols, pair_pos))
        if len(set(cols)) != len(cols):
            raise VectorizeError(f"path {path.path_id}: repeated column")
        indices.extend(cols)
        indptr.append(len(indices))
    A = sp.csr_matrix((np.ones(len(indices)), np.asarray(indices, dtype=np.int64), np.asarray(indptr, dtype=np.int64)),
                      shape=(rows.n_path_rows, index.total_columns))
    A.has_sorted_indices = True
    return A


@dataclass(frozen=True)
class CoverageReport:
    column_counts: np.ndarray
    uncovered: tuple[int, ...]
    rank: int | None
    total_columns: int

    @property
    def rank_deficient(self) -> bool | None:
        return None if self.rank is None else self.rank < self.total_columns

    def to_json(self, names: Sequence[str] | None = None) -> dict:
        doc = {"total_columns": self.total_columns, "uncovered": list(self.uncovered),
               "rank": self.rank, "rank_deficient": self.rank_deficient,
               "min_rows_per_column": int(self.column_counts.min()) if self.total_columns else 0}
        if names is not None:
            doc["uncovered_names"] = [names[i] for i in self.uncovered]
        return doc


def coverage_report(A: sp.spmatrix, max_rank_columns: int = EXACT_RANK_MAX_COLUMNS) -> CoverageReport:
    A = sp.csr_matrix(A)
    counts = np.bincount(A.indices, minlength=A.shape[1])
    uncovered = tuple(int(i) for i in np.flatnonzero(counts == 0))
    rank = None
    if A.shape[1] <= max_rank_columns:
        rank = int(np.linalg.matrix_rank(A.toarray())) if A.shape[0] else 0
    return CoverageReport(counts, uncovered, rank, A.shape[1])


# ---------------------------------------------------------------------------
# persistence: CSR arrays in a small binary container plus a JSON manifest


def save_incidence(A: sp.csr_matrix, path) -> None:
    A = sp.csr_matrix(A)
    A.sort_indices()
    if A.nnz and not np.all(A.data == 1):
        raise VectorizeError("incidence matrix must be 0/1")
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<IQQQ", MATRIX_VERSION, A.shape[0], A.shape[1], A.nnz))
        fh.write(np.asarray(A.indptr, dtype="<i8").tobytes())
        fh.write(np.asarray(A.indices, dtype="<i8").tobytes())


def load_incidence(path) -> sp.csr_matrix:
    raw = FsPath(path).read_bytes()
    if raw[:8] != MATRIX_MAGIC:
        raise VectorizeError("bad magic: not an incidence matrix file")
    version, n_rows, n_cols, nnz = struct.unpack_from("<IQQQ", raw, 8)
    if version != MATRIX_VERSION:
        raise VectorizeError(f"unsupported matrix version {version}")
    off = 8 + struct.calcsize("<IQQQ")
    if len(raw) != off + 8 * (n_rows + 1 + nnz):
        raise VectorizeError("truncated or oversized matrix file")
    indptr = np.frombuffer(raw, dtype="<i8", count=n_rows + 1, offset=off).astype(np.int64)
    off += 8 * (n_rows + 1)
    indices = np.frombuffer(raw, dtype="<i8", count=nnz, offset=off).astype(np.int64)
    return sp.csr_matrix((np.ones(nnz), indices, indptr), shape=(n_rows, n_cols))


def rows_to_json(rows: RowIndex) -> dict:
    return {
        "od_rows": [list(r) for r in rows.od_rows],
        "path_rows": [list(r) for r in rows.path_rows],
        "od_ptr": rows.od_ptr.tolist(),
        "paths": [{"path_id": p.path_id, "od": list(p.od), "links": list(p.links), "nodes": list(p.nodes),
                   "wait_events": [[n, int(d)] for n, d in p.wait_events], "prior_cost_min": p.prior_cost_min}
                  for p in rows.paths],
    }


def rows_from_json(doc: Mapping) -> RowIndex:
    paths = tuple(Path(p["path_id"], tuple(p["od"]), tuple(p["links"]), tuple(p["nodes"]),
                       tuple((n, Direction(d)) for n, d in p["wait_events"]), p["prior_cost_min"])
                  for p in doc["paths"])
    return RowIndex(tuple(tuple(r) for r in doc["od_rows"]), tuple(tuple(r) for r in doc["path_rows"]),
                    paths, np.asarray(doc["od_ptr"], dtype=np.int64))


def save_problem(A: sp.csr_matrix, index: VariableIndex, rows: RowIndex, stem) -> None:
    """Write ``<stem>.csr`` and ``<stem>.json`` so estimation can reload without path search."""
    stem = FsPath(stem)
    save_incidence(A, stem.with_suffix(".csr"))
    doc = {"format": "urtcg-problem", "version": 1, "index": index.to_json(), "rows": rows_to_json(rows)}
    stem.with_suffix(".json").write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_problem(stem) -> tuple[sp.csr_matrix, VariableIndex, RowIndex]:
    stem = FsPath(stem)
    doc = json.loads(stem.with_suffix(".json").read_text())
    A = load_incidence(stem.with_suffix(".csr"))
    index, rows = VariableIndex.from_json(doc["index"]), rows_from_json(doc["rows"])
    if A.shape != (rows.n_path_rows, index.total_columns):
        raise VectorizeError("matrix shape does not match manifest")
    return A, index, rows
