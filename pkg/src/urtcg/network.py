"""Expanded URT network: stations exploded into gate / platform / train-gate nodes.

A trip through the expanded graph always has the shape

    Gate -Entry-> Platform -Board-> TrainGate -Vehicle->* TrainGate -Alight-> Platform
         [-Transfer-> Platform -Board-> TrainGate -Vehicle->* ... -Alight-> Platform]
         -Exit-> Gate

and the path search enforces that grammar, so every path carries exactly one
boarding wait plus one per transfer.
"""
from __future__ import annotations

import csv
import heapq
import io
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from pathlib import Path as FsPath
from typing import Iterable, Mapping, Sequence

import numpy as np

TRANSFER_LINE = 100
ENTRY_EXIT_LINE = 10000
ENTRY_CODE_OFFSET = 10000

LINK_TABLE_COLUMNS = (
    "origin_station",
    "destination_station",
    "direction",
    "line",
    "origin_name",
    "destination_name",
    "distance_m",
)
SNAPSHOT_FORMAT = "urtcg-network"
SNAPSHOT_VERSION = 1


class NetworkError(ValueError):
    pass


class UnreachableODWarning(UserWarning):
    pass


class Direction(IntEnum):
    # values are the wire codes of the link table
    UP = 0
    DOWN = 1
    NONE = 2


class NodeKind(str, Enum):
    GATE = "GateMachine"
    PLATFORM = "Platform"
    TRAIN_GATE = "TrainGate"


class LinkKind(str, Enum):
    ENTRY = "Entry"
    EXIT = "Exit"
    VEHICLE = "Vehicle"
    TRANSFER = "Transfer"
    BOARD = "Board"
    ALIGHT = "Alight"


LEARNABLE_KINDS = frozenset({LinkKind.ENTRY, LinkKind.EXIT, LinkKind.VEHICLE, LinkKind.TRANSFER})

# allowed successor kinds; None is the trip start at the origin gate
_NEXT_KINDS = {
    None: frozenset({LinkKind.ENTRY}),
    LinkKind.ENTRY: frozenset({LinkKind.BOARD}),
    LinkKind.BOARD: frozenset({LinkKind.VEHICLE}),
    LinkKind.VEHICLE: frozenset({LinkKind.VEHICLE, LinkKind.ALIGHT}),
    LinkKind.ALIGHT: frozenset({LinkKind.TRANSFER, LinkKind.EXIT}),
    LinkKind.TRANSFER: frozenset({LinkKind.BOARD}),
    LinkKind.EXIT: frozenset(),
}


@dataclass(frozen=True)
class PriorSpeeds:
    """Constants turning link distances into prior travel times.

    Walking distances in the link table are train-equivalent distances (the
    walking time multiplied by the train speed), so by default they are
    converted back at the train speed as well.
    """

    train_kmh: float = 30.0
    walk_kmh: float = 30.0
    default_walk_min: float = 1.0
    board_wait_min: float = 2.0

    @staticmethod
    def m_per_min(kmh: float) -> float:
        return kmh * 1000.0 / 60.0


@dataclass(frozen=True)
class Station:
    station_id: int
    name: str
    lines: tuple[int, ...]
    # external station number used on each line (e.g. 104 for station 4 on line 2)
    codes: tuple[tuple[int, int], ...] = ()

    @property
    def is_transfer(self) -> bool:
        return len(self.lines) >= 2

    def code_on(self, line: int) -> int:
        for ln, code in self.codes:
            if ln == line:
                return code
        return self.station_id


@dataclass(frozen=True)
class Node:
    node_id: int
    station_id: int
    kind: NodeKind
    line: int | None = None
    direction: Direction = Direction.NONE


@dataclass(frozen=True)
class Link:
    link_id: int
    tail: int
    head: int
    kind: LinkKind
    line: int
    direction: Direction
    distance_m: float | None
    prior_time_min: float

    @property
    def learnable(self) -> bool:
        return self.kind in LEARNABLE_KINDS


@dataclass(frozen=True)
class Path:
    path_id: int
    od: tuple[int, int]
    links: tuple[int, ...]
    nodes: tuple[int, ...]
    wait_events: tuple[tuple[int, Direction], ...]
    prior_cost_min: float


@dataclass(frozen=True)
class Issue:
    code: str
    message: str


@dataclass(frozen=True)
class ExpandedNetwork:
    stations: tuple[Station, ...]
    nodes: tuple[Node, ...]
    links: tuple[Link, ...]
    speeds: PriorSpeeds = PriorSpeeds()

    _out: tuple = field(init=False, repr=False, compare=False)
    _in: tuple = field(init=False, repr=False, compare=False)
    _station: dict = field(init=False, repr=False, compare=False)
    _code: dict = field(init=False, repr=False, compare=False)
    _gate: dict = field(init=False, repr=False, compare=False)
    _platform: dict = field(init=False, repr=False, compare=False)
    _train_gate: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for i, n in enumerate(self.nodes):
            if n.node_id != i:
                raise NetworkError(f"node ids must be 0..N-1, got {n.node_id} at {i}")
        for i, a in enumerate(self.links):
            if a.link_id != i:
                raise NetworkError(f"link ids must be 0..M-1, got {a.link_id} at {i}")
        out: list[list[int]] = [[] for _ in self.nodes]
        inc: list[list[int]] = [[] for _ in self.nodes]
        for a in self.links:
            out[a.tail].append(a.link_id)
            inc[a.head].append(a.link_id)
        gate, platform, train_gate = {}, {}, {}
        for n in self.nodes:
            if n.kind is NodeKind.GATE:
                gate[n.station_id] = n.node_id
            elif n.kind is NodeKind.PLATFORM:
                platform[(n.station_id, n.line)] = n.node_id
            else:
                train_gate[(n.station_id, n.line, n.direction)] = n.node_id
        code = {}
        for s in self.stations:
            code[s.station_id] = s.station_id
            for _, c in s.codes:
                code[c] = s.station_id
        set_ = object.__setattr__
        set_(self, "_out", tuple(tuple(x) for x in out))
        set_(self, "_in", tuple(tuple(x) for x in inc))
        set_(self, "_station", {s.station_id: s for s in self.stations})
        set_(self, "_code", code)
        set_(self, "_gate", gate)
        set_(self, "_platform", platform)
        set_(self, "_train_gate", train_gate)

    def out_links(self, node_id: int) -> tuple[int, ...]:
        return self._out[node_id]

    def in_links(self, node_id: int) -> tuple[int, ...]:
        return self._in[node_id]

    def station(self, station_id: int) -> Station:
        return self._station[station_id]

    def canonical_station(self, code: int) -> int:
        """Map an external station number (possibly a per-line alias) to its station id."""
        try:
            return self._code[code]
        except KeyError:
            raise NetworkError(f"unknown station {code}") from None

    def has_station(self, code: int) -> bool:
        return code in self._code

    def gate(self, station_id: int) -> int:
        return self._gate[station_id]

    def platform(self, station_id: int, line: int) -> int:
        return self._platform[(station_id, line)]

    def train_gate(self, station_id: int, line: int, direction: Direction) -> int:
        return self._train_gate[(station_id, line, direction)]

    def prior_weights(self) -> np.ndarray:
        return np.array([a.prior_time_min for a in self.links], dtype=float)

    def links_of_kind(self, *kinds: LinkKind) -> list[Link]:
        return [a for a in self.links if a.kind in kinds]

    def station_ids(self) -> list[int]:
        return [s.station_id for s in self.stations]

    def od_pairs(self) -> list[tuple[int, int]]:
        ids = self.station_ids()
        return [(r, s) for r in ids for s in ids if r != s]

    def describe_link(self, link_id: int) -> str:
        a = self.links[link_id]
        t, h = self.nodes[a.tail], self.nodes[a.head]
        return f"{a.kind.value}:{t.station_id}->{h.station_id}:L{a.line}:{a.direction.name}"


# ---------------------------------------------------------------------------
# station expansion


def _walk_prior(distance: float | None, speeds: PriorSpeeds) -> float:
    if distance is None:
        return speeds.default_walk_min
    return distance / speeds.m_per_min(speeds.walk_kmh)


def expand_station(
    station: Station,
    first_node_id: int = 0,
    first_link_id: int = 0,
    *,
    entry_distance: float | None = None,
    transfer_distances: Mapping[tuple[int, int], float] | None = None,
    speeds: PriorSpeeds = PriorSpeeds(),
) -> tuple[list[Node], list[Link]]:
    """Explode one station into its nodes and internal links.

    One gate machine node, then per served line a platform and an Up/Down pair
    of train gates. Every line gets Entry/Exit links to the gate, Board/Alight
    links to both train gates, and every ordered pair of platforms gets a
    Transfer link.
    """
    if not station.lines:
        raise NetworkError(f"station {station.station_id} serves no line")
    transfer_distances = transfer_distances or {}
    sid = station.station_id
    nodes = [Node(first_node_id, sid, NodeKind.GATE)]
    plat: dict[int, int] = {}
    tg: dict[tuple[int, Direction], int] = {}
    for line in station.lines:
        plat[line] = first_node_id + len(nodes)
        nodes.append(Node(plat[line], sid, NodeKind.PLATFORM, line))
        for d in (Direction.UP, Direction.DOWN):
            tg[(line, d)] = first_node_id + len(nodes)
            nodes.append(Node(tg[(line, d)], sid, NodeKind.TRAIN_GATE, line, d))

    gate = first_node_id
    walk = _walk_prior(entry_distance, speeds)
    links: list[Link] = []

    def add(tail, head, kind, line, direction, dist, prior):
        links.append(Link(first_link_id + len(links), tail, head, kind, line, direction, dist, prior))

    for line in station.lines:
        add(gate, plat[line], LinkKind.ENTRY, ENTRY_EXIT_LINE, Direction.NONE, entry_distance, walk)
        add(plat[line], gate, LinkKind.EXIT, ENTRY_EXIT_LINE, Direction.NONE, entry_distance, walk)
    for line in station.lines:
        for d in (Direction.UP, Direction.DOWN):
            add(plat[line], tg[(line, d)], LinkKind.BOARD, line, d, None, speeds.board_wait_min)
            add(tg[(line, d)], plat[line], LinkKind.ALIGHT, line, d, None, 0.0)
    for la in station.lines:
        for lb in station.lines:
            if la == lb:
                continue
            dist = transfer_distances.get((min(la, lb), max(la, lb)))
            add(plat[la], plat[lb], LinkKind.TRANSFER, TRANSFER_LINE, Direction.NONE, dist,
                _walk_prior(dist, speeds))
    return nodes, links


@dataclass(frozen=True)
class VehicleSegment:
    tail_station: int
    head_station: int
    line: int
    direction: Direction
    distance_m: float


def build_network(
    stations: Sequence[Station],
    segments: Sequence[VehicleSegment],
    entry_distances: Mapping[int, float] | None = None,
    transfer_distances: Mapping[tuple[int, int, int], float] | None = None,
    speeds: PriorSpeeds = PriorSpeeds(),
) -> ExpandedNetwork:
    """Assemble an expanded network from stations and directed vehicle segments.

    ``transfer_distances`` is keyed by ``(station_id, line_lo, line_hi)``.
    Board links onto a train gate with no departing vehicle link, and Alight
    links off a train gate with no arriving one, are dropped.
    """
    entry_distances = entry_distances or {}
    transfer_distances = transfer_distances or {}
    stations = sorted(stations, key=lambda s: s.station_id)
    by_id = {s.station_id: s for s in stations}
    if len(by_id) != len(stations):
        raise NetworkError("duplicate station id")

    nodes: list[Node] = []
    templates: list[Link] = []
    for s in stations:
        tdist = {(a, b): d for (sid, a, b), d in transfer_distances.items() if sid == s.station_id}
        n, lk = expand_station(s, len(nodes), 0, entry_distance=entry_distances.get(s.station_id),
                               transfer_distances=tdist, speeds=speeds)
        nodes.extend(n)
        templates.extend(lk)

    tg = {(n.station_id, n.line, n.direction): n.node_id for n in nodes if n.kind is NodeKind.TRAIN_GATE}
    vehicle: list[Link] = []
    seen = set()
    v_speed = speeds.m_per_min(speeds.train_kmh)
    for seg in sorted(segments, key=lambda g: (g.line, g.direction, g.tail_station, g.head_station)):
        for sid in (seg.tail_station, seg.head_station):
            if sid not in by_id:
                raise NetworkError(f"vehicle segment references unknown station {sid}")
            if seg.line not in by_id[sid].lines:
                raise NetworkError(f"station {sid} does not serve line {seg.line}")
        if seg.tail_station == seg.head_station:
            raise NetworkError(f"vehicle segment loops on station {seg.tail_station}")
        key = (seg.tail_station, seg.head_station, seg.line, seg.direction)
        if key in seen:
            raise NetworkError(f"duplicate vehicle segment {key}")
        seen.add(key)
        vehicle.append(Link(0, tg[(seg.tail_station, seg.line, seg.direction)],
                            tg[(seg.head_station, seg.line, seg.direction)], LinkKind.VEHICLE,
                            seg.line, seg.direction, float(seg.distance_m), seg.distance_m / v_speed))

    departs = {a.tail for a in vehicle}
    arrives = {a.head for a in vehicle}
    kept = [a for a in templates
            if not (a.kind is LinkKind.BOARD and a.head not in departs)
            and not (a.kind is LinkKind.ALIGHT and a.tail not in arrives)]
    links = [replace(a, link_id=i) for i, a in enumerate(kept + vehicle)]
    return ExpandedNetwork(tuple(stations), tuple(nodes), tuple(links), speeds)


# ---------------------------------------------------------------------------
# link table I/O


@dataclass(frozen=True)
class LinkRow:
    origin_station: int
    destination_station: int
    direction: int
    line: int
    origin_name: str
    destination_name: str
    distance_m: float

    @classmethod
    def coerce(cls, row) -> "LinkRow":
        if isinstance(row, LinkRow):
            return row
        if isinstance(row, Mapping):
            vals = [row[c] for c in LINK_TABLE_COLUMNS]
        else:
            vals = list(row)
            if len(vals) != len(LINK_TABLE_COLUMNS):
                raise NetworkError(f"expected {len(LINK_TABLE_COLUMNS)} fields, got {len(vals)}")
        return cls(int(vals[0]), int(vals[1]), int(vals[2]), int(vals[3]),
                   str(vals[4]), str(vals[5]), float(vals[6]))


class _Union:
    def __init__(self):
        self.parent: dict[int, int] = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            lo, hi = sorted((ra, rb))
            self.parent[hi] = lo


def load_link_table(rows: Iterable, speeds: PriorSpeeds = PriorSpeeds()) -> ExpandedNetwork:
    """Build an expanded network from link-distance rows.

    Direction 0/1 rows are Up/Down vehicle links. Line-100 rows are transfer
    walks; when they join two different station numbers those numbers are
    merged into one physical transfer station. Line-10000 rows
    (``10000 + s -> s``) give the entry/exit walk distance of station ``s``.
    """
    rows = [LinkRow.coerce(r) for r in rows]
    if not rows:
        raise NetworkError("no links")

    code_lines: dict[int, set[int]] = {}
    names: dict[int, str] = {}
    vehicle_rows, transfer_rows, entry_rows = [], [], []
    keys: dict[tuple, int] = {}
    for i, r in enumerate(rows):
        if not r.distance_m > 0 or not math.isfinite(r.distance_m):
            raise NetworkError(f"row {i}: non-positive distance {r.distance_m}")
        if r.line == ENTRY_EXIT_LINE:
            key = ("entry", r.destination_station)
            entry_rows.append((i, r))
        elif r.line == TRANSFER_LINE:
            key = ("transfer",) + tuple(sorted((r.origin_station, r.destination_station)))
            transfer_rows.append((i, r))
        elif r.direction in (Direction.UP, Direction.DOWN):
            if r.origin_station == r.destination_station:
                raise NetworkError(f"row {i}: vehicle link loops on station {r.origin_station}")
            key = ("vehicle", r.origin_station, r.destination_station, r.direction, r.line)
            vehicle_rows.append((i, r))
            for code, name in ((r.origin_station, r.origin_name), (r.destination_station, r.destination_name)):
                code_lines.setdefault(code, set()).add(r.line)
                names.setdefault(code, name)
        else:
            raise NetworkError(f"row {i}: direction {r.direction} invalid for line {r.line}")
        if key in keys:
            raise NetworkError(f"row {i}: duplicate of row {keys[key]}")
        keys[key] = i

    if not vehicle_rows:
        raise NetworkError("no vehicle links")

    uf = _Union()
    for code in code_lines:
        uf.find(code)
    for i, r in transfer_rows:
        for code in (r.origin_station, r.destination_station):
            if code not in code_lines:
                raise NetworkError(f"row {i}: transfer references unknown station {code}")
        uf.union(r.origin_station, r.destination_station)
    for i, r in entry_rows:
        if r.destination_station not in code_lines:
            raise NetworkError(f"row {i}: entry/exit references unknown station {r.destination_station}")

    groups: dict[int, list[int]] = {}
    for code in sorted(code_lines):
        groups.setdefault(uf.find(code), []).append(code)
    stations = []
    for root, codes in groups.items():
        line_code: dict[int, int] = {}
        for code in codes:
            for line in code_lines[code]:
                if line in line_code and line_code[line] != code:
                    raise NetworkError(f"station numbers {line_code[line]} and {code} merged on line {line}")
                line_code[line] = code
        lines = tuple(sorted(line_code))
        stations.append(Station(root, names[root], lines, tuple((ln, line_code[ln]) for ln in lines)))

    canon = {code: uf.find(code) for code in code_lines}
    segments = [VehicleSegment(canon[r.origin_station], canon[r.destination_station], r.line,
                               Direction(r.direction), r.distance_m) for _, r in vehicle_rows]
    entry = {canon[r.destination_station]: r.distance_m for _, r in entry_rows}
    transfer: dict[tuple[int, int, int], float] = {}
    for i, r in transfer_rows:
        sid = canon[r.origin_station]
        pairs = [(la, lb) for la in code_lines[r.origin_station] for lb in code_lines[r.destination_station]
                 if la != lb]
        if not pairs:
            raise NetworkError(f"row {i}: transfer joins no distinct lines")
        for la, lb in pairs:
            transfer[(sid, min(la, lb), max(la, lb))] = r.distance_m
    return build_network(stations, segments, entry, transfer, speeds)


def read_link_table(path, speeds: PriorSpeeds = PriorSpeeds()) -> ExpandedNetwork:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LINK_TABLE_COLUMNS:
            raise NetworkError(f"link table header must be {','.join(LINK_TABLE_COLUMNS)}")
        return load_link_table(list(reader), speeds)


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def to_link_rows(net: ExpandedNetwork) -> list[LinkRow]:
    """Canonical link-table rows for ``net`` (vehicle, then transfer, then entry/exit)."""
    rows = []
    for a in net.links_of_kind(LinkKind.VEHICLE):
        s, t = net.station(net.nodes[a.tail].station_id), net.station(net.nodes[a.head].station_id)
        rows.append(LinkRow(s.code_on(a.line), t.code_on(a.line), int(a.direction), a.line,
                            s.name, t.name, a.distance_m))
    transfer: dict[tuple[int, int], float] = {}
    for a in net.links_of_kind(LinkKind.TRANSFER):
        if a.distance_m is None:
            continue
        st = net.station(net.nodes[a.tail].station_id)
        la, lb = sorted((net.nodes[a.tail].line, net.nodes[a.head].line))
        key = (st.code_on(la), st.code_on(lb))
        if transfer.setdefault(key, a.distance_m) != a.distance_m:
            raise NetworkError(f"transfer distances at station {st.station_id} not representable as rows")
    for (ca, cb), dist in sorted(transfer.items()):
        name = net.station(net.canonical_station(ca)).name
        rows.append(LinkRow(ca, cb, int(Direction.NONE), TRANSFER_LINE, name, name, dist))
    for s in net.stations:
        entry = [a for a in net.links_of_kind(LinkKind.ENTRY) if net.nodes[a.tail].station_id == s.station_id]
        if entry and entry[0].distance_m is not None:
            rows.append(LinkRow(ENTRY_CODE_OFFSET + s.station_id, s.station_id, int(Direction.NONE),
                                ENTRY_EXIT_LINE, s.name, s.name, entry[0].distance_m))
    return rows


def link_table_csv(net: ExpandedNetwork) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LINK_TABLE_COLUMNS)
    for r in to_link_rows(net):
        w.writerow([r.origin_station, r.destination_station, r.direction, r.line,
                    r.origin_name, r.destination_name, _fmt_num(r.distance_m)])
    return buf.getvalue()


def write_link_table(net: ExpandedNetwork, path) -> None:
    FsPath(path).write_text(link_table_csv(net))


def network_to_json(net: ExpandedNetwork) -> dict:
    return {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "speeds": {k: getattr(net.speeds, k) for k in ("train_kmh", "walk_kmh", "default_walk_min", "board_wait_min")},
        "stations": [{"station_id": s.station_id, "name": s.name, "lines": list(s.lines),
                      "codes": [list(c) for c in s.codes]} for s in net.stations],
        "nodes": [{"node_id": n.node_id, "station_id": n.station_id, "kind": n.kind.value, "line": n.line,
                   "direction": int(n.direction)} for n in net.nodes],
        "links": [{"link_id": a.link_id, "tail": a.tail, "head": a.head, "kind": a.kind.value, "line": a.line,
                   "direction": int(a.direction), "distance_m": a.distance_m,
                   "prior_time_min": a.prior_time_min} for a in net.links],
    }


def network_from_json(doc: Mapping) -> ExpandedNetwork:
    if doc.get("format") != SNAPSHOT_FORMAT:
        raise NetworkError("not a network snapshot")
    if doc.get("version") != SNAPSHOT_VERSION:
        raise NetworkError(f"unsupported snapshot version {doc.get('version')}")
    stations = tuple(Station(s["station_id"], s["name"], tuple(s["lines"]), tuple(tuple(c) for c in s["codes"]))
                     for s in doc["stations"])
    nodes = tuple(Node(n["node_id"], n["station_id"], NodeKind(n["kind"]), n["line"], Direction(n["direction"]))
                  for n in doc["nodes"])
    links = tuple(Link(a["link_id"], a["tail"], a["head"], LinkKind(a["kind"]), a["line"], Direction(a["direction"]),
                       a["distance_m"], a["prior_time_min"]) for a in doc["links"])
    return ExpandedNetwork(stations, nodes, links, PriorSpeeds(**doc["speeds"]))


def save_network(net: ExpandedNetwork, path) -> None:
    FsPath(path).write_text(json.dumps(network_to_json(net), indent=1, sort_keys=True) + "\n")


def load_network(path) -> ExpandedNetwork:
    """Load a network from a JSON snapshot or a link-table CSV."""
    path = FsPath(path)
    if path.suffix.lower() == ".json":
        return network_from_json(json.loads(path.read_text()))
    return read_link_table(path)


# ---------------------------------------------------------------------------
# diagnostics


def validate_network(net: ExpandedNetwork) -> list[Issue]:
    issues: list[Issue] = []
    for n in net.nodes:
        if not net.out_links(n.node_id) and not net.in_links(n.node_id):
            issues.append(Issue("orphan-node", f"node {n.node_id} ({n.kind.value} of station {n.station_id})"))
        if n.kind is NodeKind.PLATFORM:
            kinds = [net.links[i].kind for i in net.out_links(n.node_id)] + \
                    [net.links[i].kind for i in net.in_links(n.node_id)]
            if LinkKind.BOARD not in kinds:
                issues.append(Issue("missing-board", f"platform {n.node_id} of station {n.station_id} line {n.line}"))
            if LinkKind.ALIGHT not in kinds:
                issues.append(Issue("missing-alight", f"platform {n.node_id} of station {n.station_id} line {n.line}"))

    seen = {}
    for a in net.links:
        key = (a.tail, a.head, a.kind, a.direction)
        if key in seen:
            issues.append(Issue("duplicate-link", f"links {seen[key]} and {a.link_id}"))
        seen.setdefault(key, a.link_id)

    vehicle = {}
    for a in net.links_of_kind(LinkKind.VEHICLE):
        vehicle[(net.nodes[a.tail].station_id, net.nodes[a.head].station_id, a.line, a.direction)] = a.link_id
    for (s, t, line, d), lid in vehicle.items():
        back = Direction.DOWN if d is Direction.UP else Direction.UP
        if (t, s, line, back) not in vehicle:
            issues.append(Issue("asymmetric-direction",
                                f"line {line} {d.name} {s}->{t} has no {back.name} counterpart"))

    lines: dict[int, set[int]] = {}
    for st in net.stations:
        for ln in st.lines:
            lines.setdefault(ln, set()).add(st.station_id)
    for ln, members in sorted(lines.items()):
        adj: dict[int, set[int]] = {m: set() for m in members}
        for (s, t, line, _), _lid in vehicle.items():
            if line == ln:
                adj[s].add(t)
                adj[t].add(s)
        start = min(members)
        reached, stack = {start}, [start]
        while stack:
            for nxt in adj[stack.pop()]:
                if nxt not in reached:
                    reached.add(nxt)
                    stack.append(nxt)
        if reached != members:
            issues.append(Issue("disconnected-line", f"line {ln}: stations {sorted(members - reached)} unreachable"))
    return issues


# ---------------------------------------------------------------------------
# path search


def _allowed(net: ExpandedNetwork, link: Link, last: LinkKind | None, dest_gate: int) -> bool:
    if link.kind not in _NEXT_KINDS[last]:
        return False
    if link.kind is LinkKind.EXIT:
        return link.head == dest_gate
    return True


def _lower_bounds(net: ExpandedNetwork, target: int, weights: np.ndarray) -> np.ndarray:
    """Unconstrained cost-to-target for every node (admissible A* heuristic)."""
    dist = np.full(len(net.nodes), np.inf)
    dist[target] = 0.0
    heap = [(0.0, target)]
    while heap:
        d, v = heapq.heappop(heap)
        if d > dist[v]:
            continue
        for lid in net.in_links(v):
            u = net.links[lid].tail
            nd = d + weights[lid]
            if nd < dist[u]:
                dist[u] = nd
                heapq.heappush(heap, (nd, u))
    return dist


def path_cost(links: Sequence[int], weights: np.ndarray) -> float:
    return math.fsum(float(weights[i]) for i in links)


def _shortest_spur(net, start, last_kind, dest_gate, weights, h, banned_nodes, banned_links):
    """Cheapest simple grammar-respecting path from ``start`` to ``dest_gate``.

    Best-first over partial paths with an admissible bound, so the result is
    exact even where the grammar would make a plain label-setting search
    revisit a node. Ties resolve to the lexicographically smallest node
    sequence. Returns ``(nodes, links)`` or None.
    """
    if not np.isfinite(h[start]):
        return None
    heap = [(h[start], (start,), ())]
    best = None
    while heap:
        f, nodes, links = heapq.heappop(heap)
        if best is not None and f > best[0] + 1e-9 * max(1.0, best[0]):
            break
        v = nodes[-1]
        if v == dest_gate and links:
            c = path_cost(links, weights)
            if best is None or (c, nodes) < (best[0], best[1]):
                best = (c, nodes, links)
            continue
        last = net.links[links[-1]].kind if links else last_kind
        g = f - h[v]
        for lid in net.out_links(v):
            a = net.links[lid]
            if lid in banned_links or a.head in banned_nodes or a.head in nodes:
                continue
            if not _allowed(net, a, last, dest_gate):
                continue
            hn = h[a.head]
            if not np.isfinite(hn):
                continue
            heapq.heappush(heap, (g + weights[lid] + hn, nodes + (a.head,), links + (lid,)))
    if best is None:
        return None
    return best[1], best[2]


def _make_path(net, od, nodes, links, weights, path_id=0) -> Path:
    waits = tuple((net.links[i].tail, net.links[i].direction) for i in links
                  if net.links[i].kind is LinkKind.BOARD)
    return Path(path_id, od, tuple(links), tuple(nodes), waits, path_cost(links, weights))


def k_shortest_paths(
    net: ExpandedNetwork,
    od: tuple[int, int],
    k: int = 3,
    weights: np.ndarray | None = None,
    detour_factor: float = 1.5,
) -> list[Path]:
    """Yen's k shortest loopless paths between two stations, gate to gate.

    Paths are ordered by (cost, node sequence). Paths costing more than
    ``detour_factor`` times the shortest one are dropped. An unreachable
    destination yields ``[]`` and an :class:`UnreachableODWarning`.
    """
    if k < 1:
        raise ValueError("k must be positive")
    r, s = od
    if r == s:
        raise NetworkError("origin equals destination")
    r, s = net.canonical_station(r), net.canonical_station(s)
    weights = net.prior_weights() if weights is None else np.asarray(weights, dtype=float)
    if weights.shape != (len(net.links),):
        raise ValueError("weights must cover every link")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite and non-negative")

    src, dst = net.gate(r), net.gate(s)
    h = _lower_bounds(net, dst, weights)
    first = _shortest_spur(net, src, None, dst, weights, h, frozenset(), frozenset())
    if first is None:
        warnings.warn(f"no path from station {r} to station {s}", UnreachableODWarning, stacklevel=2)
        return []

    accepted = [(path_cost(first[1], weights), first[0], first[1])]
    bound = accepted[0][0] * detour_factor + 1e-9 * max(1.0, accepted[0][0])
    candidates: list = []
    seen = {first[0]}
    while len(accepted) < k:
        _, prev_nodes, prev_links = accepted[-1]
        for i in range(len(prev_nodes) - 1):
            root_nodes, root_links = prev_nodes[: i + 1], prev_links[:i]
            banned_links = {p_links[i] for _, p_nodes, p_links in accepted if p_nodes[: i + 1] == root_nodes}
            last = net.links[root_links[-1]].kind if root_links else None
            spur = _shortest_spur(net, prev_nodes[i], last, dst, weights, h,
                                  frozenset(root_nodes[:-1]), frozenset(banned_links))
            if spur is None:
                continue
            nodes = root_nodes[:-1] + spur[0]
            links = root_links + spur[1]
            if nodes in seen:
                continue
            seen.add(nodes)
            heapq.heappush(candidates, (path_cost(links, weights), nodes, links))
        if not candidates:
            break
        nxt = heapq.heappop(candidates)
        if nxt[0] > bound:
            break
        accepted.append(nxt)
    return [_make_path(net, (r, s), nodes, links, weights) for _, nodes, links in accepted]


def enumerate_paths(
    net: ExpandedNetwork,
    ods: Iterable[tuple[int, int]] | None = None,
    k: int = 3,
    weights: np.ndarray | None = None,
    detour_factor: float = 1.5,
) -> dict[tuple[int, int], list[Path]]:
    """k shortest paths for every OD pair, with globally unique path ids."""
    ods = net.od_pairs() if ods is None else sorted(ods)
    out: dict[tuple[int, int], list[Path]] = {}
    pid = 0
    for od in ods:
        paths = k_shortest_paths(net, od, k, weights, detour_factor)
        out[od] = [replace(p, path_id=pid + j) for j, p in enumerate(paths)]
        pid += len(paths)
    return out
