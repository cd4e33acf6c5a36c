"""
Traffic analysis over the server's metadata ledger.

Nothing in here ever sees a ciphertext: every function consumes
`MetadataRecord`s only (ids, timestamps, sizes and group ids), which is
exactly what a relay keeps even when the message contents are end-to-end
encrypted.
"""

from collections import Counter, defaultdict
from dataclasses import dataclass
import datetime
import json
import logging
import pathlib
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import networkx as nx
import numpy as np

from .server import LEDGER_FIELDS, Event, MetadataRecord


logger = logging.getLogger(__name__)

DEFAULT_WINDOW_MS = 2000
DEFAULT_MIN_SIZE = 3
# AES-CBC pads to 16-byte blocks, so one plaintext can land in adjacent sizes.
SIZE_SLACK = 16

REPORT_VERSION = 1
REPORT_TOP_EDGES = 10

MS_PER_HOUR = 3600 * 1000
MS_PER_DAY = 24 * MS_PER_HOUR

_EVENTS = {event.value for event in Event}


class AnalysisException(Exception):
    pass


class LedgerParseError(AnalysisException):
    pass


# Ledger input

def _parse_row(line: str, source: str, lineno: int) -> MetadataRecord:
    def error(message: str) -> LedgerParseError:
        return LedgerParseError(f"{source}:{lineno}: {message}")

    try:
        data = json.loads(line)
    except ValueError as ex:
        raise error(f"Invalid JSON: {ex}") from None

    if not isinstance(data, dict):
        raise error("Expected a JSON object")
    if set(data) != set(LEDGER_FIELDS):
        raise error(f"Expected fields {', '.join(LEDGER_FIELDS)}; got {', '.join(sorted(data))}")

    if data['event'] not in _EVENTS:
        raise error(f"Unknown event {data['event']!r}")
    if not isinstance(data['sender_id'], str):
        raise error("sender_id must be a string")
    for name in ('recipient_id', 'group_id'):
        if data[name] is not None and not isinstance(data[name], str):
            raise error(f"{name} must be a string or null")
    for name in ('timestamp_ms', 'payload_size'):
        value = data[name]
        if isinstance(value, bool) or not isinstance(value, int) or value < 0:
            raise error(f"{name} must be a non-negative integer")

    return MetadataRecord.from_dict(data)


def parse_ledger(lines: Iterable[str], source: str = '<ledger>') -> List[MetadataRecord]:
    rows: List[MetadataRecord] = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        rows.append(_parse_row(line, source, lineno))
    return rows


def read_ledger(path: pathlib.Path) -> List[MetadataRecord]:
    with open(path, encoding='utf-8') as fd:
        return parse_ledger(fd, str(path))


def _relayed(rows: Iterable[MetadataRecord]) -> List[MetadataRecord]:
    return [row for row in rows if row.event == Event.MESSAGE_RELAYED.value and row.recipient_id is not None]


# Contact graph

@dataclass(frozen=True)
class EdgeStats:
    count: int
    bytes: int
    first_ms: int
    last_ms: int


class ContactGraph:
    """Directed who-messaged-whom graph with per-edge aggregates."""

    def __init__(self, graph: Optional[nx.DiGraph] = None) -> None:
        self.graph = graph if graph is not None else nx.DiGraph()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ContactGraph):
            return NotImplemented
        return self.nodes() == other.nodes() and self.edges() == other.edges()

    def __repr__(self) -> str:
        return f'ContactGraph(nodes={self.graph.number_of_nodes()}, edges={self.graph.number_of_edges()})'

    def nodes(self) -> List[str]:
        return sorted(self.graph.nodes)

    def edge(self, sender_id: str, recipient_id: str) -> Optional[EdgeStats]:
        if not self.graph.has_edge(sender_id, recipient_id):
            return None
        return EdgeStats(**self.graph.edges[sender_id, recipient_id])

    def edges(self) -> List[Tuple[str, str, EdgeStats]]:
        return sorted((a, b, EdgeStats(**data)) for a, b, data in self.graph.edges(data=True))

    @property
    def node_count(self) -> int:
        return self.graph.number_of_nodes()

    @property
    def edge_count(self) -> int:
        return self.graph.number_of_edges()


def build_graph(rows: Iterable[MetadataRecord]) -> ContactGraph:
    graph = nx.DiGraph()
    for row in _relayed(rows):
        a, b = row.sender_id, row.recipient_id
        if graph.has_edge(a, b):
            data = graph.edges[a, b]
            data['count'] += 1
            data['bytes'] += row.payload_size
            data['first_ms'] = min(data['first_ms'], row.timestamp_ms)
            data['last_ms'] = max(data['last_ms'], row.timestamp_ms)
        else:
            graph.add_edge(a, b, count=1, bytes=row.payload_size, first_ms=row.timestamp_ms, last_ms=row.timestamp_ms)
    return ContactGraph(graph)


def top_contacts(graph: ContactGraph, user_id: str, k: int) -> List[str]:
    """
    Users `user_id` sends to, most messages first; ties go to more bytes, then
    to the smaller id. An unknown user has no contacts.
    """
    if k < 1:
        raise AnalysisException(f"k must be at least 1, got {k}")
    if user_id not in graph.graph:
        return []

    ranked = sorted(
        graph.graph.out_edges(user_id, data=True),
        key=lambda edge: (-edge[2]['count'], -edge[2]['bytes'], edge[1]),
    )
    return [recipient for _, recipient, _ in ranked[:k]]


def contact_frequency(rows: Iterable[MetadataRecord]) -> Dict[Tuple[str, str], int]:
    counts = Counter((row.sender_id, row.recipient_id) for row in _relayed(rows))
    return dict(counts)


# Group inference

@dataclass(frozen=True)
class InferredGroup:
    members: FrozenSet[str]
    support: int
    # Support ratio among candidate bursts, not a calibrated probability.
    confidence: float

    def sorted_members(self) -> List[str]:
        return sorted(self.members)


def _bursts(events: Sequence[MetadataRecord], window_ms: int) -> List[List[MetadataRecord]]:
    bursts: List[List[MetadataRecord]] = []
    current: List[MetadataRecord] = []
    recipients: Set[str] = set()

    for event in events:
        if current:
            first = current[0]
            if (
                event.timestamp_ms - first.timestamp_ms <= window_ms
                and abs(event.payload_size - first.payload_size) <= SIZE_SLACK
                and event.recipient_id not in recipients
            ):
                current.append(event)
                recipients.add(event.recipient_id)
                continue
            bursts.append(current)

        current = [event]
        recipients = {event.recipient_id}

    if current:
        bursts.append(current)
    return bursts


def _infer_blind(rows: List[MetadataRecord], window_ms: int, min_size: int) -> List[InferredGroup]:
    by_sender: Dict[str, List[MetadataRecord]] = defaultdict(list)
    for row in _relayed(rows):
        by_sender[row.sender_id].append(row)

    candidates: Counter = Counter()
    for sender, events in by_sender.items():
        events.sort(key=lambda row: (row.timestamp_ms, row.recipient_id, row.payload_size))
        for burst in _bursts(events, window_ms):
            if len(burst) >= min_size - 1:
                candidates[frozenset([sender] + [row.recipient_id for row in burst])] += 1

    total = sum(candidates.values())
    return [
        InferredGroup(members, support, support / total)
        for members, support in candidates.items()
    ]


def _infer_labeled(rows: List[MetadataRecord], min_size: int) -> List[InferredGroup]:
    members: Dict[str, Set[str]] = defaultdict(set)
    fan_outs: Dict[str, Set[Tuple[str, int]]] = defaultdict(set)

    for row in rows:
        if row.group_id is None:
            continue
        members[row.group_id].add(row.sender_id)
        if row.event == Event.MESSAGE_RELAYED.value and row.recipient_id is not None:
            members[row.group_id].add(row.recipient_id)
            fan_outs[row.group_id].add((row.sender_id, row.timestamp_ms))

    return [
        InferredGroup(frozenset(group_members), len(fan_outs[group_id]), 1.0)
        for group_id, group_members in members.items()
        if len(group_members) >= min_size
    ]


def infer_groups(
    rows: Iterable[MetadataRecord],
    window_ms: int = DEFAULT_WINDOW_MS,
    min_size: int = DEFAULT_MIN_SIZE,
    blind: bool = True,
) -> List[InferredGroup]:
    """
    Reconstruct group membership from the ledger.

    Labeled mode reads the group ids the server recorded. Blind mode ignores
    them: a sender relaying near-identical payload sizes to at least
    `min_size - 1` distinct recipients within `window_ms` is taken as one
    group message to the sender plus those recipients.
    """
    if window_ms <= 0:
        raise AnalysisException(f"window_ms must be positive, got {window_ms}")
    if min_size < 3:
        raise AnalysisException(f"min_size must be at least 3, got {min_size}")

    row_list = list(rows)
    groups = _infer_blind(row_list, window_ms, min_size) if blind else _infer_labeled(row_list, min_size)
    groups.sort(key=lambda group: (-group.support, group.sorted_members()))
    return groups


def score_groups(
    inferred: Iterable[Union[InferredGroup, FrozenSet[str]]], truth: Iterable[Iterable[str]]
) -> Tuple[float, float]:
    """Precision and recall of inferred member sets against the true ones."""
    found = {group.members if isinstance(group, InferredGroup) else frozenset(group) for group in inferred}
    expected = {frozenset(group) for group in truth}
    hits = len(found & expected)

    precision = hits / len(found) if found else 1.0
    recall = hits / len(expected) if expected else 1.0
    return precision, recall


# Activity profiles

@dataclass(frozen=True)
class ActivityProfile:
    user_id: str
    hours: Tuple[int, ...]
    # Monday first.
    weekdays: Tuple[int, ...]
    daily: Tuple[Tuple[str, int], ...]

    @property
    def total(self) -> int:
        return sum(self.hours)

    @property
    def busiest_hour(self) -> Optional[int]:
        if not self.total:
            return None
        return int(np.argmax(self.hours))


def activity_profile(rows: Iterable[MetadataRecord], user_id: str, tz_offset: int = 0) -> ActivityProfile:
    """Histograms of the messages `user_id` sent, in local time `tz_offset` hours from UTC."""
    timestamps = np.array(
        [row.timestamp_ms for row in _relayed(rows) if row.sender_id == user_id], dtype=np.int64
    )
    local = timestamps + tz_offset * MS_PER_HOUR
    days = local // MS_PER_DAY

    hours = np.bincount((local // MS_PER_HOUR) % 24, minlength=24)
    # 1970-01-01 was a Thursday.
    weekdays = np.bincount((days + 3) % 7, minlength=7)

    unique_days, counts = np.unique(days, return_counts=True)
    daily = tuple(
        ((datetime.date(1970, 1, 1) + datetime.timedelta(days=int(day))).isoformat(), int(count))
        for day, count in zip(unique_days, counts)
    )

    return ActivityProfile(
        user_id=user_id,
        hours=tuple(int(x) for x in hours),
        weekdays=tuple(int(x) for x in weekdays),
        daily=daily,
    )


def activity_profiles(rows: Iterable[MetadataRecord], tz_offset: int = 0) -> List[ActivityProfile]:
    row_list = list(rows)
    senders = sorted({row.sender_id for row in _relayed(row_list)})
    return [activity_profile(row_list, user_id, tz_offset) for user_id in senders]


# Contacts that never joined

def shadow_contacts(rows: Iterable[MetadataRecord]) -> Dict[str, List[str]]:
    """
    Phone numbers the server knows only because somebody uploaded their
    address book, mapped to the users who uploaded them.
    """
    row_list = list(rows)
    known = {row.sender_id for row in row_list if row.event == Event.REGISTERED.value}
    for row in _relayed(row_list):
        known.add(row.sender_id)
        known.add(row.recipient_id)

    uploaders: Dict[str, Set[str]] = defaultdict(set)
    for row in row_list:
        if row.event == Event.CONTACTS_UPLOADED.value and row.recipient_id not in known:
            uploaders[row.recipient_id].add(row.sender_id)

    return {number: sorted(users) for number, users in sorted(uploaders.items())}


# Report

def _report_data(
    graph: ContactGraph, groups: Sequence[InferredGroup], profiles: Sequence[ActivityProfile]
) -> Dict[str, Any]:
    edges = graph.edges()
    top_edges = sorted(edges, key=lambda edge: (-edge[2].count, -edge[2].bytes, edge[0], edge[1]))

    return {
        'version': REPORT_VERSION,
        'nodes': graph.node_count,
        'edges': graph.edge_count,
        'messages': sum(stats.count for _, _, stats in edges),
        'bytes': sum(stats.bytes for _, _, stats in edges),
        'top_edges': [
            {
                'sender_id': a,
                'recipient_id': b,
                'count': stats.count,
                'bytes': stats.bytes,
                'first_ms': stats.first_ms,
                'last_ms': stats.last_ms,
            }
            for a, b, stats in top_edges[:REPORT_TOP_EDGES]
        ],
        'groups': [
            {
                'members': group.sorted_members(),
                'support': group.support,
                'confidence': round(group.confidence, 6),
            }
            for group in groups
        ],
        'profiles': [
            {
                'user_id': profile.user_id,
                'total': profile.total,
                'busiest_hour': profile.busiest_hour,
                'hours': list(profile.hours),
                'weekdays': list(profile.weekdays),
                'active_days': len(profile.daily),
            }
            for profile in sorted(profiles, key=lambda profile: profile.user_id)
        ],
    }


def _report_text(data: Mapping[str, Any]) -> str:
    lines: List[str] = []
    lines.append("Metadata report")
    lines.append("===============")
    lines.append("")

    if not data['messages']:
        lines.append("No message activity recorded.")
        return '\n'.join(lines) + '\n'

    lines.append(f"Users:    {data['nodes']}")
    lines.append(f"Contacts: {data['edges']}")
    lines.append(f"Messages: {data['messages']} ({data['bytes']} bytes)")
    lines.append("")

    lines.append("Top contacts:")
    for edge in data['top_edges']:
        lines.append(f"  {edge['sender_id']:<16} -> {edge['recipient_id']:<16} {edge['count']:>6} msgs {edge['bytes']:>9} bytes")
    lines.append("")

    lines.append(f"Inferred groups: {len(data['groups'])}")
    for group in data['groups']:
        lines.append(f"  [{group['confidence']:.3f}] support {group['support']:>4}: {', '.join(group['members'])}")
    lines.append("")

    lines.append("Activity:")
    for profile in data['profiles']:
        busiest = '-' if profile['busiest_hour'] is None else f"{profile['busiest_hour']:02d}:00"
        lines.append(
            f"  {profile['user_id']:<16} {profile['total']:>6} msgs on {profile['active_days']:>3} days, busiest hour {busiest}"
        )

    return '\n'.join(lines) + '\n'


def report(
    graph: ContactGraph,
    groups: Sequence[InferredGroup],
    profiles: Sequence[ActivityProfile],
    path: pathlib.Path,
) -> Dict[str, Any]:
    """Write `path` (JSON) and a plain-text summary next to it with a `.txt` suffix."""
    path = pathlib.Path(path)
    data = _report_data(graph, groups, profiles)

    with open(path, 'w', encoding='utf-8') as fd:
        json.dump(data, fd, indent=2, sort_keys=True)
        fd.write('\n')

    with open(path.with_suffix('.txt'), 'w', encoding='utf-8') as fd:
        fd.write(_report_text(data))

    logger.debug("Wrote report for %d users to %s", data['nodes'], path)
    return data
