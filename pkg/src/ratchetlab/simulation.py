"""
Seeded conversation workload: users, groups and a stream of pairwise and
group messages through the simulated server. The same seed always produces
the same keys, the same messages and the same ledger.
"""

from collections import Counter
from dataclasses import dataclass, field
import itertools
import json
import logging
import math
import pathlib
import random
import string
from typing import Counter as CounterT, Dict, List, Optional, Tuple

import tqdm

from . import analysis
from .client import Client
from .crypto_core import SeededTestRandom
from .keystore import generate_user
from .server import LogicalClock, Server


logger = logging.getLogger(__name__)

# 2024-01-01T00:00:00Z
START_MS = 1_704_067_200_000

MIN_GAP_MS = 5_000
MAX_GAP_MS = 15 * 60 * 1000

MIN_GROUP_SIZE = 3
MAX_GROUP_SIZE = 8
MIN_GROUP_SENDS = 3
GROUP_SHARE = 0.2

FAVORITE_SHARE = 0.8


class SimulationException(Exception):
    pass


@dataclass
class SimulationResult:
    seed: int
    server: Server
    clients: Dict[str, Client]
    groups: Dict[str, List[str]]
    pair_counts: CounterT[Tuple[str, str]] = field(default_factory=Counter)
    plaintexts: List[bytes] = field(default_factory=list)
    # Sends and group sends, including the ones that settle sessions.
    sends: int = 0


def user_ids(n: int) -> List[str]:
    # Equal length ids keep envelope sizes comparable.
    return [f'+1555{i:07d}' for i in range(n)]


class _Workload:
    def __init__(self, seed: int, n_users: int, one_time_prekeys: int) -> None:
        self.rnd = random.Random(seed)
        self.clock = LogicalClock(START_MS, step=0)
        self.server = Server(self.clock)
        self.result = SimulationResult(seed, self.server, {}, {})

        key_rng = SeededTestRandom(seed)
        for user_id in user_ids(n_users):
            store = generate_user(user_id, one_time_prekeys, key_rng, self.clock.now)
            client = Client(store, self.server, key_rng)
            client.register()
            self.result.clients[user_id] = client

    def tick(self) -> None:
        # Consecutive sends are further apart than any inference window.
        self.clock.advance(self.rnd.randint(MIN_GAP_MS, MAX_GAP_MS))

    def text(self, sender: str) -> bytes:
        length = self.rnd.randint(1, 160)
        body = ''.join(self.rnd.choices(string.ascii_letters + string.digits + ' ', k=length))
        plaintext = f'{sender}: {body}'.encode()
        self.result.plaintexts.append(plaintext)
        return plaintext

    def send(self, sender: str, recipient: str) -> None:
        self.tick()
        self.result.sends += 1
        self.result.clients[sender].send(recipient, self.text(sender))
        self.result.pair_counts[(sender, recipient)] += 1
        self._drain(recipient)

    def group_send(self, group_id: str, sender: str) -> None:
        self.tick()
        self.result.sends += 1
        envelopes = self.result.clients[sender].group_send(group_id, self.text(sender))
        for recipient in sorted(envelopes):
            self.result.pair_counts[(sender, recipient)] += 1
            self._drain(recipient)

    def _drain(self, user_id: str) -> None:
        for received in self.result.clients[user_id].receive():
            if not received.ok:
                raise SimulationException(f"{user_id} could not decrypt a message: {received.error}")

    def ready(self, a: str, b: str) -> bool:
        session_ab = self.result.clients[a].sessions.get(b)
        session_ba = self.result.clients[b].sessions.get(a)
        return (
            session_ab is not None and session_ba is not None
            and session_ab.pending_handshake is None and session_ba.pending_handshake is None
        )


def _pick_groups(rnd: random.Random, users: List[str], n_groups: int) -> Dict[str, List[str]]:
    max_size = min(MAX_GROUP_SIZE, len(users))
    groups: Dict[str, List[str]] = {}
    seen = set()
    while len(groups) < n_groups:
        members = sorted(rnd.sample(users, rnd.randint(MIN_GROUP_SIZE, max_size)))
        if frozenset(members) in seen:
            continue
        seen.add(frozenset(members))
        groups[f'group-{len(groups) + 1}'] = members
    return groups


def run_simulation(
    n_users: int,
    n_messages: int,
    n_groups: int,
    seed: int,
    one_time_prekeys: int = 100,
    progress: bool = False,
) -> SimulationResult:
    if n_users < 2:
        raise SimulationException("Need at least two users")
    if n_groups and n_users < MIN_GROUP_SIZE:
        raise SimulationException(f"Groups need at least {MIN_GROUP_SIZE} users")
    if n_messages < n_groups * MIN_GROUP_SENDS:
        raise SimulationException(f"Need at least {MIN_GROUP_SENDS} messages per group")
    if math.comb(n_users, MIN_GROUP_SIZE) < n_groups:
        raise SimulationException(f"{n_users} users cannot form {n_groups} distinct groups")

    workload = _Workload(seed, n_users, one_time_prekeys)
    rnd = workload.rnd
    users = sorted(workload.result.clients)

    groups = _pick_groups(rnd, users, n_groups)
    workload.result.groups = groups
    for group_id, members in groups.items():
        workload.tick()
        workload.server.create_group(group_id, members)

    # Settle every group's pairwise sessions first, so that no group message
    # carries a handshake header. These sends count towards n_messages.
    for members in groups.values():
        for a, b in itertools.combinations(members, 2):
            if not workload.ready(a, b):
                workload.send(a, b)
                workload.send(b, a)

    favorites = {
        user: rnd.sample([other for other in users if other != user], min(len(users) - 1, rnd.randint(2, 5)))
        for user in users
    }

    plan: List[Optional[str]] = [group_id for group_id in groups for _ in range(MIN_GROUP_SENDS)]
    remaining = n_messages - workload.result.sends
    if remaining < len(plan):
        raise SimulationException(
            f"Need at least {workload.result.sends + len(plan)} messages to settle sessions and reach every group"
        )
    for _ in range(remaining - len(plan)):
        plan.append(rnd.choice(sorted(groups)) if groups and rnd.random() < GROUP_SHARE else None)
    rnd.shuffle(plan)

    for group_id in tqdm.tqdm(plan, desc="Simulating", unit='msg', disable=not progress):
        if group_id is not None:
            workload.group_send(group_id, rnd.choice(groups[group_id]))
            continue

        sender = rnd.choice(users)
        if rnd.random() < FAVORITE_SHARE:
            recipient = rnd.choice(favorites[sender])
        else:
            recipient = rnd.choice([other for other in users if other != sender])
        workload.send(sender, recipient)

    logger.info(
        "Simulated %d users, %d groups, %d messages: %d ledger rows",
        n_users, n_groups, n_messages, len(workload.server.ledger()),
    )
    return workload.result


def write_outputs(
    result: SimulationResult,
    out_dir: pathlib.Path,
    window_ms: int = analysis.DEFAULT_WINDOW_MS,
    min_size: int = analysis.DEFAULT_MIN_SIZE,
    tz_offset: int = 0,
) -> Dict[str, pathlib.Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        'ledger': out_dir / 'ledger.jsonl',
        'report': out_dir / 'report.json',
        'summary': out_dir / 'report.txt',
        'truth': out_dir / 'truth.json',
    }

    result.server.export_ledger(paths['ledger'])
    rows = analysis.read_ledger(paths['ledger'])

    analysis.report(
        analysis.build_graph(rows),
        analysis.infer_groups(rows, window_ms, min_size, blind=True),
        analysis.activity_profiles(rows, tz_offset),
        paths['report'],
    )

    truth = {
        'seed': result.seed,
        'groups': result.groups,
        'pairs': [
            {'sender_id': sender, 'recipient_id': recipient, 'count': count}
            for (sender, recipient), count in sorted(result.pair_counts.items())
        ],
    }
    with open(paths['truth'], 'w', encoding='utf-8') as fd:
        json.dump(truth, fd, indent=2, sort_keys=True)
        fd.write('\n')

    return paths
