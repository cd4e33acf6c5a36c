import argparse
import copy
from dataclasses import dataclass, field
from functools import wraps
from importlib import metadata as importlib_metadata
import json
import logging
import pathlib
import sys
from typing import Any, Callable, Dict, List, Optional, Tuple

from . import analysis, keystore, simulation
from .analysis import AnalysisException, LedgerParseError
from .client import Client
from .crypto_core import CryptoException
from .keystore import KeyStoreException, KeyStoreLoadError, KeyStoreValidationError
from .ratchet import RatchetException, read_captured, write_captured
from .server import Server, ServerException, ServerValidationError
from .session import SessionException
from .verification import VerificationException, compare, format_safety_number, qr_payload, qr_text, safety_number
from .workspace import CLOCK_LOGICAL, CLOCK_SYSTEM, Workspace, WorkspaceConfig, WorkspaceException, get_default_workspace


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PROTOCOL = 2
EXIT_IO = 3

DUMP_VERSION = 1

# Checked in order: the first matching class decides the exit code.
EXIT_CODES = [
    (KeyStoreLoadError, EXIT_IO),
    (LedgerParseError, EXIT_IO),
    (OSError, EXIT_IO),
    (KeyStoreValidationError, EXIT_USAGE),
    (ServerValidationError, EXIT_USAGE),
    (VerificationException, EXIT_USAGE),
    (WorkspaceException, EXIT_USAGE),
    (AnalysisException, EXIT_USAGE),
    (simulation.SimulationException, EXIT_USAGE),
    (KeyStoreException, EXIT_PROTOCOL),
    (CryptoException, EXIT_PROTOCOL),
    (SessionException, EXIT_PROTOCOL),
    (RatchetException, EXIT_PROTOCOL),
    (ServerException, EXIT_PROTOCOL),
]


@dataclass
class Context:
    workspace: pathlib.Path
    json: bool
    result: Dict[str, Any] = field(default_factory=dict)

    def print(self, text: str = '') -> None:
        if not self.json:
            print(text)


def with_workspace(f: Callable):
    @wraps(f)
    def wrapper(ctx: Context, *args, **kwargs):
        ws = Workspace.open(ctx.workspace)
        exit_code = f(ctx, ws, *args, **kwargs)
        ws.save_state()
        return exit_code

    return wrapper


def with_server(f: Callable):
    @wraps(f)
    def wrapper(ctx: Context, ws: Workspace, *args, **kwargs):
        server = ws.load_server()
        exit_code = f(ctx, ws, server, *args, **kwargs)
        ws.save_server(server)
        return exit_code

    return with_workspace(wrapper)


def cmd_init(ctx: Context, clock: str, seed: Optional[int], one_time_prekeys: int, tz_offset: int, force: bool) -> None:
    config = WorkspaceConfig(clock=clock, seed=seed, one_time_prekeys=one_time_prekeys, tz_offset=tz_offset)
    ws = Workspace.init(ctx.workspace, config, force=force)
    ctx.result.update(workspace=str(ws.root), clock=clock, seed=seed)
    ctx.print(f"Initialized workspace in {ws.root}")


@with_server
def cmd_user_add(ctx: Context, ws: Workspace, server: Server, user: str, register: bool) -> None:
    store = ws.add_user(user)
    ctx.result.update(user_id=user, identity=store.identity.dh.public.hex(), one_time_prekeys=len(store.pool))
    ctx.print(f"Created {user} with {len(store.pool)} one-time prekeys")

    if register:
        _register(ctx, ws, server, user, False)


def _register(ctx: Context, ws: Workspace, server: Server, user: str, replace_existing: bool) -> None:
    client = ws.load_client(user, server)
    if replace_existing:
        client.reinstall(ws.config.one_time_prekeys, ws.clock())
        ctx.print(f"Generated new keys for {user}")
    else:
        client.register()
    ws.save_client(client)
    ctx.result.update(registered=user, prekey_count=server.prekey_count(user))
    ctx.print(f"Registered {user}; the server holds {server.prekey_count(user)} one-time prekeys")


@with_server
def cmd_register(ctx: Context, ws: Workspace, server: Server, user: str, replace: bool) -> None:
    _register(ctx, ws, server, user, replace)


@with_server
def cmd_send(ctx: Context, ws: Workspace, server: Server, sender: str, recipient: str, msg: List[str]) -> None:
    client = ws.load_client(sender, server)
    counters = []
    for text in msg:
        envelope = client.send(recipient, text.encode('utf-8'))
        counters.append(envelope.counter)
        ctx.print(f"Sent message {envelope.counter} to {recipient} ({len(envelope.to_bytes())} bytes)")
    ws.save_client(client)
    ctx.result.update(sender_id=sender, recipient_id=recipient, counters=counters)


@with_server
def cmd_recv(ctx: Context, ws: Workspace, server: Server, user: str, capture: Optional[str]) -> int:
    client = ws.load_client(user, server)
    received = client.receive()
    ws.save_client(client)

    if capture is not None:
        with open(ws.resolve(pathlib.Path(capture)), 'ab') as fd:
            write_captured(fd, (item.envelope for item in received))

    messages = []
    for item in received:
        envelope = item.envelope
        if item.ok:
            text = item.plaintext.decode('utf-8', 'replace')
            ctx.print(f"[{envelope.sender_id} #{envelope.counter}] {text}")
        else:
            text = None
            ctx.print(f"[{envelope.sender_id} #{envelope.counter}] REJECTED: {item.error}")
        messages.append({
            'sender_id': envelope.sender_id,
            'counter': envelope.counter,
            'plaintext': text,
            'error': None if item.ok else str(item.error),
        })

    if not received:
        ctx.print("No messages")
    ctx.result.update(user_id=user, messages=messages)

    return EXIT_OK if all(item.ok for item in received) else EXIT_PROTOCOL


@with_server
def cmd_group_create(ctx: Context, ws: Workspace, server: Server, group: str, members: List[str]) -> None:
    created = server.create_group(group, members)
    ctx.result.update(group_id=group, members=created.members)
    ctx.print(f"Created {group} with {len(created.members)} members")


@with_server
def cmd_group_send(ctx: Context, ws: Workspace, server: Server, sender: str, group: str, msg: str) -> None:
    client = ws.load_client(sender, server)
    envelopes = client.group_send(group, msg.encode('utf-8'))
    ws.save_client(client)
    ctx.result.update(group_id=group, recipients=sorted(envelopes))
    ctx.print(f"Sent to {len(envelopes)} members of {group}")


def _view(ws: Workspace, server: Server, user: str, peer: str) -> Tuple[str, bytes]:
    # What `user` believes `peer`'s identity key is.
    client = ws.load_client(user, server)
    peer_key = keystore.peer_identity(client.store, peer)
    if peer_key is None:
        peer_key = server.identity_key(peer)
    return safety_number(user, client.store.identity.dh.public, peer, peer_key), peer_key


@with_server
def cmd_verify(ctx: Context, ws: Workspace, server: Server, a: str, b: str, qr: bool) -> None:
    number_a, key_b_seen_by_a = _view(ws, server, a, b)
    number_b, key_a_seen_by_b = _view(ws, server, b, a)
    match = compare(number_a, number_b)

    ctx.print(f"{a}: {format_safety_number(number_a)}")
    ctx.print(f"{b}: {format_safety_number(number_b)}")
    ctx.print("Safety numbers match" if match else "Safety numbers DO NOT match")
    ctx.result.update(a=a, b=b, safety_number_a=number_a, safety_number_b=number_b, match=match)

    if qr:
        store_a = ws.load_client(a, server).store
        store_b = ws.load_client(b, server).store
        qr_a = qr_text(qr_payload(a, store_a.identity.dh.public, b, key_b_seen_by_a))
        qr_b = qr_text(qr_payload(b, store_b.identity.dh.public, a, key_a_seen_by_b))
        ctx.print(f"{a} QR: {qr_a}")
        ctx.print(f"{b} QR: {qr_b}")
        ctx.result.update(qr_a=qr_a, qr_b=qr_b)


def _compromise_dump(ctx: Context, ws: Workspace, user: str, out: str) -> None:
    server = ws.load_server()
    client = ws.load_client(user, server)
    dump = {
        'version': DUMP_VERSION,
        'user_id': user,
        'keystore': keystore.dumps(client.store),
        'sessions': client.sessions_to_dict(),
    }
    path = ws.resolve(pathlib.Path(out))
    with open(path, 'w', encoding='utf-8') as fd:
        json.dump(dump, fd, indent=2)
    ctx.result.update(user_id=user, sessions=len(client.sessions), path=str(path))
    ctx.print(f"Dumped {len(client.sessions)} sessions of {user} to {path}")


def _compromise_replay(ctx: Context, ws: Workspace, replay: str, captured: str) -> None:
    with open(ws.root / replay, encoding='utf-8') as fd:
        try:
            dump = json.load(fd)
        except ValueError as ex:
            raise WorkspaceException(f"Invalid dump {replay}: {ex}") from None
    if not isinstance(dump, dict) or dump.get('version') != DUMP_VERSION or not {'keystore', 'sessions'} <= set(dump):
        raise WorkspaceException(f"Invalid dump {replay}")

    store = keystore.loads(dump['keystore'], replay)
    sessions, archived = Client.sessions_from_dict(dump['sessions'])

    with open(ws.root / captured, 'rb') as fd:
        envelopes = read_captured(fd.read())

    decrypted = 0
    for envelope in envelopes:
        # Every attempt starts from the untouched snapshot.
        attacker = Client(
            copy.deepcopy(store), Server(), sessions=copy.deepcopy(sessions), archived=copy.deepcopy(archived)
        )
        try:
            attacker.decrypt(envelope)
        except (CryptoException, SessionException, RatchetException):
            continue
        decrypted += 1

    ctx.result.update(decrypted=decrypted, total=len(envelopes))
    ctx.print(f"{decrypted}/{len(envelopes)} decrypted")


@with_workspace
def cmd_compromise(
    ctx: Context, ws: Workspace, user: Optional[str], out: Optional[str], replay: Optional[str], captured: Optional[str]
) -> None:
    if user is not None:
        if out is None:
            raise WorkspaceException("--user needs --out")
        _compromise_dump(ctx, ws, user, out)
    else:
        if replay is None or captured is None:
            raise WorkspaceException("Use either --user and --out, or --replay and --captured")
        _compromise_replay(ctx, ws, replay, captured)


@with_server
def cmd_contacts(ctx: Context, ws: Workspace, server: Server, user: str, numbers: List[str]) -> None:
    found = server.discover_contacts(user, numbers)
    ctx.result.update(user_id=user, uploaded=len(set(numbers)), registered=found)
    ctx.print(f"{len(found)} of {len(set(numbers))} contacts use ratchetlab:")
    for number in found:
        ctx.print(f"  {number}")


@with_server
def cmd_rotate(ctx: Context, ws: Workspace, server: Server, user: str) -> None:
    client = ws.load_client(user, server)
    client.rotate_signed_prekey(ws.clock())
    ws.save_client(client)
    ctx.result.update(user_id=user, signed_prekey_id=client.store.signed_prekey.id)
    ctx.print(f"Signed prekey of {user} is now #{client.store.signed_prekey.id}")


@with_server
def cmd_replenish(ctx: Context, ws: Workspace, server: Server, user: str, count: int) -> None:
    client = ws.load_client(user, server)
    total = client.replenish(count)
    ws.save_client(client)
    ctx.result.update(user_id=user, prekey_count=total)
    ctx.print(f"Uploaded {count} one-time prekeys; the server now holds {total}")


@with_workspace
def cmd_metadata_report(
    ctx: Context, ws: Workspace, ledger: Optional[str], out: Optional[str], window_ms: int, min_size: int,
    blind: bool, tz_offset: Optional[int], user: Optional[str], top: int,
) -> None:
    ledger_path = ws.root / (ledger or Workspace.LEDGER)
    out_path = ws.resolve(pathlib.Path(out or 'report.json'))
    tz = ws.config.tz_offset if tz_offset is None else tz_offset

    rows = analysis.read_ledger(ledger_path)
    graph = analysis.build_graph(rows)
    groups = analysis.infer_groups(rows, window_ms, min_size, blind)
    profiles = analysis.activity_profiles(rows, tz)
    data = analysis.report(graph, groups, profiles, out_path)

    ctx.result.update(report=data, path=str(out_path))

    if not ctx.json:
        with open(out_path.with_suffix('.txt'), encoding='utf-8') as fd:
            sys.stdout.write(fd.read())

    if user is not None:
        contacts = analysis.top_contacts(graph, user, top)
        ctx.result.update(user_id=user, top_contacts=contacts)
        ctx.print()
        ctx.print(f"Top contacts of {user}:")
        for rank, contact in enumerate(contacts, 1):
            stats = graph.edge(user, contact)
            ctx.print(f"  {rank:>2}. {contact} ({stats.count} messages, {stats.bytes} bytes)")

    shadows = analysis.shadow_contacts(rows)
    if shadows:
        ctx.result.update(shadow_contacts=shadows)
        ctx.print()
        ctx.print(f"Numbers known only from uploaded address books: {len(shadows)}")


@with_workspace
def cmd_simulate(
    ctx: Context, ws: Workspace, users: int, messages: int, groups: int, seed: Optional[int], out: Optional[str],
    window_ms: int, min_size: int, quiet: bool,
) -> None:
    if seed is None:
        seed = ws.config.seed if ws.config.seed is not None else 0
    out_dir = ws.resolve(pathlib.Path(out or 'simulation'))

    result = simulation.run_simulation(
        users, messages, groups, seed, ws.config.one_time_prekeys, progress=not (quiet or ctx.json)
    )
    paths = simulation.write_outputs(result, out_dir, window_ms, min_size, ws.config.tz_offset)

    ctx.result.update(seed=seed, rows=len(result.server.ledger()), **{name: str(path) for name, path in paths.items()})
    ctx.print(f"Simulated {users} users, {groups} groups, {messages} messages (seed {seed})")
    for name, path in paths.items():
        ctx.print(f"  {name}: {path}")


def _version() -> str:
    try:
        return importlib_metadata.version('ratchetlab')
    except importlib_metadata.PackageNotFoundError:
        return 'unknown'


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog='ratchetlab', description="End-to-end encrypted messaging lab")

    parser.add_argument('--version', action='version', version=_version())
    parser.add_argument(
        "--workspace",
        help="Workspace directory (default: $RATCHETLAB_WORKSPACE or the user data directory)",
        type=pathlib.Path,
        default=None,
    )
    parser.add_argument(
        "--json",
        help="Print a JSON document instead of text",
        action="store_true",
    )
    parser.add_argument(
        "-v", "--verbose",
        help="Show debug logging",
        action="store_true",
    )

    subparsers = parser.add_subparsers(metavar="<command>")
    subparsers.required = True

    init_p = subparsers.add_parser(
        "init",
        help="Create a workspace",
    )
    init_p.add_argument(
        "--clock",
        help="Server timestamps from the system clock or a reproducible logical clock",
        choices=[CLOCK_SYSTEM, CLOCK_LOGICAL],
        default=CLOCK_SYSTEM,
    )
    init_p.add_argument(
        "--seed",
        help="Use deterministic TEST randomness with this seed (keys will not be secret)",
        type=int,
    )
    init_p.add_argument(
        "--one-time-prekeys",
        help="One-time prekeys generated for each new user",
        type=int,
        default=keystore.DEFAULT_ONE_TIME_PREKEYS,
    )
    init_p.add_argument(
        "--tz-offset",
        help="Hours from UTC used by activity profiles",
        type=int,
        default=0,
    )
    init_p.add_argument(
        "--force",
        help="Start over in an existing workspace",
        action="store_true",
    )
    init_p.set_defaults(func=cmd_init)

    user_add_p = subparsers.add_parser(
        "user-add",
        help="Generate keys for a new user",
    )
    user_add_p.add_argument(
        "user",
        help="Phone number, e.g. +15550000001",
    )
    user_add_p.add_argument(
        "--register",
        help="Also register with the server",
        action="store_true",
    )
    user_add_p.set_defaults(func=cmd_user_add)

    register_p = subparsers.add_parser(
        "register",
        help="Upload a user's public keys to the server",
    )
    register_p.add_argument(
        "user",
        help="Phone number",
    )
    register_p.add_argument(
        "--replace",
        help="Reinstall: generate new keys and replace the existing registration and its prekeys",
        action="store_true",
    )
    register_p.set_defaults(func=cmd_register)

    send_p = subparsers.add_parser(
        "send",
        help="Send an encrypted message",
    )
    send_p.add_argument("--from", dest="sender", help="Sender", required=True)
    send_p.add_argument("--to", dest="recipient", help="Recipient", required=True)
    send_p.add_argument(
        "--msg",
        help="Message text; repeat to send several",
        action="append",
        required=True,
    )
    send_p.set_defaults(func=cmd_send)

    recv_p = subparsers.add_parser(
        "recv",
        help="Receive and decrypt queued messages",
    )
    recv_p.add_argument("--user", help="Recipient", required=True)
    recv_p.add_argument(
        "--capture",
        help="Also append the delivered envelopes to this captured-traffic file",
    )
    recv_p.set_defaults(func=cmd_recv)

    group_create_p = subparsers.add_parser(
        "group-create",
        help="Create a group on the server",
    )
    group_create_p.add_argument("group", help="Group id")
    group_create_p.add_argument("--members", help="Member phone numbers", nargs='+', required=True)
    group_create_p.set_defaults(func=cmd_group_create)

    group_send_p = subparsers.add_parser(
        "group-send",
        help="Send a message to every other member of a group",
    )
    group_send_p.add_argument("--from", dest="sender", help="Sender", required=True)
    group_send_p.add_argument("--group", help="Group id", required=True)
    group_send_p.add_argument("--msg", help="Message text", required=True)
    group_send_p.set_defaults(func=cmd_group_send)

    verify_p = subparsers.add_parser(
        "verify",
        help="Compare the safety numbers two users see",
    )
    verify_p.add_argument("--a", help="First user", required=True)
    verify_p.add_argument("--b", help="Second user", required=True)
    verify_p.add_argument("--qr", help="Also print the QR payloads as base32 text", action="store_true")
    verify_p.set_defaults(func=cmd_verify)

    compromise_p = subparsers.add_parser(
        "compromise",
        help="Dump a user's state, or replay captured traffic against such a dump",
    )
    compromise_p.add_argument("--user", help="User whose device is compromised")
    compromise_p.add_argument("--out", help="Where to write the dump")
    compromise_p.add_argument("--replay", help="Dump to attack with")
    compromise_p.add_argument("--captured", help="Captured-traffic file")
    compromise_p.set_defaults(func=cmd_compromise)

    contacts_p = subparsers.add_parser(
        "contacts",
        help="Upload an address book and see who is registered",
    )
    contacts_p.add_argument("--user", help="Uploading user", required=True)
    contacts_p.add_argument("--numbers", help="Phone numbers", nargs='+', required=True)
    contacts_p.set_defaults(func=cmd_contacts)

    rotate_p = subparsers.add_parser(
        "rotate",
        help="Rotate a user's signed prekey",
    )
    rotate_p.add_argument("user", help="Phone number")
    rotate_p.set_defaults(func=cmd_rotate)

    replenish_p = subparsers.add_parser(
        "replenish",
        help="Generate and upload more one-time prekeys",
    )
    replenish_p.add_argument("user", help="Phone number")
    replenish_p.add_argument("count", help="Number of prekeys", type=int)
    replenish_p.set_defaults(func=cmd_replenish)

    def add_analysis_args(p: argparse.ArgumentParser) -> None:
        p.add_argument(
            "--window-ms",
            help="Group inference time window",
            type=int,
            default=analysis.DEFAULT_WINDOW_MS,
        )
        p.add_argument(
            "--min-size",
            help="Smallest group to infer",
            type=int,
            default=analysis.DEFAULT_MIN_SIZE,
        )

    metadata_report_p = subparsers.add_parser(
        "metadata-report",
        help="Analyze the server's metadata ledger",
    )
    metadata_report_p.add_argument("--ledger", help="Ledger file (default: the workspace ledger)")
    metadata_report_p.add_argument("--out", help="Report file (default: report.json in the workspace)")
    add_analysis_args(metadata_report_p)
    mode = metadata_report_p.add_mutually_exclusive_group()
    mode.add_argument(
        "--blind",
        help="Infer groups from timing and sizes only (default)",
        dest="blind",
        action="store_true",
        default=True,
    )
    mode.add_argument(
        "--labeled",
        help="Read groups from the server's group ids",
        dest="blind",
        action="store_false",
    )
    metadata_report_p.add_argument(
        "--tz-offset",
        help="Hours from UTC (default: from workspace.json)",
        type=int,
    )
    metadata_report_p.add_argument("--user", help="Also rank this user's contacts")
    metadata_report_p.add_argument("--top", help="Number of contacts to rank", type=int, default=10)
    metadata_report_p.set_defaults(func=cmd_metadata_report)

    simulate_p = subparsers.add_parser(
        "simulate",
        help="Run a seeded conversation workload and analyze its ledger",
    )
    simulate_p.add_argument("--users", help="Number of users", type=int, default=50)
    simulate_p.add_argument("--messages", help="Number of messages", type=int, default=5000)
    simulate_p.add_argument("--groups", help="Number of groups", type=int, default=5)
    simulate_p.add_argument("--seed", help="Seed (default: from workspace.json, else 0)", type=int)
    simulate_p.add_argument("--out", help="Output directory (default: simulation in the workspace)")
    add_analysis_args(simulate_p)
    simulate_p.add_argument("--quiet", help="No progress bar", action="store_true")
    simulate_p.set_defaults(func=cmd_simulate)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)

    kwargs = vars(args)
    func = kwargs.pop('func')
    workspace = kwargs.pop('workspace') or get_default_workspace()
    json_output = kwargs.pop('json')
    verbose = kwargs.pop('verbose')

    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format='%(levelname)s: %(message)s',
        stream=sys.stderr,
    )

    ctx = Context(workspace, json_output)

    try:
        exit_code = func(ctx, **kwargs) or EXIT_OK
    except Exception as ex:
        for cls, code in EXIT_CODES:
            if isinstance(ex, cls):
                exit_code = code
                break
        else:
            raise

        print(ex, file=sys.stderr)
        ctx.result = {'error': str(ex)}

    if json_output:
        ctx.result['exit_code'] = exit_code
        print(json.dumps(ctx.result, indent=2, sort_keys=True))

    return exit_code


if __name__ == '__main__':
    sys.exit(main())
