from dataclasses import asdict, dataclass, fields
import json
import logging
import os
import pathlib
from typing import Any, Callable, Dict, Optional

import platformdirs

from . import keystore
from .client import Client
from .crypto_core import RandomSource, SeededTestRandom
from .keystore import DEFAULT_ONE_TIME_PREKEYS, KeyStore, now_ms
from .server import LogicalClock, Server


logger = logging.getLogger(__name__)

WORKSPACE_VERSION = 1
WORKSPACE_ENV = 'RATCHETLAB_WORKSPACE'

CLOCK_SYSTEM = 'system'
CLOCK_LOGICAL = 'logical'


class WorkspaceException(Exception):
    pass


def get_default_workspace() -> pathlib.Path:
    env = os.environ.get(WORKSPACE_ENV)
    if env:
        return pathlib.Path(env)
    return pathlib.Path(platformdirs.user_data_dir('ratchetlab'))


def write_atomic(path: pathlib.Path, text: str, private: bool = False) -> None:
    tmp_path = path.with_name(path.name + '.tmp')
    with open(tmp_path, 'w', encoding='utf-8') as fd:
        fd.write(text)
    if private:
        try:
            os.chmod(tmp_path, 0o600)
        except OSError:
            pass
    tmp_path.replace(path)


@dataclass
class WorkspaceConfig:
    version: int = WORKSPACE_VERSION
    clock: str = CLOCK_SYSTEM
    seed: Optional[int] = None
    one_time_prekeys: int = DEFAULT_ONE_TIME_PREKEYS
    tz_offset: int = 0

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'WorkspaceConfig':
        known = {f.name for f in fields(cls)}
        for key in sorted(set(data) - known):
            logger.warning("Ignoring unknown workspace setting %r", key)

        config = cls(**{key: value for key, value in data.items() if key in known})
        config.validate()
        return config

    def validate(self) -> None:
        if self.version != WORKSPACE_VERSION:
            raise WorkspaceException(f"Unsupported workspace version: {self.version!r}")
        if self.clock not in (CLOCK_SYSTEM, CLOCK_LOGICAL):
            raise WorkspaceException(f"Clock must be {CLOCK_SYSTEM!r} or {CLOCK_LOGICAL!r}, got {self.clock!r}")
        if self.seed is not None and (isinstance(self.seed, bool) or not isinstance(self.seed, int)):
            raise WorkspaceException(f"Seed must be an integer or null, got {self.seed!r}")
        if isinstance(self.one_time_prekeys, bool) or not isinstance(self.one_time_prekeys, int) or self.one_time_prekeys < 0:
            raise WorkspaceException(f"one_time_prekeys must be a non-negative integer, got {self.one_time_prekeys!r}")
        if isinstance(self.tz_offset, bool) or not isinstance(self.tz_offset, int) or not -12 <= self.tz_offset <= 14:
            raise WorkspaceException(f"tz_offset must be a whole number of hours between -12 and 14, got {self.tz_offset!r}")


class Workspace:
    """
    Everything the command line tool keeps, under one directory:

        workspace.json          settings
        state.json              logical clock and random stream position
        server.json             the simulated server
        ledger.jsonl            the server's metadata ledger
        users/<id>/keys.jsonl   a user's key store
        users/<id>/sessions.json
    """

    CONFIG = 'workspace.json'
    STATE = 'state.json'
    SERVER = 'server.json'
    LEDGER = 'ledger.jsonl'
    USERS = 'users'

    def __init__(self, root: pathlib.Path, config: WorkspaceConfig, state: Dict[str, Any]) -> None:
        self.root = root
        self.config = config
        self._state = state
        self._clock: Optional[Callable[[], int]] = None
        self._rng: Optional[RandomSource] = None

    def __repr__(self) -> str:
        return f'Workspace({self.root})'

    @classmethod
    def init(cls, root: pathlib.Path, config: Optional[WorkspaceConfig] = None, force: bool = False) -> 'Workspace':
        config = config or WorkspaceConfig()
        config.validate()

        config_path = root / cls.CONFIG
        if config_path.exists() and not force:
            raise WorkspaceException(f"{root} is already a workspace; use --force to start over")

        root.mkdir(parents=True, exist_ok=True)
        (root / cls.USERS).mkdir(exist_ok=True)

        workspace = cls(root, config, {'clock_now': LogicalClock.DEFAULT_START, 'rng_counter': 0})
        write_atomic(config_path, json.dumps(asdict(config), indent=2) + '\n')
        workspace.save_server(Server(workspace.clock))
        workspace.save_state()
        return workspace

    @classmethod
    def open(cls, root: pathlib.Path) -> 'Workspace':
        try:
            with open(root / cls.CONFIG, encoding='utf-8') as fd:
                data = json.load(fd)
        except FileNotFoundError:
            raise WorkspaceException(f"No workspace in {root}; run `ratchetlab init` first") from None
        except ValueError as ex:
            raise WorkspaceException(f"Invalid {root / cls.CONFIG}: {ex}") from None

        if not isinstance(data, dict):
            raise WorkspaceException(f"Invalid {root / cls.CONFIG}: expected a JSON object")

        try:
            with open(root / cls.STATE, encoding='utf-8') as fd:
                state = json.load(fd)
        except FileNotFoundError:
            state = {}
        state.setdefault('clock_now', LogicalClock.DEFAULT_START)
        state.setdefault('rng_counter', 0)

        return cls(root, WorkspaceConfig.from_dict(data), state)

    # Clock and randomness

    @property
    def clock(self) -> Callable[[], int]:
        if self._clock is None:
            if self.config.clock == CLOCK_LOGICAL:
                self._clock = LogicalClock(start=self._state['clock_now'])
            else:
                self._clock = now_ms
        return self._clock

    @property
    def rng(self) -> Optional[RandomSource]:
        if self.config.seed is None:
            return None
        if self._rng is None:
            # A fresh stream for every command, so repeated commands do not reuse keys.
            self._rng = SeededTestRandom(f"{self.config.seed}:{self._state['rng_counter']}")
            self._state['rng_counter'] += 1
        return self._rng

    def save_state(self) -> None:
        if isinstance(self._clock, LogicalClock):
            self._state['clock_now'] = self._clock.now
        write_atomic(self.root / self.STATE, json.dumps(self._state, indent=2, sort_keys=True) + '\n')

    # Paths

    def resolve(self, path: pathlib.Path) -> pathlib.Path:
        """Resolve an output path; relative paths are taken from the workspace, and nothing may leave it."""
        root = self.root.resolve()
        resolved = (root / path).resolve()
        if resolved != root and root not in resolved.parents:
            raise WorkspaceException(f"{path} is outside the workspace {self.root}")
        return resolved

    def user_dir(self, user_id: str) -> pathlib.Path:
        keystore.check_user_id(user_id)
        return self.root / self.USERS / user_id

    def has_user(self, user_id: str) -> bool:
        return (self.user_dir(user_id) / 'keys.jsonl').exists()

    # Server

    def load_server(self) -> Server:
        return Server.load(self.root / self.SERVER, self.clock)

    def save_server(self, server: Server) -> None:
        server.save(self.root / self.SERVER)
        server.export_ledger(self.root / self.LEDGER)

    # Users

    def add_user(self, user_id: str) -> KeyStore:
        if self.has_user(user_id):
            raise WorkspaceException(f"User {user_id} already exists")
        store = keystore.generate_user(user_id, self.config.one_time_prekeys, self.rng, self.clock())
        self.user_dir(user_id).mkdir(parents=True, exist_ok=True)
        keystore.save(store, self.user_dir(user_id) / 'keys.jsonl')
        return store

    def load_client(self, user_id: str, server: Server) -> Client:
        if not self.has_user(user_id):
            raise WorkspaceException(f"Unknown user {user_id}; add it with `ratchetlab user-add {user_id}`")

        store = keystore.load(self.user_dir(user_id) / 'keys.jsonl')
        sessions_path = self.user_dir(user_id) / 'sessions.json'
        sessions, archived = {}, {}
        if sessions_path.exists():
            with open(sessions_path, encoding='utf-8') as fd:
                try:
                    data = json.load(fd)
                except ValueError as ex:
                    raise WorkspaceException(f"Invalid {sessions_path}: {ex}") from None
            sessions, archived = Client.sessions_from_dict(data)

        return Client(store, server, self.rng, sessions, archived)

    def save_client(self, client: Client) -> None:
        user_dir = self.user_dir(client.user_id)
        keystore.save(client.store, user_dir / 'keys.jsonl')
        write_atomic(user_dir / 'sessions.json', json.dumps(client.sessions_to_dict(), indent=2) + '\n', private=True)
