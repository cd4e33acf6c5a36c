import json

import pytest

from ratchetlab.main import EXIT_IO, EXIT_OK, EXIT_PROTOCOL, EXIT_USAGE, main


ALICE = '+15550000001'
BOB = '+15550000002'
CAROL = '+15550000003'


@pytest.fixture
def run(tmp_path, capsys):
    def run(*args):
        exit_code = main(['--workspace', str(tmp_path), '--json', *args])
        result = json.loads(capsys.readouterr().out)
        assert result['exit_code'] == exit_code
        return exit_code, result

    return run


@pytest.fixture
def workspace(tmp_path, run):
    assert run('init', '--clock', 'logical', '--seed', '7', '--one-time-prekeys', '5')[0] == EXIT_OK
    for user in (ALICE, BOB, CAROL):
        assert run('user-add', user, '--register')[0] == EXIT_OK
    return tmp_path


def test_init(tmp_path, run):
    exit_code, result = run('init', '--clock', 'logical')
    assert exit_code == EXIT_OK
    assert result['clock'] == 'logical'
    assert (tmp_path / 'workspace.json').exists()
    assert (tmp_path / 'server.json').exists()

    assert run('init')[0] == EXIT_USAGE
    assert run('init', '--force')[0] == EXIT_OK


def test_init_bad_config(run):
    assert run('init', '--tz-offset', '20')[0] == EXIT_USAGE


def test_no_workspace(run):
    exit_code, result = run('send', '--from', ALICE, '--to', BOB, '--msg', 'hi')
    assert exit_code == EXIT_USAGE
    assert 'ratchetlab init' in result['error']


def test_usage_error(tmp_path):
    with pytest.raises(SystemExit) as excinfo:
        main(['--workspace', str(tmp_path), 'send', '--from', ALICE])
    assert excinfo.value.code == EXIT_USAGE


def test_user_add(workspace, run):
    assert (workspace / 'users' / ALICE / 'keys.jsonl').exists()
    assert run('user-add', ALICE)[0] == EXIT_USAGE
    assert run('user-add', 'alice')[0] == EXIT_USAGE
    assert run('register', ALICE)[0] == EXIT_PROTOCOL


def test_send_recv(workspace, run):
    exit_code, result = run('send', '--from', ALICE, '--to', BOB, '--msg', 'hello', '--msg', 'world')
    assert exit_code == EXIT_OK
    assert result['counters'] == [0, 1]

    exit_code, result = run('recv', '--user', BOB)
    assert exit_code == EXIT_OK
    assert [message['plaintext'] for message in result['messages']] == ['hello', 'world']
    assert [message['sender_id'] for message in result['messages']] == [ALICE, ALICE]

    run('send', '--from', BOB, '--to', ALICE, '--msg', 'hi yourself')
    exit_code, result = run('recv', '--user', ALICE)
    assert [message['plaintext'] for message in result['messages']] == ['hi yourself']

    assert run('recv', '--user', BOB)[1]['messages'] == []


def test_recv_text_output(workspace, capsys):
    main(['--workspace', str(workspace), 'send', '--from', ALICE, '--to', BOB, '--msg', 'plain text'])
    capsys.readouterr()

    assert main(['--workspace', str(workspace), 'recv', '--user', BOB]) == EXIT_OK
    assert f'[{ALICE} #0] plain text' in capsys.readouterr().out


def test_recv_replayed_message(workspace, run):
    run('send', '--from', ALICE, '--to', BOB, '--msg', 'only once')
    server_state = (workspace / 'server.json').read_bytes()
    assert run('recv', '--user', BOB)[0] == EXIT_OK

    # Put the delivered envelope back into the queue.
    (workspace / 'server.json').write_bytes(server_state)
    exit_code, result = run('recv', '--user', BOB)
    assert exit_code == EXIT_PROTOCOL
    assert result['messages'][0]['plaintext'] is None
    assert result['messages'][0]['error']


def test_send_to_unregistered(workspace, run):
    exit_code, result = run('send', '--from', ALICE, '--to', '+15550000099', '--msg', 'hi')
    assert exit_code == EXIT_PROTOCOL
    assert 'not registered' in result['error']


def test_corrupt_key_store(workspace, run):
    (workspace / 'users' / BOB / 'keys.jsonl').write_text('{"version": 1}\n')
    assert run('recv', '--user', BOB)[0] == EXIT_IO


def test_groups(workspace, run):
    exit_code, result = run('group-create', 'club', '--members', ALICE, BOB, CAROL)
    assert exit_code == EXIT_OK
    assert result['members'] == [ALICE, BOB, CAROL]

    for _ in range(3):
        exit_code, result = run('group-send', '--from', ALICE, '--group', 'club', '--msg', 'meeting at noon')
        assert exit_code == EXIT_OK
        assert result['recipients'] == [BOB, CAROL]

    for user in (BOB, CAROL):
        messages = run('recv', '--user', user)[1]['messages']
        assert [message['plaintext'] for message in messages] == ['meeting at noon'] * 3

    run('send', '--from', ALICE, '--to', BOB, '--msg', 'psst')

    exit_code, result = run('metadata-report', '--labeled', '--user', ALICE, '--top', '1')
    assert exit_code == EXIT_OK
    assert [group['members'] for group in result['report']['groups']] == [[ALICE, BOB, CAROL]]
    assert result['top_contacts'] == [BOB]
    assert (workspace / 'report.json').exists()
    assert (workspace / 'report.txt').exists()

    exit_code, result = run('metadata-report', '--blind', '--out', 'blind.json')
    assert exit_code == EXIT_OK
    assert [group['members'] for group in result['report']['groups']] == [[ALICE, BOB, CAROL]]

    assert run('group-send', '--from', ALICE, '--group', 'nope', '--msg', 'x')[0] == EXIT_PROTOCOL


def test_metadata_report_errors(workspace, run):
    assert run('metadata-report', '--ledger', 'missing.jsonl')[0] == EXIT_IO
    assert run('metadata-report', '--out', '../outside.json')[0] == EXIT_USAGE
    assert run('metadata-report', '--min-size', '2')[0] == EXIT_USAGE

    (workspace / 'bad.jsonl').write_text('{"event": "registered"}\n')
    exit_code, result = run('metadata-report', '--ledger', 'bad.jsonl')
    assert exit_code == EXIT_IO
    assert 'bad.jsonl:1' in result['error']


def test_contacts(workspace, run):
    exit_code, result = run('contacts', '--user', ALICE, '--numbers', BOB, '+15550000099')
    assert exit_code == EXIT_OK
    assert result['registered'] == [BOB]

    result = run('metadata-report')[1]
    assert result['shadow_contacts'] == {'+15550000099': [ALICE]}


def test_rotate_and_replenish(workspace, run):
    exit_code, result = run('rotate', ALICE)
    assert exit_code == EXIT_OK
    assert result['signed_prekey_id'] == 2

    exit_code, result = run('replenish', ALICE, '3')
    assert exit_code == EXIT_OK
    assert result['prekey_count'] == 8

    # Sessions still start against the rotated key.
    run('send', '--from', BOB, '--to', ALICE, '--msg', 'after rotation')
    assert run('recv', '--user', ALICE)[1]['messages'][0]['plaintext'] == 'after rotation'


def test_register_replace(workspace, run):
    run('send', '--from', ALICE, '--to', BOB, '--msg', 'before')
    assert run('recv', '--user', BOB)[0] == EXIT_OK

    exit_code, result = run('register', BOB, '--replace')
    assert exit_code == EXIT_OK
    assert result['prekey_count'] == 5

    # Alice's session still comes from Bob's old bundle.
    run('send', '--from', ALICE, '--to', BOB, '--msg', 'after')
    exit_code, result = run('recv', '--user', BOB)
    assert exit_code == EXIT_PROTOCOL
    assert [message['plaintext'] for message in result['messages']] == [None]


def test_verify(workspace, run):
    run('send', '--from', ALICE, '--to', BOB, '--msg', 'hello')
    run('recv', '--user', BOB)

    exit_code, result = run('verify', '--a', ALICE, '--b', BOB, '--qr')
    assert exit_code == EXIT_OK
    assert result['match'] is True
    assert result['safety_number_a'] == result['safety_number_b']
    assert len(result['safety_number_a']) == 60
    assert result['qr_a'] == result['qr_b']

    # Bob reinstalls with new keys; Alice still has his old key pinned.
    assert run('register', BOB, '--replace')[0] == EXIT_OK

    exit_code, result = run('verify', '--a', ALICE, '--b', BOB)
    assert exit_code == EXIT_OK
    assert result['match'] is False

    assert run('verify', '--a', ALICE, '--b', ALICE)[0] == EXIT_USAGE


def test_compromise(workspace, run):
    for i in range(100):
        run('send', '--from', ALICE, '--to', BOB, '--msg', f'message {i}')
    messages = run('recv', '--user', BOB, '--capture', 'past.bin')[1]['messages']
    assert len(messages) == 100

    exit_code, result = run('compromise', '--user', BOB, '--out', 'dump.json')
    assert exit_code == EXIT_OK
    assert result['sessions'] == 1

    exit_code, result = run('compromise', '--replay', 'dump.json', '--captured', 'past.bin')
    assert exit_code == EXIT_OK
    assert (result['decrypted'], result['total']) == (0, 100)

    # Without a fresh key agreement the stolen chain key still opens later messages.
    run('send', '--from', ALICE, '--to', BOB, '--msg', 'after the theft')
    run('recv', '--user', BOB, '--capture', 'future.bin')

    exit_code, result = run('compromise', '--replay', 'dump.json', '--captured', 'future.bin')
    assert (result['decrypted'], result['total']) == (1, 1)

    assert run('compromise', '--user', BOB)[0] == EXIT_USAGE
    assert run('compromise', '--user', BOB, '--out', '/tmp/outside-dump.json')[0] == EXIT_USAGE
    assert run('compromise', '--replay', 'missing.json', '--captured', 'past.bin')[0] == EXIT_IO
