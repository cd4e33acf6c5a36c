import json
import re

import pytest

from ratchetlab import analysis
from ratchetlab.main import EXIT_OK, EXIT_USAGE, main
from ratchetlab.server import LEDGER_FIELDS
from ratchetlab.simulation import SimulationException, run_simulation, user_ids, write_outputs


@pytest.fixture(scope='module')
def simulated(tmp_path_factory):
    result = run_simulation(n_users=50, n_messages=5000, n_groups=5, seed=42)
    paths = write_outputs(result, tmp_path_factory.mktemp('simulation'))
    return result, paths


@pytest.mark.slow
def test_blind_inference_recovers_groups(simulated):
    result, paths = simulated
    rows = analysis.read_ledger(paths['ledger'])

    inferred = analysis.infer_groups(rows, window_ms=2000, min_size=3, blind=True)
    assert analysis.score_groups(inferred, result.groups.values()) == (1.0, 1.0)

    labeled = analysis.infer_groups(rows, blind=False)
    assert analysis.score_groups(labeled, result.groups.values()) == (1.0, 1.0)


@pytest.mark.slow
def test_contact_graph_matches_truth(simulated):
    result, paths = simulated
    graph = analysis.build_graph(analysis.read_ledger(paths['ledger']))

    for (sender, recipient), count in result.pair_counts.items():
        assert graph.edge(sender, recipient).count == count

    for user in user_ids(50):
        truth = sorted(
            ((count, recipient) for (sender, recipient), count in result.pair_counts.items() if sender == user),
            reverse=True,
        )
        top = analysis.top_contacts(graph, user, 3)
        assert [graph.edge(user, contact).count for contact in top] == [count for count, _ in truth[:3]]


@pytest.mark.slow
def test_ledger_holds_metadata_only(simulated):
    result, paths = simulated
    ledger = paths['ledger'].read_bytes()
    id_pattern = re.compile(r'\+1555\d{7}')

    for line in ledger.decode().splitlines():
        row = json.loads(line)
        assert tuple(row) == LEDGER_FIELDS
        assert id_pattern.fullmatch(row['sender_id'])
        assert row['recipient_id'] is None or id_pattern.fullmatch(row['recipient_id'])
        assert row['group_id'] is None or row['group_id'] in result.groups

    for plaintext in result.plaintexts[::25]:
        assert plaintext not in ledger
    for client in result.clients.values():
        assert client.store.identity.dh.private.hex().encode() not in ledger
        assert client.store.identity.dh.private not in ledger


@pytest.mark.slow
def test_outputs(simulated):
    result, paths = simulated

    truth = json.loads(paths['truth'].read_text())
    assert truth['seed'] == 42
    assert truth['groups'] == result.groups

    report = json.loads(paths['report'].read_text())
    assert report['nodes'] == 50
    assert report['messages'] == sum(result.pair_counts.values())
    assert len(report['groups']) == 5
    assert paths['summary'].read_text().startswith("Metadata report")


def test_same_seed_same_run(tmp_path):
    first = run_simulation(n_users=8, n_messages=200, n_groups=2, seed=3)
    second = run_simulation(n_users=8, n_messages=200, n_groups=2, seed=3)
    other = run_simulation(n_users=8, n_messages=200, n_groups=2, seed=4)

    assert first.server.ledger() == second.server.ledger()
    assert first.plaintexts == second.plaintexts
    assert first.groups == second.groups
    assert first.server.ledger() != other.server.ledger()

    # Session set-up sends come out of the same budget.
    assert first.sends == len(first.plaintexts) == 200


def test_invalid_arguments():
    with pytest.raises(SimulationException):
        run_simulation(n_users=1, n_messages=10, n_groups=0, seed=0)
    with pytest.raises(SimulationException):
        run_simulation(n_users=5, n_messages=2, n_groups=1, seed=0)
    with pytest.raises(SimulationException):
        run_simulation(n_users=3, n_messages=100, n_groups=2, seed=0)
    with pytest.raises(SimulationException):
        run_simulation(n_users=8, n_messages=6, n_groups=2, seed=0)


def test_simulate_command_deterministic(tmp_path, capsys):
    workspace = tmp_path / 'ws'
    args = ['--workspace', str(workspace), '--json']
    assert main(args + ['init', '--one-time-prekeys', '20']) == EXIT_OK

    for out in ('run-a', 'run-b'):
        exit_code = main(args + ['simulate', '--users', '10', '--messages', '300', '--groups', '2', '--seed', '42', '--out', out])
        assert exit_code == EXIT_OK
    capsys.readouterr()

    for name in ('ledger.jsonl', 'report.json', 'report.txt', 'truth.json'):
        assert (workspace / 'run-a' / name).read_bytes() == (workspace / 'run-b' / name).read_bytes()

    report = json.loads((workspace / 'run-a' / 'report.json').read_text())
    truth = json.loads((workspace / 'run-a' / 'truth.json').read_text())
    assert sorted(group['members'] for group in report['groups']) == sorted(truth['groups'].values())

    assert main(args + ['simulate', '--users', '1']) == EXIT_USAGE
