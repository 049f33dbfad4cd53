import csv
import io

import numpy as np
import pytest

from support import run_config, tiny_params

from perturbfl.client import ClientUpdate, LayerUpdate, LossStats, local_update, local_update_plain
from perturbfl.data import build_federated
from perturbfl.errors import ProtocolError, UsageError
from perturbfl.model import LayerDims, MlpParams, Sample, fedavg_step, local_gradient_plain, mean_loss
from perturbfl.net import InProcChannel, decode, encode
from perturbfl.perturbation import identity_noise, perturb, recover_gradient
from perturbfl.server import (
    Server,
    aggregate,
    make_client,
    manifest,
    metrics_csv,
    param_hash,
    rounded_param_hash,
    run_rounds,
    run_training,
)
from perturbfl.tensor import max_rel_error


def fake_update(cid, n, value, round_id=0, m=2):
    layer = LayerUpdate(np.full((2, 3), value), [np.full((2, 3), value * (s + 1)) for s in range(m)], np.full((2, 3), -value))
    return ClientUpdate(cid, round_id, n, [layer], LossStats(value, [value] * m, value))


def random_net(seed, dims):
    rng = np.random.default_rng(seed)
    return MlpParams([rng.standard_normal(s) / np.sqrt(s[1]) for s in LayerDims(dims).shapes()])


def test_aggregate_single_client_is_identity():
    u = fake_update(0, 5, 2.0)
    agg = aggregate([u])
    np.testing.assert_array_equal(agg.g_hat[0], u.layers[0].g_hat)
    np.testing.assert_array_equal(agg.sigma[0][1], u.layers[0].sigma_tilde[1])
    np.testing.assert_array_equal(agg.beta[0], u.layers[0].beta)
    assert agg.total_samples == 5


def test_aggregate_weights():
    agg = aggregate([fake_update(0, 1, 1.0), fake_update(1, 1, 3.0)])
    assert np.all(agg.g_hat[0] == 2.0)
    agg = aggregate([fake_update(1, 6, 4.0), fake_update(0, 2, 8.0)])
    expected = 0.25 * 8.0 + 0.75 * 4.0
    assert np.allclose(agg.g_hat[0], expected, rtol=1e-15)
    assert np.allclose(agg.sigma[0][1], 2 * expected, rtol=1e-15)
    assert np.allclose(agg.beta[0], -expected, rtol=1e-15)
    assert agg.loss_perturbed == pytest.approx(expected) and agg.alpha_sq == pytest.approx(expected)


def test_aggregate_rejects_bad_rounds():
    with pytest.raises(ProtocolError):
        aggregate([])
    with pytest.raises(ProtocolError):
        aggregate([fake_update(0, 1, 1.0), fake_update(1, 1, 1.0, round_id=1)])
    with pytest.raises(ProtocolError):
        aggregate([fake_update(0, 1, 1.0), fake_update(0, 1, 1.0)])
    with pytest.raises(ProtocolError):
        aggregate([fake_update(0, 1, 1.0)], expected={0, 1})
    with pytest.raises(ProtocolError):
        aggregate([fake_update(0, 0, 1.0)])
    with pytest.raises(ProtocolError):
        aggregate([fake_update(0, 1, 1.0, m=2), fake_update(1, 1, 1.0, m=3)])


def test_round_state_guards():
    srv = Server(random_net(0, (3, 4, 2)), expected_clients=[0, 1])
    with pytest.raises(ProtocolError):
        srv.receive(fake_update(0, 1, 1.0))
    state, pm = srv.begin_round()
    shard = [Sample(np.ones(3), np.ones(2))]
    srv.receive(local_update(pm, shard, client_id=0))
    with pytest.raises(ProtocolError):
        srv.receive(local_update(pm, shard, client_id=0))
    with pytest.raises(ProtocolError):
        srv.receive(local_update(pm, shard, client_id=7))
    with pytest.raises(ProtocolError):
        srv.recover_and_update()
    stale = local_update(pm, shard, client_id=1)
    stale.round_id = 3
    with pytest.raises(ProtocolError):
        srv.receive(stale)
    srv.receive(local_update(pm, shard, client_id=1))
    srv.recover_and_update()
    assert state.secret.consumed and srv.round_id == 1


def test_server_rejects_bad_settings():
    with pytest.raises(UsageError):
        Server(tiny_params(), mode="fancy")
    with pytest.raises(UsageError):
        Server(random_net(0, (3, 4, 2)), m=3)


def test_consecutive_rounds_use_fresh_secrets():
    srv = Server(random_net(1, (3, 4, 5)), seed=9)
    shard = [Sample(np.ones(3), np.zeros(5))]
    seen = []
    for _ in range(3):
        state, pm = srv.begin_round()
        seen.append(pm.r_add.copy())
        srv.receive(local_update(pm, shard, client_id=0))
        srv.recover_and_update()
        assert state.secret.consumed
    assert not np.array_equal(seen[0], seen[1]) and not np.array_equal(seen[1], seen[2])


def test_broadcast_round_trips_through_codec():
    srv = Server(random_net(2, (4, 6, 3)))
    srv.begin_round()
    msg = srv.broadcast_message()
    back = decode(encode(msg))
    assert back.round_id == msg.round_id and back.mode == "perturbed"
    for a, b in zip(back.model.layers, msg.model.layers):
        assert a.tobytes() == b.tobytes()
    assert back.model.r_add.tobytes() == msg.model.r_add.tobytes()
    assert back.model.partition == msg.model.partition


def test_identity_noise_round_equals_fedavg():
    w = random_net(3, (3, 5, 4))
    rng = np.random.default_rng(0)
    shards = [[Sample(rng.standard_normal(3), rng.standard_normal(4)) for _ in range(n)] for n in (2, 5)]
    secret = identity_noise(w.dims)
    pm = perturb(w, secret)
    agg = aggregate([local_update(pm, s, client_id=k) for k, s in enumerate(shards)])
    rec = recover_gradient(agg.g_hat, agg.sigma, agg.beta, secret)
    expected = fedavg_step(w, [(local_gradient_plain(w, s), len(s)) for s in shards], 0.1)
    for a, b, g in zip(expected.layers, w.layers, rec):
        assert max_rel_error(b - 0.1 * g, a) <= 1e-14


def test_one_round_k5_matches_plain_fedavg():
    w = random_net(4, (6, 8, 5, 3))
    rng = np.random.default_rng(1)
    shards = [[Sample(rng.standard_normal(6), rng.standard_normal(3)) for _ in range(n)] for n in (3, 1, 4, 2, 6)]
    srv = Server(w, lr=0.2, seed=5, expected_clients=range(5))
    _, pm = srv.begin_round()
    for k, s in enumerate(shards):
        srv.receive(local_update(pm, s, client_id=k))
    new, rec = srv.recover_and_update()
    plain = fedavg_step(w, [(local_gradient_plain(w, s), len(s)) for s in shards], 0.2)
    assert max(max_rel_error(a, b) for a, b in zip(new.layers, plain.layers)) <= 1e-9
    all_samples = [x for s in shards for x in s]
    assert rec.train_loss == pytest.approx(mean_loss(w, all_samples), rel=1e-9)


def test_inproc_delivers_every_update_before_recovery():
    cfg = run_config((5, 6, 3), 5, 2)
    data = build_federated(cfg.dataset, 5, cfg.split, cfg.seed)
    ch = InProcChannel([make_client(cfg, data, k) for k in reversed(range(5))])
    srv = Server(random_net(5, (5, 6, 3)), expected_clients=range(5))
    seen = []
    run_rounds(srv, ch, 2, on_round=lambda r, w, rec: seen.append(list(ch.delivered)))
    assert seen[0] == [(0, k) for k in range(5)]
    assert seen[1][5:] == [(1, k) for k in range(5)]


def test_inproc_codec_path_matches_direct():
    cfg = run_config((5, 6, 3), 2, 3)
    data = build_federated(cfg.dataset, 2, cfg.split, cfg.seed)
    results = []
    for codec in (False, True):
        ch = InProcChannel([make_client(cfg, data, k) for k in range(2)], codec=codec)
        results.append(run_training(cfg, data=data, channel=ch).params)
    assert param_hash(results[0]) == param_hash(results[1])


def test_zero_rounds_returns_initial_model():
    res = run_training(run_config((4, 5, 2), 2, 0))
    assert res.records == []
    assert param_hash(res.params) == param_hash(res.initial)


def test_plain_single_client_is_centralised_sgd():
    cfg = run_config((4, 6, 2), 1, 5, mode="plain")
    data = build_federated(cfg.dataset, 1, cfg.split, cfg.seed)
    res = run_training(cfg, data=data)
    w = res.initial
    train = data.train_samples()
    for _ in range(5):
        g = local_gradient_plain(w, train)
        w = MlpParams([a - cfg.lr * b for a, b in zip(w.layers, g)])
    assert max(max_rel_error(a, b) for a, b in zip(res.params.layers, w.layers)) <= 1e-12


def test_loss_series_matches_plain():
    cfg = run_config((5, 8, 4), 3, 30)
    pert = run_training(cfg)
    plain = run_training(cfg.with_overrides(mode="plain"))
    for a, b in zip(pert.records, plain.records):
        assert abs(a.train_loss - b.train_loss) <= 1e-6
        assert a.mode == "perturbed" and b.mode == "plain"


def test_minibatch_policy_is_replayed_identically():
    cfg = run_config((5, 8, 4), 2, 10, batch={"policy": "minibatch", "size": 7})
    data = build_federated(cfg.dataset, 2, cfg.split, cfg.seed)
    pert = run_training(cfg, data=data)
    plain = run_training(cfg.with_overrides(mode="plain"), data=data)
    assert max(max_rel_error(a, b) for a, b in zip(pert.params.layers, plain.params.layers)) <= 1e-9
    c = make_client(cfg, data, 0)
    assert [b.x.tobytes() for b in c.batch(3)] != [b.x.tobytes() for b in c.batch(4)]
    assert len(c.batch(3)) == 7


def test_metrics_csv_schema():
    res = run_training(run_config((4, 5, 3, 2), 2, 3))
    text = metrics_csv(res.records, 3)
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["round", "mode", "loss", "grad_norm_l1", "grad_norm_l2", "grad_norm_l3", "wall_ms"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2"]
    assert all(float(r[2]) == res.records[i].train_loss for i, r in enumerate(rows[1:]))
    assert metrics_csv([], 3).count("\n") == 1


def test_param_hashes():
    w = random_net(6, (3, 4, 2))
    nudged = w.copy()
    nudged.layers[0][0, 0] *= 1 + 1e-12
    assert param_hash(w) != param_hash(nudged)
    assert rounded_param_hash(w) == rounded_param_hash(nudged)
    neg = MlpParams([np.array([[-0.0]]), np.array([[1.0]])])
    pos = MlpParams([np.array([[0.0]]), np.array([[1.0]])])
    assert rounded_param_hash(neg) == rounded_param_hash(pos)


def test_manifest_fields():
    cfg = run_config((4, 5, 2), 1, 2)
    res = run_training(cfg)
    man = manifest(cfg, res)
    assert man["rounds_completed"] == 2 and man["dims"] == [4, 5, 2] and man["seed"] == cfg.seed
    assert man["final_param_sha256"] == param_hash(res.params)


def test_plain_round_payloads_have_no_corrections():
    w = tiny_params()
    u = local_update_plain(w.layers, [Sample(np.array([1.0]), np.array([0.0]))])
    agg = aggregate([u])
    assert agg.sigma == [[], []] and not np.any(agg.beta[0])
