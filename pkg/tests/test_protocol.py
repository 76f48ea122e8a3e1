import numpy as np
import pytest

from conftest import record_dicts, small_cfg
from hetfed import data, harness, nn, protocol, reweight
from hetfed.errors import ConfigError, ProtocolError
from hetfed.harness import _S_INIT, _S_TRAIN


class TestFedavgAggregate:
    def test_midpoint(self):
        dims = ((1, 1),)
        a = nn.ModelParams(dims, np.array([0.0, 2.0]))
        b = nn.ModelParams(dims, np.array([2.0, 4.0]))
        agg = protocol.fedavg_aggregate([a, b], [10, 10])
        assert np.allclose(agg.values, [1.0, 3.0], atol=0)

    def test_single_client_identity(self):
        params = nn.init_params(((3, 2),), 0)
        agg = protocol.fedavg_aggregate([params], [17])
        assert np.array_equal(agg.values, params.values)

    def test_size_weighted(self):
        dims = ((0, 1),)  # zero-input layer: one bias parameter
        a = nn.ModelParams(dims, np.array([0.0]))
        b = nn.ModelParams(dims, np.array([4.0]))
        agg = protocol.fedavg_aggregate([a, b], [1, 3])
        assert np.allclose(agg.values, [3.0], atol=0)

    def test_heterogeneous_shapes_rejected(self):
        a = nn.init_params(((2, 2),), 0)
        b = nn.init_params(((2, 3),), 0)
        with pytest.raises(ProtocolError):
            protocol.fedavg_aggregate([a, b], [1, 1])

    def test_random_instances_match_manual_mean(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            k = int(rng.integers(1, 6))
            dims = ((int(rng.integers(1, 4)), int(rng.integers(1, 4))),)
            plist = [
                nn.ModelParams(dims, rng.normal(size=nn.param_count(dims)))
                for _ in range(k)
            ]
            sizes = rng.integers(1, 50, size=k)
            manual = sum(p.values * s for p, s in zip(plist, sizes)) / sizes.sum()
            agg = protocol.fedavg_aggregate(plist, sizes.tolist())
            assert np.allclose(agg.values, manual, atol=1e-12, rtol=0)


def centralized_sgd(cfg, shard, layer_dims, rounds, epochs):
    """Standalone minibatch SGD oracle mirroring the documented client loop."""
    params = nn.init_params(layer_dims, (cfg.seed, _S_INIT))
    rng = np.random.default_rng((cfg.seed, _S_TRAIN, 0))
    x = shard.base.features
    targets = nn.one_hot(shard.noisy_labels, shard.base.class_count)
    for _ in range(rounds * epochs):
        perm = rng.permutation(shard.size)
        for start in range(0, shard.size, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            grad = nn.backward(params, x[idx], nn.CrossEntropySpec(targets[idx]))
            params = nn.sgd_step(params, grad, cfg.hyperparams.lr)
    return params


class TestFedavgRounds:
    def test_single_client_equals_centralized(self):
        cfg = small_cfg(strategy="fedavg", rounds=4, local_epochs=2,
                        data={"clients": 1, "shard_size": 50})
        result, world = harness.run_experiment(cfg)
        oracle = centralized_sgd(cfg, world.clients[0].shard,
                                 world.clients[0].arch, 4, 2)
        assert world.clients[0].params.values.tobytes() == oracle.values.tobytes()

    def test_zero_local_epochs_keeps_params(self):
        cfg = small_cfg(strategy="fedavg", rounds=3, local_epochs=0)
        _, world = harness.run_experiment(cfg)
        fresh = nn.init_params(world.clients[0].arch, (cfg.seed, _S_INIT))
        for client in world.clients:
            assert client.params.values.tobytes() == fresh.values.tobytes()

    def test_identical_clients_aggregate_to_their_params(self):
        base = data.gen_blobs(2, 2, 60, 0.4, seed=0)
        test, rest = data.random_split(base, 30, seed=1)
        shard = data.inject_pairflip(rest.subset(np.arange(40)), 0.2, seed=2)
        dims = ((2, 6), (6, 2))
        init = nn.init_params(dims, 3)
        clients = [
            protocol.ClientState(i, init, shard, np.random.default_rng(42))
            for i in range(2)
        ]
        cfg = protocol.StrategyConfig(
            "fedavg", rounds=2, local_epochs=1, collab_epochs=0, batch_size=16,
            hyperparams=nn.Hyperparams(lr=0.05), flags=protocol.AblationFlags(),
        )
        protocol.run_federation(clients, cfg, test)
        solo = [
            protocol.ClientState(0, init, shard, np.random.default_rng(42))
        ]
        protocol.run_federation(solo, cfg, test)
        assert clients[0].params.values.tobytes() == solo[0].params.values.tobytes()
        assert clients[1].params.values.tobytes() == solo[0].params.values.tobytes()

    def test_heterogeneous_archs_rejected(self):
        cfg = small_cfg(strategy="fedavg", archs={"hidden_layers": [[8], [12]]},
                        data={"clients": 2})
        with pytest.raises(ConfigError, match="homogeneous"):
            harness.run_experiment(cfg)


class TestHeteroRounds:
    def test_round_matches_manual_oracle(self):
        """Replay one distillation round by hand and compare bitwise."""
        cfg = small_cfg(strategy="hetero_distill", rounds=1, local_epochs=1,
                        collab_epochs=2, data={"clients": 2})
        result, world = harness.run_experiment(cfg)

        # independent replay from the same deterministic world
        replay_cfg = small_cfg(strategy="hetero_distill", rounds=0, local_epochs=1,
                               collab_epochs=2, data={"clients": 2})
        _, fresh = harness.run_experiment(replay_cfg)  # rounds=0: untouched fleet
        logits = [nn.mlp_forward(c.params, fresh.public.features) for c in fresh.clients]
        consensus = (logits[0] + logits[1]) / 2.0
        hp = cfg.hyperparams
        for client in fresh.clients:
            params = client.params
            spec = nn.ConsensusKlSpec(consensus[np.newaxis], np.ones(1), hp.temperature)
            for _ in range(2):
                params = nn.sgd_step(params, nn.backward(params, fresh.public.features, spec), hp.lr)
            targets = nn.one_hot(client.shard.noisy_labels, 3)
            perm = client.rng.permutation(client.shard.size)
            for start in range(0, client.shard.size, cfg.batch_size):
                idx = perm[start : start + cfg.batch_size]
                grad = nn.backward(params, client.shard.base.features[idx],
                                   nn.CrossEntropySpec(targets[idx]))
                params = nn.sgd_step(params, grad, hp.lr)
            client.params = params
        for engine, manual in zip(world.clients, fresh.clients):
            assert engine.params.values.tobytes() == manual.params.values.tobytes()

    def test_identical_clients_have_zero_collab_gradient(self):
        base = data.gen_blobs(3, 2, 60, 0.4, seed=0)
        test, rest = data.random_split(base, 30, seed=1)
        public, rest = data.random_split(rest, 20, seed=2)
        shard = data.inject_pairflip(rest.subset(np.arange(40)), 0.2, seed=3)
        dims = ((2, 5), (5, 3))
        init = nn.init_params(dims, 7)
        # two clients: the consensus mean of two equal matrices is exact
        clients = [
            protocol.ClientState(i, init, shard, np.random.default_rng(5))
            for i in range(2)
        ]
        cfg = protocol.StrategyConfig(
            "hetero_distill", rounds=1, local_epochs=0, collab_epochs=3,
            batch_size=16, hyperparams=nn.Hyperparams(lr=0.1),
            flags=protocol.AblationFlags(hfl=True),
        )
        protocol.run_federation(clients, cfg, test, public)
        for client in clients:
            assert client.params.values.tobytes() == init.values.tobytes()

    def test_zero_collab_epochs_reduces_to_local_only(self):
        # same world both times: only the round procedure differs
        hetero = small_cfg(strategy="hetero_distill", collab_epochs=0, rounds=3,
                           data={"clients": 2})
        world_h = harness.build_world(hetero)
        world_l = harness.build_world(hetero)
        res_h = protocol.run_federation(
            world_h.clients, hetero.strategy_config(), world_h.test, world_h.public
        )
        local_cfg = protocol.StrategyConfig(
            "local_only", rounds=3, local_epochs=hetero.local_epochs,
            collab_epochs=0, batch_size=hetero.batch_size,
            hyperparams=hetero.hyperparams, flags=protocol.AblationFlags(),
        )
        res_l = protocol.run_federation(
            world_l.clients, local_cfg, world_l.test, world_l.public
        )
        for ch, cl in zip(world_h.clients, world_l.clients):
            assert ch.params.values.tobytes() == cl.params.values.tobytes()
        assert record_dicts(res_h) == record_dicts(res_l)

    def test_missing_public_dataset_rejected(self):
        cfg = small_cfg(strategy="hetero_distill", data={"n_public": 0})
        with pytest.raises(ConfigError, match="public"):
            harness.run_experiment(cfg)


class TestLatticeRounds:
    def test_all_flags_off_equals_local_only(self):
        flags_off = {"hfl": False, "sl": False, "dlr": False, "reweight": "none"}
        full = small_cfg(strategy="rhfl_plus_eccr", flags=flags_off, rounds=3)
        local = small_cfg(strategy="local_only", rounds=3)
        res_f, world_f = harness.run_experiment(full)
        res_l, world_l = harness.run_experiment(local)
        assert record_dicts(res_f) == record_dicts(res_l)
        for cf, cl in zip(world_f.clients, world_l.clients):
            assert cf.params.values.tobytes() == cl.params.values.tobytes()

    def test_equal_confidence_eccr_matches_uniform_weights(self):
        base = data.gen_blobs(3, 2, 80, 0.4, seed=0)
        test, rest = data.random_split(base, 40, seed=1)
        public, rest = data.random_split(rest, 20, seed=2)
        shard = data.inject_pairflip(rest.subset(np.arange(50)), 0.2, seed=3)
        dims = ((2, 6), (6, 3))
        init = nn.init_params(dims, 11)

        def fleet():
            return [
                protocol.ClientState(i, init, shard, np.random.default_rng(9))
                for i in range(4)
            ]

        def run(reweight_mode):
            cfg = protocol.StrategyConfig(
                "rhfl_plus_eccr", rounds=3, local_epochs=1, collab_epochs=1,
                batch_size=16, hyperparams=nn.Hyperparams(lr=0.05),
                flags=protocol.AblationFlags(True, True, True, reweight_mode),
            )
            clients = fleet()
            result = protocol.run_federation(clients, cfg, test, public)
            return clients, result

        eccr_clients, eccr_res = run("eccr")
        none_clients, none_res = run("none")
        for a, b in zip(eccr_clients, none_clients):
            assert a.params.values.tobytes() == b.params.values.tobytes()
        for rec in eccr_res.records[1:]:
            for stats in rec.clients:
                assert stats.weight == pytest.approx(0.25, abs=1e-15)

    def test_dlr_epoch_numbering_matches_schedule(self):
        """Replicate the refinement trajectory by hand, epoch indices 1..T*E."""
        cfg = small_cfg(strategy="rhfl_plus_eccr",
                        flags={"hfl": False, "sl": True, "dlr": True, "reweight": "none"},
                        rounds=2, local_epochs=2, data={"clients": 1})
        result, world = harness.run_experiment(cfg)

        setup = small_cfg(strategy="rhfl_plus_eccr",
                          flags={"hfl": False, "sl": True, "dlr": True, "reweight": "none"},
                          rounds=0, local_epochs=2, data={"clients": 1})
        _, fresh = harness.run_experiment(setup)
        client = fresh.clients[0]
        sched = reweight.DlrSchedule(cfg.hyperparams.zeta, 4)
        onehot = nn.one_hot(client.shard.noisy_labels, 3)
        params = client.params
        hp = cfg.hyperparams
        for t in (1, 2, 3, 4):
            s = reweight.dlr_weight(t, sched)
            preds = nn.softmax_t(nn.mlp_forward(params, client.shard.base.features), 1.0)
            targets = reweight.dlr_refine(onehot, preds, s)
            perm = client.rng.permutation(client.shard.size)
            for start in range(0, client.shard.size, cfg.batch_size):
                idx = perm[start : start + cfg.batch_size]
                spec = nn.SymmetricLossSpec(targets[idx], hp.lam, hp.gamma, hp.rce_log_floor)
                grad = nn.backward(params, client.shard.base.features[idx], spec)
                params = nn.sgd_step(params, grad, hp.lr)
        assert world.clients[0].params.values.tobytes() == params.values.tobytes()
        assert reweight.dlr_weight(4, sched) == pytest.approx(4 / (hp.zeta * 4 + 4), abs=0)

    def test_weights_sum_to_one_each_round(self):
        cfg = small_cfg(strategy="rhfl_plus_ccr", rounds=4,
                        data={"clients": 3, "shard_size": 30})
        result, _ = harness.run_experiment(cfg)
        for rec in result.records[1:]:
            total = sum(s.weight for s in rec.clients)
            assert total == pytest.approx(1.0, abs=1e-9)

    def test_round_zero_is_uniform(self):
        cfg = small_cfg(strategy="rhfl_plus_eccr", rounds=2, data={"clients": 4})
        result, _ = harness.run_experiment(cfg)
        first_train_round = result.records[1]
        for stats in first_train_round.clients:
            assert stats.weight == pytest.approx(0.25, abs=1e-12)

    def test_four_distinct_architectures_complete(self):
        cfg = small_cfg(strategy="rhfl_plus_eccr", rounds=2,
                        archs={"hidden_layers": [[6], [10], [14, 6], [4]]},
                        data={"clients": 4, "shard_size": 30})
        result, world = harness.run_experiment(cfg)
        assert len({c.arch for c in world.clients}) == 4
        assert len(result.records) == 3

    def test_rhfl_vs_rhfl_plus_differ_only_by_flags(self):
        cfg_a = small_cfg(strategy="rhfl")
        cfg_b = small_cfg(strategy="rhfl_plus_eccr")
        assert cfg_a.flags == protocol.AblationFlags(True, True, False, "ccr")
        assert cfg_b.flags == protocol.AblationFlags(True, True, True, "eccr")

    def test_strategy_names_are_pure_flag_presets(self):
        # toggling rhfl_plus_eccr down to the rhfl flags reproduces rhfl
        plain = small_cfg(strategy="rhfl", rounds=3)
        toggled = small_cfg(strategy="rhfl_plus_eccr", rounds=3,
                            flags={"dlr": False, "reweight": "ccr"})
        res_a, world_a = harness.run_experiment(plain)
        res_b, world_b = harness.run_experiment(toggled)
        assert record_dicts(res_a) == record_dicts(res_b)
        for ca, cb in zip(world_a.clients, world_b.clients):
            assert ca.params.values.tobytes() == cb.params.values.tobytes()

    def test_fedavg_partial_participation(self):
        cfg = small_cfg(strategy="fedavg", rounds=3, participation=0.5,
                        data={"clients": 4, "shard_size": 25})
        res_a, world_a = harness.run_experiment(cfg)
        res_b, world_b = harness.run_experiment(cfg)
        assert record_dicts(res_a) == record_dicts(res_b)
        final = {c.params.values.tobytes() for c in world_a.clients}
        assert len(final) == 1  # everyone holds the aggregated model


class TestDeterminismAndMessages:
    def test_same_seed_bitwise_identical_records(self):
        cfg = small_cfg(strategy="rhfl_plus_eccr", rounds=3)
        res_a, _ = harness.run_experiment(cfg)
        res_b, _ = harness.run_experiment(cfg)
        assert record_dicts(res_a) == record_dicts(res_b)

    def test_jobs_do_not_change_records(self):
        cfg = small_cfg(strategy="rhfl_plus_ccr", rounds=3, data={"clients": 4})
        res_a, _ = harness.run_experiment(cfg, jobs=1)
        res_b, _ = harness.run_experiment(cfg, jobs=4)
        assert record_dicts(res_a) == record_dicts(res_b)

    def test_round_barrier_ordering(self):
        cfg = small_cfg(strategy="rhfl_plus_eccr", rounds=3)
        result, _ = harness.run_experiment(cfg)
        rounds_in_order = [entry[1] for entry in result.messages.entries]
        assert rounds_in_order == sorted(rounds_in_order)

    def test_stale_message_rejected(self):
        cfg = small_cfg(strategy="local_only", rounds=1)
        _, world = harness.run_experiment(cfg)
        controller = protocol.Controller(
            world.clients, small_cfg(strategy="local_only").strategy_config(),
            world.test,
        )
        msg = protocol.RoundMessage("model_upload", 3, 0)
        with pytest.raises(ProtocolError, match="stale"):
            controller._receive(msg, expected_round=5)

    def test_simulated_dropout_aborts_round(self):
        cfg = small_cfg(strategy="fedavg", rounds=4)
        world = harness.build_world(cfg)
        strategy_cfg = cfg.strategy_config(fail_round=2, fail_client=1)
        with pytest.raises(ProtocolError, match="client 1.*round 2"):
            protocol.run_federation(world.clients, strategy_cfg, world.test, world.public)

    def test_t_zero_gives_only_pretraining_eval(self):
        cfg = small_cfg(strategy="local_only", rounds=0)
        result, _ = harness.run_experiment(cfg)
        assert len(result.records) == 1
        assert result.records[0].round_idx == 0


class TestWorldBuilding:
    def test_public_test_and_shards_are_disjoint(self):
        cfg = small_cfg(strategy="rhfl_plus_eccr", data={"clients": 3, "shard_size": 30})
        world = harness.build_world(cfg)
        pools = [set(map(tuple, world.test.features)),
                 set(map(tuple, world.public.features))]
        pools += [set(map(tuple, c.shard.base.features)) for c in world.clients]
        for i in range(len(pools)):
            for j in range(i + 1, len(pools)):
                assert not pools[i] & pools[j]

    def test_per_client_noise_streams_are_independent(self):
        cfg = small_cfg(data={"clients": 2, "noise": {"kind": "symmetric", "rate": 0.5}})
        world = harness.build_world(cfg)
        masks = [c.shard.flipped for c in world.clients]
        assert not np.array_equal(masks[0], masks[1])

    def test_architectures_cycle_over_clients(self):
        cfg = small_cfg(archs={"hidden_layers": [[4], [6]]},
                        data={"clients": 4, "shard_size": 20})
        world = harness.build_world(cfg)
        hidden = [c.arch[0][1] for c in world.clients]
        assert hidden == [4, 6, 4, 6]
