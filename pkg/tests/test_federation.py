import itertools

import numpy as np
import pytest

from fedmesh.data import builtin_recipe, synthesize
from fedmesh.federation import (
    AggregationPolicy,
    ClientState,
    ClientUpdate,
    FederationAbort,
    FederationEngine,
    TrainingSchedule,
    aggregate,
    aggregation_coefficients,
    centralized_descent,
    derive_privacy_weights,
    learning_rate_at,
    local_train,
)
from fedmesh.model import Dataset, ModelSpec, gradient, init_params, loss
from fedmesh.privacy import MECHANISM_NONE, NoiseReceipt, PrivacyBudget
from fedmesh.secure_sum import SecureSumAbort

SPEC = ModelSpec(feature_dim=2, class_count=3)
NO_DP = PrivacyBudget(enabled=False)
RECEIPT = NoiseReceipt(sigma=0.0, clip_applied=False, pre_clip_norm=0.0, mechanism=MECHANISM_NONE)


def _update(cid, delta, samples=1, diverged=False):
    return ClientUpdate(
        client_id=cid,
        round_index=0,
        delta=np.asarray(delta, dtype=np.float64),
        sample_count=samples,
        loss_before=1.0,
        loss_after=0.5,
        receipt=RECEIPT,
        diverged=diverged,
    )


def _client(cid, tag="medical", n=120, seed=None, budget=NO_DP):
    data = synthesize(builtin_recipe(tag), n, seed if seed is not None else 50 + cid)
    return ClientState(cid, tag, data, budget)


def _engine(clients, schedule, policy=None, run_seed=42, **kwargs):
    eval_sets = {tag: synthesize(builtin_recipe(tag), 90, 900) for tag in {c.domain_tag for c in clients}}
    pooled = Dataset(
        np.concatenate([e.features for e in eval_sets.values()]),
        np.concatenate([e.labels for e in eval_sets.values()]),
        3,
    )
    return FederationEngine(
        SPEC,
        clients,
        schedule,
        policy or AggregationPolicy(),
        run_seed,
        eval_sets=eval_sets,
        pooled_test=pooled,
        **kwargs,
    )


# -- schedules and learning rate ---------------------------------------------


def test_schedule_validation():
    with pytest.raises(ValueError):
        TrainingSchedule(rounds=0)
    with pytest.raises(ValueError):
        TrainingSchedule(rounds=1, learning_rate=-0.1)
    with pytest.raises(ValueError):
        TrainingSchedule(rounds=1, lr_decay=1.5)
    with pytest.raises(ValueError):
        TrainingSchedule(rounds=1, participation_fraction=0.0)


def test_learning_rate_decay():
    schedule = TrainingSchedule(rounds=10, learning_rate=0.2, lr_decay=0.5)
    assert learning_rate_at(schedule, 0) == 0.2
    assert learning_rate_at(schedule, 2) == pytest.approx(0.05)


# -- local training ------------------------------------------------------------


def test_local_train_zero_lr_zero_delta():
    client = _client(0)
    schedule = TrainingSchedule(rounds=1, local_epochs=3, learning_rate=0.0)
    update = local_train(client, init_params(SPEC), schedule, SPEC, 0, run_seed=1)
    # No movement means an exactly-zero delta once DP is off.
    assert np.array_equal(update.delta, np.zeros_like(update.delta))
    assert update.receipt.mechanism == "none"


def test_local_train_zero_lr_dp_on_is_pure_noise():
    from fedmesh.privacy import privatize
    from fedmesh.rng import derive_seed

    budget = PrivacyBudget(epsilon=1.0, delta=1e-5, clip_norm=1.0)
    client = _client(0, budget=budget)
    schedule = TrainingSchedule(rounds=1, local_epochs=3, learning_rate=0.0)
    update = local_train(client, init_params(SPEC), schedule, SPEC, 0, run_seed=1)
    expected, _ = privatize(
        np.zeros_like(update.delta), budget, derive_seed(1, "noise", 0, 0)
    )
    assert np.array_equal(update.delta, expected)


def test_local_train_reduces_local_loss():
    schedule = TrainingSchedule(rounds=1, local_epochs=5, learning_rate=0.01)
    for seed in range(20):
        client = _client(0, seed=seed)
        update = local_train(client, init_params(SPEC), schedule, SPEC, 0, run_seed=9)
        assert update.loss_after <= update.loss_before


def test_local_train_minibatch_deterministic():
    client = _client(0)
    schedule = TrainingSchedule(rounds=1, local_epochs=2, batch_size=32, learning_rate=0.05)
    a = local_train(client, init_params(SPEC), schedule, SPEC, 0, run_seed=3)
    b = local_train(client, init_params(SPEC), schedule, SPEC, 0, run_seed=3)
    assert np.array_equal(a.delta, b.delta)
    c = local_train(client, init_params(SPEC), schedule, SPEC, 1, run_seed=3)
    assert not np.array_equal(a.delta, c.delta)


def test_local_train_divergence_flags_update():
    # Plain softmax gradients are bounded; the L2 term is what lets an
    # oversized step blow up geometrically to a non-finite trajectory.
    reg_spec = ModelSpec(feature_dim=2, class_count=3, l2_coefficient=1.0)
    client = _client(0)
    schedule = TrainingSchedule(rounds=1, local_epochs=80, learning_rate=1e6)
    update = local_train(client, init_params(reg_spec), schedule, reg_spec, 0, run_seed=2)
    assert update.diverged
    assert np.array_equal(update.delta, np.zeros_like(update.delta))
    assert update.loss_after == float("inf")


# -- aggregation ---------------------------------------------------------------


def test_identical_deltas_move_global_by_delta():
    delta = np.array([0.25, -1.5, 3.0])
    theta = np.array([1.0, 1.0, 1.0])
    for policy in (
        AggregationPolicy("uniform"),
        AggregationPolicy("size_weighted"),
        AggregationPolicy("custom_weighted", weights={0: 1.0, 1: 2.0, 2: 3.0}),
    ):
        updates = [_update(cid, delta, samples=cid + 1) for cid in range(3)]
        out = aggregate(updates, policy, theta)
        np.testing.assert_allclose(out, theta + delta, rtol=1e-12)


def test_size_weighted_hand_example():
    updates = [_update(0, [2.0, 0.0], samples=1), _update(1, [0.0, 2.0], samples=3)]
    out = aggregate(updates, AggregationPolicy("size_weighted"), np.zeros(2))
    np.testing.assert_allclose(out, [0.5, 1.5], rtol=1e-15)


def test_coefficients_convex_over_all_policies_and_subsets():
    rng = np.random.default_rng(8)
    sizes = {cid: int(rng.integers(1, 400)) for cid in range(6)}
    weights = {cid: float(rng.uniform(0.1, 5.0)) for cid in range(6)}
    policies = [
        AggregationPolicy("uniform"),
        AggregationPolicy("size_weighted"),
        AggregationPolicy("custom_weighted", weights=weights),
    ]
    for r in range(1, 7):
        for subset in itertools.combinations(range(6), r):
            updates = [_update(cid, rng.normal(0, 1, 4), samples=sizes[cid]) for cid in subset]
            for policy in policies:
                coeffs = aggregation_coefficients(updates, policy)
                values = np.array([coeffs[cid] for cid in subset])
                assert np.all(values >= 0)
                assert abs(values.sum() - 1.0) <= 1e-12


def test_aggregate_permutation_invariant_bitwise():
    rng = np.random.default_rng(9)
    updates = [_update(cid, rng.normal(0, 1, 5), samples=cid + 2) for cid in range(5)]
    theta = rng.normal(0, 1, 5)
    reference = aggregate(updates, AggregationPolicy("size_weighted"), theta)
    for _ in range(10):
        rng.shuffle(updates)
        assert np.array_equal(aggregate(updates, AggregationPolicy("size_weighted"), theta), reference)


def test_custom_weight_scaling_invariance():
    rng = np.random.default_rng(10)
    weights = {cid: float(rng.uniform(0.5, 2.0)) for cid in range(4)}
    updates = [_update(cid, rng.normal(0, 1, 3)) for cid in range(4)]
    base = aggregation_coefficients(updates, AggregationPolicy("custom_weighted", weights=weights))
    for c in (0.25, 3.0, 1e6):
        scaled = aggregation_coefficients(
            updates,
            AggregationPolicy("custom_weighted", weights={k: c * w for k, w in weights.items()}),
        )
        for cid in weights:
            assert scaled[cid] == pytest.approx(base[cid], abs=1e-12)


def test_flagged_updates_excluded_and_renormalized():
    updates = [
        _update(0, [1.0, 0.0], samples=10),
        _update(1, [0.0, 1.0], samples=10, diverged=True),
        _update(2, [3.0, 0.0], samples=30),
    ]
    out = aggregate(updates, AggregationPolicy("size_weighted"), np.zeros(2))
    # Only clients 0 and 2 count: weights 10/40 and 30/40.
    np.testing.assert_allclose(out, [0.25 * 1.0 + 0.75 * 3.0, 0.0], rtol=1e-12)


def test_aggregate_errors():
    with pytest.raises(ValueError, match="no non-flagged"):
        aggregate([_update(0, [1.0], diverged=True)], AggregationPolicy(), np.zeros(1))
    with pytest.raises(ValueError, match="zero total weight"):
        aggregate(
            [_update(0, [1.0])],
            AggregationPolicy("custom_weighted", weights={0: 0.0}),
            np.zeros(1),
        )
    with pytest.raises(ValueError, match="missing a weight"):
        aggregate(
            [_update(0, [1.0])],
            AggregationPolicy("custom_weighted", weights={1: 1.0}),
            np.zeros(1),
        )


# -- privacy-derived weights ---------------------------------------------------


def test_privacy_weights_equal_budgets_reduce_to_size_weighted():
    budget = PrivacyBudget(epsilon=2.0, delta=1e-5, clip_norm=1.0)
    clients = [_client(0, n=100, budget=budget), _client(1, n=300, budget=budget)]
    weights = derive_privacy_weights(clients)
    assert weights[0] == pytest.approx(0.25)
    assert weights[1] == pytest.approx(0.75)


def test_privacy_weights_hand_example():
    clients = [
        _client(0, n=100, budget=PrivacyBudget(epsilon=1.0)),
        _client(1, n=100, budget=PrivacyBudget(epsilon=8.0)),
        _client(2, n=100, budget=PrivacyBudget(enabled=False)),
    ]
    weights = derive_privacy_weights(clients, epsilon_cap=8.0)
    assert weights[0] == pytest.approx(0.0588, abs=1e-4)
    assert weights[1] == pytest.approx(0.4706, abs=1e-4)
    assert weights[2] == pytest.approx(0.4706, abs=1e-4)


def test_privacy_weights_epsilon_to_zero_limit():
    clients = [
        _client(0, n=100, budget=PrivacyBudget(epsilon=1e-9)),
        _client(1, n=100, budget=PrivacyBudget(epsilon=8.0)),
    ]
    weights = derive_privacy_weights(clients)
    assert weights[0] < 1e-9
    assert weights[1] == pytest.approx(1.0, abs=1e-9)


# -- engine rounds ---------------------------------------------------------------


def test_one_client_matches_centralized_descent_bitwise():
    data = synthesize(builtin_recipe("medical"), 200, 4)
    client = ClientState(0, "medical", data, NO_DP)
    schedule = TrainingSchedule(rounds=20, local_epochs=5, learning_rate=0.1, lr_decay=0.99)
    engine = _engine([client], schedule, run_seed=1234)
    for params in centralized_descent(SPEC, data, schedule, 1234):
        engine.run_round()
        assert np.array_equal(engine.params, params)


def test_run_deterministic_reports():
    clients = [_client(i, tag) for i, tag in enumerate(["medical", "financial", "user"])]
    schedule = TrainingSchedule(rounds=6, local_epochs=3)
    a = _engine(clients, schedule).run()
    b = _engine([_client(i, t) for i, t in enumerate(["medical", "financial", "user"])], schedule).run()
    for ra, rb in zip(a, b):
        assert ra == rb


def test_global_loss_non_increasing_with_small_lr():
    clients = [_client(i, tag) for i, tag in enumerate(["medical", "financial", "user"])]
    schedule = TrainingSchedule(rounds=25, local_epochs=3, learning_rate=0.05, lr_decay=1.0)
    reports = _engine(clients, schedule).run()
    losses = [r.global_loss for r in reports]
    for earlier, later in zip(losses, losses[1:]):
        assert later <= earlier + 1e-9


def test_participation_sampling_deterministic_and_sized():
    clients = [_client(i) for i in range(5)]
    schedule = TrainingSchedule(rounds=3, participation_fraction=0.5)
    engine = _engine(clients, schedule)
    first = engine.participants(0)
    assert len(first) == 3  # ceil(0.5 * 5)
    assert first == engine.participants(0)
    assert first == sorted(first)
    seen = {tuple(engine.participants(t)) for t in range(20)}
    assert len(seen) > 1  # different rounds sample different subsets


def test_partial_participation_round_runs():
    clients = [_client(i) for i in range(4)]
    schedule = TrainingSchedule(rounds=2, participation_fraction=0.5, local_epochs=2)
    engine = _engine(clients, schedule)
    report = engine.run_round()
    participated = [r.client_id for r in report.clients if r.participated]
    assert len(participated) == 2
    idle = [r for r in report.clients if not r.participated]
    assert all(np.isnan(r.loss_before) for r in idle)


@pytest.mark.parametrize("kind", ["uniform", "size_weighted"])
def test_secure_matches_plaintext_within_fixed_point_bound(kind):
    def build(secure):
        clients = [_client(i, tag) for i, tag in enumerate(["medical", "financial", "user"])]
        return _engine(
            clients,
            TrainingSchedule(rounds=1, local_epochs=4),
            policy=AggregationPolicy(kind),
            secure_aggregation=secure,
        )

    plain, masked = build(False), build(True)
    plain.run_round()
    masked.run_round()
    assert np.max(np.abs(plain.params - masked.params)) <= 3 * 2.0**-23


def test_weight_override_feeds_custom_policy():
    clients = [_client(i) for i in range(3)]
    for client, weight in zip(clients, (1.0, 2.0, 5.0)):
        client.weight_override = weight
    engine = _engine(clients, TrainingSchedule(rounds=1), policy=AggregationPolicy("custom_weighted"))
    assert engine.policy.weights == {0: 1.0, 1: 2.0, 2: 5.0}
    clients = [_client(i) for i in range(2)]  # no overrides anywhere
    with pytest.raises(ValueError, match="weight_override"):
        _engine(clients, TrainingSchedule(rounds=1), policy=AggregationPolicy("custom_weighted"))


def test_secure_round_retries_then_halts_on_persistent_abort():
    clients = [_client(i) for i in range(3)]
    engine = _engine(clients, TrainingSchedule(rounds=1, local_epochs=1), secure_aggregation=True)
    calls = []

    original = engine.collect_shares

    def dropping(inputs):
        calls.append(1)
        shares = original(inputs)
        return shares[:-1]  # one share always missing

    engine.collect_shares = dropping
    with pytest.raises(FederationAbort, match="twice"):
        engine.run_round()
    assert len(calls) == 2  # first attempt plus exactly one retry


def test_secure_round_recovers_when_retry_succeeds():
    clients = [_client(i) for i in range(3)]
    engine = _engine(clients, TrainingSchedule(rounds=1, local_epochs=1), secure_aggregation=True)
    original = engine.collect_shares
    state = {"failed": False}

    def flaky(inputs):
        if not state["failed"]:
            state["failed"] = True
            raise SecureSumAbort("injected fault")
        return original(inputs)

    engine.collect_shares = flaky
    report = engine.run_round()
    assert report.round_index == 0
    assert engine.round_index == 1


def test_secure_round_with_partial_participation():
    # Pairwise masks are exchanged among the sampled subset only, so they
    # still cancel when not everyone participates.
    clients = [_client(i) for i in range(5)]
    masked = _engine(
        clients,
        TrainingSchedule(rounds=1, local_epochs=2, participation_fraction=0.6),
        secure_aggregation=True,
    )
    plain = _engine(
        [_client(i) for i in range(5)],
        TrainingSchedule(rounds=1, local_epochs=2, participation_fraction=0.6),
    )
    masked.run_round()
    plain.run_round()
    assert np.max(np.abs(masked.params - plain.params)) <= 3 * 2.0**-23


def test_engine_rejects_duplicate_ids():
    with pytest.raises(ValueError, match="unique"):
        _engine([_client(0), _client(0)], TrainingSchedule(rounds=1))


def test_tracked_values_follow_domains():
    clients = [_client(i, tag) for i, tag in enumerate(["medical", "financial", "user"])]
    schedule = TrainingSchedule(rounds=1, local_epochs=2)
    engine = _engine(clients, schedule, tracked_indices=(0, 4))
    report = engine.run_round()
    assert set(report.tracked) == {"global", "medical", "financial", "user"}
    assert all(len(v) == 2 for v in report.tracked.values())
    # Domain traces reflect local training, so they differ from the global trace.
    assert report.tracked["medical"] != report.tracked["global"]
