"""The federated round engine: local training, aggregation, global advance.

One round is broadcast -> local train -> release -> aggregate:

* every sampled client starts from the global parameters and runs
  ``local_epochs`` of (full-batch or mini-batch) gradient steps at the
  round's learning rate;
* the client releases its parameter delta (local minus global), passed
  through the privacy mechanism;
* the server combines deltas as a convex combination under the active
  policy and advances the global model by the combined delta.

Combining deltas from a shared starting point is algebraically the same
as averaging the clients' parameters directly, bounds the sensitivity the
privacy clipping has to cover, and keeps wire payloads small.

Determinism contract: all randomness (participant sampling, shuffling,
noise) is derived per (run seed, purpose, client, round); updates are
sorted by client id before accumulation, so results are independent of
worker scheduling or arrival order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .evaluation import (
    ClientRoundRecord,
    MetricsReport,
    RoundReport,
    evaluate,
    trace_parameters,
)
from .model import Dataset, ModelSpec, gradient, init_params, loss, param_dim
from .privacy import MECHANISM_NONE, NoiseReceipt, PrivacyBudget, privatize
from .rng import derive_seed, generator
from .secure_sum import (
    FixedPointCodec,
    MaskedShare,
    PairwiseSeedMatrix,
    SecureSumAbort,
    mask,
    unmask_sum,
)

log = logging.getLogger(__name__)

POLICY_UNIFORM = "uniform"
POLICY_SIZE = "size_weighted"
POLICY_CUSTOM = "custom_weighted"

GLOBAL_TAG = "global"

_FLAGGED_RECEIPT = NoiseReceipt(
    sigma=0.0, clip_applied=False, pre_clip_norm=0.0, mechanism=MECHANISM_NONE
)


class FederationAbort(Exception):
    """The experiment cannot continue (round failed twice, or no usable updates)."""


@dataclass
class ClientState:
    """One client: its identity, local data, and privacy budget."""

    client_id: int
    domain_tag: str
    data: Dataset
    budget: PrivacyBudget
    weight_override: float | None = None

    def __post_init__(self) -> None:
        if self.weight_override is not None:
            if not math.isfinite(self.weight_override) or self.weight_override < 0:
                raise ValueError("weight_override must be finite and >= 0")


@dataclass
class ClientUpdate:
    """A client's released contribution for one round."""

    client_id: int
    round_index: int
    delta: np.ndarray
    sample_count: int
    loss_before: float
    loss_after: float
    receipt: NoiseReceipt
    diverged: bool = False
    tracked_values: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if not self.diverged and not np.all(np.isfinite(self.delta)):
            raise ValueError("non-flagged update has non-finite delta")


@dataclass(frozen=True)
class AggregationPolicy:
    """How client updates are weighted into the global step."""

    kind: str = POLICY_UNIFORM
    weights: dict[int, float] | None = None

    def __post_init__(self) -> None:
        if self.kind not in (POLICY_UNIFORM, POLICY_SIZE, POLICY_CUSTOM):
            raise ValueError(f"unknown aggregation policy {self.kind!r}")
        if self.weights is not None:
            for cid, w in self.weights.items():
                if not math.isfinite(w) or w < 0:
                    raise ValueError(f"weight for client {cid} must be finite and >= 0")


@dataclass(frozen=True)
class TrainingSchedule:
    """Round count and the local optimization recipe."""

    rounds: int
    local_epochs: int = 5
    batch_size: int | None = None
    learning_rate: float = 0.1
    lr_decay: float = 0.99
    participation_fraction: float = 1.0

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1 when set")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")
        if not 0.0 < self.participation_fraction <= 1.0:
            raise ValueError("participation_fraction must lie in (0, 1]")


def learning_rate_at(schedule: TrainingSchedule, round_index: int) -> float:
    """Learning rate for a 0-based round: base * decay^round."""
    return schedule.learning_rate * schedule.lr_decay**round_index


def _descent_epochs(
    spec: ModelSpec,
    dataset: Dataset,
    params: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int | None,
    shuffle_seed: int,
) -> np.ndarray:
    """Plain gradient descent for ``epochs`` passes; returns new parameters.

    Returns a non-finite array as-is when a step diverges; callers decide
    how to flag it.
    """
    theta = params.copy()
    # Overflow in a step is the divergence signal handled by the caller,
    # not a numerical surprise worth a warning.
    with np.errstate(over="ignore", invalid="ignore"):
        if batch_size is None or batch_size >= len(dataset):
            for _ in range(epochs):
                theta = theta - lr * gradient(spec, theta, dataset)
                if not np.all(np.isfinite(theta)):
                    return theta
        else:
            rng = generator(shuffle_seed)
            for _ in range(epochs):
                order = rng.permutation(len(dataset))
                for start in range(0, len(order), batch_size):
                    batch = dataset.subset(order[start : start + batch_size])
                    theta = theta - lr * gradient(spec, theta, batch)
                    if not np.all(np.isfinite(theta)):
                        return theta
    return theta


def local_train(
    client: ClientState,
    global_params: np.ndarray,
    schedule: TrainingSchedule,
    spec: ModelSpec,
    round_index: int,
    run_seed: int,
    tracked_indices: tuple[int, ...] = (),
) -> ClientUpdate:
    """One client's local round: E epochs from the global model, then release.

    The released delta is ``privatize(theta_local - theta_global)``.  A
    non-finite trajectory yields a flagged (diverged) update carrying a
    zero delta, which aggregation excludes.
    """
    lr = learning_rate_at(schedule, round_index)
    loss_before = loss(spec, global_params, client.data)
    theta = _descent_epochs(
        spec,
        client.data,
        global_params,
        schedule.local_epochs,
        lr,
        schedule.batch_size,
        derive_seed(run_seed, "shuffle", client.client_id, round_index),
    )
    if not np.all(np.isfinite(theta)):
        log.warning(
            "client %d diverged in round %d; flagging update", client.client_id, round_index
        )
        return ClientUpdate(
            client_id=client.client_id,
            round_index=round_index,
            delta=np.zeros_like(global_params),
            sample_count=len(client.data),
            loss_before=loss_before,
            loss_after=float("inf"),
            receipt=_FLAGGED_RECEIPT,
            diverged=True,
        )
    loss_after = loss(spec, theta, client.data)
    delta, receipt = privatize(
        theta - global_params,
        client.budget,
        derive_seed(run_seed, "noise", client.client_id, round_index),
    )
    tracked = tuple(float(v) for v in trace_parameters(theta, tracked_indices))
    return ClientUpdate(
        client_id=client.client_id,
        round_index=round_index,
        delta=delta,
        sample_count=len(client.data),
        loss_before=loss_before,
        loss_after=loss_after,
        receipt=receipt,
        tracked_values=tracked,
    )


def _raw_weight(update: ClientUpdate, policy: AggregationPolicy) -> float:
    if policy.kind == POLICY_UNIFORM:
        return 1.0
    if policy.kind == POLICY_SIZE:
        return float(update.sample_count)
    if policy.weights is None or update.client_id not in policy.weights:
        raise ValueError(
            f"custom_weighted policy is missing a weight for client {update.client_id}"
        )
    return float(policy.weights[update.client_id])


def aggregation_coefficients(
    updates: list[ClientUpdate], policy: AggregationPolicy
) -> dict[int, float]:
    """Normalized convex-combination coefficients for non-flagged updates."""
    usable = sorted((u for u in updates if not u.diverged), key=lambda u: u.client_id)
    if not usable:
        raise ValueError("no non-flagged updates to aggregate")
    raw = [_raw_weight(u, policy) for u in usable]
    total = sum(raw)
    if not total > 0:
        raise ValueError("zero total weight under the aggregation policy")
    return {u.client_id: w / total for u, w in zip(usable, raw)}


def aggregate(
    updates: list[ClientUpdate],
    policy: AggregationPolicy,
    global_params: np.ndarray,
) -> np.ndarray:
    """Advance the global model by the policy-weighted combination of deltas.

    Updates are sorted by client id before accumulation, so the result is
    bitwise independent of input order.
    """
    coeffs = aggregation_coefficients(updates, policy)
    combined = np.zeros_like(global_params)
    for update in sorted(updates, key=lambda u: u.client_id):
        if update.diverged:
            continue
        combined = combined + coeffs[update.client_id] * update.delta
    return global_params + combined


def derive_privacy_weights(
    clients: list[ClientState], epsilon_cap: float = 8.0
) -> dict[int, float]:
    """Privacy-aware weights: w_i proportional to |D_i| * min(eps_i, cap)/cap.

    Clients with stricter budgets (smaller epsilon) contribute less;
    disabled budgets count as the cap.  Weights are normalized to sum 1;
    a degenerate all-zero result falls back to uniform with a warning.
    """
    if not epsilon_cap > 0:
        raise ValueError("epsilon_cap must be > 0")
    raw = {}
    for client in clients:
        eps = epsilon_cap if not client.budget.enabled else min(client.budget.epsilon, epsilon_cap)
        raw[client.client_id] = len(client.data) * (eps / epsilon_cap)
    total = sum(raw.values())
    if not total > 0:
        log.warning("privacy-derived weights are all zero; falling back to uniform")
        return {cid: 1.0 / len(raw) for cid in raw}
    return {cid: w / total for cid, w in raw.items()}


@dataclass
class RoundInputs:
    """Everything the server side needs to finish a round."""

    round_index: int
    participant_ids: list[int]
    updates: list[ClientUpdate]
    shares: list[MaskedShare] | None = None
    coefficients: dict[int, float] | None = None


class FederationEngine:
    """Drives a federation: holds the global model and per-round state.

    The same engine backs the in-process simulator and the socket server;
    the only difference is where client updates come from.  Methods are
    split so a transport layer can broadcast/collect between
    :meth:`begin_round` and :meth:`complete_round`.
    """

    def __init__(
        self,
        spec: ModelSpec,
        clients: list[ClientState],
        schedule: TrainingSchedule,
        policy: AggregationPolicy,
        run_seed: int,
        *,
        secure_aggregation: bool = False,
        scale_bits: int = 24,
        eval_sets: dict[str, Dataset] | None = None,
        pooled_test: Dataset | None = None,
        tracked_indices: tuple[int, ...] = (),
    ):
        if not clients:
            raise ValueError("a federation needs at least one client")
        ids = [c.client_id for c in clients]
        if len(set(ids)) != len(ids):
            raise ValueError("client ids must be unique")
        dim = param_dim(spec)
        for client in clients:
            if client.data.feature_dim != spec.feature_dim:
                raise ValueError(f"client {client.client_id} data does not match the model spec")
        if any(i >= dim for i in tracked_indices):
            raise ValueError("tracked index out of range for the model")
        if policy.kind == POLICY_CUSTOM and policy.weights is None:
            # Fall back to the per-client overrides as the weight source.
            overrides = {}
            for client in clients:
                if client.weight_override is None:
                    raise ValueError(
                        f"custom_weighted policy needs weights or a weight_override "
                        f"on every client (client {client.client_id} has none)"
                    )
                overrides[client.client_id] = client.weight_override
            policy = AggregationPolicy(kind=POLICY_CUSTOM, weights=overrides)
        self.spec = spec
        self.clients = {c.client_id: c for c in sorted(clients, key=lambda c: c.client_id)}
        self.schedule = schedule
        self.policy = policy
        self.run_seed = run_seed
        self.secure_aggregation = secure_aggregation
        self.codec = FixedPointCodec(scale_bits)
        self.eval_sets = dict(eval_sets or {})
        self.pooled_test = pooled_test
        self.tracked_indices = tuple(int(i) for i in tracked_indices)
        self.params = init_params(spec)
        self.round_index = 0
        self.reports: list[RoundReport] = []
        self.seed_matrix = (
            PairwiseSeedMatrix.from_root_seed(derive_seed(run_seed, "mask"), self.clients)
            if secure_aggregation
            else None
        )

    # -- round building blocks -------------------------------------------

    def participants(self, round_index: int) -> list[int]:
        """Seeded choice of ceil(fraction * N) clients, returned sorted."""
        ids = sorted(self.clients)
        count = math.ceil(self.schedule.participation_fraction * len(ids))
        rng = generator(derive_seed(self.run_seed, "participation", round_index))
        chosen = rng.permutation(np.asarray(ids))[:count]
        return sorted(int(c) for c in chosen)

    def preassigned_coefficients(self, participant_ids: list[int]) -> dict[int, float]:
        """Coefficients fixed before training (the masked path needs them up front)."""
        raw = {}
        for cid in participant_ids:
            client = self.clients[cid]
            if self.policy.kind == POLICY_UNIFORM:
                raw[cid] = 1.0
            elif self.policy.kind == POLICY_SIZE:
                raw[cid] = float(len(client.data))
            else:
                if self.policy.weights is None or cid not in self.policy.weights:
                    raise ValueError(f"custom_weighted policy is missing a weight for client {cid}")
                raw[cid] = float(self.policy.weights[cid])
        total = sum(raw.values())
        if not total > 0:
            raise ValueError("zero total weight under the aggregation policy")
        return {cid: w / total for cid, w in raw.items()}

    def run_local(self, client_id: int, round_index: int) -> ClientUpdate:
        return local_train(
            self.clients[client_id],
            self.params,
            self.schedule,
            self.spec,
            round_index,
            self.run_seed,
            self.tracked_indices,
        )

    def masked_share_for(
        self,
        update: ClientUpdate,
        coefficient: float,
        participant_ids: list[int],
    ) -> MaskedShare:
        """Client-side masking of a coefficient-scaled delta (zeros if flagged)."""
        if self.seed_matrix is None:
            raise ValueError("engine was not configured for secure aggregation")
        scaled = np.zeros_like(update.delta) if update.diverged else coefficient * update.delta
        return mask(
            self.codec.encode(scaled),
            update.client_id,
            self.seed_matrix,
            participant_ids,
            update.round_index,
        )

    def collect_shares(self, inputs: RoundInputs) -> list[MaskedShare]:
        """In-process share collection; the socket server replaces this step."""
        assert inputs.coefficients is not None
        return [
            self.masked_share_for(u, inputs.coefficients[u.client_id], inputs.participant_ids)
            for u in inputs.updates
        ]

    def _advance_masked(self, inputs: RoundInputs) -> None:
        assert inputs.shares is not None and inputs.coefficients is not None
        combined = unmask_sum(inputs.shares, self.codec, inputs.participant_ids)
        flagged = [u for u in inputs.updates if u.diverged]
        if flagged:
            ok_total = sum(
                inputs.coefficients[u.client_id] for u in inputs.updates if not u.diverged
            )
            if not ok_total > 0:
                raise FederationAbort("all updates in the round were flagged")
            combined = combined / ok_total
        self.params = self.params + combined

    def _advance_plain(self, inputs: RoundInputs) -> None:
        try:
            self.params = aggregate(inputs.updates, self.policy, self.params)
        except ValueError as exc:
            raise FederationAbort(str(exc)) from exc

    def complete_round(self, inputs: RoundInputs) -> RoundReport:
        """Aggregate, advance the global model, evaluate, and record."""
        if inputs.round_index != self.round_index:
            raise FederationAbort(
                f"round mismatch: inputs for {inputs.round_index}, engine at {self.round_index}"
            )
        if self.secure_aggregation:
            self._advance_masked(inputs)
        else:
            self._advance_plain(inputs)
        report = self._build_report(inputs)
        self.reports.append(report)
        self.round_index += 1
        return report

    def run_round(self) -> RoundReport:
        """One full in-process round, with the single-retry abort policy."""
        t = self.round_index
        pids = self.participants(t)
        updates = [self.run_local(cid, t) for cid in pids]
        inputs = RoundInputs(round_index=t, participant_ids=pids, updates=updates)
        if self.secure_aggregation:
            inputs.coefficients = self.preassigned_coefficients(pids)
            last_error: SecureSumAbort | None = None
            for attempt in (1, 2):
                try:
                    inputs.shares = self.collect_shares(inputs)
                    return self.complete_round(inputs)
                except SecureSumAbort as exc:
                    last_error = exc
                    log.warning("round %d attempt %d aborted: %s", t, attempt, exc)
            raise FederationAbort(
                f"round {t} failed twice with the same participant set: {last_error}"
            ) from last_error
        return self.complete_round(inputs)

    def run(self) -> list[RoundReport]:
        for _ in range(self.schedule.rounds):
            self.run_round()
        return self.reports

    # -- reporting ---------------------------------------------------------

    def _build_report(self, inputs: RoundInputs) -> RoundReport:
        domain_losses = {
            tag: loss(self.spec, self.params, dataset)
            for tag, dataset in sorted(self.eval_sets.items())
        }
        if self.pooled_test is not None:
            global_loss = loss(self.spec, self.params, self.pooled_test)
            global_metrics = evaluate(self.spec, self.params, self.pooled_test)
        else:
            global_loss = float("nan")
            global_metrics = MetricsReport(*(float("nan"),) * 4)

        by_update = {u.client_id: u for u in inputs.updates}
        tracked: dict[str, tuple[float, ...]] = {}
        if self.tracked_indices:
            global_values = tuple(
                float(v) for v in trace_parameters(self.params, self.tracked_indices)
            )
            tracked[GLOBAL_TAG] = global_values
            for tag in sorted({c.domain_tag for c in self.clients.values()}):
                rows = [
                    by_update[cid].tracked_values
                    for cid in inputs.participant_ids
                    if self.clients[cid].domain_tag == tag and not by_update[cid].diverged
                ]
                if rows:
                    tracked[tag] = tuple(float(v) for v in np.mean(rows, axis=0))
                else:
                    # Domain idle this round: its latest local view is the global model.
                    tracked[tag] = global_values

        records = []
        for cid, client in self.clients.items():
            budget = client.budget
            epsilon = budget.epsilon if budget.enabled else None
            delta = budget.delta if budget.enabled else None
            update = by_update.get(cid)
            if update is None:
                records.append(
                    ClientRoundRecord(
                        client_id=cid,
                        domain_tag=client.domain_tag,
                        participated=False,
                        diverged=False,
                        sample_count=len(client.data),
                        loss_before=float("nan"),
                        loss_after=float("nan"),
                        receipt=None,
                        epsilon=epsilon,
                        delta=delta,
                    )
                )
            else:
                records.append(
                    ClientRoundRecord(
                        client_id=cid,
                        domain_tag=client.domain_tag,
                        participated=True,
                        diverged=update.diverged,
                        sample_count=update.sample_count,
                        loss_before=update.loss_before,
                        loss_after=update.loss_after,
                        receipt=update.receipt,
                        epsilon=epsilon,
                        delta=delta,
                    )
                )
        return RoundReport(
            round_index=inputs.round_index,
            domain_losses=domain_losses,
            global_loss=global_loss,
            global_metrics=global_metrics,
            tracked=tracked,
            clients=tuple(records),
        )


def centralized_descent(
    spec: ModelSpec,
    dataset: Dataset,
    schedule: TrainingSchedule,
    run_seed: int,
):
    """Plain pooled-data descent, round-grouped: yields params per round.

    Uses client 0's shuffle stream, so a one-client federation with
    privacy disabled follows this trajectory step for step.
    """
    theta = init_params(spec)
    for t in range(schedule.rounds):
        theta = _descent_epochs(
            spec,
            dataset,
            theta,
            schedule.local_epochs,
            learning_rate_at(schedule, t),
            schedule.batch_size,
            derive_seed(run_seed, "shuffle", 0, t),
        )
        if not np.all(np.isfinite(theta)):
            raise FederationAbort(f"centralized training diverged in round {t}")
        yield theta.copy()
