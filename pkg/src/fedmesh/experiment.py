"""Turn a validated config into a runnable federation, and run it.

The data pipeline is fully deterministic from the config: every domain's
train and eval sets, the per-domain partition into client shards, and the
client id assignment (ids count up in domain order) derive from the
config seed alone.  Server and client processes therefore reconstruct
identical federations independently; the HELLO hash check guarantees they
started from the same config.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import ConfigError, ExperimentConfig
from .data import CsvSchema, PartitionPlan, load_csv, partition, synthesize
from .federation import (
    POLICY_CUSTOM,
    AggregationPolicy,
    ClientState,
    FederationEngine,
    centralized_descent,
    derive_privacy_weights,
)
from .model import Dataset
from .rng import derive_seed, generator

log = logging.getLogger(__name__)


@dataclass
class ExperimentSetup:
    """Materialized data and client states for one experiment."""

    clients: list[ClientState]
    eval_sets: dict[str, Dataset]
    pooled_test: Dataset
    policy: AggregationPolicy


def _split_csv_domain(dataset: Dataset, eval_fraction: float, seed: int):
    n = len(dataset)
    eval_count = max(1, int(round(eval_fraction * n)))
    if eval_count >= n:
        raise ConfigError("csv domain too small to hold out an eval split")
    order = generator(seed).permutation(n)
    return dataset.subset(np.sort(order[eval_count:])), dataset.subset(np.sort(order[:eval_count]))


def build_setup(config: ExperimentConfig) -> ExperimentSetup:
    """Synthesize/load every domain, partition shards, assign client ids."""
    clients: list[ClientState] = []
    eval_sets: dict[str, Dataset] = {}
    next_id = 0
    for index, domain in enumerate(config.domains):
        if domain.csv is not None:
            try:
                loaded = load_csv(
                    domain.csv.path,
                    CsvSchema(domain.csv.feature_columns, domain.csv.label_column),
                )
            except (OSError, ValueError) as exc:
                raise ConfigError(f"domains[{index}].csv: {exc}") from None
            full = loaded.dataset
            if full.class_count != config.model.class_count:
                raise ConfigError(
                    f"domains[{index}].csv: file has {full.class_count} classes, "
                    f"model expects {config.model.class_count}"
                )
            train, held_out = _split_csv_domain(
                full, domain.csv.eval_fraction, derive_seed(config.seed, "csvsplit", index)
            )
        else:
            train = synthesize(
                domain.recipe,
                domain.train_samples,
                derive_seed(config.seed, "domain", index, "train"),
            )
            held_out = synthesize(
                domain.recipe,
                domain.eval_samples,
                derive_seed(config.seed, "domain", index, "eval"),
            )
        eval_sets[domain.tag] = held_out
        plan = PartitionPlan(
            client_count=domain.clients,
            scheme=config.partition.scheme,
            dirichlet_alpha=config.partition.dirichlet_alpha,
            min_samples_per_client=config.partition.min_samples_per_client,
            seed=derive_seed(config.partition.seed, "domain", index),
        )
        try:
            shards = partition(train, plan)
        except ValueError as exc:
            raise ConfigError(f"domains[{index}]: {exc}") from None
        for shard in shards:
            clients.append(
                ClientState(
                    client_id=next_id,
                    domain_tag=domain.tag,
                    data=shard,
                    budget=config.budget_for(next_id),
                )
            )
            next_id += 1

    pooled_test = Dataset(
        np.concatenate([eval_sets[d.tag].features for d in config.domains]),
        np.concatenate([eval_sets[d.tag].labels for d in config.domains]),
        config.model.class_count,
    )

    policy = config.policy
    if config.privacy_derived_weights:
        weights = derive_privacy_weights(clients, epsilon_cap=config.epsilon_cap)
        policy = AggregationPolicy(kind=POLICY_CUSTOM, weights=weights)

    return ExperimentSetup(
        clients=clients, eval_sets=eval_sets, pooled_test=pooled_test, policy=policy
    )


def build_engine(config: ExperimentConfig) -> FederationEngine:
    setup = build_setup(config)
    return FederationEngine(
        spec=config.model,
        clients=setup.clients,
        schedule=config.schedule,
        policy=setup.policy,
        run_seed=config.seed,
        secure_aggregation=config.secure_aggregation,
        scale_bits=config.scale_bits,
        eval_sets=setup.eval_sets,
        pooled_test=setup.pooled_test,
        tracked_indices=config.tracked_indices,
    )


def pooled_training_data(setup: ExperimentSetup, class_count: int) -> Dataset:
    """All client shards concatenated (client id order) for the baseline."""
    return Dataset(
        np.concatenate([c.data.features for c in setup.clients]),
        np.concatenate([c.data.labels for c in setup.clients]),
        class_count,
    )


def baseline_rounds(config: ExperimentConfig):
    """Centralized training on pooled data.

    Returns the materialized setup plus an iterator of (round, params)
    pairs, one per round-equivalent (local_epochs steps each).
    """
    setup = build_setup(config)
    pooled = pooled_training_data(setup, config.model.class_count)
    descent = centralized_descent(config.model, pooled, config.schedule, config.seed)
    return setup, enumerate(descent)
