"""Experiment configuration: parsing, validation, canonical form, hashing.

A config is a single JSON document (UTF-8, nested objects and arrays).
:func:`parse_config` validates it and fills every default, producing both
typed objects and a *canonical dict*: fully defaulted, deterministically
ordered.  The canonical dict is what gets re-emitted, and its
experiment-defining subset (everything except ``output_dir`` and
``transport``) is SHA-256 hashed; server and clients compare this hash
during the HELLO handshake, so formatting differences never matter but
semantic differences always do.

Every validation error names the offending key path.

Canonical example (all keys shown; ``domains[*].csv`` replaces ``recipe``
for file-backed domains)::

    {
      "domains": [
        {"clients": 1, "eval_samples": 120, "recipe": "medical",
         "tag": "medical", "train_samples": 240}
      ],
      "fixed_point_scale_bits": 24,
      "model": {"class_count": 3, "family": "softmax_linear",
                "feature_dim": 2, "l2_coefficient": 0.0},
      "output_dir": "runs/example",
      "partition": {"dirichlet_alpha": 1.0, "min_samples_per_client": 1,
                    "scheme": "iid", "seed": 0},
      "policy": {"epsilon_cap": 8.0, "kind": "uniform",
                 "privacy_derived": false, "weights": null},
      "privacy": {"client_overrides": {}, "clip_norm": 1.0, "delta": 1e-05,
                  "enabled": false, "epsilon": 1.0},
      "schedule": {"batch_size": null, "learning_rate": 0.1, "lr_decay": 0.99,
                   "local_epochs": 5, "participation_fraction": 1.0,
                   "rounds": 100},
      "secure_aggregation": false,
      "seed": 42,
      "tracked_indices": [0],
      "transport": {"host": "127.0.0.1", "port": 7700, "timeout_seconds": 30.0}
    }
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .data import SCHEME_DIRICHLET, SCHEME_IID, DomainRecipe, builtin_recipe
from .federation import (
    POLICY_CUSTOM,
    POLICY_SIZE,
    POLICY_UNIFORM,
    AggregationPolicy,
    TrainingSchedule,
)
from .model import ModelSpec, param_dim
from .privacy import PrivacyBudget

MAX_SEED = 2**64 - 1
_REQUIRED = object()


class ConfigError(Exception):
    """Invalid configuration; the message names the offending key."""


def _type_name(types) -> str:
    if isinstance(types, tuple):
        return " or ".join(t.__name__ for t in types)
    return types.__name__


class _Node:
    """A dict with a key path, for error messages that name their key."""

    def __init__(self, data: dict, path: str):
        if not isinstance(data, dict):
            raise ConfigError(f"{path or 'config'}: expected an object")
        self.data = data
        self.path = path

    def _full(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def get(self, key: str, types, default=_REQUIRED):
        if key not in self.data or self.data[key] is None:
            if default is _REQUIRED:
                raise ConfigError(f"{self._full(key)}: required key is missing")
            return default
        value = self.data[key]
        if types is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if types is int and isinstance(value, bool):
            raise ConfigError(f"{self._full(key)}: expected int, got bool")
        if not isinstance(value, types):
            raise ConfigError(
                f"{self._full(key)}: expected {_type_name(types)}, got {type(value).__name__}"
            )
        return value

    def child(self, key: str, default=_REQUIRED) -> "_Node":
        return _Node(self.get(key, dict, default), self._full(key))

    def reject_unknown(self, allowed: set[str]) -> None:
        unknown = set(self.data) - allowed
        if unknown:
            raise ConfigError(f"{self._full(sorted(unknown)[0])}: unknown key")


@dataclass(frozen=True)
class CsvDomainSource:
    path: str
    feature_columns: tuple[str, ...]
    label_column: str
    eval_fraction: float


@dataclass(frozen=True)
class DomainConfig:
    tag: str
    recipe: DomainRecipe | None
    recipe_name: str | None
    csv: CsvDomainSource | None
    train_samples: int
    eval_samples: int
    clients: int


@dataclass(frozen=True)
class PartitionConfig:
    scheme: str
    dirichlet_alpha: float
    min_samples_per_client: int
    seed: int


@dataclass(frozen=True)
class TransportConfig:
    host: str
    port: int
    timeout_seconds: float


@dataclass
class ExperimentConfig:
    """A fully validated experiment description."""

    seed: int
    model: ModelSpec
    domains: list[DomainConfig]
    partition: PartitionConfig
    schedule: TrainingSchedule
    policy: AggregationPolicy
    privacy_derived_weights: bool
    epsilon_cap: float
    default_budget: PrivacyBudget
    budget_overrides: dict[int, PrivacyBudget]
    secure_aggregation: bool
    scale_bits: int
    tracked_indices: tuple[int, ...]
    transport: TransportConfig
    output_dir: str
    canonical: dict

    @property
    def client_count(self) -> int:
        return sum(d.clients for d in self.domains)

    def budget_for(self, client_id: int) -> PrivacyBudget:
        return self.budget_overrides.get(client_id, self.default_budget)


def _parse_budget(node: _Node, defaults: PrivacyBudget | None = None) -> PrivacyBudget:
    base = defaults or PrivacyBudget(enabled=False)
    node.reject_unknown({"enabled", "epsilon", "delta", "clip_norm"})
    try:
        return PrivacyBudget(
            epsilon=node.get("epsilon", float, base.epsilon),
            delta=node.get("delta", float, base.delta),
            clip_norm=node.get("clip_norm", float, base.clip_norm),
            enabled=node.get("enabled", bool, base.enabled),
        )
    except ValueError as exc:
        raise ConfigError(f"{node.path}: {exc}") from None


def _parse_recipe(node: _Node, tag: str) -> DomainRecipe:
    node.reject_unknown({"class_means", "class_covariance_scale", "mean_shift", "label_prior"})
    try:
        return DomainRecipe(
            domain_id=tag,
            class_means=np.asarray(node.get("class_means", list)),
            class_covariance_scale=node.get("class_covariance_scale", float),
            mean_shift=np.asarray(node.get("mean_shift", list)),
            label_prior=np.asarray(node.get("label_prior", list)),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{node.path}: {exc}") from None


def _check_recipe_shape(recipe: DomainRecipe, model: ModelSpec, path: str) -> None:
    if recipe.feature_dim != model.feature_dim:
        raise ConfigError(
            f"{path}: recipe feature_dim {recipe.feature_dim} != model.feature_dim {model.feature_dim}"
        )
    if recipe.class_count != model.class_count:
        raise ConfigError(
            f"{path}: recipe class count {recipe.class_count} != model.class_count {model.class_count}"
        )


def _parse_domain(node: _Node, model: ModelSpec) -> DomainConfig:
    node.reject_unknown(
        {"tag", "recipe", "csv", "train_samples", "eval_samples", "clients"}
    )
    recipe_raw = node.data.get("recipe")
    csv_raw = node.data.get("csv")
    if (recipe_raw is None) == (csv_raw is None):
        raise ConfigError(f"{node.path}: exactly one of 'recipe' or 'csv' is required")

    clients = node.get("clients", int, 1)
    if clients < 1:
        raise ConfigError(f"{node._full('clients')}: must be >= 1")

    recipe = None
    recipe_name = None
    csv = None
    if recipe_raw is not None:
        if isinstance(recipe_raw, str):
            try:
                recipe = builtin_recipe(recipe_raw)
            except ValueError as exc:
                raise ConfigError(f"{node._full('recipe')}: {exc}") from None
            recipe_name = recipe_raw
            tag = node.get("tag", str, recipe_name)
        else:
            tag = node.get("tag", str)  # inline recipes must be tagged
            recipe = _parse_recipe(node.child("recipe"), tag)
        _check_recipe_shape(recipe, model, node._full("recipe"))
        train_samples = node.get("train_samples", int)
        eval_samples = node.get("eval_samples", int)
        if train_samples < 1:
            raise ConfigError(f"{node._full('train_samples')}: must be >= 1")
        if eval_samples < 1:
            raise ConfigError(f"{node._full('eval_samples')}: must be >= 1")
    else:
        tag = node.get("tag", str)
        csv_node = node.child("csv")
        csv_node.reject_unknown({"path", "feature_columns", "label_column", "eval_fraction"})
        columns = csv_node.get("feature_columns", list)
        if not columns or not all(isinstance(c, str) for c in columns):
            raise ConfigError(f"{csv_node._full('feature_columns')}: expected a list of strings")
        if len(columns) != model.feature_dim:
            raise ConfigError(
                f"{csv_node._full('feature_columns')}: {len(columns)} columns != model.feature_dim {model.feature_dim}"
            )
        eval_fraction = csv_node.get("eval_fraction", float, 0.25)
        if not 0.0 < eval_fraction < 1.0:
            raise ConfigError(f"{csv_node._full('eval_fraction')}: must lie in (0, 1)")
        csv = CsvDomainSource(
            path=csv_node.get("path", str),
            feature_columns=tuple(columns),
            label_column=csv_node.get("label_column", str),
            eval_fraction=eval_fraction,
        )
        train_samples = 0
        eval_samples = 0

    return DomainConfig(
        tag=tag,
        recipe=recipe,
        recipe_name=recipe_name,
        csv=csv,
        train_samples=train_samples,
        eval_samples=eval_samples,
        clients=clients,
    )


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a raw config dict and fill every default."""
    root = _Node(raw, "")
    root.reject_unknown(
        {
            "seed",
            "model",
            "domains",
            "partition",
            "schedule",
            "policy",
            "privacy",
            "secure_aggregation",
            "fixed_point_scale_bits",
            "tracked_indices",
            "transport",
            "output_dir",
        }
    )

    seed = root.get("seed", int)
    if not 0 <= seed <= MAX_SEED:
        raise ConfigError("seed: must lie in [0, 2^64)")

    model_node = root.child("model")
    model_node.reject_unknown({"family", "feature_dim", "class_count", "l2_coefficient"})
    try:
        model = ModelSpec(
            feature_dim=model_node.get("feature_dim", int),
            class_count=model_node.get("class_count", int),
            l2_coefficient=model_node.get("l2_coefficient", float, 0.0),
            family=model_node.get("family", str, "softmax_linear"),
        )
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None

    domains_raw = root.get("domains", list)
    if not domains_raw:
        raise ConfigError("domains: at least one domain is required")
    domains = []
    for i, entry in enumerate(domains_raw):
        domains.append(_parse_domain(_Node(entry, f"domains[{i}]"), model))
    tags = [d.tag for d in domains]
    if len(set(tags)) != len(tags):
        raise ConfigError("domains: tags must be unique")
    client_count = sum(d.clients for d in domains)

    part_node = root.child("partition", {})
    part_node.reject_unknown({"scheme", "dirichlet_alpha", "min_samples_per_client", "seed"})
    scheme = part_node.get("scheme", str, SCHEME_IID)
    if scheme not in (SCHEME_IID, SCHEME_DIRICHLET):
        raise ConfigError(f"partition.scheme: unknown scheme {scheme!r}")
    partition = PartitionConfig(
        scheme=scheme,
        dirichlet_alpha=part_node.get("dirichlet_alpha", float, 1.0),
        min_samples_per_client=part_node.get("min_samples_per_client", int, 1),
        seed=part_node.get("seed", int, 0),
    )
    if not partition.dirichlet_alpha > 0:
        raise ConfigError("partition.dirichlet_alpha: must be > 0")
    if partition.min_samples_per_client < 1:
        raise ConfigError("partition.min_samples_per_client: must be >= 1")
    if not 0 <= partition.seed <= MAX_SEED:
        raise ConfigError("partition.seed: must lie in [0, 2^64)")

    sched_node = root.child("schedule")
    sched_node.reject_unknown(
        {
            "rounds",
            "local_epochs",
            "batch_size",
            "learning_rate",
            "lr_decay",
            "participation_fraction",
        }
    )
    try:
        schedule = TrainingSchedule(
            rounds=sched_node.get("rounds", int),
            local_epochs=sched_node.get("local_epochs", int, 5),
            batch_size=sched_node.get("batch_size", int, None),
            learning_rate=sched_node.get("learning_rate", float, 0.1),
            lr_decay=sched_node.get("lr_decay", float, 0.99),
            participation_fraction=sched_node.get("participation_fraction", float, 1.0),
        )
    except ValueError as exc:
        raise ConfigError(f"schedule: {exc}") from None

    policy_node = root.child("policy", {})
    policy_node.reject_unknown({"kind", "weights", "privacy_derived", "epsilon_cap"})
    kind = policy_node.get("kind", str, POLICY_UNIFORM)
    if kind not in (POLICY_UNIFORM, POLICY_SIZE, POLICY_CUSTOM):
        raise ConfigError(f"policy.kind: unknown kind {kind!r}")
    privacy_derived = policy_node.get("privacy_derived", bool, False)
    epsilon_cap = policy_node.get("epsilon_cap", float, 8.0)
    if not epsilon_cap > 0:
        raise ConfigError("policy.epsilon_cap: must be > 0")
    weights_raw = policy_node.get("weights", dict, None)
    weights = None
    if weights_raw is not None:
        weights = {}
        for key, value in weights_raw.items():
            try:
                cid = int(key)
            except ValueError:
                raise ConfigError(f"policy.weights.{key}: keys must be client ids") from None
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"policy.weights.{key}: expected a number")
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"policy.weights.{key}: must be finite and >= 0")
            if not 0 <= cid < client_count:
                raise ConfigError(f"policy.weights.{key}: no such client (have 0..{client_count - 1})")
            weights[cid] = float(value)
    if kind == POLICY_CUSTOM and not privacy_derived:
        if weights is None:
            raise ConfigError("policy.weights: required for custom_weighted (or set privacy_derived)")
        missing = [cid for cid in range(client_count) if cid not in weights]
        if missing:
            raise ConfigError(f"policy.weights: missing weight for client {missing[0]}")
        if not sum(weights.values()) > 0:
            raise ConfigError("policy.weights: total weight must be positive")
    if privacy_derived and kind != POLICY_CUSTOM:
        raise ConfigError("policy.privacy_derived: only valid with kind custom_weighted")
    policy = AggregationPolicy(kind=kind, weights=weights)

    privacy_node = root.child("privacy", {})
    privacy_node.reject_unknown({"enabled", "epsilon", "delta", "clip_norm", "client_overrides"})
    default_budget = _parse_budget(
        _Node({k: v for k, v in privacy_node.data.items() if k != "client_overrides"}, "privacy")
    )
    overrides_raw = privacy_node.get("client_overrides", dict, {})
    budget_overrides = {}
    for key, value in overrides_raw.items():
        try:
            cid = int(key)
        except ValueError:
            raise ConfigError(
                f"privacy.client_overrides.{key}: keys must be client ids"
            ) from None
        if not 0 <= cid < client_count:
            raise ConfigError(
                f"privacy.client_overrides.{key}: no such client (have 0..{client_count - 1})"
            )
        budget_overrides[cid] = _parse_budget(
            _Node(value, f"privacy.client_overrides.{key}"), defaults=default_budget
        )

    secure = root.get("secure_aggregation", bool, False)
    scale_bits = root.get("fixed_point_scale_bits", int, 24)
    if not 1 <= scale_bits <= 52:
        raise ConfigError("fixed_point_scale_bits: must lie in [1, 52]")

    tracked_raw = root.get("tracked_indices", list, [])
    tracked = []
    for i, value in enumerate(tracked_raw):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"tracked_indices[{i}]: expected int")
        if not 0 <= value < param_dim(model):
            raise ConfigError(
                f"tracked_indices[{i}]: out of range for parameter dim {param_dim(model)}"
            )
        tracked.append(value)

    transport_node = root.child("transport", {})
    transport_node.reject_unknown({"host", "port", "timeout_seconds"})
    transport = TransportConfig(
        host=transport_node.get("host", str, "127.0.0.1"),
        port=transport_node.get("port", int, 7700),
        timeout_seconds=transport_node.get("timeout_seconds", float, 30.0),
    )
    if not 0 <= transport.port < 65536:
        raise ConfigError("transport.port: must lie in [0, 65536)")
    if not transport.timeout_seconds > 0:
        raise ConfigError("transport.timeout_seconds: must be > 0")

    output_dir = root.get("output_dir", str, "fedmesh-output")

    config = ExperimentConfig(
        seed=seed,
        model=model,
        domains=domains,
        partition=partition,
        schedule=schedule,
        policy=policy,
        privacy_derived_weights=privacy_derived,
        epsilon_cap=epsilon_cap,
        default_budget=default_budget,
        budget_overrides=budget_overrides,
        secure_aggregation=secure,
        scale_bits=scale_bits,
        tracked_indices=tuple(tracked),
        transport=transport,
        output_dir=output_dir,
        canonical={},
    )
    config.canonical = _canonical_dict(config)
    return config


def _canonical_domain(domain: DomainConfig) -> dict:
    entry: dict = {"tag": domain.tag, "clients": domain.clients}
    if domain.csv is not None:
        entry["csv"] = {
            "path": domain.csv.path,
            "feature_columns": list(domain.csv.feature_columns),
            "label_column": domain.csv.label_column,
            "eval_fraction": domain.csv.eval_fraction,
        }
    else:
        recipe = domain.recipe
        entry["train_samples"] = domain.train_samples
        entry["eval_samples"] = domain.eval_samples
        if domain.recipe_name is not None:
            entry["recipe"] = domain.recipe_name
        else:
            entry["recipe"] = {
                "class_means": recipe.class_means.tolist(),
                "class_covariance_scale": recipe.class_covariance_scale,
                "mean_shift": recipe.mean_shift.tolist(),
                "label_prior": recipe.label_prior.tolist(),
            }
    return entry


def _canonical_dict(config: ExperimentConfig) -> dict:
    return {
        "seed": config.seed,
        "model": {
            "family": config.model.family,
            "feature_dim": config.model.feature_dim,
            "class_count": config.model.class_count,
            "l2_coefficient": config.model.l2_coefficient,
        },
        "domains": [_canonical_domain(d) for d in config.domains],
        "partition": {
            "scheme": config.partition.scheme,
            "dirichlet_alpha": config.partition.dirichlet_alpha,
            "min_samples_per_client": config.partition.min_samples_per_client,
            "seed": config.partition.seed,
        },
        "schedule": {
            "rounds": config.schedule.rounds,
            "local_epochs": config.schedule.local_epochs,
            "batch_size": config.schedule.batch_size,
            "learning_rate": config.schedule.learning_rate,
            "lr_decay": config.schedule.lr_decay,
            "participation_fraction": config.schedule.participation_fraction,
        },
        "policy": {
            "kind": config.policy.kind,
            "weights": (
                {str(k): v for k, v in sorted(config.policy.weights.items())}
                if config.policy.weights is not None
                else None
            ),
            "privacy_derived": config.privacy_derived_weights,
            "epsilon_cap": config.epsilon_cap,
        },
        "privacy": {
            "enabled": config.default_budget.enabled,
            "epsilon": config.default_budget.epsilon,
            "delta": config.default_budget.delta,
            "clip_norm": config.default_budget.clip_norm,
            "client_overrides": {
                str(cid): {
                    "enabled": b.enabled,
                    "epsilon": b.epsilon,
                    "delta": b.delta,
                    "clip_norm": b.clip_norm,
                }
                for cid, b in sorted(config.budget_overrides.items())
            },
        },
        "secure_aggregation": config.secure_aggregation,
        "fixed_point_scale_bits": config.scale_bits,
        "tracked_indices": list(config.tracked_indices),
        "transport": {
            "host": config.transport.host,
            "port": config.transport.port,
            "timeout_seconds": config.transport.timeout_seconds,
        },
        "output_dir": config.output_dir,
    }


def canonical_text(config: ExperimentConfig) -> str:
    """The canonical re-emission of a config (stable, parseable JSON)."""
    return json.dumps(config.canonical, sort_keys=True, indent=2) + "\n"


def config_hash(config: ExperimentConfig) -> bytes:
    """SHA-256 over the experiment-defining keys (not output_dir/transport)."""
    semantic = {
        k: v for k, v in config.canonical.items() if k not in ("output_dir", "transport")
    }
    return hashlib.sha256(json.dumps(semantic, sort_keys=True).encode("utf-8")).digest()


def _parse_override_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``key.path=value`` overrides to a raw config dict.

    Values are parsed as JSON when possible (so ``false`` and ``0.5`` do
    what they look like), else kept as strings.  Integer path segments
    index into arrays.
    """
    import copy

    result = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected KEY=VALUE")
        key, _, text = item.partition("=")
        segments = key.split(".")
        target = result
        for pos, segment in enumerate(segments[:-1]):
            if isinstance(target, list):
                try:
                    target = target[int(segment)]
                except (ValueError, IndexError):
                    raise ConfigError(f"override {key!r}: bad array index {segment!r}") from None
            elif isinstance(target, dict):
                target = target.setdefault(segment, {})
            else:
                raise ConfigError(f"override {key!r}: {'.'.join(segments[:pos + 1])} is a scalar")
        last = segments[-1]
        value = _parse_override_value(text)
        if isinstance(target, list):
            try:
                target[int(last)] = value
            except (ValueError, IndexError):
                raise ConfigError(f"override {key!r}: bad array index {last!r}") from None
        elif isinstance(target, dict):
            target[last] = value
        else:
            raise ConfigError(f"override {key!r}: path ends inside a scalar")
    return result


def load_config(
    path: str,
    overrides: list[str] | None = None,
    seed: int | None = None,
    output_dir: str | None = None,
) -> ExperimentConfig:
    """Read, override, and validate a config file."""
    try:
        with open(path, encoding="utf-8") as handle:
            raw = json.load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path!r} is not valid JSON: {exc}") from None
    if overrides:
        raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = seed
    if output_dir is not None:
        raw["output_dir"] = output_dir
    return parse_config(raw)
