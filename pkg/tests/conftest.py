import pytest

from fedmesh.model import Dataset, ModelSpec, param_dim


@pytest.fixture
def spec():
    return ModelSpec(feature_dim=2, class_count=3)


def random_instance(rng, d=None, k=None, n=None, theta_scale=0.8):
    """A random small (spec, params, dataset) triple for oracle checks."""
    d = d or int(rng.integers(1, 5))
    k = k or int(rng.integers(2, 5))
    n = n or int(rng.integers(3, 13))
    spec = ModelSpec(feature_dim=d, class_count=k, l2_coefficient=float(rng.choice([0.0, 0.1])))
    params = rng.normal(0.0, theta_scale, param_dim(spec))
    features = rng.normal(0.0, 1.0, (n, d))
    labels = rng.integers(0, k, n)
    # Guarantee every dataset stays valid even if a class is absent.
    return spec, params, Dataset(features, labels, k)
