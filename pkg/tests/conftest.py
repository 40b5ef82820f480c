import hypothesis
import pytest

hypothesis.settings.register_profile(
    "pkg", deadline=None, max_examples=50, derandomize=True
)
hypothesis.settings.load_profile("pkg")


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small generated dataset shared by data/metrics/cli tests."""
    from mlcak import SyntheticConfig, generate_synthetic

    out = tmp_path_factory.mktemp("dataset")
    config = SyntheticConfig(num_samples=36, num_findings=4, image_size=32, seed=7)
    train, test = generate_synthetic(config, out)
    return train, test, out, config
