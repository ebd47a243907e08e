import numpy as np
import pytest

from mscnn import model as mdl


def he_reinit(model, rng, bias_scale=0.05):
    """Fan-in scaled weights and small positive biases so signals survive the ReLU stack."""
    for _, conv in model.conv_layers():
        fan_in = conv.weights[0].size
        conv.weights[...] = rng.standard_normal(conv.weights.shape) * np.sqrt(2.0 / fan_in)
        conv.bias[...] = rng.uniform(0, bias_scale, size=conv.bias.shape)
    return model


@pytest.fixture
def reduced_model():
    model = mdl.build_mscnn(mdl.default_spec(divisor=8), seed=3, dtype=np.float64)
    return he_reinit(model, np.random.default_rng(3))


@pytest.fixture
def tiny_spec():
    return mdl.ModelSpec((
        mdl.ConvSpec(1, 4, 3),
        mdl.MSBSpec((5, 3), 2, 4),
        mdl.PoolSpec(),
        mdl.ConvSpec(4, 1, 1),
    ))
