import numpy as np
import pytest
from numpy.testing import assert_array_equal

from taskfed.client import ClientState, build_clients, evaluate, instruction_tuning
from taskfed.exceptions import EmptyDataset, InvalidConfig, NonFiniteLoss
from taskfed.model import ModelSpec, build_model, trainable_vector
from taskfed.tasks import ClientDataset, generate_universe

SPEC = ModelSpec(layer_dims=(4, 2), rank=2)


def datasets(n_train=10):
    _, data = generate_universe(3, 1, 4, 0.1, 1.0, 0.1, n_train, 6, seed=0, output_dim=2)
    return data


def clients(**kwargs):
    params = dict(base_seed=0, adapter_seed=1, client_seed=2, local_lr=0.05, batch_size=4)
    params.update(kwargs)
    return build_clients(SPEC, datasets(), **params)


def test_clients_share_base_and_initial_adapter():
    a, b, _ = clients()
    assert_array_equal(a.model.layers[0].base, b.model.layers[0].base)
    assert_array_equal(trainable_vector(a.model), trainable_vector(b.model))
    assert a.model is not b.model


def test_batches_cycle_through_epochs():
    client = clients()[0]
    seen = [client.next_batch() for _ in range(3)]
    # 10 samples in batches of 4: the last batch of the epoch is short
    assert [b.size for b in seen] == [4, 4, 2]
    assert sorted(np.concatenate(seen).tolist()) == list(range(10))
    assert client.next_batch().size == 4


def test_batch_stream_continues_across_calls():
    one, two = clients()[0], clients()[0]
    instruction_tuning(one, 2)
    instruction_tuning(one, 2)
    instruction_tuning(two, 4)
    assert_array_equal(trainable_vector(one.model), trainable_vector(two.model))


def test_local_training_reduces_train_loss():
    client = clients()[0]
    before, _ = evaluate(client)
    instruction_tuning(client, 30)
    after, _ = evaluate(client)
    assert after < before


def test_zero_learning_rate_keeps_delta():
    client = clients(local_lr=0.0)[0]
    start = trainable_vector(client.model)
    assert_array_equal(instruction_tuning(client, 3), start)


def test_evaluate_does_not_modify_model():
    client = clients()[1]
    before = trainable_vector(client.model)
    evaluate(client)
    assert_array_equal(trainable_vector(client.model), before)


def test_invalid_local_steps():
    with pytest.raises(InvalidConfig):
        instruction_tuning(clients()[0], 0)


@pytest.mark.parametrize("kwargs", [{"batch_size": 0}, {"local_lr": -1.0}])
def test_invalid_client_settings(kwargs):
    with pytest.raises(InvalidConfig):
        clients(**kwargs)


def test_empty_dataset():
    empty = ClientDataset(np.zeros((0, 4)), np.zeros((0, 2)), np.zeros((3, 4)), np.zeros((3, 2)))
    client = ClientState(
        id=7,
        model=build_model(SPEC, 0, 1),
        data=empty,
        rng_stream=np.random.default_rng(0),
        local_lr=0.1,
        batch_size=2,
    )
    with pytest.raises(EmptyDataset) as err:
        instruction_tuning(client, 1)
    assert err.value.client_id == 7


def test_divergence_is_reported_with_client_id():
    client = clients(local_lr=1e4)[2]
    with pytest.raises(NonFiniteLoss) as err:
        instruction_tuning(client, 50)
    assert err.value.client_id == 2
