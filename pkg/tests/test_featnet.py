import numpy as np
import pytest
import torch

from hypervoltran.featnet import (
    ConditionEncoder,
    Embedding,
    FeatureMap,
    FeatureNet,
    encode_condition,
    extract_feature_batch,
    extract_features,
    stack_feature_maps,
    to_image_batch,
)


@pytest.mark.parametrize("stride,size", [(1, 16), (2, 8), (4, 4)])
def test_feature_net_resolution(stride, size):
    torch.manual_seed(0)
    net = FeatureNet(out_channels=6, stride=stride)
    out = net(torch.rand(2, 3, 16, 16))
    assert out.shape == (2, 6, size, size)


def test_feature_net_rejects_bad_stride():
    with pytest.raises(ValueError):
        FeatureNet(stride=3)


def test_to_image_batch_is_channel_first():
    images = np.random.default_rng(0).uniform(size=(3, 5, 7, 3)).astype(np.float32)
    batch = to_image_batch(images)
    assert batch.shape == (3, 3, 5, 7)
    assert torch.equal(batch[1, 2], torch.as_tensor(images[1, :, :, 2]))
    assert to_image_batch(images[0]).shape == (1, 3, 5, 7)
    assert to_image_batch(images, torch.float64).dtype == torch.float64


def test_to_image_batch_rejects_non_rgb():
    with pytest.raises(ValueError):
        to_image_batch(np.zeros((4, 4, 4)))


def test_extract_features_single_view():
    torch.manual_seed(0)
    net = FeatureNet(out_channels=5, stride=4)
    fmap = extract_features(np.random.default_rng(0).uniform(size=(16, 16, 3)), net, source_view=3)
    assert isinstance(fmap, FeatureMap)
    assert fmap.channels == 5
    assert fmap.data.shape == (5, 4, 4)
    assert fmap.stride == 4
    assert fmap.source_view == 3


def test_extract_feature_batch_matches_single_views():
    torch.manual_seed(0)
    net = FeatureNet(out_channels=4, stride=2)
    images = np.random.default_rng(1).uniform(size=(3, 8, 8, 3))
    batch = extract_feature_batch(images, net)
    assert [f.source_view for f in batch] == [0, 1, 2]
    single = extract_features(images[2], net, 2)
    torch.testing.assert_close(batch[2].data, single.data)
    assert stack_feature_maps(batch).shape == (3, 4, 4, 4)


def test_feature_map_validation():
    with pytest.raises(ValueError):
        FeatureMap(torch.zeros(2, 4, 4), stride=3)
    with pytest.raises(ValueError):
        FeatureMap(torch.zeros(4, 4), stride=4)
    with pytest.raises(ValueError):
        stack_feature_maps([FeatureMap(torch.zeros(2, 4, 4), 4), FeatureMap(torch.zeros(2, 8, 8), 2)])
    with pytest.raises(ValueError):
        stack_feature_maps([])


def test_condition_encoder_embedding():
    torch.manual_seed(0)
    encoder = ConditionEncoder(embedding_dim=12)
    emb = encode_condition(np.random.default_rng(0).uniform(size=(16, 16, 3)), encoder)
    assert isinstance(emb, Embedding)
    assert emb.dim == 12
    with pytest.raises(ValueError):
        encode_condition(np.zeros((2, 16, 16, 3)), encoder)


def test_embedding_must_be_a_vector():
    with pytest.raises(ValueError):
        Embedding(torch.zeros(2, 3))


def test_feature_net_gradient(float64, gradient_check):
    torch.manual_seed(0)
    net = FeatureNet(out_channels=3, stride=2)
    weights = torch.randn(1, 3, 4, 4)

    def loss(x):
        return (net(x) * weights).sum()

    gradient_check(loss, torch.rand(1, 3, 8, 8))


def test_condition_encoder_gradient(float64, gradient_check):
    torch.manual_seed(1)
    encoder = ConditionEncoder(embedding_dim=4, width=8)
    weights = torch.randn(1, 4)

    def loss(x):
        return (encoder(x) * weights).sum()

    gradient_check(loss, torch.rand(1, 3, 8, 8))
