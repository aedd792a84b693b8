import math

import numpy as np
import pytest
import torch

from etta import (
    IdentityBackbone,
    MLPBackbone,
    PrototypeSet,
    class_centroids,
    cosine_scores,
    embed,
    init_params,
    load_params,
    predict_probs,
    save_params,
)
from etta.losses import prototype_alignment_loss, sample_alignment_loss, task_loss
from etta.model import general_prototypes

from conftest import central_difference


def test_identity_embed():
    p = init_params(IdentityBackbone(3), 2, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(5, 3))
    np.testing.assert_array_equal(embed(p, x).numpy(), x)


def test_embed_shape_mismatch(small_params):
    with pytest.raises(ValueError):
        embed(small_params, np.zeros((4, 3)))


def test_batch_independence(small_params):
    x = np.random.default_rng(2).normal(size=(6, 2))
    z = embed(small_params, x).detach().numpy()
    x2 = x.copy()
    x2[3] += 5.0
    z2 = embed(small_params, x2).detach().numpy()
    np.testing.assert_array_equal(np.delete(z, 3, axis=0), np.delete(z2, 3, axis=0))


def test_mlp_matches_hand_rolled_forward():
    arch = MLPBackbone(2, 5, 3)
    p = init_params(arch, 2, np.random.default_rng(0))
    w = {k: v.numpy() for k, v in p.phi.items()}
    x = (1.0, -1.0)
    hidden = [math.tanh(sum(x[i] * w["w1"][i][j] for i in range(2)) + w["b1"][j]) for j in range(5)]
    out = [sum(hidden[j] * w["w2"][j][k] for j in range(5)) + w["b2"][k] for k in range(3)]
    got = embed(p, np.array([x])).numpy()[0]
    np.testing.assert_allclose(got, out, atol=1e-10, rtol=0)


def test_embed_is_pure(small_params):
    x = np.random.default_rng(3).normal(size=(4, 2))
    assert torch.equal(embed(small_params, x), embed(small_params, x))


def test_flatten_round_trip(small_params):
    flat = small_params.flatten()
    assert flat.numel() == small_params.size == 90
    assert small_params.unflatten(flat).equals(small_params)
    doubled = small_params.combine(small_params, 1.5, 0.5)
    torch.testing.assert_close(doubled.flatten(), 2 * flat)


def test_checkpoint_round_trip(tmp_path, small_params):
    save_params(tmp_path / "p.npz", small_params, "abc123")
    loaded, digest = load_params(tmp_path / "p.npz")
    assert digest == "abc123"
    assert loaded.equals(small_params)


def test_centroid_single_sample_per_class():
    z = torch.tensor([[1.0, 2.0], [3.0, -1.0]])
    protos = class_centroids(z, [1, 0], domain_id=4)
    torch.testing.assert_close(protos.vectors, torch.tensor([[3.0, -1.0], [1.0, 2.0]]))
    assert protos.tag == 4


def test_centroid_mean_of_two():
    z = torch.tensor([[0.0, 2.0], [2.0, 0.0], [5.0, 5.0]])
    protos = class_centroids(z, [0, 0, 1], 0)
    torch.testing.assert_close(protos.vectors[0], torch.tensor([1.0, 1.0]))


def test_centroid_missing_class():
    with pytest.raises(ValueError, match="undefined prototype"):
        class_centroids(torch.ones(3, 2), [0, 0, 0], 0, num_classes=2)


def test_centroids_match_loop_oracle():
    rng = np.random.default_rng(4)
    for _ in range(50):
        C = int(rng.integers(2, 5))
        n = int(rng.integers(C, 30))
        labels = np.concatenate([np.arange(C), rng.integers(0, C, n - C)])
        z = rng.normal(size=(n, 3))
        expected = np.zeros((C, 3))
        for c in range(C):
            rows = [z[j] for j in range(n) if labels[j] == c]
            expected[c] = sum(rows) / len(rows)
        got = class_centroids(torch.from_numpy(z), labels, 0, C).vectors.numpy()
        np.testing.assert_allclose(got, expected, atol=1e-12, rtol=0)


def test_cosine_one_hot():
    mu = PrototypeSet(torch.eye(3))
    s = cosine_scores(torch.tensor([[0.0, 2.0, 0.0]]), mu)
    torch.testing.assert_close(s, torch.tensor([[0.0, 1.0, 0.0]]))


def test_cosine_three_four_five():
    s = cosine_scores(torch.tensor([[3.0, 4.0]]), PrototypeSet(torch.eye(2)))
    torch.testing.assert_close(s, torch.tensor([[0.6, 0.8]]), atol=1e-15, rtol=0)


def test_cosine_scale_invariance():
    rng = np.random.default_rng(5)
    f = torch.from_numpy(rng.normal(size=(6, 4)))
    mu = PrototypeSet(torch.from_numpy(rng.normal(size=(3, 4))))
    assert torch.equal(cosine_scores(2 * f, mu), cosine_scores(f, mu))
    s = cosine_scores(f, mu)
    assert float(s.abs().max()) <= 1.0


def test_cosine_zero_rejected():
    with pytest.raises(ValueError):
        cosine_scores(torch.zeros(1, 2), PrototypeSet(torch.eye(2)))
    with pytest.raises(ValueError):
        cosine_scores(torch.ones(1, 2), PrototypeSet(torch.zeros(2, 2)))


def test_cosine_matches_loop_oracle():
    rng = np.random.default_rng(6)
    for _ in range(50):
        f = rng.normal(size=(5, 4))
        mu = rng.normal(size=(3, 4))
        expected = [[float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))) for b in mu] for a in f]
        got = cosine_scores(torch.from_numpy(f), PrototypeSet(torch.from_numpy(mu))).numpy()
        np.testing.assert_allclose(got, expected, atol=1e-10, rtol=0)


def test_probs_uniform():
    p = predict_probs(torch.full((2, 4), 0.3), 0.1)
    torch.testing.assert_close(p, torch.full((2, 4), 0.25))


def test_probs_softmax_value():
    p = predict_probs(torch.tensor([[1.0, 0.0]]), 1.0)
    # the 1e-7 floor moves entries by less than 1e-6
    np.testing.assert_allclose(p.numpy()[0], [0.7310585786300049, 0.2689414213699951], atol=1e-6)


def test_probs_properties():
    rng = np.random.default_rng(7)
    s = torch.from_numpy(rng.uniform(-1, 1, size=(20, 5)))
    for t in (0.05, 0.1, 1.0, 10.0):
        p = predict_probs(s, t)
        np.testing.assert_allclose(p.sum(dim=1).numpy(), 1.0, atol=1e-9)
        assert float(p.min()) >= 1e-7
        assert torch.equal(p.argmax(dim=1), s.argmax(dim=1))


def test_probs_bad_temperature():
    with pytest.raises(ValueError):
        predict_probs(torch.zeros(1, 2), 0.0)


def _scalar_objectives(x, y, te):
    """Each loss as a function of the params, for gradient checks."""
    return {
        "task": lambda p: task_loss(predict_probs(cosine_scores(embed(p, x), general_prototypes(p)), 0.5), y),
        "sa": lambda p: sample_alignment_loss(embed(p, x), y, general_prototypes(p)),
        "pa": lambda p: prototype_alignment_loss(
            embed(p, te), [class_centroids(embed(p, x), y, 0, 2), general_prototypes(p)], 0.5
        ),
    }


@pytest.mark.parametrize("name", ["task", "sa", "pa"])
def test_loss_gradients_match_finite_differences(small_params, name):
    rng = np.random.default_rng(8)
    x = rng.normal(size=(10, 2))
    y = np.array([0, 1] * 5)
    te = rng.normal(size=(6, 2))
    f = _scalar_objectives(x, y, te)[name]
    leaves = small_params.as_leaves()
    grad = torch.cat([g.reshape(-1) for g in torch.autograd.grad(f(leaves), leaves.tensors())]).numpy()
    with torch.no_grad():
        fd = central_difference(lambda v: float(f(small_params.unflatten(v))), small_params.flatten().numpy())
    rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
    assert rel < 1e-4, rel
