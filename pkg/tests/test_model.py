import numpy as np
import pytest

from crossmodal.config import Config
from crossmodal.errors import ContractError
from crossmodal.model import (MODALITY_DIMS, FusionModel, GaussianExpert,
                              fuse_poe, reparameterize)
from crossmodal.numerics import Tensor


@pytest.fixture(scope="module")
def model():
    return FusionModel(Config(latent_dim=16), seed=2)


def expert(mean, var, modality=None):
    return GaussianExpert(Tensor(np.atleast_2d(mean)),
                          Tensor(np.atleast_2d(var)), modality=modality)


def test_poe_single_unit_expert_plus_prior():
    code = fuse_poe([expert([0.0], [1.0])])
    assert np.allclose(code.mean.data, [[0.0]])
    assert np.allclose(code.variance.data, [[0.5]])


def test_poe_two_equal_precision_experts():
    code = fuse_poe([expert([1.0], [1.0]), expert([3.0], [1.0])])
    assert abs(code.mean.data[0, 0] - 4.0 / 3.0) < 1e-12
    assert abs(code.variance.data[0, 0] - 1.0 / 3.0) < 1e-12


def test_poe_hand_computed_mixed_precisions():
    code = fuse_poe([expert([2.0], [0.5]), expert([-1.0], [2.0])])
    assert abs(code.mean.data[0, 0] - 1.0) < 1e-12
    assert abs(code.variance.data[0, 0] - 1.0 / 3.5) < 1e-12


def test_poe_empty_list_contract_error():
    with pytest.raises(ContractError):
        fuse_poe([])


def test_poe_permutation_invariant():
    rng = np.random.default_rng(0)
    experts = [expert(rng.normal(size=6), np.exp(rng.normal(size=6)))
               for _ in range(4)]
    base = fuse_poe(experts)
    for perm in ([3, 1, 0, 2], [2, 3, 1, 0]):
        code = fuse_poe([experts[i] for i in perm])
        assert np.abs(code.mean.data - base.mean.data).max() < 1e-12
        assert np.abs(code.variance.data - base.variance.data).max() < 1e-12


def test_poe_uninformative_expert_near_identity():
    """An expert at the variance clamp ceiling barely moves the fused code."""
    rng = np.random.default_rng(1)
    informative = [expert(rng.normal(size=8), np.exp(rng.uniform(-2, 1, 8)))
                   for _ in range(2)]
    base = fuse_poe(informative)
    vague = expert(rng.normal(size=8), np.full(8, np.exp(8.0)))
    code = fuse_poe(informative + [vague])
    rel_mean = (np.linalg.norm(code.mean.data - base.mean.data)
                / np.linalg.norm(base.mean.data))
    rel_var = (np.linalg.norm(code.variance.data - base.variance.data)
               / np.linalg.norm(base.variance.data))
    assert rel_mean < 1e-3
    assert rel_var < 1e-3


def test_poe_fused_variance_below_min_expert_variance():
    rng = np.random.default_rng(2)
    experts = [expert(rng.normal(size=8), np.exp(rng.uniform(-2, 2, 8)))
               for _ in range(3)]
    code = fuse_poe(experts)
    min_var = np.minimum.reduce([e.variance.data for e in experts])
    assert (code.variance.data < min_var).all()  # strict: prior adds precision


def test_poe_any_subset_well_defined(model):
    rng = np.random.default_rng(3)
    batch = {m: Tensor(rng.random((2, MODALITY_DIMS[m])))
             for m in ("rgb", "depth", "force", "proprio")}
    experts = model.encode_all(batch)
    from itertools import combinations
    names = list(experts)
    for r in range(1, 5):
        for combo in combinations(names, r):
            code = fuse_poe([experts[m] for m in combo])
            assert code.fused_modalities == frozenset(combo)
            assert np.isfinite(code.mean.data).all()
            assert (code.variance.data > 0).all()


def test_encode_deterministic(model):
    rng = np.random.default_rng(4)
    x = rng.random((3, MODALITY_DIMS["depth"]))
    e1 = model.encode("depth", x)
    e2 = model.encode("depth", x)
    assert np.array_equal(e1.mean.data, e2.mean.data)
    assert np.array_equal(e1.variance.data, e2.variance.data)


def test_encode_variance_clamped(model):
    rng = np.random.default_rng(5)
    x = rng.random((8, MODALITY_DIMS["rgb"])) * 100.0
    e = model.encode("rgb", x)
    assert (e.variance.data >= np.exp(-8.0) - 1e-12).all()
    assert (e.variance.data <= np.exp(8.0) + 1e-9).all()


def test_encode_sensitive_to_input(model):
    x = np.random.default_rng(6).random((1, MODALITY_DIMS["force"]))
    base = model.encode("force", x)
    x2 = x.copy()
    x2[0, 17] += 1e-3
    bumped = model.encode("force", x2)
    assert not np.array_equal(base.mean.data, bumped.mean.data)


def test_encode_shape_contract(model):
    with pytest.raises(ContractError):
        model.encode("rgb", np.zeros((2, 17)))
    with pytest.raises(ContractError):
        model.encode("lidar", np.zeros((2, 17)))


def test_reparameterize_zero_variance_limit():
    code = fuse_poe([expert(np.full(4, 2.0), np.full(4, 1e-300))])
    out = reparameterize(code, seed=0)
    assert np.allclose(out.sample.data, code.mean.data, atol=1e-140)


def test_reparameterize_deterministic_given_seed():
    code = fuse_poe([expert(np.zeros(4), np.ones(4))])
    s1 = reparameterize(code, seed=9).sample.data
    s2 = reparameterize(code, seed=9).sample.data
    s3 = reparameterize(code, seed=10).sample.data
    assert np.array_equal(s1, s2)
    assert not np.array_equal(s1, s3)


def test_reparameterize_moments_match():
    """10^5 draws of a fixed code match its mean/variance to 3 standard errors."""
    from crossmodal.model import LatentCode
    n = 100_000
    mean = np.array([0.5, -1.0, 2.0])
    var = np.array([0.25, 1.0, 4.0])
    code = LatentCode(mean=Tensor(np.tile(mean, (n, 1))),
                      variance=Tensor(np.tile(var, (n, 1))))
    draws = reparameterize(code, seed=123).sample.data
    se_mean = np.sqrt(var / n)
    assert (np.abs(draws.mean(axis=0) - mean) < 3 * se_mean).all()
    se_var = var * np.sqrt(2.0 / (n - 1))
    assert (np.abs(draws.var(axis=0) - var) < 3 * se_var).all()


def test_decode_shapes(model):
    z = Tensor(np.zeros((5, 16)))
    rgb_full, rgb_masked = model.decode("rgb", z)
    assert rgb_full.shape == (5, 3072) and rgb_masked.shape == (5, 3072)
    depth_full, depth_masked = model.decode("depth", z)
    assert depth_full.shape == (5, 1024) and depth_masked.shape == (5, 1024)
    force = model.decode("force", z)
    assert force.shape == (5, 96)  # 32 steps x 3 reconstructed force dims
    proprio = model.decode("proprio", z)
    assert proprio.shape == (5, 6)


def test_decode_unknown_modality(model):
    with pytest.raises(ContractError):
        model.decode("audio", Tensor(np.zeros((1, 16))))


def test_decode_deterministic(model):
    z = Tensor(np.random.default_rng(8).normal(size=(2, 16)))
    a = model.decode("force", z).data
    b = model.decode("force", z).data
    assert np.array_equal(a, b)


def test_heads_shapes_and_ranges(model):
    rng = np.random.default_rng(9)
    z = Tensor(rng.normal(size=(4, 16)))
    action = Tensor(rng.uniform(-0.02, 0.02, (4, 3)))
    out = model.predict_heads(z, action)
    assert out["flow"].shape == (4, 2048)
    assert out["flow_mask_logits"].shape == (4, 1024)
    assert out["ee_pos"].shape == (4, 3)
    assert out["contact_logit"].shape == (4, 1)
    assert out["pairing_logit"].shape == (4, 1)
    probs = 1.0 / (1.0 + np.exp(-out["contact_logit"].data))
    assert ((probs > 0.0) & (probs < 1.0)).all()


def test_heads_flow_is_action_conditional(model):
    rng = np.random.default_rng(10)
    z = Tensor(rng.normal(size=(1, 16)))
    a1 = Tensor(np.array([[0.02, 0.0, 0.0]]))
    a2 = Tensor(np.array([[-0.02, 0.0, 0.0]]))
    f1 = model.predict_heads(z, a1)["flow"].data
    f2 = model.predict_heads(z, a2)["flow"].data
    assert not np.array_equal(f1, f2)


def test_checkpoint_roundtrip(tmp_path, model):
    path = tmp_path / "model.ckpt"
    model.save(path)
    loaded = FusionModel.load(path)
    assert np.array_equal(loaded.blob(), model.blob())
    assert loaded.latent_dim == model.latent_dim
    z = Tensor(np.random.default_rng(11).normal(size=(2, 16)))
    assert np.array_equal(model.decode("rgb", z)[0].data,
                          loaded.decode("rgb", z)[0].data)


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(ContractError):
        FusionModel.load(tmp_path / "missing.ckpt")
