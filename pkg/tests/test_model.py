import numpy as np
import pytest
import torch
from conftest import TINY_NET

from dirigent.kinematics import load_robot
from dirigent.model import DirigentModel, sample_generators
from dirigent.network import NetworkConfig
from dirigent.schedule import build_cosine_schedule


def _model(layout="synthetic-3dof", head="off", seed=0):
    robot = load_robot(layout)
    torch.manual_seed(seed)
    cfg = NetworkConfig(**TINY_NET, image_size=16, joint_dim=robot.joint_dim, cartesian_head=head,
                        cartesian_chains=len(robot.chains))
    return DirigentModel(cfg, robot).eval()


def _cond(n=3, seed=0):
    return torch.rand(n, 3, 16, 16, generator=torch.Generator().manual_seed(seed))


def test_untrained_prediction_is_valid():
    model = _model("diri-26")
    cfg = model.predict_x0(_cond(1)[0], steps=1, seed=3)
    assert cfg.values.shape == (26,) and np.all(np.isfinite(cfg.values))
    assert cfg.layout_id == "diri-26" and cfg.clamped
    assert np.all(cfg.values >= model.robot.lower) and np.all(cfg.values <= model.robot.upper)


def test_seeded_prediction_is_reproducible():
    model = _model()
    a = model.predict_x0(_cond(1)[0], steps=5, seed=11).values
    b = model.predict_x0(_cond(1)[0], steps=5, seed=11).values
    c = model.predict_x0(_cond(1)[0], steps=5, seed=12).values
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_unnormalised_condition_rejected():
    with pytest.raises(ValueError, match="normalised"):
        _model().sample(_cond(1) * 255)


def test_per_row_generators():
    model = _model()
    gens = sample_generators(0, ["a", "b", "c"])
    full = model.sample(_cond(3), generator=gens)
    one = model.sample(_cond(3)[1:2], generator=sample_generators(0, ["b"]))
    torch.testing.assert_close(full[1:2], one)
    with pytest.raises(ValueError):
        model.sample(_cond(3), generator=gens[:2])


def test_iterative_sampling_differs_from_single_step():
    model = _model()
    g1, g2 = torch.Generator().manual_seed(0), torch.Generator().manual_seed(0)
    assert not torch.equal(model.sample(_cond(2), 1, g1), model.sample(_cond(2), 50, g2))


def test_output_eef_matches_fk():
    model = _model("diri-26")
    x0 = model.sample(_cond(2), generator=torch.Generator().manual_seed(0)).double()
    out = model.output(x0)
    q = model.denormalize_joints(out.joints)
    np.testing.assert_allclose(out.eef_positions.numpy(), model.robot.eef_positions(q).numpy(), atol=1e-6)


def test_consistency_targets_and_direct_positions():
    model = _model("diri-26", head="consistency")
    q = np.random.default_rng(0).uniform(model.robot.lower, model.robot.upper, (4, 26))
    x0 = model.diffusion_targets(q)
    assert x0.shape == (4, 26 + 14)
    direct = model.direct_positions(x0[:, 26:])
    np.testing.assert_allclose(direct.numpy(), model.robot.eef_positions(torch.as_tensor(q)).numpy(), atol=1e-5)
    assert x0[:, 26:].abs().max() <= 1.0


def test_layout_mismatch_rejected():
    with pytest.raises(ValueError):
        DirigentModel(NetworkConfig(**TINY_NET, joint_dim=5), load_robot("synthetic-3dof"))


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = _model("diri-26", head="consistency", seed=4)
    model.save(tmp_path / "m.pt", extra={"note": 1})
    loaded = DirigentModel.load(tmp_path / "m.pt")
    assert loaded.checkpoint_extra == {"note": 1}
    for (k, a), b in zip(model.state_dict().items(), loaded.state_dict().values()):
        assert torch.equal(a, b), k
    g1, g2 = torch.Generator().manual_seed(1), torch.Generator().manual_seed(1)
    assert torch.equal(model.sample(_cond(2), 3, g1), loaded.sample(_cond(2), 3, g2))
    assert np.array_equal(loaded.schedule.alpha_bar, build_cosine_schedule().alpha_bar)


def test_checkpoint_tampering_detected(tmp_path):
    model = _model()
    model.save(tmp_path / "m.pt")
    blob = torch.load(tmp_path / "m.pt", weights_only=False)
    blob["schedule"]["alpha_bar"][10] += 1e-3
    torch.save(blob, tmp_path / "bad.pt")
    with pytest.raises(ValueError, match="schedule"):
        DirigentModel.load(tmp_path / "bad.pt")
    blob = torch.load(tmp_path / "m.pt", weights_only=False)
    blob["normalization"]["upper"][0] += 0.5
    torch.save(blob, tmp_path / "bad2.pt")
    with pytest.raises(ValueError, match="normalisation"):
        DirigentModel.load(tmp_path / "bad2.pt")
    torch.save({"format": "other"}, tmp_path / "bad3.pt")
    with pytest.raises(ValueError):
        DirigentModel.load(tmp_path / "bad3.pt")
