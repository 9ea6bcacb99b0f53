import numpy as np
import pytest
import torch

from occmocap.body_model import BodyModel
from occmocap.errors import ShapeMismatchError
from occmocap.lifting_net import (
    LiftingConfig,
    LiftingNet,
    LiftingOutput,
    LossWeights,
    loss_motion,
    smoothness,
)
from occmocap.motion_repr import axis_angle_to_matrix, matrix_to_rot6d, rot6d_to_matrix
from occmocap.prior_net import PriorConfig, PriorNet

F, K, N = 16, 14, 24


@pytest.fixture(scope="module")
def body32():
    return BodyModel()


@pytest.fixture(scope="module")
def body64():
    return BodyModel(dtype=torch.float64)


def build_net(seed=0, **prior_kwargs):
    torch.manual_seed(seed)
    prior = PriorNet(PriorConfig(**prior_kwargs))
    return LiftingNet(prior)


def gt_batch(seed=0, batch=2, frames=F, dtype=torch.float32):
    rng = np.random.default_rng(seed)
    aa = torch.as_tensor(rng.standard_normal((batch, frames, N, 3)) * 0.3)
    gt3d = matrix_to_rot6d(axis_angle_to_matrix(aa)).to(dtype)
    beta = torch.as_tensor(rng.standard_normal((batch, 10)) * 0.5).to(dtype)
    return gt3d, beta


class TestForward:
    def test_output_shapes(self):
        net = build_net()
        clean = torch.zeros(1, F, K, 2)
        out = net(clean)
        assert isinstance(out, LiftingOutput)
        assert out.map3d.shape == (1, F, N, 6)
        assert out.beta.shape == (1, 10)

    def test_masked_input_accepted(self):
        net = build_net()
        rng = np.random.default_rng(1)
        clean = torch.as_tensor(rng.uniform(-0.4, 0.4, (2, F, K, 2)), dtype=torch.float32)
        mask = torch.as_tensor(rng.random((2, F, K)) < 0.3)
        out = net(clean, mask)
        assert torch.isfinite(out.map3d).all() and torch.isfinite(out.beta).all()

    def test_prior_is_submodule(self):
        net = build_net()
        names = {name for name, _ in net.named_parameters()}
        assert any(name.startswith("prior.") for name in names)

    def test_prior_features_affect_output(self):
        """Zeroing the prior's temporal contribution changes the lifting
        output: the fusion path is live."""
        net = build_net().eval()
        rng = np.random.default_rng(2)
        clean = torch.as_tensor(rng.uniform(-0.4, 0.4, (1, F, K, 2)), dtype=torch.float32)
        with torch.no_grad():
            base = net(clean).map3d.clone()
            # perturb one temporal-transformer weight of the prior
            block = net.prior.temporal_blocks[0]
            block.attn.proj.weight += 0.5
            changed = net(clean).map3d
        assert not torch.allclose(base, changed)


class TestSmoothness:
    def test_constant_map_is_zero(self):
        m = torch.randn(1, 1, N, 6).repeat(1, F, 1, 1)
        assert smoothness(m).item() == 0.0

    def test_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            m = torch.as_tensor(rng.standard_normal((1, F, N, 6)))
            assert smoothness(m).item() >= 0.0

    def test_single_frame_zero(self):
        assert smoothness(torch.randn(2, 1, N, 6)).item() == 0.0

    def test_hand_value(self):
        m = torch.zeros(1, 2, N, 6)
        m[0, 1] = 2.0
        assert smoothness(m).item() == pytest.approx(4.0, abs=1e-7)


class TestLossMotion:
    def test_perfect_prediction(self, body32):
        gt3d, beta = gt_batch(seed=4)
        out = LiftingOutput(map3d=gt3d.clone(), beta=beta.clone())
        total, terms = loss_motion(out, gt3d, beta, body32)
        assert terms["rec"] == pytest.approx(0.0, abs=1e-10)
        assert terms["shape"] == pytest.approx(float((beta ** 2).mean()), rel=1e-5)
        assert terms["smo"] == pytest.approx(float(smoothness(gt3d)), rel=1e-5)

    def test_matches_independent_oracle(self, body64):
        """Re-derive every term with plain numpy reductions."""
        gt3d, gt_beta = gt_batch(seed=5, batch=1, frames=4, dtype=torch.float64)
        rng = np.random.default_rng(6)
        pred3d = gt3d + torch.as_tensor(rng.standard_normal(gt3d.shape) * 0.05)
        pred_beta = gt_beta + torch.as_tensor(rng.standard_normal(gt_beta.shape) * 0.1)
        out = LiftingOutput(map3d=pred3d, beta=pred_beta)
        total, terms = loss_motion(out, gt3d, gt_beta, body64)

        pv, pj = body64(rot6d_to_matrix(pred3d), pred_beta.unsqueeze(1), validate=False)
        gv, gj = body64(rot6d_to_matrix(gt3d), gt_beta.unsqueeze(1), validate=False)
        to_np = lambda t: t.detach().numpy()
        rec = (np.mean((to_np(pred3d) - to_np(gt3d)) ** 2)
               + np.mean((to_np(pv) - to_np(gv)) ** 2)
               + np.mean((to_np(pj) - to_np(gj)) ** 2))
        shape = (np.mean((to_np(pred_beta) - to_np(gt_beta)) ** 2)
                 + np.mean(to_np(pred_beta) ** 2))
        d = to_np(pred3d)[:, 1:] - to_np(pred3d)[:, :-1]
        smo = np.mean(d ** 2)
        assert terms["rec"] == pytest.approx(rec, abs=1e-9)
        assert terms["shape"] == pytest.approx(shape, abs=1e-9)
        assert terms["smo"] == pytest.approx(smo, abs=1e-9)
        assert float(total) == pytest.approx(rec + shape + smo, abs=1e-6)

    def test_weights_respected(self, body32):
        gt3d, beta = gt_batch(seed=7)
        rng = np.random.default_rng(8)
        out = LiftingOutput(
            map3d=gt3d + torch.as_tensor(rng.standard_normal(gt3d.shape) * 0.1,
                                         dtype=torch.float32),
            beta=beta + 0.2,
        )
        _, t1 = loss_motion(out, gt3d, beta, body32, LossWeights(rec=1, shape=1, smo=1))
        total0, t0 = loss_motion(out, gt3d, beta, body32, LossWeights(rec=1, shape=1, smo=0))
        assert t0["smo"] == pytest.approx(t1["smo"], rel=1e-6)  # breakdown unweighted
        assert float(total0) == pytest.approx(t1["rec"] + t1["shape"], rel=1e-5)

    def test_gradients_match_finite_differences(self, body64):
        """Total-loss gradient w.r.t. map3d and beta vs central differences."""
        gt3d, gt_beta = gt_batch(seed=9, batch=1, frames=3, dtype=torch.float64)
        rng = np.random.default_rng(10)
        pred3d = (gt3d + torch.as_tensor(rng.standard_normal(gt3d.shape) * 0.1)
                  ).requires_grad_(True)
        pred_beta = (gt_beta + 0.1).detach().requires_grad_(True)

        def total_of(m, b):
            out = LiftingOutput(map3d=m, beta=b)
            return loss_motion(out, gt3d, gt_beta, body64)[0]

        total_of(pred3d, pred_beta).backward()
        h = 1e-4
        flat_idx = rng.choice(pred3d.numel(), size=12, replace=False)
        with torch.no_grad():
            for idx in flat_idx:
                e = torch.zeros_like(pred3d).reshape(-1)
                e[idx] = h
                e = e.reshape(pred3d.shape)
                fd = (total_of(pred3d + e, pred_beta) - total_of(pred3d - e, pred_beta)) / (2 * h)
                an = pred3d.grad.reshape(-1)[idx]
                assert abs(an - fd) / max(abs(fd), 1e-6) < 1e-3
            for idx in range(0, 10, 3):
                e = torch.zeros_like(pred_beta)
                e[0, idx] = h
                fd = (total_of(pred3d, pred_beta + e) - total_of(pred3d, pred_beta - e)) / (2 * h)
                an = pred_beta.grad[0, idx]
                assert abs(an - fd) / max(abs(fd), 1e-6) < 1e-3

    def test_shape_mismatch(self, body32):
        gt3d, beta = gt_batch(seed=11)
        out = LiftingOutput(map3d=gt3d[:, :, :23], beta=beta)
        with pytest.raises(ShapeMismatchError):
            loss_motion(out, gt3d, beta, body32)


class TestTrainingStep:
    def test_single_step_decreases_loss(self, body32):
        """One small AdamW step on a fixed batch lowers the loss in at least
        19 of 20 seeded trials."""
        torch.set_num_threads(1)
        wins = 0
        for seed in range(20):
            torch.manual_seed(seed)
            prior = PriorNet(PriorConfig(num_frames=4, branch_channels=4,
                                         spatial_depth=1, temporal_depth=1,
                                         temporal_heads=2))
            net = LiftingNet(prior, LiftingConfig(map_hidden=64, shape_hidden=32))
            rng = np.random.default_rng(seed)
            clean = torch.as_tensor(rng.uniform(-0.4, 0.4, (2, 4, K, 2)),
                                    dtype=torch.float32)
            mask = torch.as_tensor(rng.random((2, 4, K)) < 0.3)
            gt3d, beta = gt_batch(seed=seed, batch=2, frames=4)
            opt = torch.optim.AdamW(net.parameters(), lr=1e-4)
            out = net(clean, mask)
            loss, _ = loss_motion(out, gt3d, beta, body32)
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                out2 = net(clean, mask)
            loss2, _ = loss_motion(out2, gt3d, beta, body32)
            if float(loss2.detach()) < float(loss.detach()):
                wins += 1
        assert wins >= 19

    def test_freeze_prior(self):
        net = build_net(seed=1)
        for p in net.prior.parameters():
            p.requires_grad_(False)
        before = {name: p.clone() for name, p in net.prior.named_parameters()}
        rng = np.random.default_rng(12)
        clean = torch.as_tensor(rng.uniform(-0.4, 0.4, (1, F, K, 2)), dtype=torch.float32)
        gt3d, beta = gt_batch(seed=12, batch=1)
        opt = torch.optim.AdamW([p for p in net.parameters() if p.requires_grad], lr=1e-2)
        out = net(clean)
        loss, _ = loss_motion(out, gt3d, beta, BodyModel())
        loss.backward()
        opt.step()
        for name, p in net.prior.named_parameters():
            assert torch.equal(before[name], p)
        assert any(
            p.grad is not None and p.grad.abs().sum() > 0
            for name, p in net.named_parameters() if not name.startswith("prior.")
        )
