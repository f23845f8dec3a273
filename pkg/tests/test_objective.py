import math

import numpy as np
import pytest
import torch

from vdlf.errors import ConfigError, NumericFailure
from vdlf.objective import (
    OptimSettings,
    accumulate_and_step,
    cosine_lr,
    episodic_ce,
    grad_check,
    kl_divergence,
    make_optimizer,
    optimizer_step,
    recon_loss,
    rel_error,
    total_loss,
)
from vdlf.varfusion import LatentPosterior


class TestKL:
    def test_prior(self):
        assert kl_divergence(LatentPosterior(torch.zeros(1, 4), torch.zeros(1, 4))).item() == 0.0

    def test_mean_shift(self):
        kl = kl_divergence(LatentPosterior(torch.tensor([[1.0, 0.0]]), torch.zeros(1, 2)))
        assert kl.item() == pytest.approx(0.5)

    def test_matches_monte_carlo(self):
        r = np.random.default_rng(11)
        mu, lv = r.normal(0, 0.8, 4), r.normal(0, 0.5, 4)
        sigma = np.exp(0.5 * lv)
        z = mu + sigma * r.standard_normal((1_000_000, 4))
        log_q = (-0.5 * ((z - mu) / sigma) ** 2 - np.log(sigma)).sum(1)
        log_p = (-0.5 * z ** 2).sum(1)
        mc = float(np.mean(log_q - log_p))
        closed = kl_divergence(LatentPosterior(torch.tensor(mu), torch.tensor(lv))).item()
        assert abs(mc - closed) / closed < 0.01

    def test_nonnegative_and_zero_only_at_prior(self):
        r = np.random.default_rng(0)
        post = LatentPosterior(torch.tensor(r.normal(0, 2, (2000, 6))), torch.tensor(r.normal(0, 2, (2000, 6))))
        assert (kl_divergence(post) >= 0).all()
        near = LatentPosterior(torch.full((1, 3), 1e-6, dtype=torch.float64), torch.zeros(1, 3, dtype=torch.float64))
        assert kl_divergence(near).item() < 1e-9


class TestRecon:
    def test_identity(self):
        x = torch.randn(3, 5)
        assert torch.equal(recon_loss(x, x), torch.zeros(3))

    def test_forced_arithmetic(self):
        assert recon_loss(torch.tensor([3.0, 4.0]), torch.zeros(2)).item() == 25.0

    def test_symmetric(self):
        a, b = torch.randn(4, 6), torch.randn(4, 6)
        assert torch.equal(recon_loss(a, b), recon_loss(b, a))


class TestEpisodicCE:
    def test_perfect(self):
        assert episodic_ce(torch.eye(3), torch.arange(3)).item() == 0.0

    def test_uniform_five_way(self):
        ce = episodic_ce(torch.full((4, 5), 0.2, dtype=torch.float64), torch.tensor([0, 1, 2, 3]))
        assert ce.item() == pytest.approx(math.log(5), abs=1e-12)
        assert ce.item() == pytest.approx(1.60944, abs=1e-5)

    def test_hand_batch(self):
        probs = [[0.7, 0.2, 0.1], [0.25, 0.5, 0.25], [0.1, 0.1, 0.8]]
        labels = [0, 2, 1]
        expected = -(math.log(0.7) + math.log(0.25) + math.log(0.1)) / 3
        got = episodic_ce(torch.tensor(probs, dtype=torch.float64), torch.tensor(labels)).item()
        assert got == pytest.approx(expected, rel=1e-12)


class TestTotalLoss:
    def test_forced_arithmetic(self):
        assert total_loss(1.0, 2.0, 3.0, 0.01).total == pytest.approx(1.05, abs=1e-12)

    def test_alpha_zero_is_task(self):
        assert total_loss(0.7, 5.0, 9.0, 0.0).total == 0.7

    def test_alpha_one_task_zero(self):
        assert total_loss(0.0, 2.0, 3.0, 1.0).total == 5.0

    def test_dropped_terms_recorded(self):
        b = total_loss(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(3.0), 0.5, use_recon=False, use_kl=False)
        assert b.total.item() == 1.0 and b.raw_recon == 2.0 and b.raw_kl == 3.0
        assert b.as_dict()["recon"] == 0.0 and b.as_dict()["kl"] == 0.0

    def test_negative_alpha(self):
        with pytest.raises(ConfigError):
            total_loss(1.0, 1.0, 1.0, -0.1)

    def test_fuzzed_linear_composition(self):
        r = np.random.default_rng(0)
        for t, rc, k, a in r.uniform(0, 10, (10_000, 4)):
            assert abs(total_loss(t, rc, k, a).total - (t + a * (rc + k))) <= 1e-9


class TestAdamW:
    def _param(self, value):
        return torch.nn.Parameter(torch.tensor(value, dtype=torch.float64))

    def test_zero_grad_no_decay_unchanged(self):
        p = self._param([1.0, -2.0])
        opt = make_optimizer([p], OptimSettings(lr=0.1, weight_decay=0.0))
        p.grad = torch.zeros_like(p)
        optimizer_step(opt)
        assert p.tolist() == [1.0, -2.0]

    def test_zero_grad_pure_shrink(self):
        p = self._param([1.0, -2.0])
        opt = make_optimizer([p], OptimSettings(lr=0.1, weight_decay=0.5))
        p.grad = torch.zeros_like(p)
        optimizer_step(opt)
        assert p.tolist() == pytest.approx([0.95, -1.9], abs=1e-15)

    def test_matches_hand_formula(self):
        s = OptimSettings(lr=0.01, weight_decay=0.1)
        p = self._param([0.5])
        opt = make_optimizer([p], s)
        m = v = 0.0
        ref = 0.5
        for t in range(1, 6):
            g = 2 * ref + 0.3
            p.grad = torch.tensor([2 * p.item() + 0.3], dtype=torch.float64)
            optimizer_step(opt)
            ref *= 1 - s.lr * s.weight_decay
            m = s.beta1 * m + (1 - s.beta1) * g
            v = s.beta2 * v + (1 - s.beta2) * g * g
            ref -= s.lr * (m / (1 - s.beta1 ** t)) / (math.sqrt(v / (1 - s.beta2 ** t)) + 1e-8)
            assert p.item() == pytest.approx(ref, abs=1e-12)

    def test_quadratic_convergence(self):
        p = self._param([3.0])
        opt = make_optimizer([p], OptimSettings(lr=0.05, weight_decay=0.0))
        for _ in range(500):
            opt.zero_grad()
            (p ** 2).sum().backward()
            optimizer_step(opt)
        assert abs(p.item()) < 1e-3

    def test_non_finite_grad_aborts(self):
        p = self._param([1.0])
        opt = make_optimizer([p], OptimSettings())
        p.grad = torch.tensor([float("inf")], dtype=torch.float64)
        with pytest.raises(NumericFailure, match="in head.weight"):
            optimizer_step(opt, {id(p): "head.weight"})
        assert p.item() == 1.0


class TestCosineLR:
    def test_examples(self):
        assert cosine_lr(0, 100, 2.0) == 2.0
        assert cosine_lr(100, 100, 2.0) == pytest.approx(0.2)
        assert cosine_lr(50, 100, 2.0) == pytest.approx(1.1)

    def test_monotone_and_bounded(self):
        lrs = [cosine_lr(s, 37, 1e-3) for s in range(38)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        assert min(lrs) >= 1e-4 - 1e-18 and max(lrs) <= 1e-3

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            cosine_lr(11, 10, 1.0)


class TestGradCheck:
    def _linear(self):
        torch.manual_seed(0)
        lin = torch.nn.Linear(5, 3).double()
        x, y = torch.randn(8, 5, dtype=torch.float64), torch.randn(8, 3, dtype=torch.float64)
        return lin, lambda: ((lin(x) - y) ** 2).mean()

    def test_linear_mse_exact(self):
        lin, fn = self._linear()
        report = grad_check(fn, list(lin.named_parameters()))
        assert report.max_rel_error < 1e-8 and report.passed

    def test_corrupted_gradient_fails(self):
        lin, fn = self._linear()
        report = grad_check(fn, list(lin.named_parameters()), grad_transform=lambda n, g: 2 * g)
        assert not report.passed
        assert set(report.failing) == {"weight", "bias"}

    def test_rel_error_floor(self):
        assert rel_error(0.0, 1e-9) == pytest.approx(1e-3)
        assert rel_error(1.0, 1.0) == 0.0

    def test_coords_per_class_sampling(self):
        big = torch.nn.Linear(30, 30).double()
        x = torch.randn(4, 30, dtype=torch.float64)
        report = grad_check(lambda: big(x).pow(2).sum(), list(big.named_parameters()), coords_per_class=200)
        assert report.per_class["weight"]["coords"] == 200
        assert report.per_class["bias"]["coords"] == 30  # fewer than 200: checked exhaustively


    def test_kink_straddling_coordinates_are_set_aside(self):
        w = torch.nn.Parameter(torch.tensor([5e-5, 1.0, -2.0], dtype=torch.float64))
        fn = lambda: torch.relu(w).sum()  # noqa: E731
        naive = grad_check(fn, [("w", w)], h=1e-4)
        assert not naive.passed  # (0.5 - 1) / 1: the difference straddles the kink at 0
        aware = grad_check(fn, [("w", w)], h=1e-4, pattern_fn=lambda: w.detach() > 0)
        assert aware.passed
        row = aware.per_class["w"]
        assert (row["coords"], row["kinks"]) == (2, 1) and row["max_rel_error"] < 1e-8


class TestAccumulation:
    def _model(self):
        torch.manual_seed(3)
        net = torch.nn.Sequential(torch.nn.Linear(4, 6), torch.nn.BatchNorm1d(6), torch.nn.Tanh(), torch.nn.Linear(6, 2))
        return net.double().eval()  # running-mean layers frozen

    def test_four_singletons_equal_one_batch(self):
        x = torch.randn(4, 4, dtype=torch.float64)
        y = torch.randn(4, 2, dtype=torch.float64)
        a, b = self._model(), self._model()
        oa = make_optimizer(a.parameters(), OptimSettings(lr=1e-2, weight_decay=1e-2))
        ob = make_optimizer(b.parameters(), OptimSettings(lr=1e-2, weight_decay=1e-2))
        for _ in range(3):
            accumulate_and_step(oa, [lambda i=i: ((a(x[i:i + 1]) - y[i:i + 1]) ** 2).mean() for i in range(4)])
            accumulate_and_step(ob, [lambda: ((b(x) - y) ** 2).mean()])
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert (pa - pb).abs().max().item() < 1e-6

    def test_single_micro_batch_is_ordinary_step(self):
        x = torch.randn(4, 4, dtype=torch.float64)
        a, b = self._model(), self._model()
        oa = make_optimizer(a.parameters(), OptimSettings(lr=1e-2))
        ob = make_optimizer(b.parameters(), OptimSettings(lr=1e-2))
        accumulate_and_step(oa, [lambda: a(x).pow(2).mean()])
        ob.zero_grad()
        b(x).pow(2).mean().backward()
        ob.step()
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_empty(self):
        with pytest.raises(ConfigError):
            accumulate_and_step(make_optimizer(self._model().parameters(), OptimSettings()), [])
