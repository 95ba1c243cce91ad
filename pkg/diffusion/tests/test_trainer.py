import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from diffusion import numerics as nx
from diffusion.constants import (
    BRANCH_DETACHED,
    LOSS_LOG_HEADER,
    MODE_CONTROLNET,
    MODE_DETACHED,
    STREAM_TRAIN,
)
from diffusion.exceptions import ConfigError, DataError, ShapeError
from diffusion.model import ControlEncoderConfig, extract_control, mix_controls, predict_noise
from diffusion.optim import OptimizerState
from diffusion.schedule import forward_diffuse
from diffusion.trainer import (
    TrainConfig,
    Trainer,
    TrainingData,
    four_term_loss,
    gate_w_a,
    loss_consistency,
    loss_image,
    loss_mask,
    online_augment_loss,
    param_interpolation_diagnostic,
    train_step,
)
from diffusion.utils.hashing import array_digest
from diffusion.utils.rng import stream

from .factories import slow, tiny_model, tiny_pairs, tiny_schedule

LIVE_CONTROL = ControlEncoderConfig(stage_channels=(4, 8, 16), blocks_per_stage=1, zero_init=False)


def tiny_cfg(**overrides) -> TrainConfig:
    return replace(TrainConfig(n_iter=6, batch_size=2, t_tau=5), **overrides).resolve(10)


def fixed_batch(n=2, seed=0):
    return TrainingData.from_pairs(tiny_pairs(n, seed)).batch(seed, 1, n)


class TrainConfigTests(SimpleTestCase):
    def test_defaults_follow_iteration_count_and_schedule(self):
        cfg = TrainConfig(n_iter=300).resolve(200)
        self.assertEqual(cfg.k_tau, 100)
        self.assertEqual(cfg.t_tau, 40)
        self.assertEqual(cfg.checkpoint_every, 30)
        self.assertEqual(TrainConfig(n_iter=300).resolve(1000).t_tau, 200)

    def test_controlnet_mode_disables_siamese_terms(self):
        cfg = TrainConfig(n_iter=6, mode=MODE_CONTROLNET, w_c=2.0).resolve(10)
        self.assertEqual(cfg.w_c, 0.0)
        self.assertFalse(cfg.online_aug)

    def test_detached_mode(self):
        cfg = TrainConfig(n_iter=6, mode=MODE_DETACHED, t_tau=5).resolve(10)
        self.assertEqual(cfg.image_branch_gradients, BRANCH_DETACHED)

    def test_invalid_thresholds(self):
        with self.assertRaises(ConfigError):
            TrainConfig(n_iter=6, k_tau=6).resolve(10)
        with self.assertRaises(ConfigError):
            TrainConfig(n_iter=6, t_tau=11).resolve(10)
        with self.assertRaises(ConfigError):
            TrainConfig(n_iter=6, w_c=-1.0, t_tau=5).resolve(10)
        with self.assertRaises(ConfigError):
            TrainConfig(n_iter=6, mode="other").resolve(10)


class LossTermTests(SimpleTestCase):
    def setUp(self):
        self.m = tiny_model(control=LIVE_CONTROL)
        self.s = tiny_schedule()
        images, masks = fixed_batch()
        self.eps = nx.Tensor(np.random.default_rng(2).standard_normal(images.shape))
        self.t = np.array([1, 3])
        self.z0 = nx.Tensor(images)
        self.z_t = forward_diffuse(self.z0, self.t, self.eps, self.s)
        self.c_m = extract_control(self.m, nx.Tensor(masks))

    def test_perfect_and_offset_predictors(self):
        pred = predict_noise(self.m, self.z_t, self.t, self.c_m)
        self.assertEqual(loss_mask(self.m, self.z_t, self.t, self.c_m, nx.Tensor(pred.data)).item(), 0.0)
        shifted = nx.Tensor(pred.data - 1.0)
        self.assertAlmostEqual(loss_mask(self.m, self.z_t, self.t, self.c_m, shifted).item(), 1.0, places=12)

    def test_image_loss_against_mixed_control_prediction(self):
        images, _ = fixed_batch()
        c_mix = mix_controls(extract_control(self.m, nx.Tensor(images)), self.c_m, 5, 10)
        pred = predict_noise(self.m, self.z_t, self.t, c_mix)
        self.assertEqual(loss_image(self.m, self.z_t, self.t, c_mix, nx.Tensor(pred.data)).item(), 0.0)
        shifted = nx.Tensor(pred.data + 1.0)
        self.assertAlmostEqual(loss_image(self.m, self.z_t, self.t, c_mix, shifted).item(), 1.0, places=12)

    def test_consistency_hand_example(self):
        self.assertEqual(loss_consistency(nx.Tensor([1.0, 1.0]), nx.Tensor([0.0, 0.0]), 1.0).item(), 1.0)
        same = nx.Tensor([0.3, -0.2])
        self.assertEqual(loss_consistency(same, nx.Tensor(same.data.copy()), 1.0).item(), 0.0)

    def test_consistency_gradient_reaches_mask_branch_only(self):
        eps_m = nx.Tensor([1.0, 2.0], requires_grad=True)
        eps_mix = nx.Tensor([0.0, 0.0], requires_grad=True)
        nx.backward(loss_consistency(eps_m, eps_mix, 2.0))
        np.testing.assert_allclose(eps_m.grad, [2.0, 4.0])
        self.assertIsNone(eps_mix.grad)

    def test_zero_weight_annihilates_consistency(self):
        eps_m = nx.Tensor([1.0, 2.0], requires_grad=True)
        loss = loss_consistency(eps_m, nx.Tensor([0.0, 0.0]), 0.0)
        nx.backward(loss)
        self.assertEqual(loss.item(), 0.0)
        self.assertIsNone(eps_m.grad)

    def test_consistency_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            loss_consistency(nx.Tensor([1.0]), nx.Tensor([1.0, 2.0]), 1.0)

    def test_gate_uses_strict_inequalities(self):
        self.assertEqual(gate_w_a(11, 199, 10, 200), 1)
        self.assertEqual(gate_w_a(10, 199, 10, 200), 0)
        self.assertEqual(gate_w_a(11, 200, 10, 200), 0)

    def test_closed_gate_gives_zero(self):
        eps_mix = nx.Tensor(self.eps.data, requires_grad=True)
        loss = online_augment_loss(self.m, self.z_t, self.t, self.c_m, eps_mix, self.eps, self.s, 0)
        self.assertEqual(loss.item(), 0.0)
        self.assertFalse(loss.requires_grad)

    def test_oracle_noise_reproduces_mask_loss(self):
        eps_mix = nx.Tensor(self.eps.data, requires_grad=True)
        l_aug = online_augment_loss(self.m, self.z_t, self.t, self.c_m, eps_mix, self.eps, self.s, 1)
        l_m = loss_mask(self.m, self.z_t, self.t, self.c_m, self.eps)
        self.assertAlmostEqual(l_aug.item(), l_m.item(), places=10)
        nx.backward(l_aug)
        self.assertIsNone(eps_mix.grad)

    def test_per_sample_gate(self):
        eps_mix = nx.Tensor(self.eps.data)
        both = online_augment_loss(self.m, self.z_t, self.t, self.c_m, eps_mix, self.eps, self.s, [1, 1]).item()
        one = online_augment_loss(self.m, self.z_t, self.t, self.c_m, eps_mix, self.eps, self.s, [1, 0]).item()
        self.assertGreater(both, 0.0)
        self.assertLess(one, both)


class TrainStepTests(SimpleTestCase):
    def setUp(self):
        self.s = tiny_schedule()
        self.batch = fixed_batch()

    def step(self, cfg, model=None, k=1):
        m = model or tiny_model(control=LIVE_CONTROL)
        opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
        return m, train_step(m, self.batch, k, cfg, opt, self.s)

    def test_total_is_sum_of_terms(self):
        for k in range(1, 7):
            _, report = self.step(tiny_cfg(), k=k)
            parts = report.loss_m + report.loss_i + report.loss_c + report.loss_m_prime
            self.assertAlmostEqual(report.total, parts, delta=1e-12)

    def test_siamese_without_extras_equals_controlnet(self):
        plain = tiny_cfg(w_c=0.0, p_drop=0.0, online_aug=False)
        controlnet = tiny_cfg(mode=MODE_CONTROLNET, p_drop=0.0)
        _, a = self.step(plain, k=5)
        _, b = self.step(controlnet, k=5)
        self.assertEqual(a.loss_c, 0.0)
        self.assertEqual(a.loss_m_prime, 0.0)
        self.assertEqual(a.total, a.loss_m + a.loss_i)
        self.assertEqual(a.row(), b.row())

    def test_shared_noise_draw(self):
        cfg = tiny_cfg()
        _, report = self.step(cfg, k=3)
        rng = stream(cfg.seed, STREAM_TRAIN, 3)
        rng.integers(0, self.s.T, size=2)
        eps = rng.standard_normal(self.batch[0].shape)
        self.assertEqual(report.eps_digest, array_digest(eps))

    def test_gradient_routing_audit(self):
        _, report = self.step(tiny_cfg(audit=True), k=5)
        self.assertTrue(report.audit_ok)
        _, report = self.step(tiny_cfg(audit=True, mode=MODE_DETACHED), k=5)
        self.assertTrue(report.audit_ok)

    def test_frozen_parameters_never_change(self):
        m = tiny_model(control=LIVE_CONTROL)
        before = {n: m.params[n].data.copy() for n in m.frozen}
        self.step(tiny_cfg(), model=m, k=5)
        for name in m.frozen:
            np.testing.assert_array_equal(m.params[name].data, before[name])
            self.assertIsNone(m.params[name].grad)

    def test_trainable_parameters_move(self):
        m = tiny_model(control=LIVE_CONTROL)
        before = m.params["out.w"].data.copy()
        self.step(tiny_cfg(), model=m)
        self.assertFalse(np.array_equal(before, m.params["out.w"].data))

    def test_gate_reported_per_batch(self):
        _, early = self.step(tiny_cfg(t_tau=10), k=1)
        _, late = self.step(tiny_cfg(t_tau=10), k=5)
        self.assertEqual(early.w_a, 0.0)
        self.assertEqual(late.w_a, 1.0)
        self.assertGreater(late.loss_m_prime, 0.0)

    def test_empty_batch(self):
        with self.assertRaises(DataError):
            train_step(tiny_model(), [], 1, tiny_cfg(), OptimizerState(), self.s)

    def test_total_loss_gradcheck_with_all_terms_live(self):
        m = tiny_model(control=LIVE_CONTROL)
        cfg = tiny_cfg(p_drop=0.0)
        images, masks = self.batch
        k, t = cfg.k_tau + 1, np.full(2, cfg.t_tau - 1)
        eps = np.random.default_rng(5).standard_normal(images.shape)
        graph = four_term_loss(m, images, masks, t, eps, k, cfg, self.s)
        self.assertTrue(graph.gates.all())
        self.assertGreater(graph.loss_c.item(), 0.0)
        frozen = nx.FrozenStopGradients()
        loss_fn = frozen.wrap(lambda: four_term_loss(m, images, masks, t, eps, k, cfg, self.s).total)
        report = nx.gradcheck_parameters(loss_fn, m.trainable(), fraction=0.01,
                                         rng=np.random.default_rng(0), tol=1e-5)
        self.assertTrue(report.passed, report.max_rel_error)


class TrainerLoopTests(SimpleTestCase):
    def run_trainer(self, seed=0, log_path=None, on_checkpoint=None):
        m = tiny_model(control=LIVE_CONTROL, seed=seed)
        cfg = TrainConfig(n_iter=10, batch_size=2, t_tau=5, checkpoint_every=5, seed=seed)
        trainer = Trainer(m, tiny_schedule(), cfg, TrainingData.from_pairs(tiny_pairs(4)),
                          log_path=log_path, on_checkpoint=on_checkpoint)
        return trainer.run()

    def test_fixed_seed_is_bit_reproducible(self):
        a = self.run_trainer()
        b = self.run_trainer()
        self.assertEqual([r.row() for r in a], [r.row() for r in b])
        self.assertEqual([r.eps_digest for r in a], [r.eps_digest for r in b])

    def test_loss_log_and_checkpoint_cadence(self):
        seen = []
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "loss_log.csv"
            reports = self.run_trainer(log_path=path, on_checkpoint=lambda k, m, opt: seen.append((k, opt.step)))
            lines = path.read_text(encoding="utf-8").splitlines()
        self.assertEqual(lines[0].split(","), LOSS_LOG_HEADER)
        self.assertEqual(len(lines), 11)
        self.assertEqual(seen, [(5, 5), (10, 10)])
        self.assertEqual([r.w_i for r in reports], [k / 10 for k in range(1, 11)])

    def test_empty_training_set(self):
        with self.assertRaises(DataError):
            TrainingData.from_pairs([])

    def test_routing_audit_holds_on_every_step(self):
        m = tiny_model(control=LIVE_CONTROL)
        cfg = TrainConfig(n_iter=50, batch_size=2, t_tau=5, p_drop=0.2, audit=True)
        reports = Trainer(m, tiny_schedule(), cfg, TrainingData.from_pairs(tiny_pairs(4))).run()
        self.assertEqual(len(reports), 50)
        self.assertEqual([r.k for r in reports if r.audit_ok is not True], [])
        # Steps with the augmentation term live are audited too.
        self.assertTrue(any(r.w_a > 0 for r in reports))
        self.assertTrue(any(r.loss_c > 0 for r in reports))

    @slow
    def test_mask_loss_decreases(self):
        for seed in (0, 1):
            m = tiny_model(control=LIVE_CONTROL, seed=seed)
            cfg = TrainConfig(n_iter=200, batch_size=4, t_tau=5, seed=seed, lr=3e-3)
            reports = Trainer(m, tiny_schedule(), cfg, TrainingData.from_pairs(tiny_pairs(8, seed))).run()
            early = np.mean([r.loss_m for r in reports[:20]])
            late = np.mean([r.loss_m for r in reports[-20:]])
            self.assertLess(late, early)


class InterpolationDiagnosticTests(SimpleTestCase):
    def test_endpoints_and_midpoint(self):
        a = [("w", np.array([0.0]))]
        b = [("w", np.array([2.0]))]
        np.testing.assert_array_equal(param_interpolation_diagnostic(a, b, 0.0)[0][1], [0.0])
        np.testing.assert_array_equal(param_interpolation_diagnostic(a, b, 1.0)[0][1], [2.0])
        np.testing.assert_array_equal(param_interpolation_diagnostic(a, b, 0.5)[0][1], [1.0])

    def test_manifest_mismatch(self):
        with self.assertRaises(ShapeError):
            param_interpolation_diagnostic([("w", np.zeros(1))], [("v", np.zeros(1))], 0.5)
        with self.assertRaises(ShapeError):
            param_interpolation_diagnostic([("w", np.zeros(1))], [("w", np.zeros(2))], 0.5)
