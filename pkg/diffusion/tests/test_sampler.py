import math
import tempfile
from pathlib import Path
from unittest import mock

import numpy as np
from django.test import SimpleTestCase

from diffusion import numerics as nx
from diffusion.dataset import noise_floor
from diffusion.evaluation.inputs import load_sample_grid
from diffusion.evaluation.metrics import texture_fidelity
from diffusion.exceptions import ConfigError, DataError, StorageError
from diffusion.model import ControlEncoderConfig, extract_control, predict_noise
from diffusion.sampler import SampleConfig, grid_jobs, initial_noise, read_grid_manifest, sample, sample_grid
from diffusion.schedule import ddim_step, ddim_timesteps, ladder_pairs
from diffusion.trainer import TrainConfig, Trainer, TrainingData
from diffusion.utils.hashing import directory_digest

from .factories import TINY_GENERATOR, slow, tiny_model, tiny_pairs, tiny_schedule

LIVE_CONTROL = ControlEncoderConfig(stage_channels=(4, 8, 16), blocks_per_stage=1, zero_init=False)


def tiny_masks(n=2):
    return [p.mask for p in tiny_pairs(n)]


class SampleTests(SimpleTestCase):
    def setUp(self):
        self.m = tiny_model()
        self.s = tiny_schedule()
        self.cfg = SampleConfig(steps=3, lambda_=2.0)
        self.mask = np.stack(tiny_masks(1) * 2)

    def test_same_seed_is_bit_identical(self):
        a = sample(self.m, self.mask, self.cfg, self.s, seeds=[4, 4])
        b = sample(self.m, self.mask, self.cfg, self.s, seeds=[4, 4])
        np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_array_equal(a.data[0], a.data[1])

    def test_different_seeds_differ(self):
        out = sample(self.m, self.mask, self.cfg, self.s, seeds=[0, 1])
        self.assertFalse(np.array_equal(out.data[0], out.data[1]))

    def test_output_is_clamped(self):
        out = sample(self.m, self.mask, SampleConfig(steps=10, lambda_=9.0), self.s, seeds=[0, 1])
        self.assertEqual(out.shape, (2, 3, 16, 16))
        self.assertLessEqual(np.abs(out.data).max(), 1.0)

    def test_single_mask_without_batch_axis(self):
        out = sample(self.m, self.mask[0], self.cfg, self.s)
        self.assertEqual(out.shape, (1, 3, 16, 16))

    def test_mask_validation(self):
        with self.assertRaises(DataError):
            sample(self.m, np.zeros((1, 8, 8)), self.cfg, self.s)
        with self.assertRaises(DataError):
            sample(self.m, np.full((1, 16, 16), 0.5), self.cfg, self.s)
        with self.assertRaises(ConfigError):
            sample(self.m, self.mask, self.cfg, self.s, seeds=[0])

    def test_config_validation(self):
        for cfg in (SampleConfig(steps=11), SampleConfig(steps=0), SampleConfig(eta=0.5),
                    SampleConfig(lambda_=-1.0), SampleConfig(batch=0)):
            with self.assertRaises(ConfigError):
                cfg.check(10)

    def test_unit_guidance_equals_conditional_only_sampling(self):
        m = tiny_model(control=LIVE_CONTROL)
        masks = self.mask[:, None]
        with nx.no_grad():
            c = extract_control(m, nx.Tensor(masks))
            z = nx.Tensor(initial_noise([0, 1], (3, 16, 16)))
            for t, t_prev in ladder_pairs(ddim_timesteps(self.s.T, 4)):
                z = ddim_step(z, t, t_prev, predict_noise(m, z, t, c), 0.0, self.s)
        out = sample(m, self.mask, SampleConfig(steps=4, lambda_=1.0), self.s, seeds=[0, 1])
        np.testing.assert_array_equal(out.data, np.clip(z.data, -1.0, 1.0))
        guided = sample(m, self.mask, SampleConfig(steps=4, lambda_=2.0), self.s, seeds=[0, 1])
        self.assertFalse(np.array_equal(out.data, guided.data))

    def test_denoiser_that_knows_the_image_reproduces_its_texture(self):
        g = TINY_GENERATOR
        pairs = tiny_pairs(1, g=g)
        x0 = np.transpose(pairs[0].image, (2, 0, 1))[None]

        def known_image_noise(m, z, t, c_m, lambda_):
            ab = self.s.alpha_bar_at(int(t))
            return nx.Tensor((z.data - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab))

        with mock.patch("diffusion.sampler.guided_noise", side_effect=known_image_noise):
            out = sample(self.m, pairs[0].mask, SampleConfig(steps=self.s.T), self.s, seeds=[3])
        np.testing.assert_allclose(out.data, x0, rtol=0.0, atol=1e-9)
        image = np.transpose(out.data[0], (1, 2, 0))
        self.assertLessEqual(texture_fidelity(image, pairs[0].mask, g), noise_floor(pairs, g) + 1e-9)
        inside = pairs[0].mask > 0.5
        self.assertLess(np.abs(image - pairs[0].image)[inside].mean(), g.noise_sigma)

    @slow
    def test_short_and_full_ladders_agree_on_a_trained_model(self):
        T = 100
        m = tiny_model(T=T, control=LIVE_CONTROL)
        s = tiny_schedule(T)
        cfg = TrainConfig(n_iter=300, batch_size=4, t_tau=20, lr=3e-3)
        Trainer(m, s, cfg, TrainingData.from_pairs(tiny_pairs(8))).run()
        masks = np.stack(tiny_masks(2))
        short = sample(m, masks, SampleConfig(steps=50, lambda_=1.0), s, seeds=[0, 1])
        full = sample(m, masks, SampleConfig(steps=T, lambda_=1.0), s, seeds=[0, 1])
        self.assertGreater(np.corrcoef(short.data.ravel(), full.data.ravel())[0, 1], 0.9)


class SampleGridTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = Path(self.tmp.name)
        self.m = tiny_model()
        self.s = tiny_schedule()
        self.masks = tiny_masks(2)
        self.names = ["0000.png", "0001.png"]

    def tearDown(self):
        self.tmp.cleanup()

    def test_cartesian_entries(self):
        manifest = sample_grid(self.m, self.masks, self.names, [0, 1, 2], SampleConfig(steps=2), self.s,
                               self.out / "grid")
        self.assertEqual(len(manifest["entries"]), 6)
        self.assertEqual(manifest["entries"][0]["output_file"], "0000_s0.png")
        self.assertEqual(len(list((self.out / "grid" / "images").glob("*.png"))), 6)
        self.assertEqual(read_grid_manifest(self.out / "grid"), manifest)

    def test_empty_mask_list(self):
        manifest = sample_grid(self.m, [], [], [0], SampleConfig(steps=2), self.s, self.out / "empty")
        self.assertEqual(manifest["entries"], [])
        self.assertEqual(grid_jobs([], [0, 1]), [])

    def test_grid_loads_back_through_the_evaluation_loader(self):
        manifest = sample_grid(self.m, self.masks, self.names, [3], SampleConfig(steps=2), self.s, self.out / "g")
        pairs, loaded = load_sample_grid(self.out / "g", 16)
        self.assertEqual(loaded, manifest)
        self.assertEqual([p.meta for p in pairs], manifest["entries"])
        for pair, entry in zip(pairs, manifest["entries"]):
            np.testing.assert_array_equal(pair.mask, self.masks[entry["mask_index"]])

    def test_worker_count_does_not_change_outputs(self):
        cfg = SampleConfig(steps=2, batch=1)
        sample_grid(self.m, self.masks, self.names, [0, 1], cfg, self.s, self.out / "w1", workers=1)
        sample_grid(self.m, self.masks, self.names, [0, 1], cfg, self.s, self.out / "w2", workers=2)
        self.assertEqual(directory_digest(self.out / "w1"), directory_digest(self.out / "w2"))

    def test_mismatched_names(self):
        with self.assertRaises(ConfigError):
            sample_grid(self.m, self.masks, ["only.png"], [0], SampleConfig(steps=2), self.s, self.out)

    def test_missing_manifest(self):
        with self.assertRaises(StorageError):
            read_grid_manifest(self.out / "nothing")
