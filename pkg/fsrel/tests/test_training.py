import math
import tempfile
import unittest
from pathlib import Path

import numpy as np
import torch

from fsrel.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from fsrel.errors import ConfigurationError, ContractViolation, IntegrityError, NumericalAbort, VocabularyError
from fsrel.gradcheck import check_parameter_gradients
from fsrel.model import build_model
from fsrel.sgdata import EpisodeSampler, make_split
from fsrel.tests.builders import tiny_dataset, tiny_experiment
from fsrel.training import (
    Trainer,
    episode_loss,
    kl_loss,
    make_optimizer,
    object_loss,
    relation_loss,
    train_step,
)
from fsrel.utils import read_json, read_json_lines


def _t(*rows) -> torch.Tensor:
    return torch.tensor(rows, dtype=torch.float64)


class TestLosses(unittest.TestCase):
    """Hand-valued losses"""

    def test_relation_loss(self):
        target = torch.tensor([0])
        self.assertAlmostEqual(float(relation_loss(_t([1.0, 1.0]), target)), math.log(2), places=12)
        self.assertLess(float(relation_loss(_t([0.0, 100.0]), target)), 1e-6)
        self.assertAlmostEqual(float(relation_loss(_t([1.0, 2.0, 3.0]), target)), 0.408, places=3)

    def test_relation_loss_needs_candidates(self):
        with self.assertRaises(ContractViolation):
            relation_loss(torch.empty(2, 0), torch.tensor([0, 0]))

    def test_kl_loss(self):
        p = _t([0.2, 0.5, 0.3])
        self.assertAlmostEqual(float(kl_loss(p, p)), 0.0, places=12)
        self.assertAlmostEqual(float(kl_loss(_t([1.0, 0.0]), _t([0.5, 0.5]))), math.log(2), places=12)
        self.assertAlmostEqual(float(kl_loss(_t([0.7, 0.3]), _t([0.5, 0.5]))), 0.0823, places=4)

    def test_kl_target_is_fixed(self):
        """Only the prototype-only distribution receives gradient"""
        y_hat = _t([0.6, 0.4]).requires_grad_(True)
        y_pro = _t([0.3, 0.7]).requires_grad_(True)
        kl_loss(y_hat, y_pro).backward()
        self.assertIsNone(y_hat.grad)
        self.assertGreater(float(y_pro.grad.abs().sum()), 0.0)

    def test_kl_shape_mismatch(self):
        with self.assertRaises(ContractViolation):
            kl_loss(_t([0.5, 0.5]), _t([0.2, 0.3, 0.5]))

    def test_object_loss(self):
        self.assertLess(float(object_loss(_t([100.0, 0.0]), torch.tensor([0]))), 1e-6)
        self.assertAlmostEqual(float(object_loss(_t([0.0, 0.0, 0.0, 0.0]), torch.tensor([2]))), math.log(4), places=12)
        self.assertAlmostEqual(float(object_loss(_t([3.0, 2.0, 1.0]), torch.tensor([0]))), 0.408, places=3)

    def test_object_label_out_of_range(self):
        for label in (-1, 3):
            with self.subTest(label=label), self.assertRaises(VocabularyError):
                object_loss(_t([1.0, 2.0, 3.0]), torch.tensor([label]))


class TrainingCase(unittest.TestCase):
    def setUp(self):
        self.cfg = tiny_experiment()
        self.dataset = tiny_dataset()
        self.split = make_split(self.dataset, 4, 2, seed=0, test_fraction=0.25)
        self.model = build_model(self.cfg.model, self.dataset, seed=0)
        self.sampler = EpisodeSampler(self.dataset, self.split, self.cfg.episode)
        self.episode = self.sampler.sample(np.random.default_rng(0))

    def snapshot(self):
        return {name: p.detach().clone() for name, p in self.model.named_parameters()}


class TestTrainStep(TrainingCase):
    """One optimization step"""

    def test_total_is_sum_of_parts(self):
        """L_total is L_rel + L_kl + L_obj and disabled terms are zero"""
        for use_kl, use_obj in ((True, True), (False, True), (True, False), (False, False)):
            with self.subTest(use_kl=use_kl, use_obj=use_obj):
                total, parts, _ = episode_loss(self.model, self.dataset, self.episode, use_kl, use_obj)
                self.assertAlmostEqual(total.detach().item(), sum(parts.values()).detach().item(), places=12)
                if not use_kl:
                    self.assertEqual(parts["L_kl"].detach().item(), 0.0)
                if not use_obj:
                    self.assertEqual(parts["L_obj"].detach().item(), 0.0)

    def test_scores_cover_every_query(self):
        """The distance table has one row per query and background as the last candidate"""
        _, _, scores = episode_loss(self.model, self.dataset, self.episode)
        self.assertEqual(scores.candidates[:-1], self.episode.categories)
        self.assertEqual(scores.candidates[-1], "__background__")
        self.assertEqual(tuple(scores.table.distances.shape), (len(self.episode.queries), len(scores.candidates)))
        self.assertTrue(torch.allclose(scores.y_hat.sum(-1), torch.ones(len(self.episode.queries), dtype=torch.float64)))
        self.assertEqual(scores.y_pro.shape, scores.y_hat.shape)

    def test_zero_learning_rate(self):
        """With lr 0 every parameter is unchanged"""
        before = self.snapshot()
        train_step(self.episode, self.model, make_optimizer(self.model, 0.0), self.dataset)
        for name, param in self.model.named_parameters():
            self.assertTrue(torch.equal(param, before[name]), name)

    def test_small_step_descends(self):
        """A small gradient step lowers the loss of the same episode"""
        optimizer = torch.optim.SGD(self.model.parameters(), lr=1e-4)
        before, _, _ = episode_loss(self.model, self.dataset, self.episode, use_kl=False)
        report = train_step(self.episode, self.model, optimizer, self.dataset, use_kl=False)
        after, _, _ = episode_loss(self.model, self.dataset, self.episode, use_kl=False)
        self.assertAlmostEqual(report.L_total, before.detach().item(), places=10)
        self.assertLess(after.detach().item(), before.detach().item())

    def test_gradients_reach_every_trainable_group(self):
        """Every group but the frozen text encoder receives gradient"""
        report = train_step(self.episode, self.model, make_optimizer(self.model, 1e-3), self.dataset)
        self.assertEqual(set(report.grad_norms), set(self.model.parameter_groups()))
        for group, norm in report.grad_norms.items():
            with self.subTest(group=group):
                if group == "text":
                    self.assertEqual(norm, 0.0)
                else:
                    self.assertGreater(norm, 0.0)
        self.assertAlmostEqual(report.grad_norm, math.sqrt(sum(n**2 for n in report.grad_norms.values())), places=10)

    def test_gradients_match_finite_differences(self):
        """Autograd agrees with central differences on entries from every trainable group"""
        params = []
        for group, members in self.model.parameter_groups().items():
            trainable = [p for p in members if p.requires_grad]
            for i, param in enumerate(trainable[:2]):
                params.append((f"{group}[{i}]", param))

        def loss():
            return episode_loss(self.model, self.dataset, self.episode, use_kl=False)[0]

        report = check_parameter_gradients(loss, params, n_samples=2 * len(params), seed=5)
        self.assertTrue(report.ok, report.failures)

    def test_non_finite_loss_aborts(self):
        """A NaN loss aborts the step and dumps the episode"""
        with torch.no_grad():
            self.model.background.fill_(float("nan"))
        before = self.snapshot()
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(NumericalAbort) as ctx:
                train_step(self.episode, self.model, make_optimizer(self.model, 1e-3), self.dataset, step=5, dump_dir=tmp)
            dump = Path(tmp) / "nonfinite_step_000005.json"
            self.assertEqual(ctx.exception.dump_path, dump)
            self.assertEqual(ctx.exception.exit_code, 3)
            payload = read_json(dump)
            self.assertEqual(payload["step"], 5)
            self.assertEqual(payload["episode"], self.episode.to_payload())
        for name, param in self.model.named_parameters():
            if name != "background":
                self.assertTrue(torch.equal(param, before[name]), name)

    def test_background_queries(self):
        """Episodes carry background queries unless the ratio is zero"""
        self.assertGreater(len(self.episode.background()), 0)
        no_background = self.cfg.episode.model_copy(update={"background_ratio": 0})
        episode = EpisodeSampler(self.dataset, self.split, no_background).sample(np.random.default_rng(1))
        self.assertEqual(episode.background(), [])


class TestTrainer(TrainingCase):
    """Training loop, logs and checkpoints"""

    def test_log_lines_and_checkpoint(self):
        with tempfile.TemporaryDirectory() as tmp:
            reports = Trainer(self.model, self.dataset, self.split, self.cfg, out_dir=tmp).run()
            records = read_json_lines(Path(tmp) / "train_log.jsonl")
            self.assertEqual(len(reports), self.cfg.training.steps)
            self.assertEqual([r["step"] for r in records], list(range(self.cfg.training.steps)))
            self.assertEqual(set(records[0]), {"step", "L_rel", "L_kl", "L_obj", "L_total", "grad_norm"})
            self.assertTrue((Path(tmp) / "checkpoint.bin").exists())

    def test_same_seeds_same_run(self):
        """Two runs from the same seeds produce identical losses"""
        first = Trainer(self.model, self.dataset, self.split, self.cfg).run()
        model = build_model(self.cfg.model, self.dataset, seed=0)
        second = Trainer(model, self.dataset, self.split, self.cfg).run()
        self.assertEqual([r.L_total for r in first], [r.L_total for r in second])

    def test_resume_continues_the_run(self):
        """Stopping after two steps and resuming matches a straight three-step run"""
        cfg = tiny_experiment(label_refresh_every=1)
        straight = Trainer(build_model(cfg.model, self.dataset, seed=0), self.dataset, self.split, cfg).run()
        with tempfile.TemporaryDirectory() as tmp:
            Trainer(build_model(cfg.model, self.dataset, seed=0), self.dataset, self.split, cfg, out_dir=tmp).run(2)
            loaded = load_checkpoint(Path(tmp) / "checkpoint.bin", expected=cfg.model)
        trainer = Trainer(loaded.model, self.dataset, self.split, cfg)
        trainer.restore(loaded.step, loaded.optimizer_state, loaded.rng_state)
        resumed = trainer.run(1)
        self.assertEqual(loaded.step, 2)
        self.assertEqual(resumed[0].step, 2)
        self.assertAlmostEqual(resumed[0].L_total, straight[2].L_total, places=10)

    def test_resume_keeps_the_earlier_log(self):
        """A resumed run extends the training log instead of replacing it"""
        cfg = tiny_experiment(label_refresh_every=1)
        with tempfile.TemporaryDirectory() as tmp:
            Trainer(build_model(cfg.model, self.dataset, seed=0), self.dataset, self.split, cfg, out_dir=tmp).run(2)
            log = Path(tmp) / "train_log.jsonl"
            with log.open("a", encoding="utf-8") as handle:
                handle.write('{"step": 2, "L_total": 0.0}\n')
            loaded = load_checkpoint(Path(tmp) / "checkpoint.bin", expected=cfg.model)
            trainer = Trainer(loaded.model, self.dataset, self.split, cfg, out_dir=tmp)
            trainer.restore(loaded.step, loaded.optimizer_state, loaded.rng_state)
            resumed = trainer.run(1)
            records = read_json_lines(log)
        self.assertEqual([r["step"] for r in records], [0, 1, 2])
        self.assertEqual(records[2]["L_total"], resumed[0].L_total)


class TestCheckpoint(TrainingCase):
    """Checkpoint container"""

    def test_round_trip(self):
        """Loaded weights reproduce the saved model's distances"""
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(self.model, Path(tmp) / "ck.bin", step=7)
            loaded = load_checkpoint(path, expected=self.cfg.model)
        self.assertEqual(loaded.step, 7)
        self.assertEqual(loaded.header["config_hash"], self.cfg.model.config_hash())
        for name, value in self.model.state_dict().items():
            self.assertTrue(torch.equal(loaded.model.state_dict()[name], value), name)
        self.model.eval()
        with torch.no_grad():
            _, _, original = episode_loss(self.model, self.dataset, self.episode)
            _, _, restored = episode_loss(loaded.model, self.dataset, self.episode)
        self.assertTrue(torch.equal(original.table.distances, restored.table.distances))

    def test_config_mismatch(self):
        """A different model config is refused, and forcing it still fails when weights do not fit"""
        other = self.cfg.model.model_copy(update={"text_dim": 7})
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(self.model, Path(tmp) / "ck.bin")
            with self.assertRaises(ConfigurationError):
                load_checkpoint(path, expected=other)
            with self.assertRaises(ConfigurationError):
                load_checkpoint(path, expected=other, allow_config_mismatch=True)

    def test_corruption(self):
        """Flipped bytes, truncation and foreign files are integrity errors"""
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(self.model, Path(tmp) / "ck.bin")
            data = path.read_bytes()
            read_checkpoint(path)
            variants = {
                "flipped": data[:100] + bytes([data[100] ^ 0xFF]) + data[101:],
                "truncated": data[: len(data) // 2],
                "foreign": b"not a checkpoint at all, just some bytes" * 4,
            }
            for name, content in variants.items():
                with self.subTest(variant=name):
                    broken = Path(tmp) / f"{name}.bin"
                    broken.write_bytes(content)
                    with self.assertRaises(IntegrityError):
                        load_checkpoint(broken)
            with self.assertRaises(IntegrityError):
                load_checkpoint(Path(tmp) / "missing.bin")


if __name__ == "__main__":
    unittest.main()
