import io
import json
import logging
import tempfile
import unittest
from pathlib import Path

from pydantic import ValidationError

from fsrel.errors import (
    ConfigurationError,
    ContractViolation,
    DatasetParseError,
    FsrelError,
    IntegrityError,
    NumericalAbort,
    VocabularyError,
)
from fsrel.models import EpisodeConfig, EvaluationConfig, ExperimentConfig, ModelConfig
from fsrel.tests.builders import tiny_experiment
from fsrel.utils import (
    JsonLinesWriter,
    canonical_json,
    configure_logging,
    git_blob_hash,
    read_json_lines,
    seed_everything,
    sha256_hex,
)


class TestExperimentConfig(unittest.TestCase):
    """Experiment config validation and hashing"""

    def test_defaults(self):
        cfg = ExperimentConfig()
        self.assertEqual(cfg.model.prompt_length, 24)
        self.assertEqual(cfg.model.prompt_mode, "learnable")
        self.assertEqual(cfg.model.metric_mode, "reweight")
        self.assertEqual(cfg.evaluation.shots, [1, 5, 10])
        self.assertEqual(cfg.evaluation.recall_at, [20, 50, 100])

    def test_normalized_round_trip(self):
        """Validating the normal form gives back the same config and hash"""
        cfg = tiny_experiment()
        again = ExperimentConfig.model_validate(json.loads(json.dumps(cfg.normalized())))
        self.assertEqual(again, cfg)
        self.assertEqual(again.config_hash(), cfg.config_hash())

    def test_hash_tracks_content(self):
        cfg = tiny_experiment()
        changed = tiny_experiment(steps=4)
        self.assertNotEqual(cfg.config_hash(), changed.config_hash())
        self.assertEqual(cfg.model.config_hash(), changed.model.config_hash())
        self.assertNotEqual(cfg.model.config_hash(), cfg.model.model_copy(update={"text_dim": 7}).config_hash())

    def test_invalid_fields(self):
        cases = [
            {"unknown": 1},
            {"model": {"prompt_mode": "soft"}},
            {"model": {"metric_mode": "max"}},
            {"model": {"prompt_length": 0}},
            {"episode": {"support_min": 3, "support_max": 2}},
            {"evaluation": {"shots": [0]}},
            {"evaluation": {"recall_at": []}},
            {"training": {"stpes": 5}},
            {"model": {"promt_mode": "fixed"}},
            {"data": {"world": {"n_imgs": 3}}},
            {"split": {"n_novel": 2, "novel": ["rel_0"]}},
            {"split": {"n_novel": 2, "novel": ["rel_0", "rel_0"]}},
        ]
        for raw in cases:
            with self.subTest(raw=raw), self.assertRaises(ValidationError):
                ExperimentConfig.model_validate(raw)

    def test_pinned_novel_predicates(self):
        cfg = ExperimentConfig.model_validate({"split": {"n_novel": 2, "novel": ["rel_4", "rel_5"]}})
        self.assertEqual(cfg.split.novel, ["rel_4", "rel_5"])
        self.assertIsNone(ExperimentConfig().split.novel)

    def test_recall_cutoffs_are_sorted(self):
        self.assertEqual(EvaluationConfig(recall_at=[100, 20, 50, 20]).recall_at, [20, 50, 100])

    def test_episode_ranges(self):
        with self.assertRaises(ValidationError):
            EpisodeConfig(query_min=5, query_max=1)
        self.assertEqual(EpisodeConfig(support_min=2, support_max=2).support_max, 2)

    def test_model_precision(self):
        self.assertEqual(ModelConfig().precision, "float32")
        with self.assertRaises(ValidationError):
            ModelConfig(precision="float16")


class TestErrors(unittest.TestCase):
    def test_exit_codes(self):
        self.assertEqual(ConfigurationError("x").exit_code, 2)
        self.assertEqual(NumericalAbort("x").exit_code, 3)
        self.assertEqual(IntegrityError("x").exit_code, 4)
        self.assertEqual(DatasetParseError("images[0]", "bad").exit_code, 4)
        self.assertEqual(FsrelError("x").exit_code, 1)

    def test_error_types(self):
        self.assertIsInstance(VocabularyError("zebra"), KeyError)
        self.assertIsInstance(ContractViolation("x"), ValueError)
        self.assertEqual(str(VocabularyError("unknown category 'zebra'")), "unknown category 'zebra'")
        error = DatasetParseError("images[3] (id=x)", "missing 'objects' list")
        self.assertEqual(error.record, "images[3] (id=x)")
        self.assertIn("images[3]", str(error))


class TestUtils(unittest.TestCase):
    def test_canonical_json(self):
        self.assertEqual(canonical_json({"b": 1, "a": [1, 2]}), '{"a":[1,2],"b":1}')
        self.assertEqual(sha256_hex("abc"), sha256_hex(b"abc"))

    def test_git_blob_hash(self):
        """Matches `git hash-object`"""
        with tempfile.TemporaryDirectory() as tmp:
            empty = Path(tmp) / "empty"
            empty.write_bytes(b"")
            hello = Path(tmp) / "hello"
            hello.write_bytes(b"hello\n")
            self.assertEqual(git_blob_hash(empty), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391")
            self.assertEqual(git_blob_hash(hello), "ce013625030ba8dba906f756967f9e9ca394464a")

    def test_json_lines(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "nested" / "log.jsonl"
            with JsonLinesWriter(path) as writer:
                writer.write({"step": 0})
                writer.write_all([{"step": 1}, {"step": 2}])
                self.assertEqual(writer.count, 3)
            self.assertEqual(read_json_lines(path), [{"step": 0}, {"step": 1}, {"step": 2}])

    def test_seed_everything(self):
        first = seed_everything(3).integers(1000, size=5).tolist()
        second = seed_everything(3).integers(1000, size=5).tolist()
        self.assertEqual(first, second)


class TestLogging(unittest.TestCase):
    def setUp(self):
        root = logging.getLogger()
        self._saved = (list(root.handlers), root.level)

    def tearDown(self):
        root = logging.getLogger()
        root.handlers, level = self._saved
        root.setLevel(level)

    def test_json_rendering(self):
        """Stdlib log calls come out as one JSON object per line"""
        configure_logging("INFO", json_output=True)
        stream = io.StringIO()
        logging.getLogger().handlers[0].setStream(stream)
        logging.getLogger("fsrel.training").info("step 3: L_total=1.2345")
        logging.getLogger("fsrel.training").debug("hidden")
        lines = stream.getvalue().splitlines()
        self.assertEqual(len(lines), 1)
        record = json.loads(lines[0])
        self.assertEqual(record["event"], "step 3: L_total=1.2345")
        self.assertEqual(record["level"], "info")
        self.assertEqual(record["logger"], "fsrel.training")
        self.assertIn("timestamp", record)


if __name__ == "__main__":
    unittest.main()
