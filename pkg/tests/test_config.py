from __future__ import annotations

from dataclasses import replace
from pathlib import Path
import tempfile
import unittest

from fpcnet.config import (
    RESOLVED_FILENAME,
    RunConfig,
    env_overrides,
    load_config_file,
    parse_config_text,
    resolve_config,
)
from fpcnet.errors import ConfigError


class ConfigParsingTests(unittest.TestCase):
    def test_values_are_coerced_to_field_types(self) -> None:
        entries = parse_config_text(
            "# comment line\nseed = 7\nmutual = off  # trailing\nq = 0.99\nwidths = 4,6,8,12\nloss_mode = classification\n"
        )
        self.assertEqual(
            entries,
            {"seed": 7, "mutual": False, "q": 0.99, "widths": (4, 6, 8, 12), "loss_mode": "classification"},
        )

    def test_unknown_key_is_rejected(self) -> None:
        with self.assertRaisesRegex(ConfigError, "Unknown config key 'learning_rate'"):
            parse_config_text("learning_rate = 0.1\n")

    def test_bad_values_are_rejected(self) -> None:
        with self.assertRaises(ConfigError):
            parse_config_text("seed = seven\n")
        with self.assertRaises(ConfigError):
            parse_config_text("mutual = maybe\n")
        with self.assertRaises(ConfigError):
            parse_config_text("just a line\n")

    def test_missing_file(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigError):
                load_config_file(Path(tmp) / "absent.conf")


class ConfigPrecedenceTests(unittest.TestCase):
    def test_flags_beat_file_beat_environment(self) -> None:
        environ = {"FPCNET_SEED": "1", "FPCNET_BUDGET": "50", "FPCNET_MAX_K": "77"}
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "run.conf"
            path.write_text("seed = 2\nbudget = 60\n", encoding="utf-8")
            cfg = resolve_config({"seed": 3, "q": None}, path, environ)
        self.assertEqual(cfg.seed, 3)
        self.assertEqual(cfg.budget, 60)
        self.assertEqual(cfg.max_k, 77)
        self.assertEqual(cfg.q, RunConfig().q)

    def test_environment_ignores_unrelated_variables(self) -> None:
        entries = env_overrides({"FPCNET_SLOW_TESTS": "1", "HOME": "/root", "FPCNET_EPOCHS1": "3"})
        self.assertEqual(entries, {"epochs1": 3})

    def test_defaults_without_sources(self) -> None:
        self.assertEqual(resolve_config(environ={}), RunConfig())

    def test_invalid_combinations_surface_as_config_errors(self) -> None:
        with self.assertRaises(ConfigError):
            resolve_config({"batch_size": 1}, environ={})
        with self.assertRaises(ConfigError):
            resolve_config({"prewarp": "pose"}, environ={})
        with self.assertRaises(ConfigError):
            resolve_config({"input_height": 121}, environ={})
        with self.assertRaises(ConfigError):
            resolve_config({"sampler_scale_range": "0.8"}, environ={}).sampler_config()


class ResolvedConfigTests(unittest.TestCase):
    def test_resolved_text_round_trips(self) -> None:
        cfg = replace(RunConfig(), seed=11, mutual=False, eps_list=(2.0, 4.5), lr=3e-4, photometric=True)
        entries = parse_config_text(cfg.resolved_text(["command: train"]))
        self.assertEqual(replace(RunConfig(), **entries), cfg)

    def test_write_resolved(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            path = RunConfig().write_resolved(Path(tmp) / "run", ["command: eval"])
            text = path.read_text(encoding="utf-8")
        self.assertEqual(path.name, RESOLVED_FILENAME)
        self.assertTrue(text.startswith("# fpcnet resolved configuration\n# command: eval\n"))
        self.assertIn("seed = 0\n", text)

    def test_derived_configs(self) -> None:
        cfg = RunConfig()
        self.assertIsNone(cfg.photometric_config())
        self.assertIsNotNone(replace(cfg, photometric=True).train_config().photometric)
        self.assertEqual(cfg.detector_config().widths, (8, 12, 20, 48))
        self.assertEqual(cfg.ransac_config().seed, cfg.seed)


if __name__ == "__main__":
    unittest.main()
