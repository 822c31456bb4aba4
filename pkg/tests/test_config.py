import os
import tempfile
import unittest

from edgeslam.config import DEFAULT_CONFIG, merge_config, read_config


class TestReadConfig(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "edgeslam.cfg")

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, text):
        with open(self.path, "w") as handle:
            handle.write(text)

    def test_defaults_without_file(self):
        self.assertEqual(read_config(None), DEFAULT_CONFIG)

    def test_key_value_lines(self):
        self.write("# overrides\nkf.rot_deg=20\nloop.enabled = false\nba.residual_form=literal\n")
        config = read_config(self.path)
        self.assertEqual(config["kf.rot_deg"], 20.0)
        self.assertIsInstance(config["kf.rot_deg"], float)
        self.assertFalse(config["loop.enabled"])
        self.assertEqual(config["ba.residual_form"], "literal")

    def test_yaml_mapping(self):
        self.write("flow.window: 15\nransac.seed: 7\n")
        config = read_config(self.path)
        self.assertEqual(config["flow.window"], 15)
        self.assertEqual(config["ransac.seed"], 7)

    def test_unknown_key_ignored_with_warning(self):
        self.write("no.such_key=3\n")
        with self.assertLogs("edgeslam.config", level="WARNING"):
            config = read_config(self.path)
        self.assertNotIn("no.such_key", config)

    def test_non_mapping_rejected(self):
        self.write("- just\n- a list\n")
        with self.assertRaises(ValueError):
            read_config(self.path)

    def test_intersection_tolerance_follows_epiline_tolerance(self):
        self.assertEqual(merge_config({"flow.epiline_tol": 1.5})["flow.intersection_tol"], 3.0)
        config = merge_config({"flow.epiline_tol": 1.5, "flow.intersection_tol": 5.0})
        self.assertEqual(config["flow.intersection_tol"], 5.0)

    def test_scientific_notation_string(self):
        self.assertEqual(merge_config({"ba.initial_damping": "1e-4"})["ba.initial_damping"], 1e-4)


if __name__ == "__main__":
    unittest.main()
