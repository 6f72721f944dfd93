# tests/test_config.py
import unittest

from ale_flow_lab.config import (
    SCENARIOS,
    RunConfig,
    config_hash,
    parse_config,
    render_config,
    scenario_config,
)
from ale_flow_lab.utils import ConfigError


class TestParseConfig(unittest.TestCase):

    def test_values_and_defaults(self):
        # Setup
        text = (
            "# eguchi-hanson flow\n"
            "background = eguchi_hanson\n"
            "a = 2.0   # bolt radius\n"
            "r_max = 40\n"
            "nodes = 121\n"
            "stretch = 1.02\n"
            "initial_data = tt_bump\n"
            "track_h0 = false\n"
            "meanvalue_radii = 1.5, 3\n"
            "decay_window = 1, 30\n"
        )

        # Execute
        config = parse_config(text)

        # Assert
        self.assertEqual(config.background, "eguchi_hanson")
        self.assertEqual(config.a, 2.0)
        self.assertEqual(config.nodes, 121)
        self.assertFalse(config.track_h0)
        self.assertEqual(config.meanvalue_radii, (1.5, 3.0))
        self.assertEqual(config.decay_window, (1.0, 30.0))
        self.assertEqual(config.inner_radius, 2.0)
        self.assertEqual(config.t_max, RunConfig().t_max)

    def test_rendered_config_parses_back(self):
        # Setup
        config = scenario_config("meanvalue-sweep")

        # Execute
        again = parse_config(render_config(config))

        # Assert
        self.assertEqual(again, config)
        self.assertEqual(config_hash(again), config_hash(config))

    def test_hash_changes_with_any_value(self):
        base = RunConfig()
        self.assertNotEqual(config_hash(base), config_hash(RunConfig(amplitude=2e-2)))
        self.assertEqual(len(config_hash(base)), 64)

    def test_inner_radius_defaults(self):
        self.assertEqual(RunConfig(background="euclidean").inner_radius, 0.0)
        self.assertEqual(RunConfig(background="cone", gamma_order=2).inner_radius, 1.0)
        self.assertEqual(RunConfig(background="eguchi_hanson", a=3.0).inner_radius, 3.0)
        self.assertEqual(RunConfig(background="euclidean", r_min=0.5).inner_radius, 0.5)


class TestConfigErrors(unittest.TestCase):

    def _assert_rejected(self, text, key):
        with self.assertRaises(ConfigError) as context:
            parse_config(text)
        self.assertEqual(context.exception.key, key)
        return context.exception

    def test_unknown_key_names_the_line(self):
        error = self._assert_rejected("n = 4\ncolour = red\n", "colour")
        self.assertEqual(error.line, 2)
        self.assertIn("line 2", str(error))

    def test_repeated_key(self):
        self._assert_rejected("n = 4\nn = 5\n", "n")

    def test_unparsable_value(self):
        error = self._assert_rejected("nodes = many\n", "nodes")
        self.assertEqual(error.line, 1)

    def test_missing_equals_sign(self):
        with self.assertRaises(ConfigError) as context:
            parse_config("background euclidean\n")
        self.assertEqual(context.exception.line, 1)

    def test_preconditions(self):
        cases = (
            ("background = torus\n", "background"),
            ("initial_data = sawtooth\n", "initial_data"),
            ("n = 2\n", "n"),
            ("safety = 1.5\n", "safety"),
            ("delta_ball = 0\n", "delta_ball"),
            ("schedule_factor = 1\n", "schedule_factor"),
            ("decay_window = 10, 1\n", "decay_window"),
            ("meanvalue_radii = 1, -2\n", "meanvalue_radii"),
            ("track_h0 = maybe\n", "track_h0"),
            ("nodes = 5\n", "nodes"),
            ("background = eguchi_hanson\nn = 5\n", "n"),
            ("background = cone\ngamma_order = 0\n", "gamma_order"),
            ("background = cone\ngamma_order = 2\nr_min = 0\n", "r_min"),
            ("initial_data = kernel\n", "initial_data"),
            ("initial_data = bolt_bump\n", "initial_data"),
            ("meanvalue_ratio = 0.5\n", "meanvalue_ratio"),
        )
        for text, key in cases:
            with self.subTest(text=text):
                self._assert_rejected(text, key)


class TestScenarios(unittest.TestCase):

    def test_every_scenario_validates(self):
        for name in SCENARIOS:
            with self.subTest(scenario=name):
                config = scenario_config(name, output_dir="/tmp/out")
                self.assertEqual(config.scenario, name)
                self.assertEqual(config.output_dir, "/tmp/out")

    def test_meanvalue_sweep_reads_each_radius_at_its_own_time(self):
        # Execute
        config = scenario_config("meanvalue-sweep")

        # Assert
        self.assertEqual(config.meanvalue_ratio, 4.0)
        self.assertGreaterEqual(config.t_max, config.meanvalue_ratio * max(config.meanvalue_radii) ** 2)

    def test_unknown_scenario(self):
        with self.assertRaises(ConfigError) as context:
            scenario_config("no-such-scenario")
        self.assertEqual(context.exception.key, "scenario")


if __name__ == '__main__':
    unittest.main()
