import unittest
import sys
import os
import io
import json
import tempfile
from contextlib import redirect_stderr

# Add repository root to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))
import branchsim
from branchsim import cli
from branchsim.config import EngineSettings
from branchsim.record import COUNT_COLUMNS, RunRecord, emit_csv, emit_plot_data, load, summarize
from branchsim.scenarios import build_eq5


def invoke(*argv):
    """Run the command line, returning (exit code, stdout text)."""
    out = io.StringIO()
    with redirect_stderr(io.StringIO()):
        code = cli.main(list(argv), stdout=out)
    return code, out.getvalue()


class TempDirTest(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = self._tmp.name

    def tearDown(self):
        self._tmp.cleanup()

    def path(self, name):
        return os.path.join(self.tmp, name)


class TestCountCommands(unittest.TestCase):
    def test_eq5_csv(self):
        code, text = invoke("eq5", "--doublings", "5", "--format", "csv")
        self.assertEqual(code, 0)
        lines = text.splitlines()
        self.assertEqual(lines[0], ",".join(COUNT_COLUMNS))
        self.assertEqual(len(lines), 6)
        for j, line in enumerate(lines[1:], start=1):
            t, count_a, count_b, residual, ratio = line.split(",")
            self.assertEqual((count_a, count_b, residual, ratio), (str(2 ** j - 1), str(2 ** j - 1),
                                                                   "1", "1"))

    def test_eq6_summary(self):
        code, text = invoke("eq6", "--doublings", "20")
        self.assertEqual(code, 0)
        record = json.loads(text)
        self.assertEqual(record["summary"]["final_ratio"], "2097151:1048575")
        self.assertEqual(record["summary"]["final_ratio_value"], 2.0)
        self.assertEqual(record["tool_version"], branchsim.__version__)
        self.assertIsNone(record["wall_time"])

    def test_policy(self):
        code, text = invoke("eq5", "--doublings", "3", "--residual-policy", "countAsOne",
                            "--format", "csv")
        self.assertEqual(code, 0)
        self.assertEqual(text.splitlines()[-1].split(",")[-1], "1")

    def test_two_outcome(self):
        code, text = invoke("two-outcome", "--measure-a", "0.6", "--doublings", "6")
        self.assertEqual(code, 0)
        summary = json.loads(text)["summary"]
        self.assertAlmostEqual(summary["time_averaged_ratio"], 1.585, delta=0.05)
        self.assertEqual((summary["ratio_min"], summary["ratio_max"]), (1.0, 2.0))


class TestAggregatedCommands(TempDirTest):
    def test_golden_repeatable(self):
        first = invoke("golden", "--horizon", "40", "--samples-per-decade", "16")
        second = invoke("golden", "--horizon", "40", "--samples-per-decade", "16")
        self.assertEqual(first[0], 0)
        self.assertEqual(first, second)
        record = json.loads(first[1])
        self.assertIn("density_distance", record["summary"])
        self.assertEqual(set(record["summary"]["envelopes"]), {"w25", "w150", "w4300"})
        self.assertIn("logMeasureDeviation", record["columns"])
        self.assertEqual(set(record["summary"]["log_measure_envelopes"]),
                         {"w25", "w150", "w4300"})
        self.assertIsNotNone(record["summary"]["log_measure_envelopes"]["w25"])
        self.assertIsNotNone(record["summary"]["final_log_measure_deviation"])

    def test_timing(self):
        code, text = invoke("golden", "--horizon", "5", "--timing")
        self.assertEqual(code, 0)
        self.assertGreaterEqual(json.loads(text)["wall_time"], 0.0)

    def test_gaussian(self):
        code, text = invoke("gaussian", "--width-a", "40", "--width-b", "10")
        self.assertEqual(code, 0)
        summary = json.loads(text)["summary"]
        self.assertAlmostEqual(summary["count_ratio"], 2.0, delta=0.02)
        self.assertAlmostEqual(summary["lead_periods"], 5.0, delta=1e-9)

    def test_plot_data(self):
        target = self.path("series.dat")
        code, _ = invoke("golden", "--horizon", "20", "--plot-data", target)
        self.assertEqual(code, 0)
        with open(target, encoding="utf-8") as handle:
            lines = handle.read().splitlines()
        self.assertTrue(lines[0].startswith("# t meanM"))
        self.assertGreater(len(lines), 2)

    def test_run_file(self):
        scenario = self.path("golden.json")
        with open(scenario, "w", encoding="utf-8") as handle:
            json.dump(branchsim.build_golden(horizon=10.0).to_dict(), handle)
        code, text = invoke("run", scenario, "--horizon", "12")
        self.assertEqual(code, 0)
        record = json.loads(text)
        self.assertEqual(record["kind"], "run")
        self.assertEqual(record["samples"][-1][0], 12.0)


class TestStreamCommands(unittest.TestCase):
    def test_multiparticle(self):
        code, text = invoke("multiparticle", "--particles", "10", "100", "--events", "10000",
                            "--format", "csv")
        self.assertEqual(code, 0)
        lines = text.splitlines()
        self.assertEqual(len(lines), 3)
        for line in lines[1:]:
            self.assertLess(abs(float(line.split(",")[-1])), 0.05)

    def test_regime(self):
        code, text = invoke("regime", "--threads", "1")
        self.assertEqual(code, 0)
        record = json.loads(text)
        self.assertEqual(record["summary"], {"points": 1, "rebranching_points": 1})
        delay = record["samples"][0][record["columns"].index("delay_factor")]
        self.assertTrue(140.0 <= delay <= 170.0)

    def test_regime_pool(self):
        code, text = invoke("regime", "--mass-g", "1.67e-24", "0.1", "--threads", "2")
        self.assertEqual(code, 0)
        self.assertEqual(json.loads(text)["summary"]["points"], 2)


class TestAnalyze(TempDirTest):
    def test_round_trip(self):
        for argv in (("eq6", "--doublings", "12"), ("golden", "--horizon", "30"),
                     ("two-outcome", "--doublings", "6")):
            target = self.path("record.json")
            code, _ = invoke(*argv, "--output", target)
            self.assertEqual(code, 0)
            with open(target, encoding="utf-8") as handle:
                saved = handle.read()
            code, text = invoke("analyze", target)
            self.assertEqual(code, 0)
            self.assertEqual(text, saved)

    def test_print_config(self):
        code, text = invoke("eq5", "--doublings", "4", "--print-config")
        self.assertEqual(code, 0)
        config = json.loads(text)
        self.assertEqual(config["scenario"]["name"], "eq5")
        for argv in (("regime",), ("multiparticle",), ("golden",), ("gaussian",)):
            code, text = invoke(*argv, "--print-config")
            self.assertEqual(code, 0)
            self.assertIsInstance(json.loads(text), dict)

    def test_malformed_record(self):
        target = self.path("broken.json")
        with open(target, "w", encoding="utf-8") as handle:
            handle.write('{"kind": "eq5"}')
        self.assertEqual(invoke("analyze", target)[0], 2)


class TestExitCodes(TempDirTest):
    def test_usage(self):
        self.assertEqual(invoke()[0], 1)
        self.assertEqual(invoke("eq5", "--doublings", "many")[0], 1)
        self.assertEqual(invoke("gaussian", "--z", "0.3", "--golden")[0], 1)

    def test_invalid_configuration(self):
        self.assertEqual(invoke("eq5", "--doublings", "0")[0], 2)
        self.assertEqual(invoke("gaussian", "--z", "1.5")[0], 2)
        document = build_eq5(3).to_dict()
        document["components"][0]["cells"][0]["m0"] = 0.4
        scenario = self.path("bad.json")
        with open(scenario, "w", encoding="utf-8") as handle:
            json.dump(document, handle)
        self.assertEqual(invoke("run", scenario)[0], 2)
        self.assertEqual(invoke("run", scenario.replace("bad", "missing"))[0], 4)

    def test_non_numeric_g(self):
        document = build_eq5(3).to_dict()
        document["g"] = [2.0]
        scenario = self.path("list_g.json")
        with open(scenario, "w", encoding="utf-8") as handle:
            json.dump(document, handle)
        self.assertEqual(invoke("run", scenario)[0], 2)

    def test_mode_mismatch(self):
        scenario = self.path("eq5.json")
        with open(scenario, "w", encoding="utf-8") as handle:
            json.dump(build_eq5(3).to_dict(), handle)
        self.assertEqual(invoke("run", scenario, "--mode", "aggregated")[0], 2)

    def test_capacity(self):
        scenario = self.path("eq5.json")
        capped = build_eq5(10).with_overrides(settings=EngineSettings(population_cap=10))
        with open(scenario, "w", encoding="utf-8") as handle:
            json.dump(capped.to_dict(), handle)
        self.assertEqual(invoke("run", scenario)[0], 3)


class TestRecord(unittest.TestCase):
    def test_header_only(self):
        record = RunRecord("eq5", "exact", {}, COUNT_COLUMNS, [])
        out = io.StringIO()
        emit_csv(record, out)
        self.assertEqual(out.getvalue(), ",".join(COUNT_COLUMNS) + "\n")
        self.assertEqual(summarize(record), {})

    def test_missing_values(self):
        record = RunRecord("eq5", "exact", {}, COUNT_COLUMNS, [(0.5, 1, 0, 1, None)])
        out = io.StringIO()
        emit_csv(record, out)
        self.assertEqual(out.getvalue().splitlines()[1], "0.5,1,0,1,")
        out = io.StringIO()
        emit_plot_data(record, out)
        self.assertEqual(out.getvalue().splitlines()[1], "0.5 1 0 1 nan")

    def test_unknown_columns(self):
        with self.assertRaises(branchsim.ConfigError):
            summarize(RunRecord("x", "exact", {}, ("a", "b"), []))

    def test_load_errors(self):
        with self.assertRaises(branchsim.ConfigError):
            load(io.StringIO("not json"))
        with self.assertRaises(branchsim.ConfigError):
            load(io.StringIO("[1, 2]"))


if __name__ == "__main__":
    unittest.main(verbosity=2)
