import numpy as np
import pytest

from twinattack import telemetry as tel
from twinattack.errors import DataError


@pytest.fixture(scope="module")
def series():
    return tel.generate_series(tel.default_schema(), 1000, 0.1, seed=42)


class TestSchema:
    def test_fuelrate_in_fuel_subsystem(self):
        schema = tel.default_schema()
        spec = schema.channels[schema.index("FuelRate")]
        assert spec.subsystem == "fuel"

    def test_exactly_15_channels(self):
        assert len(tel.default_schema().channels) == 15

    def test_deterministic(self):
        assert tel.default_schema() == tel.default_schema()

    def test_subsystems_all_present_and_nonempty(self):
        schema = tel.default_schema()
        seen = {c.subsystem for c in schema.channels}
        assert seen == set(tel.SUBSYSTEMS)

    def test_names_unique_ranges_ordered(self):
        schema = tel.default_schema()
        names = schema.names
        assert len(set(names)) == 15
        for c in schema.channels:
            assert c.nominal_range[0] < c.nominal_range[1]

    def test_scenario1_is_the_fixed_triple(self):
        assert tel.SCENARIO1.name == "scenario1"
        assert set(tel.SCENARIO1.channels) == {"FuelRate", "AccelPetalPos", "TrSelGr"}
        tel.SCENARIO1.validate(tel.default_schema())

    def test_scenario_unknown_channel_rejected(self):
        scen = tel.ScenarioSpec("bad", ("NoSuchChannel",))
        with pytest.raises(DataError):
            scen.validate(tel.default_schema())


class TestGenerate:
    def test_shape_and_labels(self, series):
        assert series.values.shape == (1000, 15)
        assert all(lab == tel.NORMAL for lab in series.labels)

    def test_seed_determinism(self, series):
        again = tel.generate_series(tel.default_schema(), 1000, 0.1, seed=42)
        assert np.array_equal(series.values, again.values)
        assert np.array_equal(series.timestamps, again.timestamps)

    def test_different_seed_differs(self, series):
        other = tel.generate_series(tel.default_schema(), 1000, 0.1, seed=43)
        assert not np.array_equal(series.values, other.values)

    @pytest.mark.parametrize("seed", [0, 1, 99])
    def test_values_within_nominal_ranges(self, seed):
        schema = tel.default_schema()
        s = tel.generate_series(schema, 2000, 0.5, seed=seed)
        for j, c in enumerate(schema.channels):
            col = s.values[:, j]
            assert col.min() >= c.nominal_range[0]
            assert col.max() <= c.nominal_range[1]

    def test_gear_is_integer_and_piecewise_constant(self, series):
        g = series.channel("TrSelGr")
        assert np.array_equal(g, np.round(g))
        # piecewise constant: far fewer change points than timesteps
        assert np.sum(np.diff(g) != 0) < 0.05 * len(g)

    def test_timestamps_uniform(self, series):
        steps = np.diff(series.timestamps)
        assert np.all(steps > 0)
        assert np.abs(steps - 0.1).max() < 1e-9

    def test_rejects_bad_args(self):
        schema = tel.default_schema()
        with pytest.raises(DataError):
            tel.generate_series(schema, 1, 0.1, seed=0)
        with pytest.raises(DataError):
            tel.generate_series(schema, 100, 0.0, seed=0)
        with pytest.raises(DataError):
            tel.generate_series(schema, 100, -1.0, seed=0)


class TestInjectFault:
    def test_labels_set_on_fault_window(self, series):
        faulted = tel.inject_fault(
            series, tel.FaultSpec("offset", "FuelRate", 100, 200, 4.0))
        assert all(lab == tel.ANOMALY for lab in faulted.labels[100:200])
        assert all(lab == tel.NORMAL for lab in faulted.labels[:100])
        assert all(lab == tel.NORMAL for lab in faulted.labels[200:])

    def test_locality_bit_exact(self, series):
        faulted = tel.inject_fault(
            series, tel.FaultSpec("offset", "FuelRate", 100, 200, 4.0))
        j = series.schema.index("FuelRate")
        mask = np.ones_like(series.values, dtype=bool)
        mask[100:200, j] = False
        assert np.array_equal(series.values[mask], faulted.values[mask])

    def test_offset_mean_shift_matches_magnitude(self, series):
        mag = 4.0
        faulted = tel.inject_fault(
            series, tel.FaultSpec("offset", "FuelRate", 100, 200, mag))
        j = series.schema.index("FuelRate")
        shift = (faulted.values[100:200, j] - series.values[100:200, j]).mean()
        expected = mag * tel.channel_noise_scale("FuelRate")
        assert abs(shift - expected) <= 0.1 * expected

    def test_stuck_holds_start_value(self, series):
        faulted = tel.inject_fault(series, tel.FaultSpec("stuck", "WheelSpeed", 50, 80))
        j = series.schema.index("WheelSpeed")
        assert np.all(faulted.values[50:80, j] == series.values[50, j])

    def test_drift_ramps_linearly(self, series):
        mag = 3.0
        faulted = tel.inject_fault(
            series, tel.FaultSpec("drift", "EngineSpeed", 10, 20, mag))
        j = series.schema.index("EngineSpeed")
        delta = faulted.values[10:20, j] - series.values[10:20, j]
        full = mag * tel.channel_noise_scale("EngineSpeed")
        expected = full * np.arange(10) / 9
        assert np.allclose(delta, expected, rtol=0, atol=1e-9)

    def test_scale_multiplies_deviation_from_mean(self, series):
        faulted = tel.inject_fault(
            series, tel.FaultSpec("scale", "EngineLoad", 0, 1000, 2.0))
        j = series.schema.index("EngineLoad")
        mean = series.values[:, j].mean()
        expected = mean + 2.0 * (series.values[:, j] - mean)
        assert np.allclose(faulted.values[:, j], expected, rtol=1e-12)

    def test_rejects_unknown_channel_and_bad_ranges(self, series):
        with pytest.raises(DataError):
            tel.inject_fault(series, tel.FaultSpec("offset", "Bogus", 0, 10, 1.0))
        with pytest.raises(DataError):
            tel.inject_fault(series, tel.FaultSpec("offset", "FuelRate", 10, 10, 1.0))
        with pytest.raises(DataError):
            tel.inject_fault(series, tel.FaultSpec("offset", "FuelRate", 0, 2000, 1.0))

    def test_gear_fault_guard(self, series):
        fault = tel.FaultSpec("stuck", "TrSelGr", 0, 10)
        with pytest.raises(DataError):
            tel.inject_fault(series, fault)
        faulted = tel.inject_fault(series, fault, allow_gear_fault=True)
        assert all(lab == tel.ANOMALY for lab in faulted.labels[:10])

    def test_bad_fault_specs_rejected(self):
        with pytest.raises(DataError):
            tel.FaultSpec("offset", "FuelRate", 0, 10, 0.0)
        with pytest.raises(DataError):
            tel.FaultSpec("wобble", "FuelRate", 0, 10, 1.0)


class TestCsv:
    def test_round_trip_lossless(self, series, tmp_path):
        path = tmp_path / "series.csv"
        tel.write_csv(series, path)
        back = tel.read_csv(path)
        assert np.array_equal(back.values, series.values)
        assert np.array_equal(back.timestamps, series.timestamps)
        assert back.labels == series.labels

    def test_round_trip_with_labels(self, series, tmp_path):
        faulted = tel.inject_fault(series, tel.FaultSpec("offset", "FuelRate", 5, 9, 2.0))
        path = tmp_path / "faulted.csv"
        tel.write_csv(faulted, path)
        assert tel.read_csv(path).labels == faulted.labels

    def test_handwritten_fixture(self, tmp_path):
        schema = tel.default_schema()
        cells = [1.5, 2.25, 86.0, 300.0, 40.0, 3.0, 1500.0, 78.0,
                 1.3, 7.25, 64.0, 6.5, 200.0, 5.0, 50.0]
        path = tmp_path / "hand.csv"
        rows = ["timestamp,label," + ",".join(schema.names),
                "0.0,NORMAL," + ",".join(str(x) for x in cells),
                "0.5,ANOMALY," + ",".join(str(x + 1) for x in cells)]
        path.write_text("\n".join(rows) + "\n")
        s = tel.read_csv(path)
        assert s.values.shape == (2, 15)
        assert np.array_equal(s.values[0], np.array(cells))
        assert np.array_equal(s.values[1], np.array(cells) + 1)
        assert s.labels == (tel.NORMAL, tel.ANOMALY)
        assert s.timestamps[1] == 0.5

    def test_missing_channel_column_rejected(self, tmp_path):
        schema = tel.default_schema()
        path = tmp_path / "short.csv"
        header = "timestamp,label," + ",".join(schema.names[:-1])
        path.write_text(header + "\n")
        with pytest.raises(DataError, match="header"):
            tel.read_csv(path)

    def test_ragged_row_rejected(self, series, tmp_path):
        path = tmp_path / "ragged.csv"
        tel.write_csv(series.slice(0, 3), path)
        lines = path.read_text().splitlines()
        lines[2] = ",".join(lines[2].split(",")[:-2])
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="fields"):
            tel.read_csv(path)

    def test_unknown_label_rejected(self, series, tmp_path):
        path = tmp_path / "label.csv"
        tel.write_csv(series.slice(0, 3), path)
        text = path.read_text().replace("NORMAL", "WEIRD", 1)
        path.write_text(text)
        with pytest.raises(DataError, match="label"):
            tel.read_csv(path)

    def test_non_monotone_timestamps_rejected(self, series, tmp_path):
        path = tmp_path / "mono.csv"
        tel.write_csv(series.slice(0, 3), path)
        lines = path.read_text().splitlines()
        lines[2], lines[3] = lines[3], lines[2]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError):
            tel.read_csv(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(DataError):
            tel.read_csv(path)
