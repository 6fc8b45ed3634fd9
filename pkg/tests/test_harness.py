import pandas as pd
import pytest

from models.data_models import CONDITION_LABELS, GaussianLinear, SimProtocol
from models.errors import ConfigError
from network.generators import generate_er
from network.graph import from_edges
from simulation.harness import load_networks, run_protocol, summarize, true_means_oracle
from utils.file_processor import FileProcessor

from conftest import TRUTH

SMOKE = dict(generator="er", n_nodes=40, mu=0.15, n_networks=2, n_reps=1, p_grid=[0.0, 0.25], q_grid=[0.0], seed=3)


def _expected_rows(records: pd.DataFrame) -> int:
    return len(records[["p", "q", "method"]].drop_duplicates()) * len(CONDITION_LABELS) * 3


class TestTrueMeansOracle:
    def test_complete_graph_at_degree_four(self):
        means = true_means_oracle(generate_er(5, 1.0, seed=0), TRUTH, 0.25)
        assert [means[label] for label in CONDITION_LABELS] == pytest.approx([0.2, 0.65, 0.7, 1.4])

    def test_flat_slopes_give_intercepts(self):
        truth = GaussianLinear(alpha=(1.0, 2.0, 3.0, 4.0), beta=(0.0,) * 4, sigma2=1.0)
        means = true_means_oracle(generate_er(30, 0.2, seed=1), truth)
        assert [means[label] for label in CONDITION_LABELS] == pytest.approx([1.0, 2.0, 3.0, 4.0])

    def test_empty_network(self):
        means = true_means_oracle(generate_er(4, 0.0, seed=0), TRUTH)
        assert means == dict.fromkeys(CONDITION_LABELS, 0.0)


class TestSummarize:
    def test_networks_are_averaged_before_quantiles(self):
        rows = [
            {"network": 0, "rep": 0, "p": 0.0, "q": 0.0, "method": "ht", "condition": "NoExposure", "deviation": 1.0},
            {"network": 0, "rep": 1, "p": 0.0, "q": 0.0, "method": "ht", "condition": "NoExposure", "deviation": 3.0},
            {"network": 1, "rep": 0, "p": 0.0, "q": 0.0, "method": "ht", "condition": "NoExposure", "deviation": 4.0},
        ]
        grid = summarize(pd.DataFrame(rows), ["ht"])
        values = dict(zip(grid["stat"], grid["value"]))
        assert list(grid["stat"]) == ["mean_dev", "q10", "q90"]
        assert values["mean_dev"] == pytest.approx(3.0)
        assert values["q10"] == pytest.approx(2.2)
        assert values["q90"] == pytest.approx(3.8)

    def test_empty_records(self):
        grid = summarize(pd.DataFrame(columns=["p", "q", "method", "condition", "network", "deviation"]), ["ht"])
        assert grid.empty
        assert list(grid.columns) == ["p", "q", "method", "condition", "stat", "value"]


class TestRunProtocol:
    def test_grid_shape(self):
        result = run_protocol(SimProtocol(methods=["ht", "naive"], **SMOKE))
        assert len(result.grid) == _expected_rows(result.records)
        assert set(result.grid["stat"]) == {"mean_dev", "q10", "q90"}
        assert not result.records.empty
        assert set(result.failures.columns) == {"network", "rep", "p", "q", "method", "error"}

    def test_deviation_is_estimate_minus_truth(self):
        result = run_protocol(SimProtocol(methods=["naive"], **SMOKE))
        exact = result.records[(result.records["p"] == 0.0) & (result.records["q"] == 0.0)]
        assert (exact["estimate"] - exact["truth"] == exact["deviation"]).all()

    def test_thread_count_does_not_change_results(self):
        protocol = SimProtocol(methods=["ht", "naive"], **SMOKE)
        serial = run_protocol(protocol, threads=1)
        parallel = run_protocol(protocol, threads=2)
        pd.testing.assert_frame_equal(serial.grid, parallel.grid)
        pd.testing.assert_frame_equal(serial.records, parallel.records)

    def test_em_method(self):
        protocol = SimProtocol(
            methods=["em"],
            fit={"max_iters": 5, "n_starts": 1, "exclude_isolated": True},
            **{**SMOKE, "n_networks": 1, "p_grid": [0.125]},
        )
        result = run_protocol(protocol)
        assert len(result.records) + len(result.failures) > 0
        assert len(result.grid) == _expected_rows(result.records)

    def test_edge_lists_replace_generation(self, tmp_path):
        path = tmp_path / "net.csv"
        FileProcessor().write_edge_list(from_edges(20, [(i, (i + 1) % 20) for i in range(20)]), str(path))
        networks = load_networks(SimProtocol(edge_lists=[str(path)], n_networks=3))
        assert len(networks) == 1
        assert networks[0].n_nodes == 20

    def test_invalid_grid_value(self):
        with pytest.raises(ConfigError):
            FileProcessor.validate_model({"p_grid": [0.25, 1.0]}, SimProtocol, "protocol.json")

    def test_unknown_protocol_key(self):
        with pytest.raises(ConfigError):
            FileProcessor.validate_model({"n_networkz": 2}, SimProtocol)

    def test_default_grid_dimensions(self):
        protocol = SimProtocol(methods=["ht", "naive"], n_networks=3, n_reps=1)
        result = run_protocol(protocol)
        assert len(result.grid) == _expected_rows(result.records)
        if result.failures.empty:
            assert len(result.grid) == 600
