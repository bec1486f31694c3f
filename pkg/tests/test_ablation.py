"""Tests for ablation grids and sweeps."""
import pytest

from natlab.errors import ConfigError
from natlab.services.ablation import (
    COLUMNS,
    RESULTS_FILE,
    expand_grid,
    load_ablation,
    read_grid_file,
    run_ablation,
)
from tests.conftest import random_pairs


def write_grid(tmp_path, text):
    path = tmp_path / "grid.txt"
    path.write_text(text)
    return str(path)


class TestGridFile:
    def test_parse(self, tmp_path):
        grid = read_grid_file(write_grid(tmp_path, "# sweep\nlambda = 0.1, 1\niterations = 1, 4 # cheap\nvariant = cmlm\n"))
        assert grid == {"lambda": [0.1, 1.0], "iterations": [1, 4], "variant": ["cmlm"]}

    @pytest.mark.parametrize("text", [
        "alpha = 0.9\n",
        "variant = nope\n",
        "iterations = four\n",
        "lambda 0.1\n",
        "lambda = \n",
    ])
    def test_invalid(self, tmp_path, text):
        with pytest.raises(ConfigError):
            read_grid_file(write_grid(tmp_path, text))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_grid_file(str(tmp_path / "missing.txt"))


class TestExpandGrid:
    def test_missing_axes_take_base_values(self, tiny_experiment):
        points = expand_grid({"lambda": [0.1, 0.5]}, tiny_experiment)
        assert points == [
            {"variant": "mvsr", "lambda": 0.1, "dropout_average": 0.1, "iterations": 2},
            {"variant": "mvsr", "lambda": 0.5, "dropout_average": 0.1, "iterations": 2},
        ]

    def test_product_size(self, tiny_experiment):
        grid = {"lambda": [0.1, 0.3], "iterations": [1, 4, 10], "variant": ["cmlm", "mvsr"]}
        assert len(expand_grid(grid, tiny_experiment)) == 12


class TestRunAblation:
    def test_iterations_share_one_training(self, tiny_experiment, tiny_pairs, tiny_vocab, tmp_path):
        df = run_ablation(
            {"iterations": [1, 2]}, tiny_experiment, tiny_pairs, random_pairs(4, seed=7), tiny_vocab, str(tmp_path),
        )
        assert list(df.columns) == COLUMNS
        assert df["iterations"].tolist() == [1, 2]
        assert (df["status"] == "ok").all()
        assert df["bleu"].between(0.0, 100.0).all()
        assert df["length_accuracy"].nunique() == 1
        assert len([p for p in tmp_path.iterdir() if p.is_dir()]) == 1

        saved = load_ablation(str(tmp_path / RESULTS_FILE))
        assert saved["iterations"].tolist() == [1, 2]

    def test_failed_run_becomes_rows(self, tiny_experiment, tiny_pairs, tiny_vocab, tmp_path):
        config = tiny_experiment.with_overrides(tokens_per_batch=1)
        df = run_ablation({"iterations": [1, 2]}, config, tiny_pairs, tiny_pairs[:2], tiny_vocab, str(tmp_path))
        assert (df["status"] == "failed").all()
        assert df["error"].str.startswith("ConfigError").all()
        assert df["bleu"].isna().all()

    def test_unknown_axis(self, tiny_experiment, tiny_pairs, tiny_vocab, tmp_path):
        with pytest.raises(ConfigError):
            run_ablation({"alpha": [0.9]}, tiny_experiment, tiny_pairs, tiny_pairs, tiny_vocab, str(tmp_path))

    def test_missing_table(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_ablation(str(tmp_path / RESULTS_FILE))
