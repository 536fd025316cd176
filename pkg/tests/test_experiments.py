import numpy as np

from spi_patterns.experiments import SweepConfig, mean_by, run_sweep, write_rows_csv
from spi_patterns.io import generate_phantoms
from spi_patterns.regularizers import HuberTV, TotalVariation
from spi_patterns.trainer import TrainConfig


def test_sweep_rows_and_csv(tmp_path):
    train = generate_phantoms(8, (16, 16), seed=1)
    test = generate_phantoms(3, (16, 16), seed=2)
    cfg = SweepConfig(Ms=(8,), families=("gaussian", "sh", "ste"), grid_points=3,
                      train=TrainConfig(epochs=1, batch_size=4))
    rows = run_sweep(train, test, HuberTV(), cfg)
    assert [r["pattern"] for r in rows] == ["gaussian", "sh", "ste"]
    assert all(r["regulariser"] == "huber" and r["failed"] == 0 for r in rows)
    write_rows_csv(rows, tmp_path / "a.csv")
    write_rows_csv(run_sweep(train, test, HuberTV(), cfg), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    means = mean_by(rows, "pattern")
    assert set(means) == {("gaussian",), ("sh",), ("ste",)}


def test_sweep_tv_evaluation():
    train = generate_phantoms(8, (16, 16), seed=1)
    test = generate_phantoms(2, (16, 16), seed=2)
    cfg = SweepConfig(Ms=(8,), families=("sh", "ste"), grid_points=3, train=TrainConfig(epochs=1, batch_size=4))
    rows = run_sweep(train, test, HuberTV(), cfg, TotalVariation())
    assert all(r["regulariser"] == "tv" and np.isfinite(r["mean_psnr"]) for r in rows)
