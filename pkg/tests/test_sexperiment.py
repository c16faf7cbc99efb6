import math
import os

import numpy as np
import pytest

from speckgeist import sio
from speckgeist.sconfig import ExperimentConfig
from speckgeist.sexperiment import (
    IMAGE_ROSTER,
    METRICS_COLUMNS,
    PHASE_ROSTER,
    SWEEP_COLUMNS,
    MetricsRow,
    SweepRow,
    compare,
    gridsearch,
    load_or_build_index,
    prepare_data,
    relative_error,
    relative_error_raw,
    run_experiment,
    run_robustness_sweep,
    summarize,
    sweep_trend,
    unit_flux_modulus,
)
from speckgeist.sutils import ConfigurationError, InvalidArgument


@pytest.fixture
def tiny_config(tmp_path):
    return ExperimentConfig(
        image_side=16,
        n_frames=2,
        photons_object=1e5,
        photons_star=1e4,
        recovery_radius=5.0,
        inner_radius=3.0,
        max_iter=5,
        output_dir=str(tmp_path / "out"),
    )


def test_relative_error_ignores_shift_flip_and_scale(toy_image):
    assert relative_error(toy_image, toy_image) == pytest.approx(0.0, abs=1e-6)
    assert relative_error(2.0 * toy_image, toy_image) == pytest.approx(0.0, abs=1e-6)
    assert relative_error(np.roll(toy_image, (3, -5), axis=(0, 1)), toy_image) == pytest.approx(0.0, abs=1e-6)
    assert relative_error(np.flip(toy_image), toy_image) == pytest.approx(0.0, abs=1e-6)
    assert relative_error(toy_image.reshape(-1), toy_image) == pytest.approx(0.0, abs=1e-6)
    assert relative_error(np.zeros((16, 16)), toy_image) == 1.0
    with pytest.raises(InvalidArgument):
        relative_error(toy_image, np.zeros((16, 16)))
    with pytest.raises(InvalidArgument):
        relative_error(np.ones((8, 8)), toy_image)


def test_relative_error_is_at_most_the_raw_error(toy_image, rng):
    noisy = toy_image + 0.2 * rng.standard_normal(toy_image.shape)
    assert relative_error(noisy, toy_image) <= relative_error_raw(noisy, toy_image) + 1e-12
    assert relative_error_raw(np.roll(toy_image, 1, axis=0), toy_image) > 0.05


def _row(label, re, seconds, termination):
    return MetricsRow(label, 0.5, re, re, 0.9, 4, seconds, seconds / 4, 1.5, termination)


def test_summarize():
    rows = [_row("GN", 0.2, 2.0, "obj+step"), _row("GN", 0.4, 4.0, "max_iter"),
            _row("GN", 0.3, 3.0, "obj+step")]
    mean = summarize(rows)
    assert mean.label == "GN"
    assert mean.min_re == pytest.approx(0.3)
    assert mean.total_seconds == pytest.approx(3.0)
    assert mean.termination == "obj+step"
    with pytest.raises(InvalidArgument):
        summarize([])


def test_index_cache_is_reused_and_repaired(tiny_config):
    index, path = load_or_build_index(tiny_config)
    assert os.path.basename(path) == "index_N16_R5_r3.bidx"
    again, _ = load_or_build_index(tiny_config)
    np.testing.assert_array_equal(again.triplets, index.triplets)
    with open(path, "wb") as outfile:
        outfile.write(b"junk")
    repaired, _ = load_or_build_index(tiny_config)
    assert repaired.m == index.m
    assert sio.load_index(path).m == index.m


def test_prepared_warm_starts(tiny_config):
    index, _ = load_or_build_index(tiny_config)
    prepared = prepare_data(tiny_config, index)
    assert prepared.truth.sum() == pytest.approx(1.0)
    assert prepared.o_init.sum() == pytest.approx(1.0, rel=1e-9)
    bump = tiny_config.epsilon * prepared.o_init.sum() / 256
    assert prepared.o_proj.min() >= bump - 1e-15
    assert prepared.o_proj.sum() == pytest.approx(
        prepared.o_init.sum() * (1.0 + tiny_config.epsilon), rel=1e-9
    )
    assert 0.0 <= prepared.initial_re <= 1.0
    assert prepared.phi0.shape == (index.n,)
    assert prepared.data.modulus[0] == pytest.approx(1.0)


def test_unit_flux_modulus():
    np.testing.assert_allclose(unit_flux_modulus([4.0, 2.0, 0.0]), [1.0, 0.5, 0.0])
    with pytest.raises(InvalidArgument):
        unit_flux_modulus([0.0, 1.0])


def test_run_experiment_writes_its_files(tiny_config):
    cfg = tiny_config.replace(n_repeats=2)
    rows = run_experiment(cfg)
    assert len(rows) == 2
    run_dir = os.path.join(cfg.output_dir, "E1phi_GN_none", "run0")
    for name in ("report.csv", "solution.pgm", "solution.bimg"):
        assert os.path.exists(os.path.join(run_dir, name))
    assert not os.path.exists(os.path.join(run_dir, "gradient.bimg"))
    summary = sio.read_csv(os.path.join(cfg.output_dir, "summary.csv"))
    assert len(summary) == 3
    assert tuple(summary[0]) == METRICS_COLUMNS
    report = sio.read_csv(os.path.join(run_dir, "report.csv"))
    assert report[0]["rof"] == 1.0
    assert len(report) == rows[0].iterations + 1
    metadata, content = sio.read_notes(os.path.join(cfg.output_dir, "experiment.md"))
    assert metadata["n_repeats"] == 2
    assert "E1phi_GN_none" in content


def test_runs_are_reproducible(tiny_config, tmp_path):
    a = run_experiment(tiny_config.replace(output_dir=str(tmp_path / "a")))[0]
    b = run_experiment(tiny_config.replace(output_dir=str(tmp_path / "b")))[0]
    for name in ("min_rof", "min_re", "min_re_raw", "initial_re", "iterations", "termination"):
        assert getattr(a, name) == getattr(b, name)
    image_a = sio.read_bimg(str(tmp_path / "a" / "E1phi_GN_none" / "run0" / "solution.bimg"))
    image_b = sio.read_bimg(str(tmp_path / "b" / "E1phi_GN_none" / "run0" / "solution.bimg"))
    np.testing.assert_array_equal(image_a, image_b)


def test_projected_image_run_with_debug_dumps(tiny_config):
    cfg = tiny_config.replace(
        formulation="E2obj", method="PGN", regularizer="total_variation", alpha=1.0,
        debug_dumps=True,
    )
    (row,) = run_experiment(cfg)
    assert row.label == "E2obj_PGN_total_variation"
    assert row.min_rof <= 1.0
    run_dir = os.path.join(cfg.output_dir, cfg.label, "run0")
    image = sio.read_bimg(os.path.join(run_dir, "solution.bimg"))
    assert image.min() >= 0.0
    assert sio.read_bimg(os.path.join(run_dir, "gradient.bimg")).size == 256


def test_invalid_combination_is_rejected_before_running(tiny_config):
    with pytest.raises(ConfigurationError):
        run_experiment(tiny_config.replace(formulation="E1phi", method="PGN"))
    assert not os.path.exists(os.path.join(tiny_config.output_dir, "summary.csv"))


def test_compare_on_a_short_roster(tiny_config):
    roster = [PHASE_ROSTER[2], IMAGE_ROSTER[6]]
    summary = compare(tiny_config, roster)
    assert [row.label for row in summary] == ["E1phi GN", "E1obj PGN-TV"]
    assert len(sio.read_csv(os.path.join(tiny_config.output_dir, "summary.csv"))) == 2


def test_single_value_sweep(tiny_config):
    (row,) = run_robustness_sweep(tiny_config, "fried", values=(10.0,))
    assert row.value == 10.0
    assert all(math.isfinite(getattr(row, name)) for name in SWEEP_COLUMNS)
    table = sio.read_csv(os.path.join(tiny_config.output_dir, "sweep_fried.csv"))
    assert tuple(table[0]) == SWEEP_COLUMNS
    assert os.path.isdir(os.path.join(tiny_config.output_dir, "fried_10"))
    with pytest.raises(InvalidArgument):
        run_robustness_sweep(tiny_config, "wind")


def test_sweep_trend():
    rows = [SweepRow(v, 0.1 * v, 0.1 * v, v, 1.0 / v, v * v, -v) for v in (1.0, 2.0, 3.0, 4.0)]
    assert sweep_trend(rows, "gn_e1phi") == pytest.approx(1.0)
    assert sweep_trend(rows, "gn_e2phi") == pytest.approx(-1.0)
    assert math.isnan(sweep_trend(rows[:1], "gn_e1phi"))


def test_gridsearch(tiny_config):
    cfg = tiny_config.replace(formulation="E1obj", method="PGD", regularizer="discrete_gradient",
                              max_iter=3)
    scores = gridsearch(cfg, alphas=(1e-3, 1e-1))
    assert sorted(alpha for alpha, _ in scores) == [1e-3, 1e-1]
    assert scores[0][1] <= scores[1][1]
    assert len(sio.read_csv(os.path.join(cfg.output_dir, "gridsearch.csv"))) == 2
    with pytest.raises(InvalidArgument):
        gridsearch(tiny_config)
