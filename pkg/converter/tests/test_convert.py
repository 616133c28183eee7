"""Converter acceptance: analytic-spectrum fixtures through the full path."""

import csv
import os

import h5py
import numpy as np
import pytest

from hdsconvert import (
    ConversionError,
    ConversionSpec,
    convert,
    load_anthropometry,
    magnitudes_from_impulse_responses,
    validate_roundtrip,
)
from hdsconvert.cli import main as cli_main
from hdsconvert.convert import interaural_polar_to_cartesian, spherical_to_cartesian
from hrtfproto.dataio import ANTHRO_NAMES, read_dataset

FS = 48000.0


def analytic_two_tap_db(frequencies, a=0.5):
    """|1 - a z^-1| in dB at the given frequencies for sampling rate FS."""
    return 20 * np.log10(np.abs(1 - a * np.exp(-2j * np.pi * frequencies / FS)))


def write_sofa(path, num_positions=6, n_taps=128, scale_left=1.0, scale_right=0.8):
    """Minimal SimpleFreeFieldHRIR-layout fixture with two-tap responses."""
    rng = np.random.default_rng(0)
    az = np.linspace(0, 300, num_positions)
    el = np.linspace(-30, 30, num_positions)
    source = np.stack([az, el, np.full(num_positions, 1.2)], axis=1)
    irs = np.zeros((num_positions, 2, n_taps))
    irs[:, 0, 0], irs[:, 0, 1] = scale_left, -0.5 * scale_left
    irs[:, 1, 0], irs[:, 1, 1] = scale_right, -0.5 * scale_right
    with h5py.File(path, "w") as f:
        f.create_dataset("Data.IR", data=irs)
        f.create_dataset("Data.SamplingRate", data=np.array([FS]))
        sp = f.create_dataset("SourcePosition", data=source)
        sp.attrs["Type"] = np.bytes_("spherical")
        sp.attrs["Units"] = np.bytes_("degree, degree, metre")
    return path


def write_anthro_csv(path, subject_ids, drop_field_for=()):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "ear"] + list(ANTHRO_NAMES))
        rng = np.random.default_rng(1)
        for sid in subject_ids:
            for ear in ("left", "right"):
                values = list(np.round(rng.uniform(0.5, 20.0, 23), 3))
                if sid in drop_field_for and ear == "left":
                    values[5] = ""  # missing entry: incomplete anthropometry
                writer.writerow([sid, ear] + values)
    return path


def test_magnitudes_match_analytic_spectrum(tmp_path):
    freqs = np.linspace(0, 20000, 64)
    irs = np.zeros((3, 2, 256))
    irs[:, :, 0], irs[:, :, 1] = 1.0, -0.5
    mags = magnitudes_from_impulse_responses(irs, FS, freqs)
    expected = analytic_two_tap_db(freqs)
    for ear in (0, 1):
        assert np.abs(mags[0, ear * 64:(ear + 1) * 64] - expected).max() < 0.1


def test_sample_rate_guard():
    freqs = np.linspace(0, 20000, 16)
    with pytest.raises(ConversionError, match="sample rate"):
        magnitudes_from_impulse_responses(np.zeros((1, 2, 64)), 30000.0, freqs)


def test_coordinate_conversions():
    xyz = spherical_to_cartesian(np.array([0.0]), np.array([0.0]), 2.0)
    np.testing.assert_allclose(xyz, [[2.0, 0.0, 0.0]], atol=1e-12)
    xyz = spherical_to_cartesian(np.array([90.0]), np.array([0.0]), 1.0)
    np.testing.assert_allclose(xyz, [[0.0, 1.0, 0.0]], atol=1e-12)  # +y is left
    xyz = interaural_polar_to_cartesian(np.array([90.0]), np.array([0.0]), 1.0)
    np.testing.assert_allclose(xyz, [[0.0, -1.0, 0.0]], atol=1e-12)  # right ear side


def test_convert_sofa_fixture_end_to_end(tmp_path):
    paths = [write_sofa(tmp_path / f"subj{i}.sofa", scale_left=1.0 + 0.1 * i)
             for i in range(3)]
    anthro = write_anthro_csv(tmp_path / "anthro.csv",
                              ["subj0", "subj1", "subj2"],
                              drop_field_for={"subj2"})
    out = tmp_path / "fixture.hds"
    spec = ConversionSpec(
        input_paths=[str(p) for p in paths], dataset_id="fixture",
        out_path=str(out), num_freq_bins=64, f_max_hz=20000.0,
        anthro_csv=str(anthro))
    convert(spec)

    ds = read_dataset(out)  # primary reader validates shape and payload
    assert ds.num_subjects == 3
    assert ds.num_positions == 6
    assert ds.num_freq_bins == 64
    assert ds.source_distance_m == pytest.approx(1.2, rel=1e-6)

    expected = analytic_two_tap_db(ds.frequencies_hz)
    got = ds.subjects[0].magnitudes_db[0, :64]
    assert np.abs(got - expected).max() < 0.1
    # scaled right ear shifts the whole dB curve by 20 log10(0.8)
    got_r = ds.subjects[0].magnitudes_db[0, 64:]
    assert np.abs(got_r - (expected + 20 * np.log10(0.8))).max() < 0.1

    assert ds.subjects[0].has_anthropometry
    assert ds.subjects[1].has_anthropometry
    assert not ds.subjects[2].has_anthropometry  # flagged pretraining-only

    report = validate_roundtrip(out)
    assert report.ok
    assert report.anthro_complete == 2
    assert "PASS" in report.summary()
    print(f"\nACCEPTANCE 11: PASS - converter fixture within 0.1 dB of analytic "
          f"spectrum; primary validation ok ({report.summary()})")


def test_validate_roundtrip_reports_corruption(tmp_path):
    path = write_sofa(tmp_path / "s.sofa")
    out = tmp_path / "v.hds"
    convert(ConversionSpec(input_paths=[str(path)], dataset_id="v",
                           out_path=str(out), num_freq_bins=16))
    good = validate_roundtrip(out)
    assert good.ok and good.num_subjects == 1
    raw = out.read_bytes()
    out.write_bytes(raw[:-4])
    bad = validate_roundtrip(out)
    assert not bad.ok
    assert "expected" in bad.error and "got" in bad.error
    assert "FAIL" in bad.summary()


def test_mismatched_grids_rejected(tmp_path):
    a = write_sofa(tmp_path / "a.sofa", num_positions=6)
    b = write_sofa(tmp_path / "b.sofa", num_positions=8)
    with pytest.raises(ConversionError, match="grid differs"):
        convert(ConversionSpec(input_paths=[str(a), str(b)], dataset_id="x",
                               out_path=str(tmp_path / "x.hds"), num_freq_bins=16))


def test_anthro_csv_contracts(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("subject_id,ear,x1\ns0,left,1.0\n")
    with pytest.raises(ConversionError, match="missing columns"):
        load_anthropometry(bad)
    ok = write_anthro_csv(tmp_path / "ok.csv", ["s0"])
    table = load_anthropometry(ok)
    assert set(table["s0"]) == {"left", "right"}


def test_cipic_style_mat(tmp_path):
    from scipy.io import savemat

    n = 64
    hrir = np.zeros((25, 50, n))
    hrir[:, :, 0], hrir[:, :, 1] = 1.0, -0.5
    path = tmp_path / "subject_003.mat"
    savemat(path, {"hrir_l": hrir, "hrir_r": hrir, "fs": 44100.0})
    out = tmp_path / "cipic.hds"
    convert(ConversionSpec(input_paths=[str(path)], dataset_id="cipic-style",
                           out_path=str(out), num_freq_bins=32))
    ds = read_dataset(out)
    assert ds.num_positions == 1250
    assert ds.source_distance_m == pytest.approx(1.0)
    expected = 20 * np.log10(np.abs(1 - 0.5 * np.exp(
        -2j * np.pi * ds.frequencies_hz / 44100.0)))
    assert np.abs(ds.subjects[0].magnitudes_db[0, :32] - expected).max() < 0.1


def test_cli_convert_and_validate(tmp_path, capsys):
    path = write_sofa(tmp_path / "cli.sofa")
    out = tmp_path / "cli.hds"
    code = cli_main(["convert", "--in", str(path), "--dataset-id", "cli",
                     "--bins", "16", "--fmax", "20000", "--out", str(out)])
    assert code == 0
    assert "PASS" in capsys.readouterr().out
    assert cli_main(["validate", str(out)]) == 0
