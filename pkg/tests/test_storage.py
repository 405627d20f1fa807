from io import BytesIO

import numpy as np
import pandas as pd
import pytest

import storage
from flow_lattice import lattice_at
from integrators import SystemState
from noise import NoiseError, ou_noise, sample_fine


def test_out_dir_resolution(monkeypatch, tmp_path):
    monkeypatch.delenv(storage.OUT_DIR_ENV, raising=False)
    assert storage.resolve_out_dir() == storage.DEFAULT_OUT_DIR
    monkeypatch.setenv(storage.OUT_DIR_ENV, str(tmp_path / "env"))
    assert storage.resolve_out_dir() == tmp_path / "env"
    assert storage.resolve_out_dir(str(tmp_path / "flag")) == tmp_path / "flag"


def test_report_csv_keeps_full_precision(tmp_path):
    frame = pd.DataFrame({"t": [0.1, 0.2], "e_mean_q": [1.0 / 3.0, 2.0 ** -40]})
    ok, path = storage.save_report_csv(frame, tmp_path, "em")
    assert ok
    back = pd.read_csv(path)
    assert back["e_mean_q"].tolist() == frame["e_mean_q"].tolist()


def test_manifest_lists_config_and_failures(tmp_path):
    out = tmp_path / "em.csv"
    out.write_text("t\n", encoding="utf-8")
    manifest = storage.RunManifest(
        command="converge",
        config_text="time_step = 0.001\nruns = 2\n",
        seed=7,
        version="1.0.0",
        failures=[("se_b", 1, "blow-up")],
        outputs=[str(out)],
    )
    ok, path = storage.write_manifest(manifest, tmp_path)
    assert ok
    text = (tmp_path / "manifest.txt").read_text(encoding="utf-8")
    assert "config.time_step = 0.001" in text
    assert "failures = 1" in text
    assert "failure = se_b run 1: blow-up" in text
    assert storage.config_from_manifest(text) == "time_step = 0.001\nruns = 2\n"
    assert not (tmp_path / "manifest.txt.tmp").exists()


def test_manifest_refuses_missing_outputs(tmp_path):
    manifest = storage.RunManifest("converge", "", 1, "1.0.0", outputs=[str(tmp_path / "gone.csv")])
    ok, message = storage.write_manifest(manifest, tmp_path)
    assert not ok
    assert "gone.csv" in message
    assert not (tmp_path / "manifest.txt").exists()


def test_snapshot_round_trip(tmp_path, lattice15):
    rng = np.random.default_rng(0)
    state = SystemState(rng.uniform(0.0, 15.0, (5, 3)), rng.standard_normal((5, 3)), 0.125)
    ok, path = storage.write_snapshot(tmp_path / "snap.txt", state, lattice15)
    assert ok
    back, edges = storage.read_snapshot(path)
    np.testing.assert_array_equal(back.q, state.q)
    np.testing.assert_array_equal(back.p, state.p)
    assert back.t == 0.125
    np.testing.assert_array_equal(edges, lattice_at(lattice15, 0.125))


def test_snapshot_with_wrong_count_is_rejected(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("0 1 1 1 2\n0 0 0 0 0 0\n", encoding="utf-8")
    with pytest.raises(ValueError):
        storage.read_snapshot(path)


def test_noise_dump_round_trip(tmp_path):
    path = sample_fine(123, 6, 4, h_fine=1e-3)
    ok, where = storage.dump_noise(tmp_path / "noise.bin", path)
    assert ok
    back = storage.load_noise(where)
    assert (back.seed, back.h_fine, back.steps, back.dim) == (123, 1e-3, 6, 4)
    np.testing.assert_array_equal(back.eta, path.eta)
    np.testing.assert_array_equal(back.zeta, path.zeta)


def test_truncated_noise_dump_is_rejected():
    raw = storage.noise_to_bytes(sample_fine(1, 2, 2)).getvalue()
    with pytest.raises(NoiseError):
        storage.noise_from_bytes(BytesIO(raw[:-8]))
    with pytest.raises(NoiseError):
        storage.noise_from_bytes(BytesIO(raw[:10]))


def test_noise_dump_keeps_the_chunk_offset(tmp_path):
    full = sample_fine(77, 8, 3, h_fine=0.1)
    chunk = sample_fine(77, 4, 3, h_fine=0.1, start=4)
    ok, where = storage.dump_noise(tmp_path / "chunk.bin", chunk)
    assert ok
    back = storage.load_noise(where)
    assert back.start == 4
    np.testing.assert_allclose(ou_noise(back, 0.4, 0.2, gamma=1.0),
                               ou_noise(full, 0.4, 0.2, gamma=1.0), atol=1e-12)
    with pytest.raises(NoiseError):
        ou_noise(back, 0.0, 0.2, gamma=1.0)
