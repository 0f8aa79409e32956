import json

import numpy as np
import pandas as pd
import pytest

from StringSpline.core.artifact_writer import (
    ArtifactWriter,
    DataFormatError,
    RunManifest,
    read_particle_csv,
    read_scalar_csv,
)


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_writes_leave_no_temporary_files(tmp_path):
    writer = ArtifactWriter(tmp_path / "run" / "nested")
    writer.write_text("notes.txt", "first\n")
    writer.write_text("notes.txt", "second\n")
    assert (tmp_path / "run" / "nested" / "notes.txt").read_text() == "second\n"
    assert sorted(p.name for p in writer.out_dir.iterdir()) == ["notes.txt"]
    assert len(writer.written) == 2


def test_csv_keeps_full_precision(tmp_path):
    writer = ArtifactWriter(tmp_path)
    values = np.array([0.1, 1.0 / 3.0, 2.0**-40])
    writer.write_csv("values.csv", pd.DataFrame({"v": values}))
    text = (tmp_path / "values.csv").read_text()
    assert text.startswith("v\n") and "\r" not in text
    assert np.array_equal(pd.read_csv(tmp_path / "values.csv", float_precision="round_trip")["v"].to_numpy(), values)


def test_scalar_reader_recovers_written_values_exactly(tmp_path):
    rng = np.random.default_rng(12)
    r, y = rng.standard_normal(1000), rng.standard_normal(1000) * 1e-3
    ArtifactWriter(tmp_path).write_csv("data.csv", pd.DataFrame({"r": r, "y": y}))
    samples = read_scalar_csv(str(tmp_path / "data.csv"))
    assert np.array_equal(samples.inputs[:, 0], r)
    assert np.array_equal(samples.targets[:, 0], y)


def test_particle_reader_recovers_written_values_exactly(tmp_path):
    rng = np.random.default_rng(13)
    xyz = rng.uniform(0.0, 10.0, size=(6, 3))
    forces = rng.standard_normal((6, 3)) * 50.0
    table = pd.DataFrame(
        {
            "frame": [0, 0, 0, 1, 1, 1],
            "id": [0, 1, 2, 0, 1, 2],
            "type": ["A", "B", "A"] * 2,
            "x": xyz[:, 0],
            "y": xyz[:, 1],
            "z": xyz[:, 2],
            "fx": forces[:, 0],
            "fy": forces[:, 1],
            "fz": forces[:, 2],
        }
    )
    ArtifactWriter(tmp_path).write_csv("forces.csv", table)
    samples = read_particle_csv(str(tmp_path / "forces.csv"), box=10.0)
    assert np.array_equal(samples.inputs.reshape(6, 3), xyz)
    assert np.array_equal(samples.targets.reshape(6, 3), forces)


def test_json_is_sorted_and_accepts_numpy(tmp_path):
    writer = ArtifactWriter(tmp_path)
    writer.write_json("out.json", {"b": np.float64(1.5), "a": np.arange(3), "c": np.int64(2), "d": np.bool_(True)})
    text = (tmp_path / "out.json").read_text()
    assert text.index('"a"') < text.index('"b"') < text.index('"c"')
    assert json.loads(text) == {"a": [0, 1, 2], "b": 1.5, "c": 2, "d": True}


def test_manifest_records_versions(tmp_path):
    manifest = RunManifest.create("fit", "run.json", 11, str(tmp_path), {"steps": 10})
    ArtifactWriter(tmp_path).write_manifest(manifest)
    stored = json.loads((tmp_path / "manifest.json").read_text())
    assert stored["seed"] == 11 and stored["command"] == "fit"
    assert {"python", "numpy", "scipy", "pandas", "StringSpline"} <= set(stored["versions"])
    assert stored["arguments"] == {"steps": 10}


def test_scalar_reader(tmp_path):
    path = write(tmp_path, "data.csv", "r, y, r2\n0.5, 1.0, 2\n-1.0, 2.5, 3\n")
    samples = read_scalar_csv(path)
    assert samples.inputs.shape == (2, 2)
    assert samples.inputs[:, 1].tolist() == [2.0, 3.0]
    assert samples.targets[:, 0].tolist() == [1.0, 2.5]


@pytest.mark.parametrize(
    "text, line",
    [
        ("r,y\n0,1\n1,abc\n", 3),
        ("r,y\n0,1\n1,2\n2,inf\n", 4),
        ("r,y\n0,1\n,2\n", 3),
        ("r,z\n0,1\n", 1),
        ("r,y\n", 2),
        ("", 1),
    ],
)
def test_scalar_reader_reports_the_offending_line(tmp_path, text, line):
    with pytest.raises(DataFormatError) as info:
        read_scalar_csv(write(tmp_path, "bad.csv", text))
    assert info.value.line == line
    assert info.value.message.startswith(f"line {line}:")


def test_missing_file_is_a_format_error(tmp_path):
    with pytest.raises(DataFormatError) as info:
        read_scalar_csv(str(tmp_path / "absent.csv"))
    assert info.value.line is None


PARTICLES = (
    "frame,id,type,x,y,z,fx,fy,fz\n"
    "0,1,B,1,1,1,0.5,0,0\n"
    "0,0,A,0,0,0,-0.5,0,0\n"
    "1,0,A,0,0,0.5,0,0,1\n"
    "1,1,B,1,1,1.5,0,0,-1\n"
)


def test_particle_reader_orders_frames_by_id(tmp_path):
    samples = read_particle_csv(write(tmp_path, "p.csv", PARTICLES), box=3.0)
    assert samples.is_particle and samples.box == 3.0
    assert samples.inputs.shape == (2, 2, 3)
    assert samples.particle_types.tolist() == ["A", "B"]
    assert samples.targets[0].tolist() == [-0.5, 0, 0, 0.5, 0, 0]
    assert samples.inputs[1, 1].tolist() == [1.0, 1.0, 1.5]


@pytest.mark.parametrize(
    "bad, line",
    [
        (PARTICLES.replace("1,1,B,1,1,1.5", "1,1,A,1,1,1.5"), 5),
        (PARTICLES.replace("1,1,B,1,1,1.5", "1,2,B,1,1,1.5"), 4),
        (PARTICLES.replace("0,0,A,0,0,0,-0.5", "0,0.5,A,0,0,0,-0.5"), 3),
        (PARTICLES.replace("0,1,B,1,1,1,0.5", "0,1, ,1,1,1,0.5"), 2),
    ],
)
def test_particle_reader_rejects_inconsistent_frames(tmp_path, bad, line):
    with pytest.raises(DataFormatError) as info:
        read_particle_csv(write(tmp_path, "p.csv", bad), box=3.0)
    assert info.value.line == line
