import json

import numpy as np
import pytest

import articfeed as af


def random_rotation(rng):
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def test_rigid_align_recovers_transform():
    rng = np.random.default_rng(1)
    src = rng.uniform(-50, 50, size=(12, 3))
    rot = random_rotation(rng)
    t = rng.uniform(-20, 20, size=3)
    r, tt = af.rigid_align(src, src @ rot.T + t)
    assert np.allclose(r, rot, atol=1e-10)
    assert np.allclose(tt, t, atol=1e-9)


def test_collinear_points_raise():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    with pytest.raises(af.Error, match="CollinearPoints"):
        af.rigid_align(pts, pts)


def test_model_reconstruction_is_bilinear():
    model = af.generate_synthetic_model(3, 2, 3, 6)
    assert model.vertex_count == 36
    assert model.faces.shape == (50, 3)
    x, y = model.neutral_x, model.neutral_y
    base = model.reconstruct(np.zeros(2), y)
    doubled = model.reconstruct(2 * x, y) - base
    single = model.reconstruct(x, y) - base
    assert np.allclose(doubled, 2 * single, atol=1e-9)


def test_tracker_follows_coils():
    model = af.generate_synthetic_model(5, 3, 4, 10)
    coils = af.synthetic_correspondences(10)
    tracker = af.Tracker(model, coils, alpha_prior=1e-9, beta_temporal=1e-9, freeze_after=20)
    y = model.neutral_y + 0.2
    verts = model.reconstruct(model.neutral_x, y)
    for _ in range(25):
        out = tracker.step({cid: verts[v] for cid, v in coils.items()})
    assert out["residual_max"] < 1e-4
    assert tracker.frozen
    assert out["vertices"].shape == (100, 3)


def test_palate_fit(tmp_path):
    palate = af.generate_synthetic_palate(7, 3, 8)
    palate.save(tmp_path / "palate.json")
    loaded = af.load_model(tmp_path / "palate.json")
    assert isinstance(loaded, af.PcaModel)
    surface = loaded.reconstruct(np.array([0.4, -0.2, 0.1]))
    faces = loaded.faces
    rng = np.random.default_rng(2)
    pts = []
    for f in rng.integers(0, len(faces), size=50):
        a, b = rng.uniform(size=2)
        if a + b > 1:
            a, b = 1 - a, 1 - b
        i, j, k = faces[f]
        pts.append((1 - a - b) * surface[i] + a * surface[j] + b * surface[k])
    fit = af.fit_palate(loaded, np.array(pts))
    assert fit["mean_residual"] <= 1e-3
    hist = fit["residual_history"]
    assert all(b <= a for a, b in zip(hist, hist[1:]))


def test_sweep_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    t = np.arange(20) / 100.0
    pos = rng.normal(size=(20, 2, 3)) * 30
    ok = rng.uniform(size=(20, 2)) > 0.2
    for name in ("s.jsonl", "s.csv"):
        af.write_sweep(tmp_path / name, 100.0, ["tt", "tb"], t, pos, ok)
        back = af.read_sweep(tmp_path / name)
        assert back["coil_ids"] == ["tt", "tb"]
        assert np.array_equal(back["t"], t)
        assert np.array_equal(back["ok"], ok)
        assert np.array_equal(back["positions"][ok], pos[ok])


def test_bad_sweep_reports_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("t,tt_x,tt_y,tt_z\n0,1,2,3\n0.01,1,oops,3\n")
    with pytest.raises(af.Error, match="line 3"):
        af.read_sweep(path)


def test_obj_round_trip(tmp_path):
    model = af.generate_synthetic_model(1, 2, 2, 5)
    verts = model.reconstruct(model.neutral_x, model.neutral_y)
    af.write_obj(tmp_path / "m.obj", verts, model.faces)
    v, f = af.read_obj(tmp_path / "m.obj")
    assert np.allclose(v, verts, atol=1e-6)
    assert np.array_equal(f, model.faces)


def test_packet_codec():
    frame = {"type": "frame", "seq": 4, "t": 0.04,
             "coils": [{"id": "tt", "pos": [1.5, -2.25, 3.0], "ori": None, "ok": True}]}
    packet = af.encode_frame(json.dumps(frame))
    assert int.from_bytes(packet[:4], "big") == len(packet) - 4
    back = json.loads(af.decode_packet(packet))
    assert back["seq"] == 4 and back["coils"][0]["pos"] == [1.5, -2.25, 3.0]
    with pytest.raises(af.Error, match="ProtocolError"):
        af.decode_packet(packet[:-1])
    assert af.PROTOCOL_VERSION == "EMA-RT/1"


def test_session_validation():
    roles = {"reference": ["a", "b", "c"], "tongue": [{"coil": "tt", "vertex": 0}],
             "bite_left": "l", "bite_right": "r", "bite_front": "f", "origin": "recorded"}
    doc = {"format": "articfeed-session", "version": 1, "roles": roles}
    out = json.loads(af.validate_session(json.dumps(doc)))
    assert out["smoothing_window"] == 5
    doc["smoothing_window"] = 4
    with pytest.raises(af.Error):
        af.validate_session(json.dumps(doc))
