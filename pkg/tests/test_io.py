import json
import warnings

import numpy as np
import pytest

from seqfit import io
from seqfit.bodies import toy_model
from seqfit.errors import InvalidInputError
from seqfit.metrics import TriMesh, mesh_volume
from seqfit.model import PoseParams, rest_vertices, skin_vertices
from seqfit.objectives import FrameParams, StageSchedule
from seqfit.optim import SolverSettings
from seqfit.pipeline import RunConfig, SequenceFit, fit_sequence
from seqfit.synth import IMAGE_SIZE, NoiseSpec, make_subject, render_keypoints, wave_motion

QUICK = SolverSettings(max_iterations=30)


@pytest.fixture(scope="module")
def toy_fit(toy):
    from test_pipeline import _toy_frames
    frames, _ = _toy_frames(toy, n=5)
    cfg = RunConfig(window=3, solver=QUICK)
    fit, report = fit_sequence(frames, toy, config=cfg, image_size=IMAGE_SIZE)
    return frames, fit, report, cfg


def _keypoint_file(body, n=3, **noise):
    _, beta = make_subject(0, body)
    frames, _ = render_keypoints(body, beta, wave_motion(n), noise=NoiseSpec(**noise), seed=2)
    return io.keypoint_file_from_frames(frames, body, *IMAGE_SIZE)


class TestKeypoints:
    def test_round_trip(self, body, tmp_path):
        kf = _keypoint_file(body, sigma=2.0, dropout=0.3, confidence="residual")
        path = io.save_keypoints(tmp_path / "kp.json", kf)
        back = io.load_keypoints(path, body)
        assert back.image_size == kf.image_size and back.joint_names == kf.joint_names
        for a, b in zip(kf, back):
            assert np.array_equal(a.points, b.points)
            assert np.array_equal(a.confidence, b.confidence)
            assert a.joint_map == b.joint_map

    def test_unknown_joint(self, body):
        data = io.keypoints_to_dict(_keypoint_file(body, n=1))
        data["joint_map"][3] = "tail"
        with pytest.raises(InvalidInputError, match="tail"):
            io.keypoints_from_dict(data, body)

    def test_confidence_out_of_range(self, body):
        data = io.keypoints_to_dict(_keypoint_file(body, n=3))
        data["frames"][2][5][2] = 1.2
        name = data["joint_map"][5]
        with pytest.raises(InvalidInputError, match=rf"frame 2, joint {name}"):
            io.keypoints_from_dict(data, body)

    def test_wrong_triple_count(self, body):
        data = io.keypoints_to_dict(_keypoint_file(body, n=2))
        data["frames"][1].pop()
        with pytest.raises(InvalidInputError, match="frame 1"):
            io.keypoints_from_dict(data, body)

    def test_newer_major_version_rejected(self, body):
        data = io.keypoints_to_dict(_keypoint_file(body, n=1))
        data["version"] = "2.0"
        with pytest.raises(InvalidInputError, match="newer"):
            io.keypoints_from_dict(data, body)

    def test_minor_version_accepted(self, body):
        data = io.keypoints_to_dict(_keypoint_file(body, n=1))
        data["version"] = "1.7"
        assert len(io.keypoints_from_dict(data, body)) == 1

    def test_bad_json(self, body, tmp_path):
        p = tmp_path / "broken.json"
        p.write_text("{not json")
        with pytest.raises(InvalidInputError):
            io.load_keypoints(p, body)

    def test_missing_file(self, body, tmp_path):
        with pytest.raises(io.FileFormatError):
            io.load_keypoints(tmp_path / "absent.json", body)


class TestFitFiles:
    def test_export_import_export_identical(self, toy, toy_fit, tmp_path):
        _, fit, report, cfg = toy_fit
        a = io.export_fit(tmp_path / "a.json", fit, report, toy, cfg, StageSchedule(), timings=False)
        ff = io.import_fit(a, toy)
        b = io.export_fit(tmp_path / "b.json", ff.fit, ff.report, toy, RunConfig.from_dict(ff.config), ff.schedule,
                          timings=False)
        assert a.read_bytes() == b.read_bytes()

    def test_parameters_lossless(self, toy, toy_fit, tmp_path):
        _, fit, report, cfg = toy_fit
        ff = io.import_fit(io.export_fit(tmp_path / "f.json", fit, report, toy, cfg, StageSchedule()), toy)
        for p, q in zip(fit.frames, ff.fit.frames):
            assert np.array_equal(p.pose.rotvecs(), q.pose.rotvecs())
            assert np.array_equal(p.beta, q.beta) and np.array_equal(p.translation, q.translation)
        assert np.array_equal(fit.shared_shape, ff.fit.shared_shape)
        assert ff.fit.provenance == fit.provenance and not ff.partial

    def test_hashes_present(self, toy, toy_fit):
        _, fit, report, cfg = toy_fit
        data = io.fit_to_dict(fit, report, toy, cfg, StageSchedule())
        assert data["model_hash"] == toy.digest
        assert data["config_hash"] == io.digest(cfg.to_dict())
        assert data["schedule_hash"] == StageSchedule().digest

    def test_timings_sidecar(self, toy, toy_fit, tmp_path):
        _, fit, report, cfg = toy_fit
        io.export_fit(tmp_path / "t.json", fit, report, toy, cfg, StageSchedule())
        assert (tmp_path / "t.timings.json").exists()
        assert "timings" not in (tmp_path / "t.json").read_text()

    def test_model_hash_mismatch_warns(self, toy, toy_fit, tmp_path):
        _, fit, report, cfg = toy_fit
        path = io.export_fit(tmp_path / "f.json", fit, report, toy, cfg, StageSchedule())
        other = toy_model(seed=5)
        with pytest.warns(UserWarning, match="hash"):
            ff = io.import_fit(path, other)
        assert len(ff.fit.frames) == 5

    def test_matching_hash_silent(self, toy, toy_fit, tmp_path):
        _, fit, report, cfg = toy_fit
        path = io.export_fit(tmp_path / "f.json", fit, report, toy, cfg, StageSchedule())
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            io.import_fit(path, toy)

    def test_partial_fit(self, toy, tmp_path):
        from test_pipeline import _toy_frames
        frames, _ = _toy_frames(toy, n=3)
        cfg = RunConfig(window=3, solver=QUICK)
        fit, report = fit_sequence(frames, toy, config=cfg, image_size=IMAGE_SIZE, until_phase=2)
        ff = io.import_fit(io.export_fit(tmp_path / "p.json", fit, report, toy, cfg, StageSchedule()), toy)
        assert ff.partial and ff.phases_completed == 2

    def test_phase3_section_removed(self, toy, toy_fit):
        _, fit, report, cfg = toy_fit
        data = io.fit_to_dict(fit, report, toy, cfg, StageSchedule())
        del data["report"]["phases"]["phase3"]
        assert io.fit_from_dict(data, toy).partial

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        io.write_json(tmp_path / "x.json", {"version": "1.0"})
        assert [p.name for p in tmp_path.iterdir()] == ["x.json"]


class TestMeshes:
    def test_count_and_names(self, toy, toy_fit, tmp_path):
        _, fit, _, _ = toy_fit
        paths = io.export_meshes(fit, toy, tmp_path)
        assert len(paths) == len(fit.frames) == len(list(tmp_path.glob("*.obj")))
        assert [p.name for p in paths] == [f"frame_{i:05d}.obj" for i in range(5)]

    def test_rest_pose_equals_template(self, body, tmp_path):
        beta = np.linspace(-1, 1, body.shape_dim)
        fit = SequenceFit([FrameParams(beta, PoseParams.rest(body), (0, 0, 3))], ["phase3"], [False], 5000.0,
                          np.zeros(2), beta, 3)
        (path,) = io.export_meshes(fit, body, tmp_path)
        mesh = io.read_obj(path)
        # skinning with identity transforms may differ from the template in the last bit
        assert np.abs(mesh.vertices - rest_vertices(body, beta)).max() < 1e-12
        assert np.array_equal(mesh.faces, body.faces)

    def test_volume_round_trip(self, body, tmp_path):
        _, beta = make_subject(3, body)
        pose = wave_motion(9).pose(body, 4)
        verts = skin_vertices(body, beta, pose)
        back = io.read_obj(io.write_obj(tmp_path / "m.obj", verts, body.faces))
        v_mem = mesh_volume(TriMesh(verts, body.faces)) * 1000.0
        v_file = mesh_volume(back) * 1000.0
        assert abs(v_mem - v_file) <= 1e-6

    def test_quads_split(self, tmp_path):
        p = tmp_path / "q.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n")
        assert io.read_obj(p).faces.tolist() == [[0, 1, 2], [0, 2, 3]]


class TestOpenPose:
    def _person(self, body_kp, conf=0.9):
        kp = []
        for x, y in body_kp:
            kp += [x, y, conf]
        return {"pose_keypoints_2d": kp, "hand_left_keypoints_2d": [], "hand_right_keypoints_2d": []}

    def test_mapping_and_best_person(self, body, tmp_path):
        pts = [(10.0 * i, 20.0 * i) for i in range(25)]
        weak = self._person([(0, 0)] * 25, conf=0.1)
        p = tmp_path / "000.json"
        p.write_text(json.dumps({"people": [weak, self._person(pts)]}))
        empty = tmp_path / "001.json"
        empty.write_text(json.dumps({"people": []}))
        kf = io.convert_openpose([p, empty], body, 640, 480)
        assert len(kf) == 2 and kf.image_size == (640, 480)
        row = kf.joint_names.index("left_elbow")
        assert np.allclose(kf[0].points[row], pts[6]) and kf[0].confidence[row] == pytest.approx(0.9)
        hand = [n for n in kf.joint_names if n.startswith("left_index")]
        assert hand and all(kf[0].confidence[kf.joint_names.index(n)] == 0 for n in hand)
        assert not kf[1].confidence.any()

    def test_output_loads(self, body, tmp_path):
        p = tmp_path / "0.json"
        p.write_text(json.dumps({"people": [self._person([(5.0, 6.0)] * 25)]}))
        out = io.save_keypoints(tmp_path / "kp.json", io.convert_openpose([p], body, 100, 100))
        assert len(io.load_keypoints(out, body)) == 1
