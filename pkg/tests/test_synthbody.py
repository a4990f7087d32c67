"""Analytic body, objects, labels, and the scan container format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hocompose import synthbody as sb
from hocompose.articulation import bone_transforms


@pytest.fixture
def body():
    return sb.make_body(identity_seed=0)


class TestBodySdf:
    def test_point_on_axis_is_minus_radius(self, body):
        joints = body.skeleton.rest_joints(None)
        segs = body.skeleton.rest_segments(None)
        mid = joints[16] + 0.5 * segs[16]  # upper arm midpoint
        d = sb.body_sdf(body, None, None, mid[None], "canonical")[0]
        assert abs(d + body.capsule_radii[16]) < 1e-12

    def test_far_point_positive(self, body):
        d = sb.body_sdf(body, None, None, np.array([[0.95, 0.95, 0.45]]), "canonical")[0]
        assert d > 0.3

    def test_lipschitz_sampling(self, body, rng):
        x = rng.uniform(-1, 1, size=(10000, 3)) * [1, 1, 0.5]
        y = x + rng.normal(scale=0.05, size=x.shape)
        dx = sb.body_sdf(body, None, None, x, "canonical")
        dy = sb.body_sdf(body, None, None, y, "canonical")
        gap = np.abs(dx - dy) - np.linalg.norm(x - y, axis=1)
        assert gap.max() <= 1e-9

    def test_beta_zero_fits_bbox_with_margin(self, body):
        assert sb.canonical_extent_ok(body, np.zeros(10), margin=0.05)

    def test_posed_matches_pushed_canonical(self, body, rng):
        beta = rng.normal(scale=0.3, size=10)
        theta = sb.sample_pose(rng)
        tf = bone_transforms(body.skeleton, beta, theta)
        joints = body.skeleton.rest_joints(beta)
        segs = body.skeleton.rest_segments(beta)
        # canonical points on capsule axes, pushed by their own bone's rigid map
        for bone in (1, 9, 16, 20):
            canon = joints[bone] + rng.random((5, 1)) * segs[bone]
            d_canon = sb.body_sdf(body, beta, None, canon, "canonical")
            posed = tf.apply_single(bone, canon)
            d_posed = sb.body_sdf(body, beta, theta, posed, "posed")
            assert np.all(d_posed <= d_canon + 1e-9)

    def test_gradient_unit_norm(self, body, rng):
        x = rng.uniform(-1, 1, size=(500, 3)) * [1, 1, 0.5]
        _, g = sb.body_sdf_grad(body, None, None, x, "canonical")
        np.testing.assert_allclose(np.linalg.norm(g, axis=1), 1.0, atol=1e-9)


class TestObjects:
    @pytest.mark.parametrize("category", sb.CATEGORIES)
    def test_contact_with_body_shell(self, category, body, rng):
        obj = sb.make_object(category, body, np.random.default_rng(7))
        x = rng.uniform(-1, 1, size=(60000, 3)) * [1, 1, 0.5]
        d_obj = sb.object_sdf(obj, body, None, x)
        d_body = sb.body_sdf(body, None, None, x, "canonical")
        inside_obj = d_obj < 0
        assert inside_obj.sum() > 20  # object has volume
        # contact: object interior reaches the body's exterior shell
        shell = inside_obj & (d_body > 0) & (d_body < 0.05)
        assert shell.sum() > 0
        # carve keeps the body interior out of the object
        assert not np.any(inside_obj & (d_body < 0))

    def test_category_count_matches_prefix(self):
        assert len(sb.CATEGORIES) == 5

    def test_posed_object_rides_attach_bone(self, body, rng):
        obj = sb.make_object("backpack", body, np.random.default_rng(3))
        theta = sb.sample_pose(rng)
        tf = bone_transforms(body.skeleton, None, theta)
        x_canon = rng.uniform(-1, 1, size=(200, 3)) * [1, 1, 0.5]
        d_canon = sb.object_sdf(obj, body, None, x_canon)
        x_posed = tf.apply_single(obj.attach_bone, x_canon)
        d_posed = sb.object_sdf_posed(obj, body, None, theta, x_posed)
        np.testing.assert_allclose(d_posed, d_canon, atol=1e-10)


class TestSampleScan:
    def test_labels_match_oracle_object_free(self, body, rng):
        beta = rng.normal(scale=0.2, size=10)
        theta = sb.sample_pose(rng)
        rec = sb.sample_scan(body, [], beta, theta, 256, 512, seed=10)
        d = sb.body_sdf(body, beta, theta, rec.volume_points, "posed")
        np.testing.assert_array_equal(rec.volume_occ, (d < 0).astype(float))
        np.testing.assert_allclose(rec.volume_sdf, d, atol=1e-12)

    def test_occupancy_sign_consistency(self, body, rng):
        rec = sb.sample_scan(body, [], None, sb.sample_pose(rng), 128, 512, seed=2)
        np.testing.assert_array_equal(rec.volume_occ, (rec.volume_sdf < 0).astype(float))

    def test_deterministic_in_seed(self, body, rng):
        theta = sb.sample_pose(rng)
        a = sb.sample_scan(body, [], None, theta, 128, 256, seed=77)
        b = sb.sample_scan(body, [], None, theta, 128, 256, seed=77)
        np.testing.assert_array_equal(a.surface_points, b.surface_points)
        np.testing.assert_array_equal(a.volume_points, b.volume_points)
        np.testing.assert_array_equal(a.canon_sdf, b.canon_sdf)

    def test_near_surface_fraction(self, body, rng):
        rec = sb.sample_scan(body, [], None, sb.sample_pose(rng), 512, 2048, seed=5)
        frac = np.mean(np.abs(rec.volume_sdf) < 0.06)
        assert frac > 0.45

    def test_surface_points_on_surface_with_unit_normals(self, body, rng):
        beta = rng.normal(scale=0.2, size=10)
        theta = sb.sample_pose(rng)
        rec = sb.sample_scan(body, [], beta, theta, 512, 64, seed=4)
        d = sb.body_sdf(body, beta, theta, rec.surface_points, "posed")
        assert np.abs(d).max() < 1e-7
        np.testing.assert_allclose(np.linalg.norm(rec.surface_normals, axis=1), 1.0, atol=1e-9)

    def test_object_scan_residual_signal(self, body):
        rng = np.random.default_rng(21)
        obj = sb.make_object("backpack", body, rng)
        rec = sb.sample_scan(body, [obj], np.zeros(10), sb.sample_pose(rng), 512, 2048, seed=9)
        inside = rec.volume_occ > 0.5
        body_d = sb.body_sdf(body, rec.beta, rec.theta, rec.volume_points[inside], "posed")
        outside_body = body_d > 0
        assert outside_body.mean() >= 0.10

    def test_posed_labels_agree_with_pushed_canonical(self, body, rng):
        # canonical points labeled canonically, then pushed through the exact
        # per-capsule rigid map, must agree with posed-space labels
        beta = rng.normal(scale=0.2, size=10)
        theta = sb.sample_pose(rng)
        tf = bone_transforms(body.skeleton, beta, theta)
        joints = body.skeleton.rest_joints(beta)
        segs = body.skeleton.rest_segments(beta)
        radii = body.radii(beta)
        for bone in (3, 16, 4):
            t = rng.random((50, 1))
            ring = rng.normal(size=(50, 3))
            ring /= np.linalg.norm(ring, axis=1, keepdims=True)
            canon = joints[bone] + t * segs[bone] + 0.8 * radii[bone] * ring
            own = np.linalg.norm(canon - (joints[bone] + t * segs[bone]), axis=1) - radii[bone]
            keep = sb.body_sdf(body, beta, None, canon, "canonical") == own
            canon = canon[keep]
            posed = tf.apply_single(bone, canon)
            d_c = sb.body_sdf(body, beta, None, canon, "canonical")
            d_p = sb.body_sdf(body, beta, theta, posed, "posed")
            assert np.all(d_p <= d_c + 1e-9)


class TestDatasets:
    @pytest.fixture(scope="class")
    def small_set(self, tmp_path_factory):
        out = tmp_path_factory.mktemp("data")
        manifest = sb.DatasetManifest(n_th=4, n_sh=3, n_sh_plus_o=5, n_surface=128,
                                      n_volume=256, n_canon=64, seed=11)
        records = sb.make_datasets(manifest, out)
        return manifest, out, records

    def test_counts(self, small_set):
        manifest, out, records = small_set
        assert len([r for r in records if r.dataset == "s_th"]) == 4
        assert len([r for r in records if r.dataset == "s_sh"]) == 3
        assert len([r for r in records if r.dataset == "s_sh_plus_o"]) == 5
        assert len(list(out.glob("*.nscn"))) == 12

    def test_source_scans_share_identity(self, small_set):
        _, _, records = small_set
        seeds = {r.identity_seed for r in records if r.dataset != "s_th"}
        assert seeds == {1000}
        th_seeds = [r.identity_seed for r in records if r.dataset == "s_th"]
        assert len(set(th_seeds)) == len(th_seeds)

    def test_category_cycle_covers_all(self, small_set):
        _, _, records = small_set
        cats = {r.category for r in records if r.dataset == "s_sh_plus_o"}
        assert cats == set(sb.CATEGORIES)

    def test_default_manifest_counts(self):
        m = sb.DatasetManifest()
        assert (m.n_th, m.n_sh, m.n_sh_plus_o) == (52, 18, 34)

    def test_roundtrip_file(self, small_set, tmp_path):
        _, out, records = small_set
        rec = records[0]
        path = tmp_path / "x.nscn"
        sb.save_scan(path, rec)
        back = sb.load_scan(path)
        assert back.dataset == rec.dataset
        assert back.scan_id == rec.scan_id
        assert back.category == rec.category
        np.testing.assert_array_equal(back.beta, rec.beta)
        np.testing.assert_array_equal(back.theta, rec.theta)
        np.testing.assert_array_equal(back.surface_points, rec.surface_points)
        np.testing.assert_array_equal(back.volume_sdf, rec.volume_sdf)

    def test_byte_identical_rerun(self, small_set, tmp_path):
        manifest, out, _ = small_set
        out2 = tmp_path / "rerun"
        sb.make_datasets(manifest, out2)
        for f in sorted(out.glob("*.nscn")):
            assert (out2 / f.name).read_bytes() == f.read_bytes(), f.name

    def test_corrupt_scan_reports_offset(self, tmp_path):
        p = tmp_path / "bad.nscn"
        p.write_bytes(b"NSCX" + b"\x00" * 64)
        with pytest.raises(sb.ScanFormatError, match="offset"):
            sb.load_scan(p)

    def test_manifest_roundtrip(self):
        m = sb.DatasetManifest(n_th=7, beta_jitter=0.1)
        m2 = sb.DatasetManifest.from_lines(m.to_lines())
        assert m2.n_th == 7 and m2.beta_jitter == 0.1

    def test_manifest_unknown_key(self):
        with pytest.raises(KeyError, match="bogus"):
            sb.DatasetManifest.from_lines("bogus = 3\n")


class TestWarpCorrespondences:
    def test_beta_zero_identity_pairs(self, body):
        v_b, v_0 = sb.corresponding_vertices(body, np.zeros(10), 64, seed=3)
        np.testing.assert_allclose(v_b, v_0, atol=1e-12)

    def test_pairs_lie_on_surfaces(self, body, rng):
        beta = rng.normal(scale=0.4, size=10)
        v_b, v_0 = sb.corresponding_vertices(body, beta, 128, seed=3)
        d_b = sb.body_sdf(body, beta, None, v_b, "canonical")
        d_0 = sb.body_sdf(body, None, None, v_0, "canonical")
        # on their own capsule; may dip inside a neighboring capsule at joints
        assert d_b.max() < 1e-9
        assert d_0.max() < 1e-9


@given(st.integers(min_value=0, max_value=10**6))
@settings(max_examples=20, deadline=None)
def test_identity_bodies_fit_reasonably(seed):
    body = sb.make_body(identity_seed=seed)
    assert sb.canonical_extent_ok(body, np.zeros(10), margin=0.01)
