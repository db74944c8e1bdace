import numpy as np
import pytest

from wireforge import geometry as G


def random_plane(rng):
    """Random orthonormal right-handed frame via QR, plus a random origin."""
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    u, v = q[:, 0], q[:, 1]
    n = np.cross(u, v)
    return G.ViewPlane(n / np.linalg.norm(n), rng.normal(size=3), u, v)


class TestBezierPoint:
    def test_endpoints(self):
        rng = np.random.default_rng(1)
        seg = rng.normal(size=(4, 3))
        assert np.allclose(G.bezier_point(seg, 0.0), seg[0], atol=0)
        assert np.allclose(G.bezier_point(seg, 1.0), seg[3], atol=0)

    def test_partition_of_unity(self):
        c = np.array([0.3, -0.7, 1.1])
        seg = np.tile(c, (4, 1))
        for t in np.linspace(0, 1, 11):
            assert np.allclose(G.bezier_point(seg, t), c, atol=1e-15)

    def test_matches_bernstein_sum_oracle(self):
        rng = np.random.default_rng(2)
        seg = rng.normal(size=(4, 3))
        for t in rng.uniform(0, 1, 20):
            s = 1 - t
            expect = (s**3 * seg[0] + 3 * s**2 * t * seg[1]
                      + 3 * s * t**2 * seg[2] + t**3 * seg[3])
            assert np.allclose(G.bezier_point(seg, t), expect, atol=1e-15)

    def test_domain_error(self):
        seg = np.zeros((4, 3))
        with pytest.raises(ValueError):
            G.bezier_point(seg, -0.01)
        with pytest.raises(ValueError):
            G.bezier_point(seg, 1.01)


class TestProjectPoint:
    def test_axis_aligned_drop(self):
        plane = G.axis_view_planes()["Z"]
        assert np.allclose(G.project_point([3.0, 4.0, 5.0], plane), [3, 4, 0])

    def test_hand_evaluated_case(self):
        # p=(1,1,1), N=(0,1,0), q=(0,2,0): p - [N.(p-q)]N = p - (-1)N = (1,2,1)
        plane = G.ViewPlane([0, 1, 0], [0, 2, 0], [0, 0, 1], [1, 0, 0])
        assert np.allclose(G.project_point([1.0, 1.0, 1.0], plane), [1, 2, 1])

    def test_idempotent_and_on_plane(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            plane = random_plane(rng)
            p = rng.normal(size=3) * 3
            proj = G.project_point(p, plane)
            assert abs((proj - plane.origin) @ plane.normal) < 1e-9
            again = G.project_point(proj, plane)
            assert np.max(np.abs(again - proj)) < 1e-12


class TestPlaneCoords:
    def test_origin_maps_to_center(self):
        rng = np.random.default_rng(4)
        plane = random_plane(rng)
        got = G.to_plane_coords(plane.origin, plane, G.Window(2.0, (0.5, 0.5)))
        assert np.allclose(got, [0.5, 0.5], atol=1e-15)

    def test_unit_basis_step(self):
        rng = np.random.default_rng(5)
        plane = random_plane(rng)
        win = G.Window(1.0, (0.5, 0.5))
        got = G.to_plane_coords(plane.origin + win.scale * plane.u, plane, win)
        assert np.allclose(got, [1.5, 0.5], atol=1e-12)

    def test_matches_projection_map_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            plane = random_plane(rng)
            win = G.Window(float(rng.uniform(0.5, 4)), tuple(rng.uniform(0, 1, 2)))
            pmap = G.ProjectionMap.from_plane(plane, win)
            p = G.project_point(rng.normal(size=3) * 2, plane)
            via_op = G.to_plane_coords(p, plane, win)
            via_matrix = pmap.matrix @ p + pmap.offset
            assert np.max(np.abs(via_op - via_matrix)) < 1e-12

    def test_zero_scale_rejected(self):
        with pytest.raises(ValueError):
            G.Window(0.0)


class TestProjectionEquivalence:
    def test_equivalence_sampled(self):
        # projecting the curve point equals evaluating the projected controls
        rng = np.random.default_rng(7)
        ts = np.linspace(0, 1, 11)
        worst = 0.0
        for _ in range(200):
            plane = random_plane(rng)
            seg = rng.normal(size=(4, 3)) * 2
            seg2d = G.project_point(seg, plane)
            for t in ts:
                lhs = G.project_point(G.bezier_point(seg, t), plane)
                rhs = G.bezier_point(seg2d, t)
                worst = max(worst, float(np.max(np.abs(lhs - rhs))))
        assert worst < 1e-9

    def test_project_wire_passthrough_on_plane(self):
        plane = G.axis_view_planes()["Z"]
        win = G.Window(1.0, (0.0, 0.0))
        rng = np.random.default_rng(8)
        ctrl = rng.normal(size=(3, 4, 3))
        ctrl[:, :, 2] = 0.0  # already on the Z plane
        out = G.project_wire(ctrl, plane, win)
        assert np.allclose(out, ctrl[:, :, :2], atol=1e-15)

    def test_project_wire_degenerate_point(self):
        plane = G.axis_view_planes()["X"]
        c = np.array([0.2, -0.4, 0.9])
        ctrl = np.tile(c, (2, 4, 1))
        out = G.project_wire(ctrl, plane)
        assert np.allclose(out, out[0, 0], atol=1e-15)


class TestBackprojectGradient:
    def test_zero_maps_to_zero(self):
        plane = G.axis_view_planes()["Y"]
        assert np.allclose(G.backproject_gradient(np.zeros(2), plane), np.zeros(3))

    def test_axis_view_annihilates_normal(self):
        plane = G.axis_view_planes()["Z"]  # u=+X, v=+Y
        win = G.Window(1.0, (0.0, 0.0))
        g = G.backproject_gradient(np.array([2.0, -3.0]), plane, win)
        assert np.allclose(g, [2.0, -3.0, 0.0], atol=1e-15)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        h = 1e-6
        for _ in range(20):
            plane = random_plane(rng)
            win = G.Window(float(rng.uniform(0.5, 3)), tuple(rng.uniform(0, 1, 2)))
            p = rng.normal(size=3)
            g2 = rng.normal(size=2)
            g3 = G.backproject_gradient(g2, plane, win)
            for k in range(3):
                dp = np.zeros(3)
                dp[k] = h
                f = lambda q: float(g2 @ G.to_plane_coords(
                    G.project_point(q, plane), plane, win))
                fd = (f(p + dp) - f(p - dp)) / (2 * h)
                assert abs(fd - g3[k]) < 1e-6

    def test_exact_adjoint(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            plane = random_plane(rng)
            win = G.Window(float(rng.uniform(0.5, 3)), tuple(rng.uniform(0, 1, 2)))
            pmap = G.ProjectionMap.from_plane(plane, win)
            d = rng.normal(size=3)
            g = rng.normal(size=2)
            lhs = float(g @ (pmap.matrix @ d))
            rhs = float(pmap.adjoint(g) @ d)
            assert abs(lhs - rhs) < 1e-12


class TestViewPlaneValidation:
    def test_axis_planes_valid_and_right_handed(self):
        for plane in G.axis_view_planes().values():
            assert np.allclose(np.cross(plane.u, plane.v), plane.normal, atol=1e-15)

    def test_rejects_non_unit_normal(self):
        with pytest.raises(ValueError):
            G.ViewPlane([0, 0, 2], [0, 0, 0], [1, 0, 0], [0, 1, 0])

    def test_rejects_left_handed(self):
        with pytest.raises(ValueError):
            G.ViewPlane([0, 0, 1], [0, 0, 0], [0, 1, 0], [1, 0, 0])


class TestWireArt:
    def make_art(self, rng, counts=(2, 3)):
        n_pts = sum(3 * c + 1 for c in counts)
        return G.WireArt.from_segment_counts(rng.normal(size=(n_pts, 3)), counts)

    def test_chain_sharing_single_storage(self):
        rng = np.random.default_rng(11)
        art = self.make_art(rng)
        w = art.wires[0]
        before = w.segment(1)[0].copy()
        w.segment(0)[3] += 1.0  # mutate the shared chain point
        assert np.allclose(w.segment(1)[0], before + 1.0)

    def test_point_counts(self):
        rng = np.random.default_rng(12)
        art = self.make_art(rng, counts=[5] * 30)
        assert art.n_points == 30 * 16
        assert art.points.size == 1440

    def test_endpoints_reference_own_wire(self):
        rng = np.random.default_rng(13)
        art = self.make_art(rng, counts=(1, 2, 4))
        ep = art.endpoints
        for i, w in enumerate(art.wires):
            assert np.shares_memory(art.points[ep[i, 0]], w.head) or \
                np.allclose(art.points[ep[i, 0]], w.head)
            assert np.allclose(art.points[ep[i, 1]], w.tail)

    def test_ctrl_index_layout(self):
        rng = np.random.default_rng(14)
        art = self.make_art(rng, counts=(2,))
        idx = art.ctrl_index(0)
        assert idx.shape == (2, 4)
        assert idx[0, 3] == idx[1, 0]  # shared chain point

    def test_json_round_trip(self):
        rng = np.random.default_rng(15)
        art = self.make_art(rng, counts=(2, 5))
        clone = G.WireArt.from_json_dict(art.to_json_dict())
        assert np.array_equal(clone.points, art.points)
        assert [w.n_segments for w in clone.wires] == [2, 5]

    def test_bad_point_count_rejected(self):
        with pytest.raises(ValueError):
            G.WireArt.from_segment_counts(np.zeros((5, 3)), [1])
