import numpy as np
import pytest

from wireforge import objectives as O
from wireforge.rasterizer import RasterImage


def rand_image(rng, h=32, w=32):
    return RasterImage(rng.uniform(0, 1, size=(h, w)))


class TestMse:
    def test_identical_images(self):
        rng = np.random.default_rng(0)
        img = rand_image(rng)
        res = O.mse_objective(img, O.TargetImage(img.pixels.copy()))
        assert res.loss == 0.0
        assert np.all(res.grad == 0.0)

    def test_white_vs_black(self):
        white = RasterImage(np.ones((16, 16)))
        black = O.TargetImage(np.zeros((16, 16)))
        assert O.mse_objective(white, black).loss == pytest.approx(1.0)

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(1)
        img = rand_image(rng, 12, 12)
        tgt = O.TargetImage(rng.uniform(0, 1, size=(12, 12)))
        res = O.mse_objective(img, tgt)
        h = 1e-6
        for _ in range(10):
            i, j = rng.integers(0, 12, size=2)
            up = img.pixels.copy()
            up[i, j] += h
            dn = img.pixels.copy()
            dn[i, j] -= h
            fd = (O.mse_objective(RasterImage(up), tgt).loss
                  - O.mse_objective(RasterImage(dn), tgt).loss) / (2 * h)
            assert abs(fd - res.grad[i, j]) < 1e-8

    def test_dimension_mismatch(self):
        with pytest.raises(O.ContractError):
            O.mse_objective(RasterImage(np.ones((8, 8))),
                            O.TargetImage(np.ones((9, 9))))


def square_target(h=32, w=32):
    px = np.ones((h, w))
    px[10:22, 10:22] = 0.0
    return O.TargetImage(px)


class TestChamfer:
    def test_identical_binary_images_zero_loss(self):
        tgt = square_target()
        res = O.chamfer_objective(RasterImage(tgt.pixels.copy()), tgt, 2.0)
        assert abs(res.loss) < 1e-12

    def test_single_ink_pixel_pays_its_distance(self):
        tgt = square_target()
        from scipy import ndimage

        dt = ndimage.distance_transform_edt(~(tgt.pixels < 0.5))
        px = np.ones((32, 32))
        px[1, 1] = 0.0  # stray ink outside the blur kernel's reach of the target
        base = O.chamfer_objective(RasterImage(np.ones((32, 32))), tgt, 2.0).loss
        got = O.chamfer_objective(RasterImage(px), tgt, 2.0).loss
        assert got - base == pytest.approx(dt[1, 1] / (32 * 32), rel=1e-9)

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(2)
        tgt = square_target()
        img = rand_image(rng)
        res = O.chamfer_objective(img, tgt, 2.0)
        h = 1e-5
        for _ in range(10):
            i, j = rng.integers(0, 32, size=2)
            up = img.pixels.copy()
            up[i, j] = min(1.0, up[i, j] + h)
            dn = img.pixels.copy()
            dn[i, j] = max(0.0, dn[i, j] - h)
            span = up[i, j] - dn[i, j]
            fd = (O.chamfer_objective(RasterImage(up), tgt, 2.0).loss
                  - O.chamfer_objective(RasterImage(dn), tgt, 2.0).loss) / span
            assert abs(fd - res.grad[i, j]) < 1e-6

    def test_empty_target_rejected(self):
        with pytest.raises(O.ContractError, match="empty target"):
            O.chamfer_objective(RasterImage(np.ones((16, 16))),
                                O.TargetImage(np.ones((16, 16))), 2.0)

    def test_bad_sigma_rejected(self):
        with pytest.raises(O.ContractError):
            O.chamfer_objective(RasterImage(np.ones((16, 16))),
                                square_target(16, 16), 0.0)


class TestAugment:
    def identity_params(self):
        return O.AugmentParams(perspective_scale=0.0, crop_scale=(1.0, 1.0),
                               crop_aspect=(1.0, 1.0))

    def test_identity(self):
        rng = np.random.default_rng(3)
        img = rand_image(rng)
        out, back = O.augment(img, self.identity_params(), np.random.default_rng(0))
        assert np.array_equal(out.pixels, img.pixels)

    def test_identity_backward_passthrough(self):
        rng = np.random.default_rng(4)
        img = rand_image(rng)
        _, back = O.augment(img, self.identity_params(), np.random.default_rng(0))
        up = rng.normal(size=img.pixels.shape)
        assert np.array_equal(back(up), up)

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(5)
        img = rand_image(rng, 24, 24)
        params = O.AugmentParams(perspective_scale=0.3, crop_scale=(0.7, 0.95))
        out, back = O.augment(img, params, np.random.default_rng(7))
        probe = np.random.default_rng(8).normal(size=(24, 24))
        g = back(probe)
        h = 1e-5
        for _ in range(12):
            i, j = rng.integers(0, 24, size=2)
            up = img.pixels.copy()
            up[i, j] += h
            dn = img.pixels.copy()
            dn[i, j] -= h
            outp, _ = O.augment(RasterImage(up), params, np.random.default_rng(7))
            outm, _ = O.augment(RasterImage(dn), params, np.random.default_rng(7))
            fd = float(np.sum(probe * (outp.pixels - outm.pixels))) / (2 * h)
            assert abs(fd - g[i, j]) < 1e-5

    def test_exact_adjoint(self):
        # <g, W a> == <W^T g, a> for the warp's linearization around any image
        rng = np.random.default_rng(6)
        params = O.AugmentParams(perspective_scale=0.4, crop_scale=(0.6, 0.9))
        base = rand_image(rng, 20, 20)
        out0, back = O.augment(base, params, np.random.default_rng(11))
        a = rng.normal(size=(20, 20))
        g = rng.normal(size=(20, 20))
        outa, _ = O.augment(RasterImage(base.pixels + a), params,
                            np.random.default_rng(11))
        wa = outa.pixels - out0.pixels  # W a exactly (warp is affine in pixels)
        lhs = float(np.sum(g * wa))
        rhs = float(np.sum(back(g) * a))
        assert abs(lhs - rhs) < 1e-10

    def test_param_validation(self):
        with pytest.raises(ValueError):
            O.AugmentParams(crop_scale=(0.0, 1.0))
        with pytest.raises(ValueError):
            O.AugmentParams(crop_scale=(0.9, 0.5))
        with pytest.raises(ValueError):
            O.AugmentParams(perspective_scale=1.5)


class TestProviders:
    def test_offline_dispatch_transparency(self):
        rng = np.random.default_rng(7)
        tgt = square_target()
        img = rand_image(rng)
        provider = O.OfflineProvider({"X": tgt}, modes={"X": "mse"})
        req = O.GradientRequest("X", img.pixels)
        via_dispatch = O.provider_dispatch(req, "offline", offline=provider)
        direct = O.mse_objective(img, tgt)
        assert via_dispatch.loss == direct.loss
        assert np.array_equal(via_dispatch.grad, direct.grad)

    def test_missing_target_errors(self):
        provider = O.OfflineProvider({"X": square_target()})
        req = O.GradientRequest("Y", np.ones((32, 32)))
        with pytest.raises(O.ContractError):
            provider.evaluate(req)

    def test_offline_deterministic(self):
        rng = np.random.default_rng(8)
        provider = O.OfflineProvider({"X": square_target()}, modes={"X": "scheduled"})
        img = rand_image(rng)
        req = O.GradientRequest("X", img.pixels, iteration=5, total_iterations=10)
        r1 = provider.evaluate(req)
        r2 = provider.evaluate(req)
        assert r1.loss == r2.loss and np.array_equal(r1.grad, r2.grad)

    def test_scheduled_switches_gradient(self):
        rng = np.random.default_rng(9)
        tgt = square_target()
        provider = O.OfflineProvider({"X": tgt}, blur_sigma=2.0,
                                     schedule_switch=0.6)
        img = rand_image(rng)
        early = provider.evaluate(
            O.GradientRequest("X", img.pixels, iteration=0, total_iterations=10))
        late = provider.evaluate(
            O.GradientRequest("X", img.pixels, iteration=9, total_iterations=10))
        cham = O.chamfer_objective(img, tgt, 2.0)
        mse = O.mse_objective(img, tgt)
        assert np.allclose(early.grad, cham.grad)
        assert np.allclose(late.grad, cham.grad + mse.grad)
        assert early.loss == pytest.approx(mse.loss + cham.loss)

    def test_echo_stub_matches_mse_up_to_scale(self):
        rng = np.random.default_rng(10)
        cond = rng.uniform(0, 1, size=(16, 16))
        stub = O.EchoStubProvider({"X": cond})
        img = rand_image(rng, 16, 16)
        res = stub.evaluate(O.GradientRequest("X", img.pixels))
        mse = O.mse_objective(img, O.TargetImage(cond))
        scale = 2.0 / cond.size
        assert np.allclose(res.grad * scale, mse.grad)

    def test_unknown_mode_rejected(self):
        with pytest.raises(O.ContractError):
            O.provider_dispatch(O.GradientRequest("X", np.ones((4, 4))), "magic")


class TestTargetIO:
    def test_png_pgm_ingestion(self, tmp_path):
        from wireforge import rasterizer as R

        rng = np.random.default_rng(11)
        img = R.RasterImage(rng.uniform(0, 1, size=(24, 24)))
        png = tmp_path / "t.png"
        pgm = tmp_path / "t.pgm"
        R.save_png(img, png)
        R.save_pgm(img, pgm)
        a = O.load_target(png).pixels
        b = O.load_target(pgm).pixels
        assert np.array_equal(a, b)
        assert np.max(np.abs(a - img.pixels)) <= 0.5 / 255 + 1e-12
