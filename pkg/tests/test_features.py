"""Feature-extraction tests: stub backbones, the binary feature file, fusion."""

import numpy as np
import pytest

from dualscribe import autodiff as ad
from dualscribe.autodiff import Tensor
from dualscribe.errors import DataError, ShapeError
from dualscribe.features import (
    BackboneSpec,
    FeatureGrid,
    RegionEmbedder,
    StubBackbone,
    SyntheticImage,
    align_grids,
    extract,
    fuse_dual,
    read_feature_file,
    run_stub_stack,
    single_path,
    write_feature_file,
)

from helpers import check_grads_against_fd


def stub_spec(kind="stub_general", gh=4, gw=4, ch=6, seed=3):
    return BackboneSpec(kind=kind, grid_h=gh, grid_w=gw, out_channels=ch, seed=seed)


def random_image(rng, h=16, w=16):
    return SyntheticImage(rng.uniform(0.0, 1.0, size=(h, w, 1)))


class TestStubExtraction:
    def test_zero_image_zero_bias_gives_zero_grid(self):
        spec = stub_spec()
        backbone = StubBackbone(spec)
        backbone.weights.b1[:] = 0.0
        backbone.weights.b2[:] = 0.0
        grid = run_stub_stack(spec, backbone.weights, SyntheticImage(np.zeros((12, 12, 1))))
        assert np.array_equal(grid, np.zeros((4, 4, 6)))

    def test_deterministic_per_seed_and_image(self):
        rng = np.random.default_rng(0)
        image = random_image(rng)
        a = extract(stub_spec(seed=5), image)
        b = extract(stub_spec(seed=5), image)
        assert np.array_equal(a.values, b.values)

    def test_different_seeds_differ(self):
        rng = np.random.default_rng(0)
        image = random_image(rng)
        a = extract(stub_spec(seed=5), image)
        b = extract(stub_spec(seed=6), image)
        assert not np.array_equal(a.values, b.values)

    def test_kinds_differ_on_same_seed(self):
        rng = np.random.default_rng(0)
        image = random_image(rng)
        a = extract(stub_spec(kind="stub_general"), image)
        b = extract(stub_spec(kind="stub_domain"), image)
        assert not np.array_equal(a.values, b.values)

    def test_output_shape_64x64_to_8x8x32(self):
        rng = np.random.default_rng(1)
        spec = stub_spec(gh=8, gw=8, ch=32)
        grid = extract(spec, random_image(rng, 64, 64))
        assert grid.values.shape == (8, 8, 32)

    def test_image_smaller_than_grid_rejected(self):
        with pytest.raises(DataError):
            extract(stub_spec(gh=8, gw=8), SyntheticImage(np.zeros((4, 4, 1))))

    def test_extraction_is_pure(self):
        # same backbone object reused: no hidden state between calls
        rng = np.random.default_rng(4)
        backbone = StubBackbone(stub_spec())
        image = random_image(rng)
        first = backbone(image).values
        backbone(random_image(rng))
        assert np.array_equal(backbone(image).values, first)


class TestFeatureFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        grids = {
            "img-a": rng.normal(size=(2, 3, 4)),
            "img-b": rng.normal(size=(4, 4, 2)),
        }
        path = str(tmp_path / "grids.dfgr")
        write_feature_file(path, grids)
        store = read_feature_file(path)
        assert len(store) == 2
        # payload is f32, so round-trip matches at f32 resolution
        assert np.allclose(store.get("img-a"), grids["img-a"], atol=1e-6)
        assert store.get("img-b").shape == (4, 4, 2)

    def test_missing_entry(self, tmp_path):
        path = str(tmp_path / "grids.dfgr")
        write_feature_file(path, {"x": np.zeros((1, 1, 1))})
        store = read_feature_file(path)
        with pytest.raises(DataError) as err:
            store.get("absent")
        assert "absent" in str(err.value)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\0" * 16)
        with pytest.raises(DataError):
            read_feature_file(str(path))

    def test_precomputed_backbone_lookup(self, tmp_path):
        rng = np.random.default_rng(3)
        path = str(tmp_path / "grids.dfgr")
        grid = rng.normal(size=(4, 4, 6))
        write_feature_file(path, {"case-1": grid})
        spec = BackboneSpec(kind="precomputed", grid_h=4, grid_w=4,
                            out_channels=6, path=path)
        assert np.allclose(extract(spec, "case-1").values, grid, atol=1e-6)
        with pytest.raises(DataError):
            extract(spec, "case-2")


def make_embedder(gh, gw, in_channels, d_model, seed=0, zero_pos=False):
    emb = RegionEmbedder(grid_h=gh, grid_w=gw, in_channels=in_channels, d_model=d_model)
    emb.init_params(np.random.default_rng(seed))
    if zero_pos:
        emb.pos = Tensor(np.zeros_like(emb.pos.data), requires_grad=True)
    return emb


class TestFusion:
    def test_shapes_through_concat_and_projection(self):
        rng = np.random.default_rng(0)
        a = FeatureGrid(rng.normal(size=(2, 2, 4)))
        b = FeatureGrid(rng.normal(size=(2, 2, 4)))
        stacked = np.concatenate([a.values, b.values], axis=2)
        assert stacked.shape == (2, 2, 8)
        emb = make_embedder(2, 2, 8, 5)
        out = fuse_dual(a, b, emb)
        assert out.shape == (4, 5)

    def test_identity_padding_projection_recovers_first_grid(self):
        rng = np.random.default_rng(1)
        ca = 3
        a = FeatureGrid(rng.normal(size=(2, 2, ca)))
        b = FeatureGrid(np.zeros((2, 2, 2)))
        emb = make_embedder(2, 2, ca + 2, ca, zero_pos=True)
        proj = np.zeros((ca + 2, ca))
        proj[:ca, :ca] = np.eye(ca)
        emb.proj_w = Tensor(proj, requires_grad=True)
        emb.proj_b = Tensor(np.zeros(ca), requires_grad=True)
        out = fuse_dual(a, b, emb)
        assert np.array_equal(out.data, a.values.reshape(4, ca))

    def test_gradients_through_fusion_vs_finite_differences(self):
        rng = np.random.default_rng(2)
        a = FeatureGrid(rng.normal(size=(2, 2, 3)))
        b = FeatureGrid(rng.normal(size=(2, 2, 2)))
        emb = make_embedder(2, 2, 5, 4, seed=7)
        probe = Tensor(rng.normal(size=(4, 4)))
        params = {
            "proj_w": emb.proj_w, "proj_b": emb.proj_b, "pos": emb.pos,
        }

        def build_loss():
            return ad.sum_all(ad.mul(fuse_dual(a, b, emb), probe))

        check_grads_against_fd(build_loss, params)

    def test_alignment_pools_larger_grid(self):
        rng = np.random.default_rng(3)
        a = FeatureGrid(rng.normal(size=(4, 4, 2)))
        b = FeatureGrid(rng.normal(size=(2, 2, 3)))
        a2, b2 = align_grids(a, b)
        assert (a2.height, a2.width) == (2, 2)
        assert np.allclose(a2.values[0, 0], a.values[:2, :2].mean(axis=(0, 1)))
        assert b2 is b

    def test_unalignable_grids_rejected(self):
        a = FeatureGrid(np.zeros((3, 3, 1)))
        b = FeatureGrid(np.zeros((2, 2, 1)))
        with pytest.raises(ShapeError):
            align_grids(a, b)

    def test_sequence_length_is_cell_count_invariant_to_channels(self):
        rng = np.random.default_rng(4)
        for ca, cb in [(1, 1), (3, 5), (8, 2)]:
            a = FeatureGrid(rng.normal(size=(3, 2, ca)))
            b = FeatureGrid(rng.normal(size=(3, 2, cb)))
            emb = make_embedder(3, 2, ca + cb, 4)
            assert fuse_dual(a, b, emb).shape[0] == 6

    def test_permutation_covariance_of_cells(self):
        rng = np.random.default_rng(5)
        a = FeatureGrid(rng.normal(size=(2, 3, 4)))
        b = FeatureGrid(rng.normal(size=(2, 3, 2)))
        emb = make_embedder(2, 3, 6, 5, zero_pos=True)
        base = fuse_dual(a, b, emb).data
        perm = rng.permutation(6)
        pa = FeatureGrid(a.values.reshape(6, 4)[perm].reshape(2, 3, 4))
        pb = FeatureGrid(b.values.reshape(6, 2)[perm].reshape(2, 3, 2))
        permuted = fuse_dual(pa, pb, emb).data
        assert np.array_equal(permuted, base[perm])


class TestSinglePath:
    def test_8x8_grid_gives_64_regions(self):
        rng = np.random.default_rng(6)
        grid = FeatureGrid(rng.normal(size=(8, 8, 3)))
        emb = make_embedder(8, 8, 3, 4)
        assert single_path(grid, emb).shape == (64, 4)

    def test_zero_grid_zero_bias_leaves_positions_only(self):
        emb = make_embedder(2, 2, 3, 4)
        emb.proj_b = Tensor(np.zeros(4), requires_grad=True)
        out = single_path(FeatureGrid(np.zeros((2, 2, 3))), emb)
        assert np.array_equal(out.data, emb.pos.data)

    def test_equivalence_with_block_projection_fuse(self):
        rng = np.random.default_rng(7)
        ca, cb, d = 3, 2, 5
        a = FeatureGrid(rng.normal(size=(2, 2, ca)))
        zeros_b = FeatureGrid(np.zeros((2, 2, cb)))

        single_emb = make_embedder(2, 2, ca, d, seed=9)
        dual_emb = make_embedder(2, 2, ca + cb, d, seed=9)
        block = np.zeros((ca + cb, d))
        block[:ca] = single_emb.proj_w.data
        block[ca:] = rng.normal(size=(cb, d))  # killed by the zero grid
        dual_emb.proj_w = Tensor(block, requires_grad=True)
        dual_emb.proj_b = Tensor(single_emb.proj_b.data.copy(), requires_grad=True)
        dual_emb.pos = Tensor(single_emb.pos.data.copy(), requires_grad=True)

        lhs = fuse_dual(a, zeros_b, dual_emb).data
        rhs = single_path(a, single_emb).data
        assert np.array_equal(lhs, rhs)

    def test_channel_mismatch_rejected(self):
        emb = make_embedder(2, 2, 3, 4)
        with pytest.raises(ShapeError):
            single_path(FeatureGrid(np.zeros((2, 2, 5))), emb)
