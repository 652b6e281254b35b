#include <doctest.h>

#include "sam/state.hpp"
#include "support.hpp"

using namespace sam;

TEST_CASE("grid invariants") {
    CHECK_THROWS_AS(Grid({3, 8}), Error);      // dims >= 4
    CHECK_THROWS_AS(Grid({8}), Error);         // D in {2,3}
    CHECK_THROWS_AS(Grid({8, 8, 8, 8}), Error);
    const Grid g{4, 6, 5};
    CHECK(g.voxels() == 120);
    CHECK(g.index(1, 2, 3) == 1 * 30 + 2 * 5 + 3);
}

TEST_CASE("hyper validation accepts the reference settings") {
    HyperParams h;
    h.K_a = h.K_v = 16;
    h.shared_latents = true;
    h.nu0 = 16;
    h.lambda1 = 0.95;
    h.lambda2 = 0.05;
    h.omega_a = {0.002, 0.2, 0.0};
    h.omega_v = {0.002, 0.02, 2.0, 0.2, 0.2};
    h.kind = DataKind::binary;
    CHECK_NOTHROW(validate_hyper(h)); // nu0 = K, Lambda0 defaults to I/nu0

    SUBCASE("zero omega_v0 names the Green's function") {
        h.omega_v[0] = 0.0;
        CHECK_THROWS_WITH_AS(validate_hyper(h),
                             doctest::Contains("Green's function undefined"), Error);
    }
    SUBCASE("nu0 below K rejected") {
        h.nu0 = 8;
        CHECK_THROWS_AS(validate_hyper(h), Error);
    }
    SUBCASE("lambda mix must be positive") {
        h.lambda1 = h.lambda2 = 0.0;
        CHECK_THROWS_AS(validate_hyper(h), Error);
    }
}

TEST_CASE("init_latents produces exactly orthonormal rows") {
    const LatentState ls = init_latents(10, 3, 1);
    const Eigen::MatrixXd zzt = ls.Z * ls.Z.transpose();
    CHECK((zzt - Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(ls.S.isZero(0.0));
    CHECK((ls.C_z - Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("init_latents is deterministic per seed") {
    const LatentState a = init_latents(12, 4, 42);
    const LatentState b = init_latents(12, 4, 42);
    CHECK(a.Z == b.Z);
    const LatentState c = init_latents(12, 4, 43);
    CHECK(a.Z != c.Z);
}

TEST_CASE("init_latents rejects K > N") {
    CHECK_THROWS_WITH_AS(init_latents(2, 3, 1), doctest::Contains("K > N"), Error);
}

TEST_CASE("NaN forces the mask off and validation passes afterwards") {
    ImageDataset ds = make_dataset(Grid{4, 4}, 2, 1, DataKind::continuous);
    ds.image(0)[5] = std::numeric_limits<float>::quiet_NaN();
    normalise_missing(ds);
    CHECK(ds.image_mask(0)[5] == 0);
    CHECK(ds.image_mask(1)[5] == 1);
    CHECK_NOTHROW(validate_dataset(ds));
}

TEST_CASE("binary range and categorical sums are enforced") {
    ImageDataset bin = make_dataset(Grid{4, 4}, 1, 1, DataKind::binary);
    bin.image(0)[0] = 1.5f;
    CHECK_THROWS_AS(validate_dataset(bin), Error);

    ImageDataset cat = make_dataset(Grid{4, 4}, 1, 3, DataKind::categorical);
    for (std::int64_t v = 0; v < cat.voxels(); ++v) cat.image(0)[v] = 1.0f; // channel 0 = 1
    CHECK_NOTHROW(validate_dataset(cat));
    cat.image(0)[0] = 0.8f;
    CHECK_THROWS_AS(validate_dataset(cat), Error);
}

TEST_CASE("rectangle masking removes the requested fraction") {
    ImageDataset ds = testsup::blob_dataset(4, 16, 3);
    const auto held = mask_random_rectangles(ds, 0.25, 99);
    for (int n = 0; n < ds.n_images; ++n) {
        std::int64_t hidden = 0;
        for (std::int64_t v = 0; v < ds.voxels(); ++v) {
            hidden += held[n][v];
            if (held[n][v]) CHECK(ds.image_mask(n)[v] == 0);
        }
        const double frac = static_cast<double>(hidden) / ds.voxels();
        CHECK(frac == doctest::Approx(0.25).epsilon(0.05));
    }
}

TEST_CASE("dataset slicing preserves payload and mask") {
    ImageDataset ds = testsup::blob_dataset(6, 8, 5);
    ds.image_mask(3)[7] = 0;
    const ImageDataset s = slice_dataset(ds, 2, 3);
    CHECK(s.n_images == 3);
    CHECK(s.image(1)[10] == ds.image(3)[10]);
    CHECK(s.image_mask(1)[7] == 0);
}
