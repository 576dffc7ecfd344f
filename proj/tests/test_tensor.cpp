#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fmchest/tensor.hpp"

using namespace fmchest;

namespace {

ComplexMatrix random_matrix(Rng& rng, int rows, int cols) {
    return randn_complex(rng, rows, cols, 1.0);
}

}  // namespace

TEST_CASE("Rng streams are reproducible and children are independent") {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) REQUIRE(a.next_u64() == b.next_u64());

    Rng parent(7);
    Rng c0 = parent.child(0);
    Rng c1 = parent.child(1);
    REQUIRE(c0.next_u64() != c1.next_u64());
    // child derivation ignores the parent's draw position
    parent.next_u64();
    Rng c0_again = parent.child(0);
    REQUIRE(Rng(7).child(0).next_u64() == c0_again.next_u64());
}

TEST_CASE("randn_complex degenerate and deterministic cases") {
    Rng rng(1);
    const ComplexMatrix zero = randn_complex(rng, 3, 5, 0.0);
    for (std::size_t i = 0; i < zero.size(); ++i) REQUIRE(zero.data()[i] == cplx(0.0, 0.0));

    Rng r1(99), r2(99);
    const ComplexMatrix a = randn_complex(r1, 4, 6, 2.5);
    const ComplexMatrix b = randn_complex(r2, 4, 6, 2.5);
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a.data()[i] == b.data()[i]);

    REQUIRE_THROWS_AS(randn_complex(rng, 2, 2, -1.0), InvalidParameter);
    REQUIRE_THROWS_AS(randn_complex(rng, 2, 2, std::nan("")), InvalidParameter);
}

TEST_CASE("randn_complex per-entry second moment") {
    Rng rng(2024);
    const int rows = 250, cols = 400;  // 1e5 draws
    const double sigma = 1.0;
    const ComplexMatrix m = randn_complex(rng, rows, cols, sigma);
    const double mean_power = frobenius_norm_sq(m) / static_cast<double>(m.size());
    REQUIRE(mean_power == Catch::Approx(sigma * sigma).epsilon(0.02));

    // real and imaginary components each carry half the variance
    double re_power = 0.0, im_power = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        re_power += m.data()[i].real() * m.data()[i].real();
        im_power += m.data()[i].imag() * m.data()[i].imag();
    }
    REQUIRE(re_power / m.size() == Catch::Approx(0.5).epsilon(0.03));
    REQUIRE(im_power / m.size() == Catch::Approx(0.5).epsilon(0.03));
}

TEST_CASE("complex/tensor conversion") {
    ComplexMatrix one(1, 1);
    one(0, 0) = cplx(3.0, 4.0);
    const RealTensor t = complex_to_tensor(one);
    REQUIRE(t.shape() == std::vector<int>{1 + 1, 1, 1});
    REQUIRE(t[0] == 3.0);
    REQUIRE(t[1] == 4.0);

    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        const int rows = 1 + static_cast<int>(rng.uniform() * 6);
        const int cols = 1 + static_cast<int>(rng.uniform() * 6);
        const ComplexMatrix h = random_matrix(rng, rows, cols);
        const ComplexMatrix back = tensor_to_complex(complex_to_tensor(h));
        for (std::size_t i = 0; i < h.size(); ++i) REQUIRE(back.data()[i] == h.data()[i]);
    }

    ComplexMatrix real_only(2, 3);
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 3; ++c) real_only(r, c) = cplx(r + c, 0.0);
    const RealTensor rt = complex_to_tensor(real_only);
    for (std::size_t i = real_only.size(); i < rt.numel(); ++i) REQUIRE(rt[i] == 0.0);

    REQUIRE_THROWS_AS(tensor_to_complex(RealTensor({3, 2, 2})), DimensionError);
}

TEST_CASE("frobenius_norm_sq basics") {
    REQUIRE(frobenius_norm_sq(ComplexMatrix(3, 3)) == 0.0);
    REQUIRE(frobenius_norm_sq(identity(2)) == 2.0);
    ComplexMatrix m(1, 1);
    m(0, 0) = cplx(3.0, 4.0);
    REQUIRE(frobenius_norm_sq(m) == 25.0);

    Rng rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        const ComplexMatrix a = random_matrix(rng, 5, 7);
        REQUIRE(frobenius_norm_sq(a) ==
                Catch::Approx(frobenius_norm_sq(hermitian(a))).epsilon(1e-12));
    }
}

TEST_CASE("matmul / hermitian / scale / add semantics") {
    Rng rng(13);
    const ComplexMatrix a = random_matrix(rng, 4, 6);

    const ComplexMatrix ai = matmul(a, identity(6));
    for (std::size_t i = 0; i < a.size(); ++i)
        REQUIRE(std::abs(ai.data()[i] - a.data()[i]) < 1e-14);

    const ComplexMatrix ahh = hermitian(hermitian(a));
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(ahh.data()[i] == a.data()[i]);

    // 1x1 cases match scalar complex arithmetic
    ComplexMatrix x(1, 1), y(1, 1);
    x(0, 0) = cplx(1.5, -2.0);
    y(0, 0) = cplx(-0.25, 3.0);
    REQUIRE(matmul(x, y)(0, 0) == x(0, 0) * y(0, 0));
    REQUIRE(add(x, y)(0, 0) == x(0, 0) + y(0, 0));
    REQUIRE(sub(x, y)(0, 0) == x(0, 0) - y(0, 0));
    REQUIRE(scale(x, cplx(0.0, 2.0))(0, 0) == x(0, 0) * cplx(0.0, 2.0));
    REQUIRE(hermitian(x)(0, 0) == std::conj(x(0, 0)));

    REQUIRE_THROWS_AS(matmul(ComplexMatrix(2, 3), ComplexMatrix(4, 2)), DimensionError);
    REQUIRE_THROWS_AS(add(ComplexMatrix(2, 3), ComplexMatrix(3, 2)), DimensionError);
}

TEST_CASE("RealTensor shape handling") {
    RealTensor t({2, 3, 4});
    REQUIRE(t.numel() == 24);
    REQUIRE(t.ndim() == 3);
    t[5] = 1.5;
    REQUIRE(t.is_finite());
    t[6] = std::numeric_limits<double>::infinity();
    REQUIRE_FALSE(t.is_finite());

    Rng rng(3);
    const RealTensor g = randn_real(rng, {1000}, 2.0);
    double acc = 0.0;
    for (std::size_t i = 0; i < g.numel(); ++i) acc += g[i] * g[i];
    REQUIRE(acc / g.numel() == Catch::Approx(4.0).epsilon(0.15));
}
