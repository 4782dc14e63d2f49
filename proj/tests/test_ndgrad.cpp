#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "mirau/ndgrad.hpp"

using namespace mirau;
using namespace mirau::nd;

namespace {

template <typename T>
Array<T> random_array(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<T> v(static_cast<std::size_t>(shape.numel()));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return Array<T>::from(std::move(shape), std::move(v));
}

template <typename T>
double dot(const Array<T>& a, const Array<T>& b) {
    double s = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        s += static_cast<double>(a.at(i)) * static_cast<double>(b.at(i));
    return s;
}

}  // namespace

TEST_CASE("conv2d identity and hand cases") {
    // 1x1 kernel with weight 1 reproduces the input
    Rng rng(3);
    auto x = random_array<double>(rng, Shape{1, 1, 4, 5});
    auto k = Array<double>::from(Shape{1, 1, 1, 1}, {1.0});
    auto y = conv2d(x, k, {}, 1, 0);
    REQUIRE(y.shape() == Shape{1, 1, 4, 5});
    for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.at(i) == doctest::Approx(x.at(i)).epsilon(1e-12));

    // all-ones 3x3 kernel, padding 1, all-ones 3x3 input: centre output is 9
    auto ones_x = Array<double>::full(Shape{1, 1, 3, 3}, 1.0);
    auto ones_k = Array<double>::full(Shape{1, 1, 3, 3}, 1.0);
    auto y2 = conv2d(ones_x, ones_k, {}, 1, 1);
    CHECK(y2.at(4) == doctest::Approx(9.0));
    CHECK(y2.at(0) == doctest::Approx(4.0));  // corner sees a 2x2 patch

    // shape arithmetic: stride 2, padding 1, k=3 on H=64 gives 32
    auto big = Array<float>::zeros(Shape{1, 1, 64, 64});
    auto k3 = Array<float>::full(Shape{1, 1, 3, 3}, 0.5f);
    auto y3 = conv2d(big, k3, {}, 2, 1);
    CHECK(y3.shape() == Shape{1, 1, 32, 32});

    // channel mismatch raises
    auto k_bad = Array<float>::zeros(Shape{1, 2, 3, 3});
    CHECK_THROWS_AS(conv2d(big, k_bad, {}, 1, 1), ShapeError);
}

TEST_CASE("conv_transpose2d identity, zero, and shape") {
    auto x = Array<double>::from(Shape{1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    auto k = Array<double>::from(Shape{1, 1, 1, 1}, {1.0});
    auto y = conv_transpose2d(x, k, {}, 1, 0);
    for (std::int64_t i = 0; i < 4; ++i) CHECK(y.at(i) == doctest::Approx(x.at(i)));

    auto z = Array<double>::zeros(Shape{1, 3, 4, 4});
    auto kz = Array<double>::full(Shape{3, 2, 3, 3}, 0.7);
    auto yz = conv_transpose2d(z, kz, {}, 2, 1);
    CHECK(yz.shape() == Shape{1, 2, 7, 7});
    for (std::int64_t i = 0; i < yz.numel(); ++i) CHECK(yz.at(i) == 0.0);

    // H=32, stride 2, padding 1, k=3 -> 63
    auto x32 = Array<float>::zeros(Shape{1, 1, 32, 32});
    auto k32 = Array<float>::zeros(Shape{1, 1, 3, 3});
    CHECK(conv_transpose2d(x32, k32, {}, 2, 1).shape() == Shape{1, 1, 63, 63});
}

TEST_CASE_TEMPLATE("conv adjoint identity <conv(x,k),y> == <x,convT(y,k)>", T, float, double) {
    const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-10;
    Rng rng(11);
    for (int trial = 0; trial < 8; ++trial) {
        const std::int64_t stride = 1 + static_cast<std::int64_t>(rng.below(2));
        const std::int64_t pad = static_cast<std::int64_t>(rng.below(2));
        const std::int64_t C = 1 + static_cast<std::int64_t>(rng.below(3));
        const std::int64_t F = 1 + static_cast<std::int64_t>(rng.below(3));
        std::int64_t H = 6 + static_cast<std::int64_t>(rng.below(4));
        // adjoint geometry requires the conv output extent to round-trip
        while ((H + 2 * pad - 3) % stride != 0) ++H;
        auto x = random_array<T>(rng, Shape{2, C, H, H});
        auto k = random_array<T>(rng, Shape{F, C, 3, 3});
        auto cx = conv2d(x, k, {}, stride, pad);
        auto y = random_array<T>(rng, cx.shape());
        auto ty = conv_transpose2d(y, k, {}, stride, pad);
        REQUIRE(ty.shape() == x.shape());
        const double lhs = dot(cx, y);
        const double rhs = dot(x, ty);
        CHECK(std::abs(lhs - rhs) <= tol * std::max(1.0, std::abs(lhs)));
    }
}

TEST_CASE("matmul adjoint identity") {
    Rng rng(17);
    auto a = random_array<double>(rng, Shape{5, 4});
    auto b = random_array<double>(rng, Shape{4, 6});
    auto ab = matmul(a, b);
    auto y = random_array<double>(rng, Shape{5, 6});
    // <a b, y> == <a, y b^T>
    const double lhs = dot(ab, y);
    const double rhs = dot(a, matmul_nt(y, b));
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("softmax examples and properties") {
    auto x = Array<double>::from(Shape{2}, {0.0, 0.0});
    auto y = softmax(x, 0);
    CHECK(y.at(0) == doctest::Approx(0.5));
    CHECK(y.at(1) == doctest::Approx(0.5));

    auto x2 = Array<double>::from(Shape{2}, {0.0, std::log(3.0)});
    auto y2 = softmax(x2, 0);
    CHECK(y2.at(0) == doctest::Approx(0.25));
    CHECK(y2.at(1) == doctest::Approx(0.75));

    // shift invariance and row sums
    Rng rng(5);
    auto r = random_array<double>(rng, Shape{3, 7}, -4.0, 4.0);
    auto shifted = add_scalar(r, 13.37);
    auto s1 = softmax(r, 1);
    auto s2 = softmax(shifted, 1);
    for (std::int64_t i = 0; i < s1.numel(); ++i)
        CHECK(s1.at(i) == doctest::Approx(s2.at(i)).epsilon(1e-12));
    for (std::int64_t row = 0; row < 3; ++row) {
        double s = 0.0;
        for (std::int64_t c = 0; c < 7; ++c) s += s1.at(row * 7 + c);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("group_norm contract") {
    // constant input -> zeros under unit affine
    auto x = Array<double>::full(Shape{2, 4, 3, 3}, 0.7);
    auto gain = Array<double>::full(Shape{4}, 1.0);
    auto bias = Array<double>::zeros(Shape{4});
    auto y = group_norm(x, 2, gain, bias, 1e-5);
    REQUIRE(y.shape() == x.shape());
    for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y.at(i)) < 1e-9);

    // {-1,+1} already unit variance, one group
    auto x2 = Array<double>::from(Shape{1, 2, 1, 1}, {-1.0, 1.0});
    auto g2 = Array<double>::full(Shape{2}, 1.0);
    auto b2 = Array<double>::zeros(Shape{2});
    auto y2 = group_norm(x2, 1, g2, b2, 1e-5);
    CHECK(y2.at(0) == doctest::Approx(-1.0).epsilon(1e-4));
    CHECK(y2.at(1) == doctest::Approx(1.0).epsilon(1e-4));

    CHECK_THROWS_AS(group_norm(x, 3, gain, bias, 1e-5), ConfigError);
}

TEST_CASE("dropout contract") {
    // p=0 is the identity
    Tape<float> tape(42);
    auto x = tape.leaf(Shape{8}, std::vector<float>(8, 2.0f));
    auto y = dropout(tape, x, 0.0);
    for (std::int64_t i = 0; i < 8; ++i) CHECK(y.at(i) == 2.0f);

    // eval mode is the identity even for p>0
    Tape<float> te(42);
    te.set_train(false);
    auto xe = te.leaf(Shape{8}, std::vector<float>(8, 2.0f));
    auto ye = dropout(te, xe, 0.5);
    for (std::int64_t i = 0; i < 8; ++i) CHECK(ye.at(i) == 2.0f);

    // survivor fraction ~ 0.9 +/- 0.002 at p=0.1 over 1e6 elements
    const std::int64_t n = 1'000'000;
    Tape<float> tb(7);
    auto xb = tb.leaf(Shape{n}, std::vector<float>(static_cast<std::size_t>(n), 1.0f));
    auto yb = dropout(tb, xb, 0.1);
    std::int64_t survivors = 0;
    for (std::int64_t i = 0; i < n; ++i)
        if (yb.at(i) != 0.0f) ++survivors;
    const double frac = static_cast<double>(survivors) / static_cast<double>(n);
    CHECK(std::abs(frac - 0.9) < 0.002);

    // equal (seed, pass) reproduce the mask; different pass index changes it
    auto run_pass = [](std::uint64_t pass) {
        Tape<float> t(99);
        t.set_pass_index(pass);
        auto x = t.leaf(Shape{64}, std::vector<float>(64, 1.0f));
        return dropout(t, x, 0.3);
    };
    auto a = run_pass(4), b = run_pass(4), c = run_pass(5);
    bool same_ab = true, same_ac = true;
    for (std::int64_t i = 0; i < 64; ++i) {
        same_ab &= a.at(i) == b.at(i);
        same_ac &= a.at(i) == c.at(i);
    }
    CHECK(same_ab);
    CHECK_FALSE(same_ac);
}

TEST_CASE("attention basics") {
    // single token: softmax over a singleton is 1, output equals v
    Rng rng(23);
    auto q = random_array<double>(rng, Shape{1, 1, 8});
    auto k = random_array<double>(rng, Shape{1, 1, 8});
    auto v = random_array<double>(rng, Shape{1, 1, 8});
    auto out = multi_head_attention(q, k, v, 2);
    for (std::int64_t i = 0; i < 8; ++i) CHECK(out.at(i) == doctest::Approx(v.at(i)).epsilon(1e-12));

    // heads must divide the embedding dim
    CHECK_THROWS_AS(multi_head_attention(q, k, v, 3), ConfigError);

    // identical keys -> uniform weights -> output is the mean of v rows
    auto k2 = Array<double>::full(Shape{1, 4, 6}, 0.3);
    auto q2 = random_array<double>(rng, Shape{1, 1, 6});
    auto v2 = random_array<double>(rng, Shape{1, 4, 6});
    auto out2 = multi_head_attention(q2, k2, v2, 1);
    for (std::int64_t d = 0; d < 6; ++d) {
        double mean = 0.0;
        for (std::int64_t t = 0; t < 4; ++t) mean += v2.at(t * 6 + d);
        mean /= 4.0;
        CHECK(out2.at(d) == doctest::Approx(mean).epsilon(1e-10));
    }
}

TEST_CASE("broadcasting add/mul with gradient reduction") {
    Tape<double> tape;
    auto a = tape.leaf(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
    auto b = tape.leaf(Shape{3}, {10, 20, 30});
    auto y = mul(add(a, b), Array<double>::full(Shape{2, 3}, 1.0));
    CHECK(y.at(0) == 11.0);
    CHECK(y.at(5) == 36.0);
    tape.backward(sum_all(y));
    const auto& gb = b.grad();
    REQUIRE(gb.size() == 3);
    for (int i = 0; i < 3; ++i) CHECK(gb[static_cast<std::size_t>(i)] == doctest::Approx(2.0));
}

TEST_CASE("no-NaN policy raises on non-finite results") {
    auto x = Array<double>::from(Shape{2}, {-1.0, 4.0});
    CHECK_THROWS_AS(log_(x), NumericError);
    auto zero = Array<double>::zeros(Shape{1});
    auto one = Array<double>::full(Shape{1}, 1.0);
    CHECK_THROWS_AS(div_(one, zero), NumericError);
}

TEST_CASE("determinism: same seed gives bit-identical forward and backward") {
    auto run = [](std::uint64_t seed) {
        Tape<float> tape(seed);
        Rng rng(1);
        std::vector<float> xv(48), wv(108);
        for (auto& v : xv) v = static_cast<float>(rng.uniform(-1, 1));
        for (auto& v : wv) v = static_cast<float>(rng.uniform(-1, 1));
        auto x = tape.leaf(Shape{1, 3, 4, 4}, xv);
        auto w = tape.leaf(Shape{4, 3, 3, 3}, wv);
        auto h = gelu(conv2d(x, w, {}, 1, 1));
        auto d = dropout(tape, h, 0.25);
        auto loss = mean_all(mul(d, d));
        tape.backward(loss);
        return std::tuple{loss.scalar(), x.grad(), w.grad()};
    };
    auto [l1, gx1, gw1] = run(1234);
    auto [l2, gx2, gw2] = run(1234);
    CHECK(l1 == l2);
    CHECK(gx1 == gx2);
    CHECK(gw1 == gw2);
}

TEST_CASE("grad_check: linear functional is exact") {
    Rng rng(31);
    std::vector<double> a(16), x(16);
    for (auto& v : a) v = rng.uniform(-2, 2);
    for (auto& v : x) v = rng.uniform(-2, 2);
    auto coeff = Array<double>::from(Shape{16}, a);

    std::vector<std::vector<double>*> bufs{&x};
    GradCheckOptions opt;
    opt.eps = 1e-3;  // truncation error vanishes for a linear map
    auto rep = grad_check<double>(
        [&](Tape<double>&, const std::vector<Array<double>>& leaves) {
            return sum_all(mul(leaves[0], coeff));
        },
        bufs, {Shape{16}}, opt);
    CHECK(rep.max_rel_err < 1e-10);
}

TEST_CASE("grad_check covers every exported op") {
    Rng rng(37);

    auto check = [&](const char* what, auto build, std::vector<Shape> shapes,
                     std::vector<std::pair<double, double>> ranges) {
        std::vector<std::vector<double>> storage;
        for (std::size_t i = 0; i < shapes.size(); ++i) {
            std::vector<double> v(static_cast<std::size_t>(shapes[i].numel()));
            for (auto& x : v) x = rng.uniform(ranges[i].first, ranges[i].second);
            storage.push_back(std::move(v));
        }
        std::vector<std::vector<double>*> bufs;
        for (auto& s : storage) bufs.push_back(&s);
        auto rep = grad_check<double>(build, bufs, shapes);
        INFO(what << " rel err " << rep.max_rel_err);
        CHECK(rep.max_rel_err <= 1e-4);
    };

    check("conv2d",
          [](Tape<double>&, const std::vector<Array<double>>& p) {
              return sum_all(mul(conv2d(p[0], p[1], std::optional{p[2]}, 2, 1),
                                 conv2d(p[0], p[1], std::optional{p[2]}, 2, 1)));
          },
          {Shape{2, 3, 6, 6}, Shape{4, 3, 3, 3}, Shape{4}}, {{-1, 1}, {-1, 1}, {-0.1, 0.1}});

    check("conv_transpose2d",
          [](Tape<double>&, const std::vector<Array<double>>& p) {
              auto y = conv_transpose2d(p[0], p[1], std::optional{p[2]}, 2, 1);
              return mean_all(mul(y, y));
          },
          {Shape{1, 3, 5, 5}, Shape{3, 2, 3, 3}, Shape{2}}, {{-1, 1}, {-1, 1}, {-0.1, 0.1}});

    check("softmax",
          [](Tape<double>&, const std::vector<Array<double>>& p) {
              auto s = softmax(p[0], 1);
              return sum_all(mul(s, p[1]));
          },
          {Shape{3, 5}, Shape{3, 5}}, {{-3, 3}, {-1, 1}});

    check("layer_norm",
          [](Tape<double>&, const std::vector<Array<double>>& p) {
              auto y = layer_norm(p[0], p[1], p[2], 1e-5);
              return mean_all(mul(y, y));
          },
          {Shape{4, 6}, Shape{6}, Shape{6}}, {{-2, 2}, {0.5, 1.5}, {-0.5, 0.5}});

    check("group_norm",
          [](Tape<double>&, const std::vector<Array<double>>& p) {
              auto y = group_norm(p[0], 2, p[1], p[2], 1e-5);
              return mean_all(mul(y, y));
          },
          {Shape{2, 4, 3, 3}, Shape{4}, Shape{4}}, {{-2, 2}, {0.5, 1.5}, {-0.5, 0.5}});

    check("gelu", [](Tape<double>&, const std::vector<Array<double>>& p) { return sum_all(gelu(p[0])); },
          {Shape{17}}, {{-3, 3}});

    check("sigmoid+log+exp+sqrt+abs",
          [](Tape<double>&, const std::vector<Array<double>>& p) {
              auto s = sigmoid(p[0]);
              return sum_all(add(log_(s), add(exp_(neg(s)), add(sqrt_(s), abs_(p[0])))));
          },
          {Shape{9}}, {{0.2, 2.0}});

    check("matmul batched",
          [](Tape<double>&, const std::vector<Array<double>>& p) {
              auto y = matmul(p[0], p[1]);
              return mean_all(mul(y, y));
          },
          {Shape{2, 3, 4}, Shape{2, 4, 5}}, {{-1, 1}, {-1, 1}});

    check("matmul weights + matmul_nt",
          [](Tape<double>&, const std::vector<Array<double>>& p) {
              auto y = matmul(p[0], p[1]);
              auto z = matmul_nt(y, y);
              return mean_all(z);
          },
          {Shape{2, 3, 4}, Shape{4, 5}}, {{-1, 1}, {-1, 1}});

    check("attention with bias",
          [](Tape<double>&, const std::vector<Array<double>>& p) {
              auto y = multi_head_attention(p[0], p[1], p[2], 2, std::optional{p[3]});
              return mean_all(mul(y, y));
          },
          {Shape{2, 3, 4}, Shape{2, 5, 4}, Shape{2, 5, 4}, Shape{2, 3, 5}},
          {{-1, 1}, {-1, 1}, {-1, 1}, {-0.5, 0.5}});

    check("movement ops",
          [](Tape<double>&, const std::vector<Array<double>>& p) {
              auto a = permute(reshape(p[0], Shape{2, 3, 4}), {1, 0, 2});
              auto b = roll2d(a, 1, -2);
              auto c = concat(b, b, 1);
              auto d = take_rows(reshape(c, Shape{12, 4}), {0, 3, 5});
              auto e = put_rows(d, {1, 2, 0}, 5);
              return mean_all(mul(e, e));
          },
          {Shape{24}}, {{-1, 1}});

    check("clamp interior",
          [](Tape<double>&, const std::vector<Array<double>>& p) {
              return sum_all(mul(clamp(p[0], -0.5, 0.5), p[0]));
          },
          {Shape{7}}, {{-0.4, 0.4}});

    check("dropout with fixed stream",
          [](Tape<double>& t, const std::vector<Array<double>>& p) {
              return mean_all(mul(dropout(t, p[0], 0.4), p[0]));
          },
          {Shape{40}}, {{0.5, 1.5}});
}

TEST_CASE("grad_check rejects non-scalar outputs") {
    std::vector<double> x{1.0, 2.0};
    std::vector<std::vector<double>*> bufs{&x};
    CHECK_THROWS_AS(grad_check<double>(
                        [](Tape<double>&, const std::vector<Array<double>>& p) { return p[0]; },
                        bufs, {Shape{2}}),
                    Error);
}

TEST_CASE("tape backward delivers each leaf gradient exactly once") {
    Tape<double> tape;
    auto x = tape.leaf(Shape{3}, {1.0, 2.0, 3.0});
    auto y = add(x, x);               // fan-out of the same leaf
    auto z = add(mul(y, y), scale(x, 4.0));
    tape.backward(sum_all(z));
    // d/dx sum((2x)^2 + 4x) = 8x + 4
    const auto& g = x.grad();
    CHECK(g[0] == doctest::Approx(12.0));
    CHECK(g[1] == doctest::Approx(20.0));
    CHECK(g[2] == doctest::Approx(28.0));
}
