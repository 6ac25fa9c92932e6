#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "vssa/blocks.hpp"

using namespace vssa;
using D = double;

namespace {

Tensor<D> random_tensor(const Shape& s, Rng& rng, double lo = -1, double hi = 1) {
    Tensor<D> t = Tensor<D>::zeros(s);
    for (std::int64_t i = 0; i < t.size(); ++i) t.ptr()[i] = rng.uniform(lo, hi);
    return t;
}

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("glorot init stays inside its bound and is seed-deterministic") {
    Rng a(5), b(5), c(6);
    auto t1 = glorot_uniform<D>({20, 10}, 10, 20, a);
    auto t2 = glorot_uniform<D>({20, 10}, 10, 20, b);
    auto t3 = glorot_uniform<D>({20, 10}, 10, 20, c);
    const double bound = std::sqrt(6.0 / 30.0);
    bool same = true, diff = false;
    for (std::int64_t i = 0; i < t1.size(); ++i) {
        CHECK(std::abs(t1.at(i)) <= bound);
        same = same && t1.at(i) == t2.at(i);
        diff = diff || t1.at(i) != t3.at(i);
    }
    CHECK(same);
    CHECK(diff);
}

TEST_CASE("param store rejects duplicate names and tracks totals") {
    ParamStore<D> ps;
    ps.add("a", Tensor<D>::zeros({2, 3}), true);
    ps.add("b", Tensor<D>::zeros({4}), false);
    CHECK_THROWS_AS(ps.add("a", Tensor<D>::zeros({1}), true), std::invalid_argument);
    CHECK(ps.total_size() == 10);
    REQUIRE(ps.find("b") != nullptr);
    CHECK(ps.find("b")->value.shape == Shape{4});
    CHECK(ps.find("missing") == nullptr);
}

TEST_CASE("separable block halves spatial size at stride 2") {
    ParamStore<D> ps;
    Rng rng(7);
    SeparableBlock<D> s1(ps, "b1", 4, 6, 1, rng);
    SeparableBlock<D> s2(ps, "b2", 6, 8, 2, rng);
    auto x = random_tensor({1, 4, 9, 9}, rng);
    auto y = s1.forward(nullptr, x);
    CHECK(y.shape == Shape{1, 6, 9, 9});
    auto z = s2.forward(nullptr, y);
    CHECK(z.shape == Shape{1, 8, 5, 5});  // ceil(9/2)
    for (std::int64_t i = 0; i < z.size(); ++i) CHECK(z.at(i) >= 0.0);  // ReLU output
}

TEST_CASE("lstm cell: forget-gate bias slab starts at one, the rest at zero") {
    ParamStore<D> ps;
    Rng rng(8);
    LstmCell<D> cell(ps, "lstm", 3, 5, rng);
    const auto& b = ps.find("lstm.b")->value;
    REQUIRE(b.shape == Shape{20});
    for (int i = 0; i < 20; ++i) CHECK(b.at(i) == (i >= 5 && i < 10 ? 1.0 : 0.0));
}

TEST_CASE("lstm cell matches a scalar hand-rolled reference over two steps") {
    ParamStore<D> ps;
    Rng rng(9);
    const int In = 3, H = 2, L = 2;
    LstmCell<D> cell(ps, "lstm", In, H, rng);
    auto x0 = random_tensor({L, In}, rng);
    auto x1 = random_tensor({L, In}, rng);

    auto st = cell.initial_state(L);
    for (std::int64_t i = 0; i < st.h.size(); ++i) CHECK(st.h.at(i) == 0.0);
    auto s1 = cell.step(nullptr, x0, st);
    auto s2 = cell.step(nullptr, x1, s1);

    // Scalar reference: gates = Wx x + Wh h + b in slab order
    // input/forget/cell/output, then the standard cell update.
    const auto& wx = ps.find("lstm.wx")->value;
    const auto& wh = ps.find("lstm.wh")->value;
    const auto& b = ps.find("lstm.b")->value;
    double h[L][H] = {}, c[L][H] = {};
    const Tensor<D>* xs[2] = {&x0, &x1};
    for (int step = 0; step < 2; ++step) {
        double hn[L][H], cn[L][H];
        for (int l = 0; l < L; ++l) {
            double g[4 * H];
            for (int r = 0; r < 4 * H; ++r) {
                double acc = b.at(r);
                for (int i = 0; i < In; ++i) acc += wx.at(r * In + i) * xs[step]->at(l * In + i);
                for (int i = 0; i < H; ++i) acc += wh.at(r * H + i) * h[l][i];
                g[r] = acc;
            }
            for (int i = 0; i < H; ++i) {
                const double gi = sigm(g[i]), gf = sigm(g[H + i]);
                const double gc = std::tanh(g[2 * H + i]), go = sigm(g[3 * H + i]);
                cn[l][i] = gf * c[l][i] + gi * gc;
                hn[l][i] = go * std::tanh(cn[l][i]);
            }
        }
        for (int l = 0; l < L; ++l)
            for (int i = 0; i < H; ++i) {
                h[l][i] = hn[l][i];
                c[l][i] = cn[l][i];
            }
        const auto& got = step == 0 ? s1 : s2;
        for (int l = 0; l < L; ++l)
            for (int i = 0; i < H; ++i) {
                CHECK(got.h.at(l * H + i) == doctest::Approx(h[l][i]).epsilon(1e-12));
                CHECK(got.c.at(l * H + i) == doctest::Approx(c[l][i]).epsilon(1e-12));
            }
    }
}

TEST_CASE("attention weights are a strict distribution over steps") {
    ParamStore<D> ps;
    Rng rng(10);
    const int H = 4, L = 6, S = 3;
    AttentionCell<D> att(ps, "att", H, H, rng);
    auto enc = random_tensor({L, S, H}, rng);
    auto dec = random_tensor({L, H}, rng);
    auto w = att.weights(enc, dec);
    REQUIRE(w.shape == Shape{L, S});
    for (int l = 0; l < L; ++l) {
        double sum = 0;
        for (int s = 0; s < S; ++s) {
            CHECK(w.at(l * S + s) > 0.0);
            sum += w.at(l * S + s);
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("attention over identical encoder states is uniform") {
    ParamStore<D> ps;
    Rng rng(11);
    const int H = 4, L = 3, S = 5;
    AttentionCell<D> att(ps, "att", H, H, rng);
    auto one = random_tensor({L, 1, H}, rng);
    auto enc = Tensor<D>::zeros({L, S, H});
    for (int l = 0; l < L; ++l)
        for (int s = 0; s < S; ++s)
            for (int i = 0; i < H; ++i) enc.ptr()[(l * S + s) * H + i] = one.at(l * H + i);
    auto dec = random_tensor({L, H}, rng);
    auto w = att.weights(enc, dec);
    for (std::int64_t i = 0; i < w.size(); ++i) CHECK(w.at(i) == doctest::Approx(1.0 / S).epsilon(1e-12));
}

TEST_CASE("attention readout equals the weight-blended encoder states") {
    ParamStore<D> ps;
    Rng rng(12);
    const int H = 3, L = 4, S = 3;
    AttentionCell<D> att(ps, "att", H, H, rng);
    auto enc = random_tensor({L, S, H}, rng);
    auto dec = random_tensor({L, H}, rng);
    auto w = att.weights(enc, dec);
    auto r = att.read(nullptr, enc, dec);
    REQUIRE(r.shape == Shape{L, H});
    for (int l = 0; l < L; ++l)
        for (int i = 0; i < H; ++i) {
            double want = 0;
            for (int s = 0; s < S; ++s) want += w.at(l * S + s) * enc.at((l * S + s) * H + i);
            CHECK(r.at(l * H + i) == doctest::Approx(want).epsilon(1e-12));
        }
}

TEST_CASE("deconv layer honors both reachable target sizes") {
    ParamStore<D> ps;
    Rng rng(13);
    DeconvLayer<D> up(ps, "up", 3, 2, rng);
    auto x = random_tensor({1, 3, 5, 5}, rng);
    CHECK(up.forward(nullptr, x, 9, 9).shape == Shape{1, 2, 9, 9});
    CHECK(up.forward(nullptr, x, 10, 10).shape == Shape{1, 2, 10, 10});
    CHECK_THROWS_AS(up.forward(nullptr, x, 11, 11), ConfigError);
}
