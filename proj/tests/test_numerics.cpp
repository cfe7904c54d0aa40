#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "mlens/gradcheck.hpp"
#include "mlens/tape.hpp"
#include "mlens/tensor.hpp"
#include "oracles.hpp"

using namespace mlens;

namespace {

Tensor make_param(Tensor t) {
    t.requires_grad = true;
    return t;
}

double max_abs_diff(const Tensor& a, const std::vector<double>& b) {
    REQUIRE(a.size() == b.size());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("matmul forward") {
    Tape tape;
    SECTION("identity times A returns A") {
        Tensor eye = Tensor::zeros({3, 3});
        for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
        Rng rng(7);
        Tensor a = oracle::random_tensor({3, 5}, rng);
        Var out = tape.matmul(tape.input(eye), tape.input(a));
        for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(tape.value(out)[i] == a[i]);
    }
    SECTION("1x1 product") {
        Var out = tape.matmul(tape.input(Tensor({1, 1}, {2.0})), tape.input(Tensor({1, 1}, {3.0})));
        REQUIRE(tape.value(out)[0] == 6.0);
    }
    SECTION("matches naive triple-loop oracle") {
        Rng rng(11);
        Tensor a = oracle::random_tensor({3, 4}, rng);
        Tensor b = oracle::random_tensor({4, 2}, rng);
        Var out = tape.matmul(tape.input(a), tape.input(b));
        auto ref = oracle::matmul(a.values(), b.values(), 3, 4, 2);
        REQUIRE(max_abs_diff(tape.value(out), ref) < 1e-12);
    }
    SECTION("inner dimension mismatch throws") {
        Var a = tape.input(Tensor::zeros({2, 3}));
        Var b = tape.input(Tensor::zeros({2, 3}));
        REQUIRE_THROWS_AS(tape.matmul(a, b), ShapeError);
    }
}

TEST_CASE("softmax_rows") {
    Tape tape;
    SECTION("uniform row") {
        Var out = tape.softmax_rows(tape.input(Tensor({3}, {0.0, 0.0, 0.0})));
        for (int i = 0; i < 3; ++i) REQUIRE(tape.value(out)[i] == Catch::Approx(1.0 / 3.0).margin(1e-15));
    }
    SECTION("shift invariance") {
        Rng rng(3);
        Tensor x = oracle::random_tensor({4, 6}, rng, -5.0, 5.0);
        Tensor shifted = x;
        for (std::size_t r = 0; r < 4; ++r)
            for (std::size_t c = 0; c < 6; ++c) shifted.at(r, c) += 123.25;
        Var a = tape.softmax_rows(tape.input(x));
        Var b = tape.softmax_rows(tape.input(shifted));
        for (std::size_t i = 0; i < x.size(); ++i)
            REQUIRE(std::abs(tape.value(a)[i] - tape.value(b)[i]) < 1e-12);
    }
    SECTION("matches exp-normalize oracle") {
        Tensor x({3}, {1.0, 2.0, 3.0});
        Var out = tape.softmax_rows(tape.input(x));
        auto ref = oracle::softmax(x.values());
        REQUIRE(max_abs_diff(tape.value(out), ref) < 1e-14);
    }
    SECTION("rows sum to one") {
        Rng rng(5);
        for (int rep = 0; rep < 20; ++rep) {
            Tensor x = oracle::random_tensor({5, 7}, rng, -50.0, 50.0);
            Var out = tape.softmax_rows(tape.input(x));
            for (std::size_t r = 0; r < 5; ++r) {
                double s = 0.0;
                for (std::size_t c = 0; c < 7; ++c) s += tape.value(out).at(r, c);
                REQUIRE(std::abs(s - 1.0) < 1e-12);
            }
        }
    }
    SECTION("huge magnitudes stay finite") {
        Var out = tape.softmax_rows(tape.input(Tensor({3}, {1e4, -1e4, 0.0})));
        REQUIRE(std::isfinite(tape.value(out)[0]));
        REQUIRE(tape.value(out)[0] == Catch::Approx(1.0));
    }
}

TEST_CASE("layer_norm") {
    Tape tape;
    Tensor gamma = Tensor::full({4}, 1.0);
    Tensor beta = Tensor::zeros({4});
    SECTION("constant vector maps to zeros") {
        Var out = tape.layer_norm(tape.input(Tensor::full({4}, 3.7)), tape.input(gamma), tape.input(beta), 1e-6);
        for (int i = 0; i < 4; ++i) REQUIRE(std::abs(tape.value(out)[i]) < 1e-12);
    }
    SECTION("standardized input is nearly fixed") {
        Tensor g2 = Tensor::full({2}, 1.0);
        Tensor b2 = Tensor::zeros({2});
        Var out = tape.layer_norm(tape.input(Tensor({2}, {-1.0, 1.0})), tape.input(g2), tape.input(b2), 1e-12);
        REQUIRE(tape.value(out)[0] == Catch::Approx(-1.0).epsilon(1e-9));
        REQUIRE(tape.value(out)[1] == Catch::Approx(1.0).epsilon(1e-9));
    }
    SECTION("matches two-pass oracle") {
        Rng rng(17);
        Tensor x = oracle::random_tensor({3, 4}, rng, -2.0, 2.0);
        Tensor g = oracle::random_tensor({4}, rng);
        Tensor b = oracle::random_tensor({4}, rng);
        Var out = tape.layer_norm(tape.input(x), tape.input(g), tape.input(b), 1e-5);
        for (std::size_t r = 0; r < 3; ++r) {
            std::vector<double> row(x.data() + r * 4, x.data() + (r + 1) * 4);
            auto ref = oracle::layer_norm(row, g.values(), b.values(), 1e-5);
            for (std::size_t c = 0; c < 4; ++c) REQUIRE(tape.value(out).at(r, c) == Catch::Approx(ref[c]).margin(1e-12));
        }
    }
}

TEST_CASE("scaled_dot_attention") {
    Tape tape;
    SECTION("single key returns the value row for every query") {
        Rng rng(23);
        Tensor q = oracle::random_tensor({2, 3, 4}, rng);
        Tensor k = oracle::random_tensor({2, 1, 4}, rng);
        Tensor v = oracle::random_tensor({2, 1, 4}, rng);
        Var out = tape.scaled_dot_attention(tape.input(q), tape.input(k), tape.input(v));
        for (std::size_t h = 0; h < 2; ++h)
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t t = 0; t < 4; ++t)
                    REQUIRE(tape.value(out)[(h * 3 + i) * 4 + t] == Catch::Approx(v[h * 4 + t]).margin(1e-14));
    }
    SECTION("identical keys average the values") {
        Rng rng(29);
        std::size_t n = 5, d = 3;
        Tensor q = oracle::random_tensor({1, 2, d}, rng);
        Tensor key_row = oracle::random_tensor({1, 1, d}, rng);
        Tensor k = Tensor::zeros({1, n, d});
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t t = 0; t < d; ++t) k[j * d + t] = key_row[t];
        Tensor v = oracle::random_tensor({1, n, d}, rng);
        Var out = tape.scaled_dot_attention(tape.input(q), tape.input(k), tape.input(v));
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t t = 0; t < d; ++t) {
                double mean = 0.0;
                for (std::size_t j = 0; j < n; ++j) mean += v[j * d + t];
                mean /= double(n);
                REQUIRE(tape.value(out)[i * d + t] == Catch::Approx(mean).margin(1e-12));
            }
    }
    SECTION("matches explicit-loop oracle") {
        Rng rng(31);
        std::size_t h = 3, m = 4, n = 5, d = 2;
        Tensor q = oracle::random_tensor({h, m, d}, rng);
        Tensor k = oracle::random_tensor({h, n, d}, rng);
        Tensor v = oracle::random_tensor({h, n, d}, rng);
        Var out = tape.scaled_dot_attention(tape.input(q), tape.input(k), tape.input(v));
        for (std::size_t hh = 0; hh < h; ++hh) {
            std::vector<double> qh(q.data() + hh * m * d, q.data() + (hh + 1) * m * d);
            std::vector<double> kh(k.data() + hh * n * d, k.data() + (hh + 1) * n * d);
            std::vector<double> vh(v.data() + hh * n * d, v.data() + (hh + 1) * n * d);
            auto ref = oracle::attention_head(qh, kh, vh, m, n, d);
            for (std::size_t i = 0; i < m * d; ++i)
                REQUIRE(tape.value(out)[hh * m * d + i] == Catch::Approx(ref[i]).margin(1e-12));
        }
    }
    SECTION("head mismatch throws") {
        Var q = tape.input(Tensor::zeros({2, 3, 4}));
        Var k = tape.input(Tensor::zeros({2, 3, 5}));
        REQUIRE_THROWS_AS(tape.scaled_dot_attention(q, k, k), ShapeError);
    }
}

TEST_CASE("backward basics") {
    SECTION("sum of squares gives 2x") {
        Tensor x = make_param(Tensor({4}, {1.0, -2.0, 0.5, 3.0}));
        Tape tape;
        Var vx = tape.param(x);
        Var loss = tape.sum_all(tape.mul(vx, vx));
        tape.backward(loss);
        REQUIRE(x.grad.has_value());
        for (std::size_t i = 0; i < 4; ++i) REQUIRE((*x.grad)[i] == Catch::Approx(2.0 * x[i]));
    }
    SECTION("unused parameter keeps zero gradient") {
        Tensor x = make_param(Tensor({3}, {1.0, 2.0, 3.0}));
        Tensor y = make_param(Tensor({2}, {1.0, 4.0}));
        Tape tape;
        tape.param(x);
        Var vy = tape.param(y);
        Var loss = tape.sum_all(tape.mul(vy, vy));
        tape.backward(loss);
        REQUIRE(x.grad.has_value());
        for (double g : *x.grad) REQUIRE(g == 0.0);
    }
    SECTION("gradients accumulate across uses") {
        Tensor x = make_param(Tensor({2}, {1.0, 2.0}));
        Tape tape;
        Var vx = tape.param(x);
        Var loss = tape.sum_all(tape.add(vx, vx));
        tape.backward(loss);
        for (double g : *x.grad) REQUIRE(g == 2.0);
    }
    SECTION("weight sharing reuses one leaf node") {
        Tensor w = make_param(Tensor({2}, {3.0, -1.0}));
        Tape tape;
        Var a = tape.param(w);
        Var b = tape.param(w);
        REQUIRE(a.idx == b.idx);
    }
    SECTION("non-scalar loss is rejected") {
        Tensor x = make_param(Tensor({3}, {1.0, 2.0, 3.0}));
        Tape tape;
        Var vx = tape.param(x);
        REQUIRE_THROWS_AS(tape.backward(vx), ShapeError);
    }
    SECTION("backward is bit-deterministic") {
        Rng rng(41);
        Tensor x0 = oracle::random_tensor({4, 4}, rng);
        std::vector<double> run1, run2;
        for (int rep = 0; rep < 2; ++rep) {
            Tensor x = make_param(x0);
            Tape tape;
            Var vx = tape.param(x);
            Var y = tape.softmax_rows(tape.matmul(vx, tape.transpose(vx)));
            Var loss = tape.sum_all(tape.mul(y, y));
            tape.backward(loss);
            (rep == 0 ? run1 : run2) = *x.grad;
        }
        REQUIRE(run1 == run2);
    }
}

TEST_CASE("finite differences validate every op") {
    Rng rng(57);
    auto check_scalar_graph = [&](const std::function<Var(Tape&, std::vector<Tensor*>&)>& build,
                                  std::vector<Tensor> params, double tol = 1e-4) {
        std::vector<Tensor*> ptrs;
        for (auto& p : params) {
            p.requires_grad = true;
            ptrs.push_back(&p);
        }
        auto f = [&](bool with_grad) {
            Tape tape;
            std::vector<Tensor*> ps = ptrs;
            Var loss = build(tape, ps);
            double v = tape.value(loss)[0];
            if (with_grad) tape.backward(loss);
            return v;
        };
        std::vector<std::pair<std::string, Tensor*>> named;
        for (std::size_t i = 0; i < ptrs.size(); ++i) named.emplace_back("p" + std::to_string(i), ptrs[i]);
        auto report = finite_diff_check(f, named);
        INFO("worst tensor " << report.worst_tensor << " coord " << report.worst_coord << " ad "
                             << report.worst_analytic << " fd " << report.worst_numeric);
        REQUIRE(report.max_rel_err < tol);
    };

    SECTION("matmul chain") {
        check_scalar_graph(
            [](Tape& t, std::vector<Tensor*>& p) {
                Var y = t.matmul(t.param(*p[0]), t.param(*p[1]));
                return t.sum_all(t.mul(y, y));
            },
            {oracle::random_tensor({3, 4}, rng), oracle::random_tensor({4, 2}, rng)});
    }
    SECTION("softmax and log_softmax") {
        check_scalar_graph(
            [](Tape& t, std::vector<Tensor*>& p) {
                Var s = t.softmax_rows(t.param(*p[0]));
                Var ls = t.log_softmax_rows(t.param(*p[0]));
                return t.add(t.sum_all(t.mul(s, s)), t.diag_sum(ls));
            },
            {oracle::random_tensor({4, 4}, rng)});
    }
    SECTION("layer_norm chain") {
        check_scalar_graph(
            [](Tape& t, std::vector<Tensor*>& p) {
                Var y = t.layer_norm(t.param(*p[0]), t.param(*p[1]), t.param(*p[2]), 1e-5);
                return t.sum_all(t.mul(y, y));
            },
            {oracle::random_tensor({3, 5}, rng), oracle::random_tensor({5}, rng), oracle::random_tensor({5}, rng)},
            1e-5);
    }
    SECTION("attention with head split and merge") {
        check_scalar_graph(
            [](Tape& t, std::vector<Tensor*>& p) {
                Var q = t.split_heads(t.param(*p[0]), 2);
                Var k = t.split_heads(t.param(*p[1]), 2);
                Var v = t.split_heads(t.param(*p[2]), 2);
                Var o = t.merge_heads(t.scaled_dot_attention(q, k, v));
                return t.sum_all(t.mul(o, o));
            },
            {oracle::random_tensor({3, 6}, rng), oracle::random_tensor({5, 6}, rng),
             oracle::random_tensor({5, 6}, rng)});
    }
    SECTION("structural ops") {
        check_scalar_graph(
            [](Tape& t, std::vector<Tensor*>& p) {
                Var a = t.param(*p[0]);
                Var b = t.param(*p[1]);
                Var cat = t.concat_cols(t.concat_rows(a, a), t.concat_rows(b, b));
                Var row = t.take_row(cat, 1);
                Var pooled = t.mean_rows(cat);
                Var stacked = t.stack_rows({row, pooled});
                return t.sum_all(t.mul(stacked, stacked));
            },
            {oracle::random_tensor({2, 3}, rng), oracle::random_tensor({2, 3}, rng)});
    }
    SECTION("segment max and grouped repeat") {
        check_scalar_graph(
            [](Tape& t, std::vector<Tensor*>& p) {
                Var x = t.param(*p[0]);
                Var pooled = t.segment_max_rows(x, 3);
                Var spread = t.repeat_rows_grouped(pooled, 3);
                Var y = t.concat_cols(x, spread);
                return t.sum_all(t.mul(y, y));
            },
            {oracle::random_tensor({6, 4}, rng)});
    }
    SECTION("normalize, scalar scale, exp, gelu") {
        check_scalar_graph(
            [](Tape& t, std::vector<Tensor*>& p) {
                Var x = t.l2_normalize_rows(t.param(*p[0]));
                Var s = t.exp_all(t.param(*p[1]));
                Var y = t.gelu(t.mul_scalar(x, s));
                return t.sum_all(t.mul(y, y));
            },
            {oracle::random_tensor({3, 4}, rng, 0.5, 1.5), Tensor({1}, {0.3})});
    }
    SECTION("vecmat, add_rowvec, transpose, interpolation") {
        check_scalar_graph(
            [](Tape& t, std::vector<Tensor*>& p) {
                Var pos = t.interpolate_pos(t.param(*p[0]), 6);
                Var shifted = t.add_rowvec(t.transpose(pos), t.param(*p[1]));
                Var v = t.vecmat(t.take_row(shifted, 0), t.transpose(shifted));
                return t.sum_all(t.mul(v, v));
            },
            {oracle::random_tensor({5, 3}, rng), oracle::random_tensor({7}, rng)});
    }
}

TEST_CASE("finite_diff_check on a quadratic is exact to roundoff") {
    Rng rng(61);
    Tensor x = oracle::random_tensor({8}, rng, 0.5, 1.5);
    x.requires_grad = true;
    Tensor a = oracle::random_tensor({8}, rng);
    auto f = [&](bool with_grad) {
        Tape tape;
        Var vx = tape.param(x);
        Var loss = tape.sum_all(tape.add(tape.mul(vx, vx), tape.mul(vx, tape.input(a))));
        double v = tape.value(loss)[0];
        if (with_grad) tape.backward(loss);
        return v;
    };
    auto report = finite_diff_check(f, {{"x", &x}});
    REQUIRE(report.max_rel_err < 1e-9);
}

TEST_CASE("tensor invariants") {
    SECTION("shape must match data length") {
        REQUIRE_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), ShapeError);
    }
    SECTION("scalar helpers") {
        Tensor s = Tensor::scalar(4.5);
        REQUIRE(s.is_scalar());
        REQUIRE(s.rank() == 1);
    }
}

TEST_CASE("EMBD tensor format") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "mlens_embd_test";
    fs::create_directories(dir);
    SECTION("roundtrip preserves storage-precision values") {
        Rng rng(71);
        Tensor t = oracle::random_tensor({3, 2, 2}, rng);
        quantize_to_storage(t);  // make every value representable in 32 bits
        std::string path = (dir / "t.embd").string();
        save_embd(t, path);
        Tensor back = load_embd(path);
        REQUIRE(back.shape() == t.shape());
        REQUIRE(back.values() == t.values());
    }
    SECTION("second write of a loaded tensor is byte-identical") {
        Rng rng(73);
        Tensor t = oracle::random_tensor({4, 4}, rng);
        std::string a, b;
        append_embd(a, t);
        detail::ByteReader r(a);
        Tensor loaded = read_embd(r);
        append_embd(b, loaded);
        REQUIRE(a == b);
    }
    SECTION("bad magic is rejected") {
        std::string path = (dir / "bad.embd").string();
        std::ofstream f(path, std::ios::binary);
        f << "NOPE0000";
        f.close();
        REQUIRE_THROWS_AS(load_embd(path), DataError);
    }
    fs::remove_all(dir);
}
