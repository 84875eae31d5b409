#include <cmath>
#include <numeric>

#include "doctest.h"
#include "helpers.hpp"

#include "ppmn/model.hpp"

using namespace ppmn;
using ppmn::test::random_tensor;
using ppmn::test::tensor;

namespace {

using Mat = std::vector<double>;

ModelConfig small_config() {
    ModelConfig c;
    c.visual_dim = 4;
    c.phrase_dim = 6;
    c.joint_dim = 4;
    c.heads = 2;
    c.compatible_pixels = 3;
    c.rounds = 2;
    c.norm_groups = 2;
    return c;
}

// Params with every entry random, so no path is trivially zero.
ModelParams<double> random_params(const ModelConfig& c, std::uint64_t seed) {
    auto p = init_params<double>(c, seed);
    CounterRng rng(seed + 99);
    p.visit([&](const std::string&, Tensor<double>& t) {
        for (auto& x : t.mutable_data()) x = 0.5 * rng.normal();
    });
    return p;
}

// out[r, j] = sum_i x[r, i] w[i, j] (+ b[j]).
Mat lin(const Mat& x, std::size_t rows, const Tensor<double>& w, const Tensor<double>* b = nullptr) {
    const std::size_t in = w.dim(0), out = w.dim(1);
    Mat y(rows * out, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < out; ++j) {
            double s = b ? b->data()[j] : 0.0;
            for (std::size_t i = 0; i < in; ++i) s += x[r * in + i] * w.data()[i * out + j];
            y[r * out + j] = s;
        }
    }
    return y;
}

Mat ln(const Mat& x, std::size_t rows, std::size_t c, const Tensor<double>& g, const Tensor<double>& b) {
    Mat y(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        double mean = 0, var = 0;
        for (std::size_t j = 0; j < c; ++j) mean += x[r * c + j];
        mean /= c;
        for (std::size_t j = 0; j < c; ++j) var += (x[r * c + j] - mean) * (x[r * c + j] - mean);
        var /= c;
        for (std::size_t j = 0; j < c; ++j) {
            y[r * c + j] = (x[r * c + j] - mean) / std::sqrt(var + kNormEpsilon) * g.data()[j] + b.data()[j];
        }
    }
    return y;
}

void relu_inplace(Mat& x) {
    for (auto& v : x) v = std::max(v, 0.0);
}

struct OracleRound {
    Mat refined;   // N x C
    Mat matching;  // N x P
};

// Step-by-step recomputation of one refinement round with plain loops.
OracleRound oracle_round(const Mat& f, std::size_t pixels, const Mat& r, std::size_t n, const Mat& h,
                         const RoundParams<double>& p, const ModelConfig& cfg) {
    const std::size_t c = cfg.joint_dim, hd = cfg.head_dim(), s = cfg.compatible_pixels;
    const std::size_t groups = cfg.effective_groups(), cg = c / groups;

    Mat proj = lin(f, pixels, p.visual_w, &p.visual_b);
    for (std::size_t g = 0; g < groups; ++g) {
        double mean = 0, var = 0;
        for (std::size_t i = 0; i < pixels; ++i) {
            for (std::size_t j = g * cg; j < (g + 1) * cg; ++j) mean += proj[i * c + j];
        }
        mean /= pixels * cg;
        for (std::size_t i = 0; i < pixels; ++i) {
            for (std::size_t j = g * cg; j < (g + 1) * cg; ++j) var += (proj[i * c + j] - mean) * (proj[i * c + j] - mean);
        }
        var /= pixels * cg;
        for (std::size_t i = 0; i < pixels; ++i) {
            for (std::size_t j = g * cg; j < (g + 1) * cg; ++j) {
                proj[i * c + j] = (proj[i * c + j] - mean) / std::sqrt(var + kNormEpsilon) * p.gn_gamma.data()[j] +
                                  p.gn_beta.data()[j];
            }
        }
    }
    relu_inplace(proj);

    Mat attended(n * c);
    const double inv = 1.0 / std::sqrt(double(c));
    for (std::size_t q = 0; q < n; ++q) {
        std::vector<std::size_t> idx;
        for (std::size_t b = 0; b < s; ++b) {
            const std::size_t lo = b * pixels / s, hi = (b + 1) * pixels / s;
            std::size_t best = lo;
            for (std::size_t i = lo; i < hi; ++i) {
                if (h[q * pixels + i] > h[q * pixels + best]) best = i;
            }
            idx.push_back(best);
        }
        for (std::size_t d = 0; d < cfg.heads; ++d) {
            Mat qin(hd), kin(s * hd);
            for (std::size_t j = 0; j < hd; ++j) qin[j] = r[q * c + d * hd + j];
            for (std::size_t t = 0; t < s; ++t) {
                for (std::size_t j = 0; j < hd; ++j) kin[t * hd + j] = proj[idx[t] * c + d * hd + j];
            }
            const Mat qq = lin(qin, 1, p.heads[d].query);
            const Mat kk = lin(kin, s, p.heads[d].key);
            const Mat vv = lin(kin, s, p.heads[d].value);
            Mat logits(s);
            for (std::size_t t = 0; t < s; ++t) {
                double dot = 0;
                for (std::size_t j = 0; j < hd; ++j) dot += qq[j] * kk[t * hd + j];
                logits[t] = dot * inv;
            }
            const double mx = *std::max_element(logits.begin(), logits.end());
            double z = 0;
            for (auto& l : logits) z += (l = std::exp(l - mx));
            for (std::size_t j = 0; j < hd; ++j) {
                double acc = 0;
                for (std::size_t t = 0; t < s; ++t) acc += logits[t] / z * vv[t * hd + j];
                attended[q * c + d * hd + j] = acc + r[q * c + d * hd + j];
            }
        }
    }
    Mat hidden = lin(ln(attended, n, c, p.ln_in_gamma, p.ln_in_beta), n, p.ffn_w1, &p.ffn_b1);
    relu_inplace(hidden);
    Mat ffn = lin(hidden, n, p.ffn_w2, &p.ffn_b2);
    Mat refined = ln(ffn, n, c, p.ln_out_gamma, p.ln_out_beta);
    for (std::size_t i = 0; i < refined.size(); ++i) refined[i] += attended[i];

    Mat x = refined;
    for (std::size_t k = 0; k < 4; ++k) {
        x = lin(x, n, p.mlp_w[k], &p.mlp_b[k]);
        if (k < 3) relu_inplace(x);
    }
    Mat match(n * pixels);
    for (std::size_t q = 0; q < n; ++q) {
        for (std::size_t i = 0; i < pixels; ++i) {
            double dot = 0;
            for (std::size_t j = 0; j < c; ++j) dot += x[q * c + j] * proj[i * c + j];
            match[q * pixels + i] = dot;
        }
    }
    return {refined, match};
}

void check_close(std::span<const double> a, const Mat& b, double tol) {
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(tol).scale(1.0));
}

}  // namespace

TEST_SUITE("positional encoding") {
    TEST_CASE("zero phase and determinism") {
        auto code = positional_code(3, 3, 8);
        for (std::size_t j = 0; j < 8; ++j) CHECK(code[j] == (j % 2 == 0 ? 0.0 : 1.0));
        CHECK(code == positional_code(3, 3, 8));
    }

    TEST_CASE("2x2 grid with four channels matches the closed form") {
        // Half = 2: channel pair (sin, cos) at frequency 1 for the row, then the column.
        auto code = positional_code(2, 2, 4);
        for (std::size_t i = 0; i < 2; ++i) {
            for (std::size_t j = 0; j < 2; ++j) {
                const double* px = code.data() + (i * 2 + j) * 4;
                CHECK(px[0] == doctest::Approx(std::sin(double(i))));
                CHECK(px[1] == doctest::Approx(std::cos(double(i))));
                CHECK(px[2] == doctest::Approx(std::sin(double(j))));
                CHECK(px[3] == doctest::Approx(std::cos(double(j))));
            }
        }
    }

    TEST_CASE("frequency ladder") {
        auto code = positional_code(1, 5, 8);
        // Column half starts at channel 4; channels 6 and 7 use 10000^(-2/4) = 0.01.
        const double* px = code.data() + 4 * 8;
        CHECK(px[4] == doctest::Approx(std::sin(4.0)));
        CHECK(px[6] == doctest::Approx(std::sin(0.04)));
        CHECK(px[7] == doctest::Approx(std::cos(0.04)));
    }

    TEST_CASE("odd channel count rejected") {
        CHECK_THROWS_AS(positional_code(2, 2, 3), ConfigError);
        CHECK_THROWS_AS(add_positional_encoding(tensor<double>({1, 1, 3}, {0, 0, 0})), ConfigError);
    }

    TEST_CASE("adds the code to the input") {
        CounterRng rng(1);
        auto v = random_tensor<double>(rng, {2, 3, 4});
        auto out = add_positional_encoding(v).to_vector();
        auto code = positional_code(2, 3, 4);
        for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == v.data()[i] + code[i]);
    }
}

TEST_SUITE("projection and matching") {
    TEST_CASE("identity projections") {
        ModelConfig c;
        c.visual_dim = c.phrase_dim = c.joint_dim = 4;
        c.heads = 1;
        c.rounds = 0;
        auto p = init_params<double>(c, 0);
        Mat eye(16, 0.0);
        for (int i = 0; i < 4; ++i) eye[i * 5] = 1.0;
        p.visual_proj = tensor<double>({4, 4}, eye);
        p.phrase_proj = tensor<double>({4, 4}, eye);
        CounterRng rng(2);
        auto v = random_tensor<double>(rng, {2, 2, 4});
        auto r = random_tensor<double>(rng, {3, 4});
        auto proj = project_round0(v, r, p);
        CHECK(proj.pixels.to_vector() == v.to_vector());
        CHECK(proj.phrases.to_vector() == r.to_vector());
        auto zero = project_round0(v, tensor<double>({3, 4}, Mat(12, 0.0)), p);
        for (double x : zero.phrases.data()) CHECK(x == 0.0);
    }

    TEST_CASE("random projection matches matmul oracle") {
        auto c = small_config();
        auto p = random_params(c, 3);
        CounterRng rng(3);
        auto v = random_tensor<double>(rng, {3, 2, 4});
        auto r = random_tensor<double>(rng, {2, 6});
        auto proj = project_round0(v, r, p);
        check_close(proj.pixels.data(), lin(v.to_vector(), 6, p.visual_proj), 1e-12);
        check_close(proj.phrases.data(), lin(r.to_vector(), 2, p.phrase_proj), 1e-12);
        CHECK_THROWS_AS(project_round0(v, random_tensor<double>(rng, {2, 5}), p), DimensionError);
    }

    TEST_CASE("match scores are dot products") {
        auto pix = tensor<double>({2, 2}, {1, 0, 0.6, 0.8});
        auto phr = tensor<double>({2, 2}, {0, 1, 0.6, 0.8});
        auto h = match(pix, phr).to_vector();
        CHECK(h[0] == 0.0);
        CHECK(h[3] == doctest::Approx(1.0));

        CounterRng rng(4);
        auto f = random_tensor<double>(rng, {4, 5});
        auto q = random_tensor<double>(rng, {3, 5});
        auto m = match(f, q);
        REQUIRE(m.shape() == Shape{3, 4});
        for (std::size_t n = 0; n < 3; ++n) {
            for (std::size_t i = 0; i < 4; ++i) {
                double dot = 0;
                for (std::size_t j = 0; j < 5; ++j) dot += q.at({n, j}) * f.at({i, j});
                CHECK(m.at({n, i}) == doctest::Approx(dot).epsilon(1e-12));
            }
        }
    }

    TEST_CASE("respond") {
        auto zero = respond(tensor<double>({2, 4}, Mat(8, 0.0)), 2, 2);
        CHECK(zero.shape() == Shape{2, 2, 2});
        for (double v : zero.data()) CHECK(v == 0.5);
        CHECK(respond(tensor<double>({1, 1}, {40.0}), 1, 1).item() > 1.0 - 1e-12);
        CounterRng rng(5);
        auto h = random_tensor<double>(rng, {3, 6}, false, 3.0);
        auto m = respond(h, 2, 3).to_vector();
        for (std::size_t i = 0; i < m.size(); ++i) CHECK(m[i] == doctest::Approx(1.0 / (1.0 + std::exp(-h.data()[i]))));
        CHECK_THROWS_AS(respond(h, 2, 2), DimensionError);
    }
}

TEST_SUITE("lcpa round") {
    TEST_CASE("matches the step-by-step oracle") {
        auto c = small_config();
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            auto p = random_params(c, seed);
            CounterRng rng(seed + 10);
            const std::size_t n = 3, hh = 3, ww = 3;
            auto f = random_tensor<double>(rng, {hh, ww, 4});
            auto r = random_tensor<double>(rng, {n, 4});
            auto h = random_tensor<double>(rng, {n, hh * ww});
            auto out = lcpa_round(f, r, h, p.rounds[0], c);
            auto want = oracle_round(f.to_vector(), hh * ww, r.to_vector(), n, h.to_vector(), p.rounds[0], c);
            check_close(out.phrases.data(), want.refined, 1e-10);
            check_close(out.matching.data(), want.matching, 1e-10);
        }
    }

    TEST_CASE("single compatible pixel returns its value projection") {
        auto c = small_config();
        c.compatible_pixels = 1;
        auto p = random_params(c, 20);
        auto& rp = p.rounds[0];
        for (auto& x : rp.ln_out_gamma.mutable_data()) x = 0.0;
        for (auto& x : rp.ln_out_beta.mutable_data()) x = 0.0;
        CounterRng rng(21);
        auto f = random_tensor<double>(rng, {2, 3, 4});
        auto r = random_tensor<double>(rng, {2, 4});
        auto h = random_tensor<double>(rng, {2, 6});
        auto out = lcpa_round(f, r, h, rp, c);

        // Rebuild the projected map through the oracle with S = 1; the value
        // of the chosen pixel, per head, plus the residual must come back.
        auto want = oracle_round(f.to_vector(), 6, r.to_vector(), 2, h.to_vector(), rp, c);
        check_close(out.phrases.data(), want.refined, 1e-12);
        for (std::size_t n = 0; n < 2; ++n) {
            std::size_t best = 0;
            for (std::size_t i = 1; i < 6; ++i) {
                if (h.at({n, i}) > h.at({n, best})) best = i;
            }
            CHECK(out.compatible.at(n, 0) == best);
        }
    }

    TEST_CASE("zero visual features leave only the residual path") {
        auto c = small_config();
        auto p = random_params(c, 30);
        auto& rp = p.rounds[0];
        for (auto& x : rp.visual_b.mutable_data()) x = 0.0;
        for (auto& x : rp.gn_beta.mutable_data()) x = 0.0;
        for (auto& x : rp.ln_out_gamma.mutable_data()) x = 0.0;
        for (auto& x : rp.ln_out_beta.mutable_data()) x = 0.0;
        CounterRng rng(31);
        auto r = random_tensor<double>(rng, {3, 4});
        auto h = random_tensor<double>(rng, {3, 9});
        auto out = lcpa_round(tensor<double>({3, 3, 4}, Mat(36, 0.0)), r, h, rp, c);
        CHECK(out.phrases.to_vector() == r.to_vector());
        for (double x : out.matching.data()) CHECK(x == 0.0);
    }

    TEST_CASE("one phrase, four pixels, one head by hand") {
        ModelConfig c;
        c.visual_dim = 2;
        c.phrase_dim = 2;
        c.joint_dim = 2;
        c.heads = 1;
        c.compatible_pixels = 2;
        c.rounds = 1;
        c.norm_groups = 1;
        c.positional_encoding = false;
        auto p = init_params<double>(c, 0);
        auto& rp = p.rounds[0];
        const Mat eye = {1, 0, 0, 1};
        rp.heads[0].query = tensor<double>({2, 2}, eye, true);
        rp.heads[0].key = tensor<double>({2, 2}, eye, true);
        rp.heads[0].value = tensor<double>({2, 2}, eye, true);
        rp.visual_w = tensor<double>({2, 2}, eye, true);
        rp.gn_beta = tensor<double>({2}, {0, 0}, true);
        for (auto& x : rp.ln_out_gamma.mutable_data()) x = 0.0;
        for (std::size_t k = 0; k < 4; ++k) rp.mlp_w[k] = tensor<double>({2, 2}, eye, true);

        // Pixels (row-major) and their group-normalised, relu'd versions:
        // the four values per channel are symmetric, so the map is z-scored.
        auto f = tensor<double>({2, 2, 2}, {1, 0, 0, 1, -1, 0, 0, -1});
        auto r = tensor<double>({1, 2}, {2, 0});
        auto h = tensor<double>({1, 4}, {0.1, 0.9, 0.2, 0.3});
        auto out = lcpa_round(f, r, h, rp, c);
        CHECK(out.compatible.values == std::vector<std::uint32_t>{1, 3});

        // All eight entries share mean 0 and variance 1/2.
        const double z = 1.0 / std::sqrt(0.5 + kNormEpsilon);
        // Pixel 1 -> (0, z), pixel 3 -> relu(0, -z) = (0, 0).
        const double l1 = (2 * 0 + 0 * z) / std::sqrt(2.0), l3 = 0.0;
        const double w1 = std::exp(l1) / (std::exp(l1) + std::exp(l3));
        const Mat attended = {2.0, w1 * z};
        check_close(out.phrases.data(), attended, 1e-12);
        // Matching maps: relu MLP with identity weights keeps the positive
        // attended vector, dotted with each projected pixel.
        const Mat proj = {z, 0, 0, z, 0, 0, 0, 0};
        Mat want(4);
        for (int i = 0; i < 4; ++i) want[i] = attended[0] * proj[i * 2] + attended[1] * proj[i * 2 + 1];
        check_close(out.matching.data(), want, 1e-12);
    }

    TEST_CASE("S beyond the pixel count is a config error") {
        auto c = small_config();
        c.compatible_pixels = 10;
        auto p = random_params(c, 1);
        CounterRng rng(1);
        CHECK_THROWS_AS(lcpa_round(random_tensor<double>(rng, {3, 3, 4}), random_tensor<double>(rng, {2, 4}),
                                   random_tensor<double>(rng, {2, 9}), p.rounds[0], c),
                        ConfigError);
    }

    TEST_CASE("top-k with S = P selects every pixel whatever the scores") {
        auto c = small_config();
        c.pool = PoolMode::topk;
        c.compatible_pixels = 9;
        auto p = random_params(c, 40);
        CounterRng rng(41);
        for (int trial = 0; trial < 5; ++trial) {
            auto out = lcpa_round(random_tensor<double>(rng, {3, 3, 4}), random_tensor<double>(rng, {2, 4}),
                                  random_tensor<double>(rng, {2, 9}, false, 5.0), p.rounds[0], c);
            for (std::size_t n = 0; n < 2; ++n) {
                for (std::size_t s = 0; s < 9; ++s) CHECK(out.compatible.at(n, s) == s);
            }
        }
    }
}

TEST_SUITE("forward") {
    TEST_CASE("zero rounds equals respond(match(project))") {
        auto c = small_config();
        auto p = random_params(c, 50);
        CounterRng rng(51);
        auto v = random_tensor<double>(rng, {3, 3, 4});
        auto r = random_tensor<double>(rng, {2, 6});
        auto out = forward(v, r, p, 0);
        REQUIRE(out.responses.size() == 1);
        auto proj = project_round0(add_positional_encoding(v), r, p);
        CHECK(out.responses[0].to_vector() == respond(match(proj.pixels, proj.phrases), 3, 3).to_vector());
        CHECK_THROWS_AS(forward(v, r, p, 3), ConfigError);
    }

    TEST_CASE("L rounds give L + 1 maps of shape N x H x W inside (0, 1)") {
        auto c = small_config();
        c.rounds = 3;
        auto p = init_params<float>(c, 52);
        CounterRng rng(53);
        auto out = forward(random_tensor(rng, {4, 5, 4}), random_tensor(rng, {3, 6}), p);
        REQUIRE(out.responses.size() == 4);
        for (const auto& m : out.responses) {
            CHECK(m.shape() == Shape{3, 4, 5});
            for (float x : m.data()) {
                CHECK(x > 0.0f);
                CHECK(x < 1.0f);
            }
        }
    }

    TEST_CASE("rerun with frozen weights is bit-identical") {
        auto c = small_config();
        auto p = init_params<float>(c, 54);
        CounterRng rng(55);
        auto v = random_tensor(rng, {4, 4, 4});
        auto r = random_tensor(rng, {3, 6});
        auto a = forward(v, r, p);
        auto b = forward(v, r, p);
        for (std::size_t l = 0; l < a.responses.size(); ++l) CHECK(a.responses[l].to_vector() == b.responses[l].to_vector());
    }

    TEST_CASE("permuting phrases permutes every map") {
        auto c = small_config();
        auto p = random_params(c, 56);
        CounterRng rng(57);
        auto v = random_tensor<double>(rng, {3, 4, 4});
        auto r = random_tensor<double>(rng, {3, 6});
        const std::vector<std::size_t> perm = {2, 0, 1};
        Mat rp;
        for (auto k : perm) {
            for (std::size_t j = 0; j < 6; ++j) rp.push_back(r.at({k, j}));
        }
        auto a = forward(v, r, p);
        auto b = forward(v, tensor<double>({3, 6}, rp), p);
        for (std::size_t l = 0; l < a.responses.size(); ++l) {
            for (std::size_t n = 0; n < 3; ++n) {
                for (std::size_t i = 0; i < 12; ++i) {
                    CHECK(b.responses[l].data()[n * 12 + i] ==
                          doctest::Approx(a.responses[l].data()[perm[n] * 12 + i]).epsilon(1e-12));
                }
            }
        }
    }

    TEST_CASE("scaling one phrase scales its initial matching row") {
        auto c = small_config();
        auto p = random_params(c, 58);
        CounterRng rng(59);
        auto v = random_tensor<double>(rng, {3, 3, 4});
        auto r = random_tensor<double>(rng, {3, 6});
        Mat scaled = r.to_vector();
        for (std::size_t j = 0; j < 6; ++j) scaled[6 + j] *= 2.5;
        auto a = forward(v, r, p, 0).matching[0];
        auto b = forward(v, tensor<double>({3, 6}, scaled), p, 0).matching[0];
        for (std::size_t n = 0; n < 3; ++n) {
            for (std::size_t i = 0; i < 9; ++i) {
                const double want = (n == 1 ? 2.5 : 1.0) * a.at({n, i});
                CHECK(b.at({n, i}) == doctest::Approx(want).epsilon(1e-12));
            }
        }
    }
}

TEST_SUITE("params") {
    TEST_CASE("layout and count follow the config") {
        ModelConfig c;
        auto layout = parameter_layout(c);
        std::size_t total = 0;
        for (const auto& [name, shape] : layout) total += numel(shape);
        auto p = init_params<float>(c, 0);
        CHECK(p.parameter_count() == total);
        std::size_t k = 0;
        p.visit([&](const std::string& name, const Tensor<float>& t) {
            CHECK(name == layout[k].first);
            CHECK(t.shape() == layout[k].second);
            ++k;
        });
        CHECK(k == layout.size());
        c.rounds = 1;
        CHECK(parameter_layout(c).size() < layout.size());
    }

    TEST_CASE("init is seeded") {
        auto c = small_config();
        auto a = init_params<float>(c, 1);
        auto b = init_params<float>(c, 1);
        auto d = init_params<float>(c, 2);
        CHECK(a.visual_proj.to_vector() == b.visual_proj.to_vector());
        CHECK(a.visual_proj.to_vector() != d.visual_proj.to_vector());
        for (float x : a.rounds[0].gn_gamma.data()) CHECK(x == 1.0f);
        for (float x : a.rounds[0].ffn_b1.data()) CHECK(x == 0.0f);
    }

    TEST_CASE("config validation") {
        ModelConfig c;
        c.heads = 3;
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c = ModelConfig{};
        c.visual_dim = 7;
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c.positional_encoding = false;
        CHECK_NOTHROW(c.validate());
        c.gather = GatherSource::raw;
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c = ModelConfig{};
        c.norm_groups = 6;
        CHECK(c.effective_groups() == 4);
    }
}
