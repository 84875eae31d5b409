#include <cmath>
#include <numeric>

#include "doctest.h"
#include "helpers.hpp"

#include "ppmn/gradcheck.hpp"
#include "ppmn/objectives.hpp"

using namespace ppmn;
using ppmn::test::random_maps;
using ppmn::test::random_truth;
using ppmn::test::tensor;

namespace {

GroundTruth truth(std::size_t n, std::size_t h, std::size_t w, std::vector<std::uint8_t> masks,
                  std::vector<bool> valid) {
    GroundTruth y;
    y.phrases = n;
    y.height = h;
    y.width = w;
    y.masks = std::move(masks);
    y.valid = std::move(valid);
    y.category.assign(n, Category::thing);
    y.plurality.assign(n, Plurality::singular);
    return y;
}

Tensor<double> maps(Shape shape, std::vector<double> v, bool rg = false) {
    return tensor<double>(std::move(shape), std::move(v), rg);
}

// Straight-line dice of one phrase row.
double dice_row(std::span<const double> m, const std::uint8_t* y, double eps) {
    double inter = 0, sm = 0, sy = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        inter += m[i] * y[i];
        sm += m[i];
        sy += y[i];
    }
    return 1.0 - (2.0 * inter + eps) / (sm + sy + eps);
}

}  // namespace

TEST_SUITE("bce") {
    TEST_CASE("midpoint gives ln 2") {
        CounterRng rng(1);
        auto y = random_truth(rng, 3, 4, 4, 1.0);
        CHECK(bce_loss(maps({3, 4, 4}, std::vector<double>(48, 0.5)), y).item() == doctest::Approx(std::log(2.0)));
    }

    TEST_CASE("near-saturated correct maps give near zero") {
        auto y = truth(1, 1, 4, {1, 0, 1, 0}, {true});
        CHECK(bce_loss(maps({1, 1, 4}, {1 - 1e-9, 1e-9, 1 - 1e-9, 1e-9}), y).item() < 1e-8);
    }

    TEST_CASE("two-phrase hand case") {
        auto y = truth(2, 1, 1, {1, 0}, {true, true});
        CHECK(bce_loss(maps({2, 1, 1}, {0.9, 0.2}), y).item() ==
              doctest::Approx(-(std::log(0.9) + std::log(0.8)) / 2).epsilon(1e-12));
        CHECK(bce_loss(maps({2, 1, 1}, {0.9, 0.2}), y).item() == doctest::Approx(0.1643).epsilon(1e-3));
    }

    TEST_CASE("invalid phrases are excluded") {
        auto y = truth(2, 1, 2, {1, 0, 0, 0}, {true, false});
        auto only = truth(1, 1, 2, {1, 0}, {true});
        auto a = bce_loss(maps({2, 1, 2}, {0.7, 0.4, 0.99, 0.01}), y).item();
        auto b = bce_loss(maps({1, 1, 2}, {0.7, 0.4}), only).item();
        CHECK(a == doctest::Approx(b).epsilon(1e-15));
        auto none = truth(1, 1, 2, {0, 0}, {false});
        CHECK(bce_loss(maps({1, 1, 2}, {0.3, 0.3}), none).item() == 0.0);
    }

    TEST_CASE("shape mismatch") {
        auto y = truth(1, 1, 2, {1, 0}, {true});
        CHECK_THROWS_AS(bce_loss(maps({1, 1, 3}, {0.5, 0.5, 0.5}), y), DimensionError);
    }

    TEST_CASE("invariant to permuting valid phrases and pixels") {
        CounterRng rng(2);
        for (int trial = 0; trial < 20; ++trial) {
            auto y = random_truth(rng, 4, 3, 3, 1.0);
            auto m = random_maps(rng, {4, 3, 3});
            const std::vector<std::size_t> rows = {3, 1, 0, 2};
            std::vector<std::size_t> px(9);
            std::iota(px.begin(), px.end(), 0);
            for (std::size_t j = 9; j > 1; --j) std::swap(px[j - 1], px[rng.below(j)]);
            GroundTruth y2 = y;
            std::vector<double> m2(36);
            for (std::size_t n = 0; n < 4; ++n) {
                for (std::size_t i = 0; i < 9; ++i) {
                    y2.masks[n * 9 + i] = y.masks[rows[n] * 9 + px[i]];
                    m2[n * 9 + i] = m.data()[rows[n] * 9 + px[i]];
                }
            }
            CHECK(bce_loss(maps({4, 3, 3}, m2), y2).item() == doctest::Approx(bce_loss(m, y).item()).epsilon(1e-12));
        }
    }
}

TEST_SUITE("multilabel view") {
    TEST_CASE("trivial cases") {
        CounterRng rng(3);
        auto y = random_truth(rng, 2, 2, 2, 1.0);
        CHECK(multilabel_view_loss(maps({2, 2, 2}, std::vector<double>(8, 0.5)), y) == doctest::Approx(std::log(2.0)));
        auto one = truth(1, 1, 1, {1}, {true});
        CHECK(multilabel_view_loss(maps({1, 1, 1}, {0.3}), one) == doctest::Approx(-std::log(0.3)));
    }

    TEST_CASE("agrees with bce on random inputs including ungrounded rows") {
        CounterRng rng(4);
        for (int trial = 0; trial < 100; ++trial) {
            const std::size_t n = 1 + rng.below(8), h = 1 + rng.below(16);
            auto y = random_truth(rng, n, h, h, 0.7);
            auto m = random_maps(rng, {n, h, h}, 1e-4, 1 - 1e-4);
            CHECK(std::abs(multilabel_view_loss(m, y) - bce_loss(m, y).item()) <= 1e-6);
        }
    }
}

TEST_SUITE("dice") {
    TEST_CASE("hand cases") {
        auto y = truth(1, 1, 4, {1, 0, 0, 0}, {true});
        CHECK(dice_loss(maps({1, 1, 4}, {1, 1, 0, 0}), y).item() == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
        CHECK(dice_loss(maps({1, 1, 4}, {1, 0, 0, 0}), y).item() == doctest::Approx(0.0).scale(1.0).epsilon(1e-9));
        CHECK(dice_loss(maps({1, 1, 4}, {0, 0, 0, 0}), y).item() == doctest::Approx(1.0).epsilon(1e-5));
    }

    TEST_CASE("empty prediction on empty mask is zero") {
        auto y = truth(1, 1, 2, {0, 0}, {true});
        CHECK(dice_loss(maps({1, 1, 2}, {0, 0}), y).item() == 0.0);
    }

    TEST_CASE("matches per-row formula averaged over valid phrases") {
        CounterRng rng(5);
        for (int trial = 0; trial < 20; ++trial) {
            auto y = random_truth(rng, 5, 3, 4, 0.6);
            if (y.valid_count() == 0) continue;
            auto m = random_maps(rng, {5, 3, 4}, 0.0, 1.0);
            double acc = 0;
            for (std::size_t n = 0; n < 5; ++n) {
                if (y.valid[n]) acc += dice_row(m.data().subspan(n * 12, 12), y.row(n), 1e-6);
            }
            CHECK(dice_loss(m, y).item() == doctest::Approx(acc / y.valid_count()).epsilon(1e-12));
        }
    }
}

TEST_SUITE("ppm and deep supervision") {
    TEST_CASE("weights select components") {
        CounterRng rng(6);
        auto y = random_truth(rng, 3, 4, 4, 1.0);
        auto m = random_maps(rng, {3, 4, 4});
        LossConfig no_dice{1.0, 0.0};
        LossConfig no_bce{0.0, 1.0};
        CHECK(ppm_loss(m, y, no_dice).item() == bce_loss(m, y).item());
        CHECK(ppm_loss(m, y, no_bce).item() == dice_loss(m, y).item());
    }

    TEST_CASE("hand case is the sum of component oracles") {
        auto y = truth(2, 1, 1, {1, 0}, {true, true});
        auto m = maps({2, 1, 1}, {0.9, 0.2});
        const double bce = -(std::log(0.9) + std::log(0.8)) / 2;
        const double dice = (1 - (1.8 + 1e-6) / (1.9 + 1e-6) + 1 - 1e-6 / (0.2 + 1e-6)) / 2;
        CHECK(ppm_loss(m, y, LossConfig{}).item() == doctest::Approx(bce + dice).epsilon(1e-12));
    }

    TEST_CASE("total_loss policies") {
        CounterRng rng(7);
        auto y = random_truth(rng, 3, 4, 4, 1.0);
        std::vector<Tensor<double>> three = {random_maps(rng, {3, 4, 4}), random_maps(rng, {3, 4, 4}),
                                             random_maps(rng, {3, 4, 4})};
        LossConfig all;
        LossConfig literal;
        literal.supervise = SupervisionPolicy::skip_final;

        auto single = total_loss<double>(std::span(three.data(), 1), y, all);
        CHECK(single.total.item() == ppm_loss(three[0], y, all).item());
        CHECK(total_loss<double>(std::span(three.data(), 1), y, literal).total.item() == single.total.item());

        std::vector<Tensor<double>> same(4, three[1]);
        CHECK(total_loss<double>(same, y, all).total.item() ==
              doctest::Approx(4 * ppm_loss(three[1], y, all).item()).epsilon(1e-12));

        auto a = total_loss<double>(three, y, all);
        auto b = total_loss<double>(three, y, literal);
        CHECK(a.per_round.size() == 3);
        CHECK(b.per_round.size() == 2);
        CHECK(a.total.item() - b.total.item() == doctest::Approx(ppm_loss(three[2], y, all).item()).epsilon(1e-12));
        CHECK(a.bce + a.dice == doctest::Approx(a.total.item()).epsilon(1e-12));

        CHECK_THROWS_AS(total_loss<double>(std::span<const Tensor<double>>(), y, all), UsageError);
    }

    TEST_CASE("total_loss is nondecreasing in each weight") {
        CounterRng rng(8);
        for (int trial = 0; trial < 30; ++trial) {
            auto y = random_truth(rng, 3, 3, 3);
            std::vector<Tensor<double>> m = {random_maps(rng, {3, 3, 3}), random_maps(rng, {3, 3, 3})};
            LossConfig lo{rng.uniform(0, 2), rng.uniform(0, 2)};
            LossConfig hb = lo, hd = lo;
            hb.bce_weight += rng.uniform(0, 1);
            hd.dice_weight += rng.uniform(0, 1);
            const double base = total_loss<double>(m, y, lo).total.item();
            CHECK(total_loss<double>(m, y, hb).total.item() >= base);
            CHECK(total_loss<double>(m, y, hd).total.item() >= base);
        }
    }

    TEST_CASE("negative weights rejected") {
        LossConfig c;
        c.dice_weight = -1;
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }
}

TEST_SUITE("loss bounds") {
    TEST_CASE("dice in [0, 1] and bce nonnegative on random inputs") {
        CounterRng rng(9);
        for (int trial = 0; trial < 300; ++trial) {
            const std::size_t n = 1 + rng.below(6), h = 1 + rng.below(8);
            auto y = random_truth(rng, n, h, h, 0.7);
            auto m = random_maps(rng, {n, h, h}, 0.0, 1.0);
            const double d = dice_loss(m, y).item();
            CHECK(d >= 0.0);
            CHECK(d <= 1.0);
            auto open = random_maps(rng, {n, h, h}, 1e-6, 1 - 1e-6);
            CHECK(bce_loss(open, y).item() >= 0.0);
        }
    }
}

TEST_SUITE("loss gradients") {
    TEST_CASE("finite differences on random masks") {
        CounterRng rng(10);
        for (int trial = 0; trial < 10; ++trial) {
            auto y = random_truth(rng, 3, 3, 3);
            if (y.valid_count() == 0) continue;
            auto m = random_maps(rng, {3, 3, 3}, 0.2, 0.8, true);
            LossConfig cfg{rng.uniform(0.5, 2), rng.uniform(0.5, 2)};
            for (const auto& [name, fn] : std::vector<std::pair<std::string, ScalarFn>>{
                     {"bce", [&](const std::vector<Tensor<double>>& x) { return bce_loss(x[0], y); }},
                     {"dice", [&](const std::vector<Tensor<double>>& x) { return dice_loss(x[0], y); }},
                     {"ppm", [&](const std::vector<Tensor<double>>& x) { return ppm_loss(x[0], y, cfg); }}}) {
                auto r = finite_diff_check(name, fn, {m});
                INFO(name << " " << r.max_rel_error);
                CHECK(r.passed);
            }
        }
    }

    TEST_CASE("invalid rows receive no gradient") {
        auto y = truth(2, 1, 2, {1, 0, 0, 0}, {true, false});
        auto m = maps({2, 1, 2}, {0.6, 0.3, 0.5, 0.5}, true);
        backward(ppm_loss(m, y, LossConfig{}));
        CHECK(m.grad()[2] == 0.0);
        CHECK(m.grad()[3] == 0.0);
        CHECK(m.grad()[0] != 0.0);
    }
}
