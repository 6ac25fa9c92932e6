#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "vssa/evaluator.hpp"
#include "vssa/rng.hpp"

using namespace vssa;
using namespace refs;

TEST_CASE("perfect detections give mAP 1 and a perfect operating point") {
    Rng rng(61);
    std::vector<EvalInstance> set(4);
    for (auto& im : set) {
        for (int j = 0; j < 3; ++j) {
            auto g = random_gt(rng, 3);
            im.gts.push_back(g);
            im.dets.push_back({g.box(), g.cls, rng.uniform(0.5, 1)});
        }
        std::sort(im.dets.begin(), im.dets.end(),
                  [](const Detection& a, const Detection& b) { return a.score > b.score; });
    }
    auto rep = evaluate(set, 3);
    CHECK(rep.map == doctest::Approx(1.0));
    CHECK(rep.precision == doctest::Approx(1.0));
    CHECK(rep.recall == doctest::Approx(1.0));
    CHECK(rep.f1 == doctest::Approx(1.0));
}

TEST_CASE("no detections at all: zero recall, zero AP") {
    std::vector<EvalInstance> set(2);
    set[0].gts.push_back({10, 10, 30, 30, 1});
    set[1].gts.push_back({20, 20, 50, 50, 2});
    auto rep = evaluate(set, 2);
    CHECK(rep.map == 0.0);
    CHECK(rep.recall == 0.0);
    for (const auto& c : rep.per_class) CHECK(c.ap == 0.0);
}

TEST_CASE("a duplicate hit on an already-claimed truth is a false positive") {
    std::vector<EvalInstance> set(1);
    set[0].gts.push_back({10, 10, 30, 30, 1});
    set[0].dets.push_back({{10, 10, 30, 30}, 1, 0.9});
    set[0].dets.push_back({{10, 10, 30, 30}, 1, 0.8});
    auto rep = evaluate(set, 1);
    REQUIRE(rep.log.size() == 2);
    CHECK(rep.log[0].tp);
    CHECK(!rep.log[1].tp);
    // 11-point AP with recall 1 at precision 1 first: still 1.0.
    CHECK(rep.per_class[0].ap == doctest::Approx(1.0));
}

TEST_CASE("classes without ground truth stay out of the mean") {
    std::vector<EvalInstance> set(1);
    set[0].gts.push_back({10, 10, 30, 30, 1});
    set[0].dets.push_back({{10, 10, 30, 30}, 1, 0.9});
    set[0].dets.push_back({{40, 40, 60, 60}, 2, 0.8});  // class 2 has no gt
    auto rep = evaluate(set, 3);
    CHECK(rep.map == doctest::Approx(1.0));  // classes 2 and 3 excluded
    CHECK(rep.per_class[1].num_gt == 0);
    CHECK(rep.per_class[1].ap == 0.0);
}

TEST_CASE("out-of-range class ids are rejected") {
    std::vector<EvalInstance> set(1);
    set[0].dets.push_back({{0, 0, 5, 5}, 4, 0.5});
    CHECK_THROWS_AS(evaluate(set, 3), std::invalid_argument);
    set[0].dets.clear();
    set[0].gts.push_back({0, 0, 5, 5, 0});
    CHECK_THROWS_AS(evaluate(set, 3), std::invalid_argument);
}

TEST_CASE("matches the brute-force AP oracle on random instances") {
    Rng rng(62);
    for (int t = 0; t < 120; ++t) {
        auto set = random_eval_set(rng, static_cast<int>(rng.uniform_int(1, 4)), 3);
        auto rep = evaluate(set, 3);
        double sum = 0;
        int n = 0;
        for (int c = 1; c <= 3; ++c) {
            const double want = ref_class_ap(set, c, 0.5);
            const auto& ce = rep.per_class[static_cast<std::size_t>(c - 1)];
            if (ce.num_gt > 0) {
                CHECK(std::abs(ce.ap - want) < 1e-9);
                sum += want;
                ++n;
            }
        }
        if (n > 0) CHECK(std::abs(rep.map - sum / n) < 1e-9);
    }
}

TEST_CASE("an extra false positive below every true positive never raises AP") {
    Rng rng(63);
    for (int t = 0; t < 40; ++t) {
        auto set = random_eval_set(rng, 2, 2);
        auto before = evaluate(set, 2);
        double lowest = 1.0;
        for (const auto& im : set)
            for (const auto& d : im.dets) lowest = std::min(lowest, d.score);
        set[0].dets.push_back({{0, 0, 3, 3}, 1, lowest * 0.5});
        auto after = evaluate(set, 2);
        for (std::size_t c = 0; c < 2; ++c) CHECK(after.per_class[c].ap <= before.per_class[c].ap + 1e-12);
    }
}

TEST_CASE("AP ignores any order-preserving rescaling of scores") {
    Rng rng(64);
    for (int t = 0; t < 40; ++t) {
        auto set = random_eval_set(rng, 3, 3);
        auto before = evaluate(set, 3);
        for (auto& im : set)
            for (auto& d : im.dets) d.score = 0.2 + 0.5 * std::tanh(2.0 * d.score);  // strictly increasing
        auto after = evaluate(set, 3);
        for (std::size_t c = 0; c < 3; ++c) CHECK(after.per_class[c].ap == doctest::Approx(before.per_class[c].ap));
        CHECK(after.map == doctest::Approx(before.map));
    }
}

TEST_CASE("dropping a matched detection cannot raise recall") {
    // Full-list recall (ratio of ground truths eventually matched): the
    // F1-max operating point is free to move, so it is not the subject here.
    auto full_recall = [](const EvalReport& r) {
        int tp = 0, gt = 0;
        for (const auto& e : r.log) tp += e.tp ? 1 : 0;
        for (const auto& c : r.per_class) gt += c.num_gt;
        return gt > 0 ? static_cast<double>(tp) / gt : 0.0;
    };
    Rng rng(65);
    for (int t = 0; t < 40; ++t) {
        auto set = random_eval_set(rng, 2, 2);
        auto before = evaluate(set, 2);
        // Find one true positive (by log) and erase that detection.
        const MatchLogEntry* hit = nullptr;
        for (const auto& e : before.log)
            if (e.tp) {
                hit = &e;
                break;
            }
        if (!hit) continue;
        auto& dets = set[static_cast<std::size_t>(hit->image)].dets;
        for (std::size_t i = 0; i < dets.size(); ++i) {
            if (dets[i].cls == hit->cls && dets[i].score == hit->score) {
                dets.erase(dets.begin() + static_cast<std::ptrdiff_t>(i));
                break;
            }
        }
        auto after = evaluate(set, 2);
        CHECK(full_recall(after) <= full_recall(before) + 1e-12);
    }
}

TEST_CASE("report renders a table and a parsable delimited block") {
    std::vector<EvalInstance> set(1);
    set[0].gts.push_back({10, 10, 30, 30, 1});
    set[0].dets.push_back({{10, 10, 30, 30}, 1, 0.75});
    auto rep = evaluate(set, 2);
    auto txt = rep.text_table();
    CHECK(txt.find("mAP") != std::string::npos);
    CHECK(txt.find("precision") != std::string::npos);
    auto tsv = rep.delimited();
    CHECK(tsv.find("1\t1\t1.000000000") != std::string::npos);
    CHECK(tsv.find("mAP\t\t1.000000000") != std::string::npos);
}
