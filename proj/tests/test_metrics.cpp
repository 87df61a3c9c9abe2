#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "pir/metrics.hpp"
#include "support.hpp"

using namespace pir;
using namespace pir::testing;

namespace {

RetrievalRun run_of(const std::string& cls, Category cat, std::initializer_list<bool> rel, std::size_t eligible) {
    RetrievalRun r;
    r.query_class = cls;
    r.query_category = cat;
    double s = 1.0;
    for (bool b : rel) r.ranked.push_back({"x", cls, s -= 0.01, b});
    r.eligible_relevant_count = eligible;
    return r;
}

bool close(const std::optional<double>& a, const std::optional<double>& b, double tol) {
    if (a.has_value() != b.has_value()) return false;
    return !a || std::abs(*a - *b) <= tol;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("average precision") {
    const auto r = run_of("a", Category::head, {true, false, true, false}, 2);
    CHECK(average_precision(r, 100) == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0));
    // Depth 2 keeps one relevant hit out of min(2, 2).
    CHECK(average_precision(r, 2) == doctest::Approx(0.5));
    // Normalizer is min(eligible, depth).
    CHECK(average_precision(r, 1) == doctest::Approx(1.0));
    // A relevant item beyond the ranked list still counts in the normalizer.
    CHECK(average_precision(run_of("a", Category::head, {true}, 4), 100) == doctest::Approx(0.25));
    CHECK(average_precision(run_of("a", Category::head, {false}, 0), 100) == 0.0);
}

TEST_CASE("recall and mrr at k") {
    std::vector<RetrievalRun> runs{run_of("a", Category::head, {false, false, true}, 1),
                                   run_of("b", Category::tail, {true}, 1),
                                   run_of("c", Category::tail, {false}, 0)};
    const auto r1 = recall_at_k(runs, 1);
    CHECK(*r1.head == 0.0);
    CHECK(*r1.tail == 1.0);
    CHECK(*r1.all == doctest::Approx(0.5));
    const auto m3 = mrr_at_k(runs, 3);
    CHECK(*m3.head == doctest::Approx(1.0 / 3.0));
    CHECK(*m3.all == doctest::Approx((1.0 / 3.0 + 1.0) / 2.0));
    const auto none = mean_average_precision({run_of("c", Category::tail, {false}, 0)}, 10);
    CHECK_FALSE(none.all.has_value());
}

TEST_CASE("macro mAP averages within class first") {
    std::vector<RetrievalRun> runs{run_of("a", Category::head, {true}, 1), run_of("a", Category::head, {true}, 1),
                                   run_of("a", Category::head, {true}, 1), run_of("b", Category::tail, {false, true}, 1)};
    const auto m = mean_average_precision(runs, 100);
    CHECK(*m.all == doctest::Approx((1.0 + 0.5) / 2.0));
    CHECK(*m.head == 1.0);
    CHECK(*m.tail == 0.5);
}

TEST_CASE("worksheet report") {
    const auto w = load_worksheet();
    const auto queries = w.corpus.of_split(Split::query);
    EmbeddingMatrix qv(queries.size(), 2);
    for (std::size_t i = 0; i < queries.size(); ++i) {
        const auto row = *w.index.find(queries[i]->record_id);
        qv(i, 0) = w.index.vector(row)[0];
        qv(i, 1) = w.index.vector(row)[1];
    }
    const auto ev = evaluate(w.index, queries, qv, w.corpus.distribution, MetricConfig{});
    const auto got = nlohmann::json::parse(report_to_json(ev.report).dump());
    const auto mismatch = json_mismatch(got, worksheet_expected());
    INFO(got.dump(2));
    CHECK_FALSE(mismatch.has_value());

    std::ostringstream csv;
    write_per_class_csv(ev.report, csv);
    std::istringstream lines(csv.str());
    std::string line;
    std::getline(lines, line);
    CHECK(line == "class_id,category,queries,mean_ap");
    std::map<std::string, double> per_class;
    while (std::getline(lines, line)) {
        const auto last = line.rfind(',');
        per_class[line.substr(0, line.find(','))] = std::stod(line.substr(last + 1));
    }
    CHECK(per_class.size() == 3);
    CHECK(per_class["A"] == doctest::Approx(1.0));
    CHECK(per_class["B"] == doctest::Approx(15.0 / 56.0));
    CHECK(per_class["C"] == doctest::Approx(1.0 / 6.0));
}

TEST_CASE("evaluate equals the naive evaluator on random corpora") {
    std::mt19937_64 gen(31);
    for (int t = 0; t < 40; ++t) {
        SyntheticCorpusSpec s;
        s.seed = gen();
        s.n_classes = 2 + gen() % 6;
        for (std::size_t c = 0; c < s.n_classes; ++c) s.records_per_class.push_back(1 + gen() % 60);
        s.query_fraction = 0.3;
        s.date_to = s.date_from.plus_days(static_cast<int>(20 + gen() % 400));
        auto corpus = generate_synthetic_corpus(s);
        const auto train = corpus.of_split(Split::train);
        const auto queries = corpus.of_split(Split::query);
        if (train.empty() || queries.empty()) continue;
        const std::size_t dim = 2 + gen() % 6;
        std::vector<ItemMetadata> meta;
        for (const auto* r : train) meta.push_back({r->record_id, r->grant_date, r->class_id, r->patent_id});
        const auto index = TemporalIndex::build(random_matrix(train.size(), dim, gen), meta);
        const auto qv = random_matrix(queries.size(), dim, gen);
        MetricConfig cfg;
        cfg.ks = {1, 5, 10};
        cfg.depth = t % 3 == 0 ? 7 : 100;
        cfg.relevance = t % 4 == 1 ? RelevanceMode::same_patent : RelevanceMode::same_class;
        cfg.exclude_same_patent = t % 5 == 2;
        cfg.workers = 1 + t % 2;
        const auto got = evaluate(index, queries, qv, corpus.distribution, cfg).report;
        const auto want = naive_evaluate(index, queries, qv, corpus.distribution, cfg);
        CHECK(got.zero_relevant_queries == want.zero_relevant);
        CHECK(got.total_queries == queries.size());
        for (auto b : kBuckets) {
            const auto& g = got.bucket(b);
            const auto& n = b == Bucket::head ? want.head : b == Bucket::tail ? want.tail : want.all;
            CHECK(g.queries == n.queries);
            CHECK(close(g.map, n.map, 1e-10));
            for (auto k : cfg.ks) {
                CHECK(close(g.recall_at.at(k), n.recall_at.at(k), 1e-10));
                CHECK(close(g.mrr_at.at(k), n.mrr_at.at(k), 1e-10));
            }
        }
    }
}

TEST_CASE("paired t-test") {
    SUBCASE("d = 1..5") {
        PairedSamples s;
        for (int d = 1; d <= 5; ++d) s.pairs.push_back({static_cast<double>(d), 0.0});
        const auto r = paired_t_test(s);
        CHECK(r.t == doctest::Approx(4.242640687119285).epsilon(1e-12));
        CHECK(r.df == 4);
        CHECK(r.mean_difference == 3.0);
        // df = 4 has a closed-form CDF: 1/2 + sin(th) (1 + cos^2(th) / 2) / 2 with th = atan(t / 2).
        const double th = std::atan(r.t / 2.0);
        const double cdf = 0.5 + 0.5 * std::sin(th) * (1.0 + 0.5 * std::cos(th) * std::cos(th));
        CHECK(r.p_two_tailed == doctest::Approx(2.0 * (1.0 - cdf)).epsilon(1e-10));
    }
    SUBCASE("degenerate samples") {
        CHECK_THROWS_AS(paired_t_test({{{1, 0}}}), DegenerateSamples);
        CHECK_THROWS_AS(paired_t_test({{{1, 0}, {2, 1}, {3, 2}}}), DegenerateSamples);
    }
    SUBCASE("sign follows a - b") {
        const auto r = paired_t_test({{{0, 1}, {0, 2}, {0, 4}}});
        CHECK(r.t < 0);
        CHECK(r.p_two_tailed < 1.0);
    }
}

TEST_CASE("compensated sum") {
    CompensatedSum s;
    s.add(1e16);
    for (int i = 0; i < 10; ++i) s.add(1.0);
    s.add(-1e16);
    CHECK(s.value() == 10.0);
}

TEST_CASE("report json shape") {
    MetricConfig cfg;
    cfg.ks = {3};
    const auto rep = build_report({run_of("a", Category::head, {true}, 1)}, cfg);
    const auto j = report_to_json(rep);
    CHECK(j["buckets"]["tail"]["mAP"].is_null());
    CHECK(j["buckets"]["head"]["recall_at"]["3"] == 1.0);
    CHECK(j["depth"] == 100);
}

}  // TEST_SUITE
