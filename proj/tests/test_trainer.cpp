#include <doctest.h>

#include <sstream>

#include "pir/experiments.hpp"
#include "pir/trainer.hpp"

using namespace pir;

namespace {

struct Fixture {
    Corpus corpus;
    TrainingSet set;

    Fixture() {
        SyntheticCorpusSpec s;
        s.seed = 4;
        s.n_classes = 3;
        s.records_per_class = {30, 20, 10};
        corpus = generate_synthetic_corpus(s);
        SyntheticFeatureSpec f;
        f.seed = 4;
        set = make_synthetic_features(corpus.of_split(Split::train), corpus.distribution, f);
    }
};

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("zero learning rate gives a flat trace") {
    Fixture fx;
    TrainerConfig c;
    c.steps = 20;
    c.learning_rate = 0.0;
    const auto r = train_projector(fx.set, c);
    REQUIRE(r.trace.size() == 21);
    for (const auto& row : r.trace) {
        CHECK(row.combined == r.trace.front().combined);
        CHECK(row.tau == doctest::Approx(kDefaultTemperature));
    }
    CHECK(r.projector == initial_projector(32, 16, c.seed));
}

TEST_CASE("training is deterministic and lowers the loss") {
    Fixture fx;
    TrainerConfig c;
    c.steps = 150;
    c.seed = 9;
    const auto a = train_projector(fx.set, c);
    const auto b = train_projector(fx.set, c);
    CHECK(a.trace == b.trace);
    CHECK(a.projector == b.projector);
    CHECK(a.trace.back().combined < a.trace.front().combined);
    for (std::size_t i = 0; i < a.trace.size(); ++i) CHECK(a.trace[i].step == i);
}

TEST_CASE("frozen scalars stay put") {
    Fixture fx;
    TrainerConfig c;
    c.steps = 30;
    c.learn_tau = false;
    c.learn_uncertainty = false;
    c.initial_tau = 0.2;
    const auto r = train_projector(fx.set, c);
    CHECK(r.params.tau() == doctest::Approx(0.2));
    CHECK(r.params.s_clip == 0.0);
    CHECK(r.params.s_cls == 0.0);
    CHECK(r.params.s_cat == 0.0);
}

TEST_CASE("divergence is reported with its step") {
    Fixture fx;
    TrainerConfig c;
    c.steps = 50;
    c.learning_rate = 1e12;
    CHECK_THROWS_AS(train_projector(fx.set, c), TrainingDiverged);
}

TEST_CASE("configuration errors") {
    Fixture fx;
    TrainerConfig c;
    c.out_dim = 8;
    CHECK_THROWS_AS(train_projector(fx.set, c), std::invalid_argument);
    c = {};
    c.terms = {false, false, false};
    CHECK_THROWS_AS(train_projector(fx.set, c), std::invalid_argument);
    c = {};
    c.batch_size = 0;
    CHECK_THROWS_AS(train_projector(fx.set, c), std::invalid_argument);
}

TEST_CASE("synthetic features do not depend on the requested subset") {
    Fixture fx;
    const auto all = fx.corpus.of_split(Split::train);
    const std::vector<const PatentImageRecord*> one{all[5]};
    SyntheticFeatureSpec f;
    f.seed = 4;
    const auto sub = make_synthetic_features(one, fx.corpus.distribution, f);
    for (std::size_t k = 0; k < 32; ++k) CHECK(sub.inputs(0, k) == fx.set.inputs(5, k));
}

TEST_CASE("trace csv") {
    std::vector<TraceRow> rows{{0, 1, 2, 3, 4, 0.07, 0, 0, 0}};
    std::ostringstream out;
    write_trace_csv(rows, out);
    CHECK(out.str().rfind("step,", 0) == 0);
    CHECK(out.str().find('\n') != std::string::npos);
}

}  // TEST_SUITE
