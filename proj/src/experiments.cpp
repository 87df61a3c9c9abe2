#include "pir/experiments.hpp"

#include "pir/index.hpp"
#include "pir/rng.hpp"

namespace pir {

namespace {

std::vector<ItemMetadata> metadata_of(const std::vector<const PatentImageRecord*>& records) {
    std::vector<ItemMetadata> out;
    out.reserve(records.size());
    for (const auto* r : records) out.push_back({r->record_id, r->grant_date, r->class_id, r->patent_id});
    return out;
}

EmbeddingMatrix gaussian_rows(std::size_t rows, std::size_t dim, CounterRng rng) {
    EmbeddingMatrix out(rows, dim);
    for (auto& v : out.data()) v = rng.normal();
    return out;
}

}  // namespace

SyntheticRunResult run_synthetic_training(const Corpus& corpus, const SyntheticRunSpec& spec) {
    const auto train = corpus.of_split(Split::train);
    const auto queries = corpus.of_split(Split::query);
    if (train.empty() || queries.empty()) throw std::invalid_argument("synthetic run needs train and query records");

    const auto train_set = make_synthetic_features(train, corpus.distribution, spec.features);
    const auto query_set = make_synthetic_features(queries, corpus.distribution, spec.features);

    SyntheticRunResult out;
    out.training = train_projector(train_set, spec.trainer);
    out.initial_loss = out.training.trace.front().combined;
    out.final_loss = out.training.trace.back().combined;

    const auto items = out.training.projector.apply(train_set.inputs);
    const auto query_vecs = out.training.projector.apply(query_set.inputs);
    const auto index = TemporalIndex::build(items, metadata_of(train));
    out.trained = evaluate(index, queries, query_vecs, corpus.distribution, spec.metrics).report;

    const CounterRng rng = CounterRng(spec.trainer.seed).split("random-baseline");
    const auto out_dim = spec.trainer.out_dim;
    const auto random_index = TemporalIndex::build(gaussian_rows(train.size(), out_dim, rng.split("items")), metadata_of(train));
    out.random_baseline = evaluate(random_index, queries, gaussian_rows(queries.size(), out_dim, rng.split("queries")),
                                   corpus.distribution, spec.metrics)
                              .report;
    return out;
}

SyntheticCorpusSpec demo_corpus_spec(std::uint64_t seed) {
    SyntheticCorpusSpec s;
    s.seed = seed;
    s.n_classes = 5;
    s.records_per_class.assign(5, 80);
    s.query_fraction = 0.25;
    return s;
}

SyntheticRunSpec demo_run_spec(std::uint64_t seed) {
    SyntheticRunSpec s;
    s.features.seed = seed;
    s.features.text_noise = 0.5;
    s.trainer.seed = seed;
    s.trainer.steps = 500;
    s.metrics.depth = 1000;
    return s;
}

SyntheticCorpusSpec long_tail_corpus_spec(std::uint64_t seed) {
    SyntheticCorpusSpec s;
    s.seed = seed;
    s.n_classes = 10;
    s.records_per_class = {200, 200, 200, 200, 20, 20, 20, 20, 20, 20};
    s.query_fraction = 0.25;
    return s;
}

SyntheticRunSpec long_tail_run_spec(std::uint64_t seed, LossTerms terms) {
    SyntheticRunSpec s;
    s.features.seed = seed;
    s.features.class_scale = 0.8;
    s.features.instance_scale = 0.8;
    s.features.text_noise = 0.3;
    s.trainer.seed = seed;
    s.trainer.steps = 500;
    s.trainer.terms = terms;
    return s;
}

}  // namespace pir
