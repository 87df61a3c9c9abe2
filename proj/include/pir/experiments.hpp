#pragma once

#include <cstdint>

#include "pir/metrics.hpp"
#include "pir/model.hpp"
#include "pir/trainer.hpp"

namespace pir {

// Desk-scale training runs on synthetic corpora: train the projector on the
// train split, index the projected train records and query with the
// projected query split.
struct SyntheticRunSpec {
    SyntheticFeatureSpec features;
    TrainerConfig trainer;
    MetricConfig metrics;
};

struct SyntheticRunResult {
    TrainResult training;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    MetricReport trained;
    MetricReport random_baseline;  // seeded Gaussian vectors in place of projections
};

SyntheticRunResult run_synthetic_training(const Corpus& corpus, const SyntheticRunSpec& spec);

// Five balanced classes, a quarter of the records held out as queries.
SyntheticCorpusSpec demo_corpus_spec(std::uint64_t seed);
SyntheticRunSpec demo_run_spec(std::uint64_t seed);

// Ten classes, four head classes with ten times the records of each tail class.
SyntheticCorpusSpec long_tail_corpus_spec(std::uint64_t seed);
SyntheticRunSpec long_tail_run_spec(std::uint64_t seed, LossTerms terms);

}  // namespace pir
