#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "pir/embedding.hpp"
#include "pir/losses.hpp"
#include "pir/model.hpp"

namespace pir {

// Inputs to the projector trainer. Each record owns one raw image feature
// row and one or more candidate rows in the frozen text feature matrix; a
// fresh candidate is drawn for every record at every step.
struct TrainingSet {
    EmbeddingMatrix inputs;
    EmbeddingMatrix texts;
    std::vector<std::vector<std::size_t>> text_rows;
    std::vector<std::string> class_ids;
    std::vector<Category> categories;

    std::size_t size() const { return inputs.rows(); }
    void validate() const;
};

// Linear map from input space to the text embedding space.
struct Projector {
    EmbeddingMatrix weight;  // out_dim x in_dim

    std::size_t in_dim() const { return weight.dim(); }
    std::size_t out_dim() const { return weight.rows(); }

    EmbeddingMatrix apply(const EmbeddingMatrix& inputs) const;

    friend bool operator==(const Projector&, const Projector&) = default;
};

struct TrainerConfig {
    std::size_t out_dim = 16;
    double learning_rate = 0.05;
    double momentum = 0.0;
    std::size_t steps = 500;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    LossTerms terms{};
    ClipDirection clip_direction = ClipDirection::image_anchored;
    double initial_tau = kDefaultTemperature;
    bool learn_tau = true;
    bool learn_uncertainty = true;
};

// One trace row per step, evaluated on a fixed batch (seeded subset, first
// text candidate) before that step's update; row `steps` is after the last.
struct TraceRow {
    std::size_t step = 0;
    double l_clip = 0.0;
    double l_cls = 0.0;
    double l_cat = 0.0;
    double combined = 0.0;
    double tau = 0.0;
    double s_clip = 0.0;
    double s_cls = 0.0;
    double s_cat = 0.0;

    friend bool operator==(const TraceRow&, const TraceRow&) = default;
};

struct TrainResult {
    Projector projector;
    LossParams params;
    std::vector<TraceRow> trace;
};

class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(std::size_t step)
        : std::runtime_error("training diverged (non-finite loss) at step " + std::to_string(step)), step_(step) {}
    std::size_t step() const { return step_; }

private:
    std::size_t step_;
};

Projector initial_projector(std::size_t in_dim, std::size_t out_dim, std::uint64_t seed);

// Gradient descent on the projector, temperature and uncertainty scalars.
// The text features stay frozen.
TrainResult train_projector(const TrainingSet& data, const TrainerConfig& config);

void write_trace_csv(const std::vector<TraceRow>& trace, std::ostream& out);

// Prototype-plus-noise features for desk-scale experiments. Each record gets
// a latent vector class_scale * prototype[class] + instance_scale * noise in
// text_dim dimensions; its input features are a fixed random linear mix of
// the latent into input_dim plus input_noise, and each text candidate is the
// latent plus text_noise.
struct SyntheticFeatureSpec {
    std::size_t input_dim = 32;
    std::size_t text_dim = 16;
    double class_scale = 1.0;
    double instance_scale = 0.5;
    double input_noise = 0.1;
    double text_noise = 0.1;
    std::size_t texts_per_record = 4;
    std::uint64_t seed = 0;
};

// Labels and categories come from `dist`. Prototypes depend on (seed,
// class_id) and per-record draws on (seed, record_id), so a record gets the
// same features regardless of which subset is requested.
TrainingSet make_synthetic_features(const std::vector<const PatentImageRecord*>& records,
                                    const ClassDistribution& dist, const SyntheticFeatureSpec& spec);

}  // namespace pir
