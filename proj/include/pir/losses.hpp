#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pir/embedding.hpp"
#include "pir/model.hpp"

namespace pir {

// Aligned image/text batch. Row i of image_feats is paired with row i of
// text_feats; class_ids and categories label pair i.
struct BatchPairing {
    EmbeddingMatrix image_feats;
    EmbeddingMatrix text_feats;
    std::vector<std::string> class_ids;
    std::vector<Category> categories;

    std::size_t size() const { return image_feats.rows(); }
    void validate() const;
};

inline constexpr double kDefaultTemperature = 0.07;

// Learnable scalars. The temperature is exp(log_tau) so it stays positive;
// the s_* entries are the log-variance weights of the uncertainty combination.
struct LossParams {
    double log_tau = std::log(kDefaultTemperature);
    double s_clip = 0.0;
    double s_cls = 0.0;
    double s_cat = 0.0;

    double tau() const { return std::exp(log_tau); }

    std::array<double, 4> as_array() const { return {log_tau, s_clip, s_cls, s_cat}; }
    static LossParams from_array(const std::array<double, 4>& a) { return {a[0], a[1], a[2], a[3]}; }

    friend bool operator==(const LossParams&, const LossParams&) = default;
};

struct LossOutput {
    double value = 0.0;
    EmbeddingMatrix grad_image_feats;
    EmbeddingMatrix grad_text_feats;
    LossParams grad_params{0.0, 0.0, 0.0, 0.0};
};

enum class ClipDirection { image_anchored, symmetric };
enum class Granularity { class_level, category_level };

// Entry (i, j) = cos(a_i, b_j). Result has a.rows() rows and b.rows() columns.
// Throws std::invalid_argument naming the row on a zero-norm row.
EmbeddingMatrix cosine_similarity_matrix(const EmbeddingMatrix& a, const EmbeddingMatrix& b);

// Instance InfoNCE over the batch, mean over anchors. Image-anchored: each
// image's softmax runs over all texts with its own text as the positive.
// The symmetric variant adds the text-anchored term (sum, not average, so it
// coincides with loss_coarse when every pair has a distinct label).
LossOutput loss_clip(const BatchPairing& batch, const LossParams& params,
                     ClipDirection direction = ClipDirection::image_anchored);

// Supervised contrastive loss over shared labels. For each text, the mean
// negative log-softmax (over all images) of the images sharing its label;
// plus, for each image, the same over all texts. Averaged over the batch.
// A pair always counts as a positive of itself.
LossOutput loss_coarse(const BatchPairing& batch, const LossParams& params, Granularity granularity);

struct UncertaintyCombination {
    double value = 0.0;
    std::array<double, 3> grad_losses{};  // d value / d L_k
    std::array<double, 3> grad_s{};       // d value / d s_k
};

// sum_k L_k * exp(-s_k) + s_k over (clip, cls, cat).
UncertaintyCombination combine_uncertainty(double l_clip, double l_cls, double l_cat, const LossParams& params);

struct LossTerms {
    bool clip = true;
    bool cls = true;
    bool cat = true;
};

struct CombinedLoss {
    double l_clip = 0.0;
    double l_cls = 0.0;
    double l_cat = 0.0;
    LossOutput total;  // value and gradients of the uncertainty-weighted sum
};

// Uncertainty-weighted sum over the enabled terms, with chained gradients.
CombinedLoss combined_loss(const BatchPairing& batch, const LossParams& params, const LossTerms& terms = {},
                           ClipDirection direction = ClipDirection::image_anchored);

using LossFn = std::function<LossOutput(const BatchPairing&, const LossParams&)>;

struct GradientCheckReport {
    double max_relative_error = 0.0;
    std::string worst_coordinate;
};

// Relative error per coordinate is |analytic - numeric| / max(|analytic|,
// |numeric|, kGradientCheckFloor); the floor keeps coordinates whose true
// gradient is ~0 from turning round-off into huge ratios.
inline constexpr double kGradientCheckFloor = 1e-3;

// Central differences over every feature entry and every LossParams field.
GradientCheckReport finite_difference_check(const LossFn& loss_fn, const BatchPairing& batch,
                                            const LossParams& params, double epsilon);

// Same check for combine_uncertainty, over (L_clip, L_cls, L_cat, s_clip, s_cls, s_cat).
GradientCheckReport finite_difference_check_uncertainty(const std::array<double, 3>& losses,
                                                        const LossParams& params, double epsilon);

}  // namespace pir
