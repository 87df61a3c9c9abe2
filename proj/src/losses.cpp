#include "pir/losses.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace pir {

void BatchPairing::validate() const {
    const auto b = image_feats.rows();
    if (b == 0) throw std::invalid_argument("batch must contain at least one pair");
    if (text_feats.rows() != b || class_ids.size() != b || categories.size() != b) {
        throw std::invalid_argument("batch component lengths differ");
    }
    if (image_feats.dim() != text_feats.dim()) {
        throw std::invalid_argument("image and text feature dimensions differ");
    }
    image_feats.check_finite();
    text_feats.check_finite();
}

namespace {

struct Normalized {
    EmbeddingMatrix unit;
    std::vector<double> norms;
};

Normalized normalize_rows(const EmbeddingMatrix& m, const char* which) {
    Normalized out{EmbeddingMatrix(m.rows(), m.dim()), std::vector<double>(m.rows())};
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const double n = l2_norm(m.row(i));
        if (!(n > 0.0)) {
            throw std::invalid_argument(std::string("zero-norm ") + which + " row " + std::to_string(i));
        }
        out.norms[i] = n;
        auto dst = out.unit.row(i);
        auto src = m.row(i);
        for (std::size_t k = 0; k < m.dim(); ++k) dst[k] = src[k] / n;
    }
    return out;
}

EmbeddingMatrix unit_dot(const EmbeddingMatrix& a, const EmbeddingMatrix& b, bool clamp) {
    EmbeddingMatrix s(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto ai = a.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            auto bj = b.row(j);
            double d = 0.0;
            for (std::size_t k = 0; k < a.dim(); ++k) d += ai[k] * bj[k];
            s(i, j) = clamp ? std::clamp(d, -1.0, 1.0) : d;
        }
    }
    return s;
}

// d/dx of f(x / |x|) given the gradient with respect to the unit vector.
void backprop_normalization(const Normalized& n, const EmbeddingMatrix& grad_unit, EmbeddingMatrix& grad_raw) {
    for (std::size_t i = 0; i < grad_unit.rows(); ++i) {
        auto u = n.unit.row(i);
        auto g = grad_unit.row(i);
        double radial = 0.0;
        for (std::size_t k = 0; k < u.size(); ++k) radial += g[k] * u[k];
        auto out = grad_raw.row(i);
        for (std::size_t k = 0; k < u.size(); ++k) out[k] = (g[k] - radial * u[k]) / n.norms[i];
    }
}

// Contrastive objective over logits Z = cos(V, T) / tau, where rows index
// images and columns index texts. positive(i, j) marks image i / text j as
// a positive pair. The image-anchored term softmaxes each row; the
// text-anchored term softmaxes each column. Each anchor contributes the mean
// negative log-probability of its positives; terms are averaged over B.
LossOutput contrastive(const BatchPairing& batch, const LossParams& params, const std::vector<char>& positive,
                       bool image_anchored, bool text_anchored) {
    batch.validate();
    const std::size_t b = batch.size();
    const auto img = normalize_rows(batch.image_feats, "image");
    const auto txt = normalize_rows(batch.text_feats, "text");
    const EmbeddingMatrix cos = unit_dot(img.unit, txt.unit, false);
    const double inv_tau = 1.0 / params.tau();

    EmbeddingMatrix logits(b, b);
    for (std::size_t i = 0; i < b * b; ++i) logits.data()[i] = cos.data()[i] * inv_tau;

    EmbeddingMatrix grad_logits(b, b);  // dL/dZ
    double value = 0.0;
    const double inv_b = 1.0 / static_cast<double>(b);
    std::vector<double> prob(b);

    if (image_anchored) {
        for (std::size_t i = 0; i < b; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < b; ++j) mx = std::max(mx, logits(i, j));
            double z = 0.0;
            for (std::size_t j = 0; j < b; ++j) z += (prob[j] = std::exp(logits(i, j) - mx));
            const double lse = mx + std::log(z);
            std::size_t n_pos = 0;
            double pos_sum = 0.0;
            for (std::size_t j = 0; j < b; ++j) {
                if (positive[i * b + j]) {
                    ++n_pos;
                    pos_sum += logits(i, j);
                }
            }
            value += (lse - pos_sum / static_cast<double>(n_pos)) * inv_b;
            for (std::size_t j = 0; j < b; ++j) {
                const double target = positive[i * b + j] ? 1.0 / static_cast<double>(n_pos) : 0.0;
                grad_logits(i, j) += (prob[j] / z - target) * inv_b;
            }
        }
    }
    if (text_anchored) {
        for (std::size_t j = 0; j < b; ++j) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < b; ++i) mx = std::max(mx, logits(i, j));
            double z = 0.0;
            for (std::size_t i = 0; i < b; ++i) z += (prob[i] = std::exp(logits(i, j) - mx));
            const double lse = mx + std::log(z);
            std::size_t n_pos = 0;
            double pos_sum = 0.0;
            for (std::size_t i = 0; i < b; ++i) {
                if (positive[i * b + j]) {
                    ++n_pos;
                    pos_sum += logits(i, j);
                }
            }
            value += (lse - pos_sum / static_cast<double>(n_pos)) * inv_b;
            for (std::size_t i = 0; i < b; ++i) {
                const double target = positive[i * b + j] ? 1.0 / static_cast<double>(n_pos) : 0.0;
                grad_logits(i, j) += (prob[i] / z - target) * inv_b;
            }
        }
    }

    LossOutput out;
    out.value = value;

    // dZ/dlog_tau = -Z
    double g_tau = 0.0;
    for (std::size_t k = 0; k < b * b; ++k) g_tau -= grad_logits.data()[k] * logits.data()[k];
    out.grad_params.log_tau = g_tau;

    const std::size_t d = batch.image_feats.dim();
    EmbeddingMatrix g_img_unit(b, d);
    EmbeddingMatrix g_txt_unit(b, d);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < b; ++j) {
            const double g = grad_logits(i, j) * inv_tau;
            if (g == 0.0) continue;
            auto ti = txt.unit.row(j);
            auto vi = img.unit.row(i);
            auto gi = g_img_unit.row(i);
            auto gt = g_txt_unit.row(j);
            for (std::size_t k = 0; k < d; ++k) {
                gi[k] += g * ti[k];
                gt[k] += g * vi[k];
            }
        }
    }
    out.grad_image_feats = EmbeddingMatrix(b, d);
    out.grad_text_feats = EmbeddingMatrix(b, d);
    backprop_normalization(img, g_img_unit, out.grad_image_feats);
    backprop_normalization(txt, g_txt_unit, out.grad_text_feats);
    return out;
}

}  // namespace

EmbeddingMatrix cosine_similarity_matrix(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
    if (a.dim() != b.dim()) throw std::invalid_argument("cosine similarity needs equal dimensions");
    const auto na = normalize_rows(a, "left");
    const auto nb = normalize_rows(b, "right");
    return unit_dot(na.unit, nb.unit, true);
}

LossOutput loss_clip(const BatchPairing& batch, const LossParams& params, ClipDirection direction) {
    const std::size_t b = batch.size();
    std::vector<char> positive(b * b, 0);
    for (std::size_t i = 0; i < b; ++i) positive[i * b + i] = 1;
    return contrastive(batch, params, positive, true, direction == ClipDirection::symmetric);
}

LossOutput loss_coarse(const BatchPairing& batch, const LossParams& params, Granularity granularity) {
    batch.validate();
    const std::size_t b = batch.size();
    std::vector<char> positive(b * b, 0);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < b; ++j) {
            const bool same = granularity == Granularity::class_level ? batch.class_ids[i] == batch.class_ids[j]
                                                                       : batch.categories[i] == batch.categories[j];
            positive[i * b + j] = (i == j || same) ? 1 : 0;
        }
    }
    return contrastive(batch, params, positive, true, true);
}

UncertaintyCombination combine_uncertainty(double l_clip, double l_cls, double l_cat, const LossParams& params) {
    const std::array<double, 3> l{l_clip, l_cls, l_cat};
    const std::array<double, 3> s{params.s_clip, params.s_cls, params.s_cat};
    UncertaintyCombination out;
    for (std::size_t k = 0; k < 3; ++k) {
        const double w = std::exp(-s[k]);
        out.value += l[k] * w + s[k];
        out.grad_losses[k] = w;
        out.grad_s[k] = 1.0 - l[k] * w;
    }
    return out;
}

namespace {

void axpy(double alpha, const EmbeddingMatrix& x, EmbeddingMatrix& y) {
    for (std::size_t k = 0; k < x.data().size(); ++k) y.data()[k] += alpha * x.data()[k];
}

}  // namespace

CombinedLoss combined_loss(const BatchPairing& batch, const LossParams& params, const LossTerms& terms,
                           ClipDirection direction) {
    batch.validate();
    CombinedLoss out;
    LossOutput& total = out.total;
    total.grad_image_feats = EmbeddingMatrix(batch.size(), batch.image_feats.dim());
    total.grad_text_feats = EmbeddingMatrix(batch.size(), batch.text_feats.dim());

    auto accumulate = [&](const LossOutput& part, double s, double& s_grad) {
        const double w = std::exp(-s);
        total.value += part.value * w + s;
        s_grad = 1.0 - part.value * w;
        axpy(w, part.grad_image_feats, total.grad_image_feats);
        axpy(w, part.grad_text_feats, total.grad_text_feats);
        total.grad_params.log_tau += w * part.grad_params.log_tau;
    };

    if (terms.clip) {
        const auto part = loss_clip(batch, params, direction);
        out.l_clip = part.value;
        accumulate(part, params.s_clip, total.grad_params.s_clip);
    }
    if (terms.cls) {
        const auto part = loss_coarse(batch, params, Granularity::class_level);
        out.l_cls = part.value;
        accumulate(part, params.s_cls, total.grad_params.s_cls);
    }
    if (terms.cat) {
        const auto part = loss_coarse(batch, params, Granularity::category_level);
        out.l_cat = part.value;
        accumulate(part, params.s_cat, total.grad_params.s_cat);
    }
    return out;
}

namespace {

void track(GradientCheckReport& report, double analytic, double numeric, const std::string& where) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradientCheckFloor});
    const double rel = std::abs(analytic - numeric) / denom;
    if (rel > report.max_relative_error || !std::isfinite(rel)) {
        report.max_relative_error = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
        report.worst_coordinate = where;
    }
}

void check_epsilon(double epsilon) {
    if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) throw std::invalid_argument("epsilon must lie in [1e-7, 1e-3]");
}

}  // namespace

GradientCheckReport finite_difference_check(const LossFn& loss_fn, const BatchPairing& batch,
                                            const LossParams& params, double epsilon) {
    check_epsilon(epsilon);
    const LossOutput analytic = loss_fn(batch, params);
    GradientCheckReport report;

    BatchPairing probe = batch;
    auto sweep = [&](EmbeddingMatrix& feats, const EmbeddingMatrix& grad, const char* name) {
        for (std::size_t k = 0; k < feats.data().size(); ++k) {
            const double orig = feats.data()[k];
            feats.data()[k] = orig + epsilon;
            const double up = loss_fn(probe, params).value;
            feats.data()[k] = orig - epsilon;
            const double down = loss_fn(probe, params).value;
            feats.data()[k] = orig;
            const double numeric = (up - down) / (2.0 * epsilon);
            track(report, grad.data()[k], numeric,
                  std::string(name) + "[" + std::to_string(k / feats.dim()) + "," + std::to_string(k % feats.dim()) + "]");
        }
    };
    sweep(probe.image_feats, analytic.grad_image_feats, "image");
    sweep(probe.text_feats, analytic.grad_text_feats, "text");

    static constexpr const char* kParamNames[] = {"log_tau", "s_clip", "s_cls", "s_cat"};
    const auto base = params.as_array();
    const auto grads = analytic.grad_params.as_array();
    for (std::size_t p = 0; p < base.size(); ++p) {
        auto up = base;
        auto down = base;
        up[p] += epsilon;
        down[p] -= epsilon;
        const double numeric =
            (loss_fn(batch, LossParams::from_array(up)).value - loss_fn(batch, LossParams::from_array(down)).value) /
            (2.0 * epsilon);
        track(report, grads[p], numeric, kParamNames[p]);
    }
    return report;
}

GradientCheckReport finite_difference_check_uncertainty(const std::array<double, 3>& losses,
                                                        const LossParams& params, double epsilon) {
    check_epsilon(epsilon);
    const auto analytic = combine_uncertainty(losses[0], losses[1], losses[2], params);
    GradientCheckReport report;
    static constexpr const char* kNames[] = {"clip", "cls", "cat"};

    for (std::size_t k = 0; k < 3; ++k) {
        auto up = losses;
        auto down = losses;
        up[k] += epsilon;
        down[k] -= epsilon;
        const double numeric = (combine_uncertainty(up[0], up[1], up[2], params).value -
                                combine_uncertainty(down[0], down[1], down[2], params).value) /
                               (2.0 * epsilon);
        track(report, analytic.grad_losses[k], numeric, std::string("L_") + kNames[k]);
    }
    const auto base = params.as_array();
    for (std::size_t k = 0; k < 3; ++k) {
        auto up = base;
        auto down = base;
        up[k + 1] += epsilon;
        down[k + 1] -= epsilon;
        const auto pu = LossParams::from_array(up);
        const auto pd = LossParams::from_array(down);
        const double numeric = (combine_uncertainty(losses[0], losses[1], losses[2], pu).value -
                                combine_uncertainty(losses[0], losses[1], losses[2], pd).value) /
                               (2.0 * epsilon);
        track(report, analytic.grad_s[k], numeric, std::string("s_") + kNames[k]);
    }
    return report;
}

}  // namespace pir
