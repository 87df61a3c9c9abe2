#include "pir/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "pir/rng.hpp"

namespace pir {

void TrainingSet::validate() const {
    const auto n = inputs.rows();
    if (n == 0) throw std::invalid_argument("training set is empty");
    if (text_rows.size() != n || class_ids.size() != n || categories.size() != n) {
        throw std::invalid_argument("training set component lengths differ");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (text_rows[i].empty()) throw std::invalid_argument("record " + std::to_string(i) + " has no text candidates");
        for (auto r : text_rows[i]) {
            if (r >= texts.rows()) throw std::invalid_argument("text row out of range for record " + std::to_string(i));
        }
    }
    inputs.check_finite();
    texts.check_finite();
}

EmbeddingMatrix Projector::apply(const EmbeddingMatrix& inputs) const {
    if (inputs.dim() != in_dim()) throw std::invalid_argument("projector input dimension mismatch");
    EmbeddingMatrix out(inputs.rows(), out_dim());
    for (std::size_t i = 0; i < inputs.rows(); ++i) {
        auto x = inputs.row(i);
        auto y = out.row(i);
        for (std::size_t o = 0; o < out_dim(); ++o) {
            auto w = weight.row(o);
            double acc = 0.0;
            for (std::size_t k = 0; k < x.size(); ++k) acc += w[k] * x[k];
            y[o] = acc;
        }
    }
    return out;
}

Projector initial_projector(std::size_t in_dim, std::size_t out_dim, std::uint64_t seed) {
    CounterRng rng = CounterRng(seed).split("projector-init");
    Projector p{EmbeddingMatrix(out_dim, in_dim)};
    const double scale = 1.0 / std::sqrt(static_cast<double>(in_dim));
    for (auto& w : p.weight.data()) w = scale * rng.normal();
    return p;
}

namespace {

std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, CounterRng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    k = std::min(k, n);
    for (std::size_t i = 0; i < k; ++i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(n - 1)));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
}

BatchPairing assemble(const TrainingSet& data, const Projector& proj, const std::vector<std::size_t>& rows,
                      const std::vector<std::size_t>& text_choice, EmbeddingMatrix& raw_inputs) {
    const std::size_t b = rows.size();
    raw_inputs = EmbeddingMatrix(b, data.inputs.dim());
    BatchPairing batch;
    batch.text_feats = EmbeddingMatrix(b, data.texts.dim());
    for (std::size_t i = 0; i < b; ++i) {
        const auto src = data.inputs.row(rows[i]);
        std::copy(src.begin(), src.end(), raw_inputs.row(i).begin());
        const auto t = data.texts.row(text_choice[i]);
        std::copy(t.begin(), t.end(), batch.text_feats.row(i).begin());
        batch.class_ids.push_back(data.class_ids[rows[i]]);
        batch.categories.push_back(data.categories[rows[i]]);
    }
    batch.image_feats = proj.apply(raw_inputs);
    return batch;
}

TraceRow trace_row(std::size_t step, const CombinedLoss& loss, const LossParams& params) {
    return {step,         loss.l_clip,   loss.l_cls,   loss.l_cat,  loss.total.value,
            params.tau(), params.s_clip, params.s_cls, params.s_cat};
}

}  // namespace

TrainResult train_projector(const TrainingSet& data, const TrainerConfig& config) {
    data.validate();
    if (config.out_dim != data.texts.dim()) {
        throw std::invalid_argument("projector output dimension must equal the text feature dimension");
    }
    if (config.batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    if (!config.terms.clip && !config.terms.cls && !config.terms.cat) {
        throw std::invalid_argument("at least one loss term must be enabled");
    }

    TrainResult result;
    result.projector = initial_projector(data.inputs.dim(), config.out_dim, config.seed);
    result.params.log_tau = std::log(config.initial_tau);

    const CounterRng root(config.seed);
    CounterRng eval_rng = root.split("eval-batch");
    const auto eval_rows = sample_indices(data.size(), config.batch_size, eval_rng);
    std::vector<std::size_t> eval_text;
    for (auto r : eval_rows) eval_text.push_back(data.text_rows[r].front());

    auto evaluate = [&](std::size_t step) {
        EmbeddingMatrix raw;
        const auto batch = assemble(data, result.projector, eval_rows, eval_text, raw);
        const auto loss = combined_loss(batch, result.params, config.terms, config.clip_direction);
        if (!std::isfinite(loss.total.value)) throw TrainingDiverged(step);
        result.trace.push_back(trace_row(step, loss, result.params));
    };

    EmbeddingMatrix velocity_w(config.out_dim, data.inputs.dim());
    std::array<double, 4> velocity_p{};

    for (std::size_t step = 0; step < config.steps; ++step) {
        evaluate(step);

        CounterRng rng = root.split("batch").split(step);
        const auto rows = sample_indices(data.size(), config.batch_size, rng);
        std::vector<std::size_t> text_choice;
        for (auto r : rows) {
            const auto& cand = data.text_rows[r];
            text_choice.push_back(cand[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cand.size() - 1)))]);
        }

        EmbeddingMatrix raw;
        const auto batch = assemble(data, result.projector, rows, text_choice, raw);
        const auto loss = combined_loss(batch, result.params, config.terms, config.clip_direction);
        if (!std::isfinite(loss.total.value)) throw TrainingDiverged(step);

        // dL/dW = sum_i g_i x_i^T
        EmbeddingMatrix grad_w(config.out_dim, data.inputs.dim());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            auto g = loss.total.grad_image_feats.row(i);
            auto x = raw.row(i);
            for (std::size_t o = 0; o < config.out_dim; ++o) {
                auto gw = grad_w.row(o);
                for (std::size_t k = 0; k < x.size(); ++k) gw[k] += g[o] * x[k];
            }
        }

        auto& w = result.projector.weight.data();
        for (std::size_t k = 0; k < w.size(); ++k) {
            velocity_w.data()[k] = config.momentum * velocity_w.data()[k] + grad_w.data()[k];
            w[k] -= config.learning_rate * velocity_w.data()[k];
        }

        auto p = result.params.as_array();
        auto gp = loss.total.grad_params.as_array();
        const std::array<bool, 4> learnable{config.learn_tau, config.learn_uncertainty && config.terms.clip,
                                            config.learn_uncertainty && config.terms.cls,
                                            config.learn_uncertainty && config.terms.cat};
        for (std::size_t k = 0; k < 4; ++k) {
            if (!learnable[k]) continue;
            velocity_p[k] = config.momentum * velocity_p[k] + gp[k];
            p[k] -= config.learning_rate * velocity_p[k];
        }
        result.params = LossParams::from_array(p);

        for (double v : w) {
            if (!std::isfinite(v)) throw TrainingDiverged(step);
        }
    }
    evaluate(config.steps);
    return result;
}

void write_trace_csv(const std::vector<TraceRow>& trace, std::ostream& out) {
    out << "step,l_clip,l_cls,l_cat,combined,tau,s_clip,s_cls,s_cat\n";
    const auto old_precision = out.precision(17);
    for (const auto& r : trace) {
        out << r.step << ',' << r.l_clip << ',' << r.l_cls << ',' << r.l_cat << ',' << r.combined << ',' << r.tau << ','
            << r.s_clip << ',' << r.s_cls << ',' << r.s_cat << '\n';
    }
    out.precision(old_precision);
}

TrainingSet make_synthetic_features(const std::vector<const PatentImageRecord*>& records,
                                    const ClassDistribution& dist, const SyntheticFeatureSpec& spec) {
    if (spec.texts_per_record == 0) throw std::invalid_argument("texts_per_record must be positive");
    const CounterRng root(spec.seed);

    EmbeddingMatrix mix(spec.input_dim, spec.text_dim);
    {
        CounterRng rng = root.split("mix");
        const double scale = 1.0 / std::sqrt(static_cast<double>(spec.text_dim));
        for (auto& v : mix.data()) v = scale * rng.normal();
    }

    TrainingSet set;
    set.inputs = EmbeddingMatrix(records.size(), spec.input_dim);
    set.texts = EmbeddingMatrix(records.size() * spec.texts_per_record, spec.text_dim);
    std::vector<double> proto(spec.text_dim);
    std::vector<double> latent(spec.text_dim);
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& rec = *records[i];
        CounterRng proto_rng = root.split("prototype").split(rec.class_id);
        for (auto& v : proto) v = proto_rng.normal();

        CounterRng rng = root.split("record").split(rec.record_id);
        for (std::size_t k = 0; k < spec.text_dim; ++k) {
            latent[k] = spec.class_scale * proto[k] + spec.instance_scale * rng.normal();
        }
        auto x = set.inputs.row(i);
        for (std::size_t r = 0; r < spec.input_dim; ++r) {
            double acc = 0.0;
            for (std::size_t k = 0; k < spec.text_dim; ++k) acc += mix(r, k) * latent[k];
            x[r] = acc + spec.input_noise * rng.normal();
        }
        std::vector<std::size_t> rows;
        for (std::size_t t = 0; t < spec.texts_per_record; ++t) {
            const auto row = i * spec.texts_per_record + t;
            auto tv = set.texts.row(row);
            for (std::size_t k = 0; k < spec.text_dim; ++k) tv[k] = latent[k] + spec.text_noise * rng.normal();
            rows.push_back(row);
        }
        set.text_rows.push_back(std::move(rows));
        set.class_ids.push_back(rec.class_id);
        set.categories.push_back(dist.category_of(rec.class_id));
    }
    return set;
}

}  // namespace pir
