#pragma once

// Shared helpers for the test binaries: std::mt19937_64-based generators
// (independent of the library's CounterRng) and brute-force oracles.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "pir/fs_util.hpp"
#include "pir/index.hpp"
#include "pir/losses.hpp"
#include "pir/metrics.hpp"
#include "pir/model.hpp"

namespace pir::testing {

inline std::filesystem::path data_dir() { return PIR_TEST_DATA_DIR; }

inline std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("pir_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

inline EmbeddingMatrix random_matrix(std::size_t rows, std::size_t dim, std::mt19937_64& gen) {
    std::normal_distribution<double> n(0.0, 1.0);
    EmbeddingMatrix m(rows, dim);
    for (auto& v : m.data()) v = n(gen);
    return m;
}

// Labels drawn from `n_classes` classes; categories from class parity.
inline BatchPairing random_batch(std::size_t b, std::size_t d, std::size_t n_classes, std::mt19937_64& gen) {
    BatchPairing batch;
    batch.image_feats = random_matrix(b, d, gen);
    batch.text_feats = random_matrix(b, d, gen);
    std::uniform_int_distribution<std::size_t> cls(0, n_classes - 1);
    for (std::size_t i = 0; i < b; ++i) {
        const auto c = cls(gen);
        batch.class_ids.push_back("k" + std::to_string(c));
        batch.categories.push_back(c % 2 == 0 ? Category::head : Category::tail);
    }
    return batch;
}

inline LossParams random_params(std::mt19937_64& gen) {
    std::uniform_real_distribution<double> tau(0.05, 1.0);
    std::uniform_real_distribution<double> s(-1.0, 1.0);
    return {std::log(tau(gen)), s(gen), s(gen), s(gen)};
}

// ---------------------------------------------------------------------------
// Loss oracles: literal transcriptions of the sums, one exp/log at a time.

inline std::vector<double> unit(std::span<const double> x) {
    double n = 0.0;
    for (double v : x) n += v * v;
    n = std::sqrt(n);
    std::vector<double> out(x.begin(), x.end());
    for (auto& v : out) v /= n;
    return out;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
    return s;
}

struct UnitBatch {
    std::vector<std::vector<double>> v;  // images
    std::vector<std::vector<double>> t;  // texts
};

inline UnitBatch normalize(const BatchPairing& batch) {
    UnitBatch u;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        u.v.push_back(unit(batch.image_feats.row(i)));
        u.t.push_back(unit(batch.text_feats.row(i)));
    }
    return u;
}

// -log( exp(t_+ . v / tau) / sum_i exp(t_i . v / tau) ), averaged over images;
// the symmetric form adds the same with texts as anchors.
inline double oracle_clip(const BatchPairing& batch, double tau, bool symmetric) {
    const auto u = normalize(batch);
    const std::size_t n = batch.size();
    double total = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
        double denom = 0.0;
        for (std::size_t i = 0; i < n; ++i) denom += std::exp(dot(u.t[i], u.v[a]) / tau);
        total += -std::log(std::exp(dot(u.t[a], u.v[a]) / tau) / denom);
    }
    if (symmetric) {
        for (std::size_t a = 0; a < n; ++a) {
            double denom = 0.0;
            for (std::size_t i = 0; i < n; ++i) denom += std::exp(dot(u.t[a], u.v[i]) / tau);
            total += -std::log(std::exp(dot(u.t[a], u.v[a]) / tau) / denom);
        }
    }
    return total / static_cast<double>(n);
}

// For each i: -(1/|V_i+|) sum_{j in V_i+} log( exp(t_i.v_j/tau) / sum_k exp(t_i.v_k/tau) )
//             -(1/|T_i+|) sum_{j in T_i+} log( exp(t_j.v_i/tau) / sum_k exp(t_k.v_i/tau) ),
// then the mean over i. Positives share the label (class or category).
inline double oracle_coarse(const BatchPairing& batch, double tau, Granularity g) {
    const auto u = normalize(batch);
    const std::size_t n = batch.size();
    auto same = [&](std::size_t i, std::size_t j) {
        return g == Granularity::class_level ? batch.class_ids[i] == batch.class_ids[j]
                                             : batch.categories[i] == batch.categories[j];
    };
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double denom_v = 0.0;
        for (std::size_t k = 0; k < n; ++k) denom_v += std::exp(dot(u.t[i], u.v[k]) / tau);
        double term_v = 0.0;
        std::size_t pos_v = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (!same(i, j)) continue;
            term_v += std::log(std::exp(dot(u.t[i], u.v[j]) / tau) / denom_v);
            ++pos_v;
        }
        double denom_t = 0.0;
        for (std::size_t k = 0; k < n; ++k) denom_t += std::exp(dot(u.t[k], u.v[i]) / tau);
        double term_t = 0.0;
        std::size_t pos_t = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (!same(i, j)) continue;
            term_t += std::log(std::exp(dot(u.t[j], u.v[i]) / tau) / denom_t);
            ++pos_t;
        }
        total += -term_v / static_cast<double>(pos_v) - term_t / static_cast<double>(pos_t);
    }
    return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Index oracle: score every item, filter, fully sort.

inline QueryResult oracle_topk(const TemporalIndex& index, const QuerySpec& q) {
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < index.size(); ++r) {
        const auto& m = index.item(r);
        if (!(m.grant_date < q.cutoff)) continue;
        if (q.exclude_patent && m.patent_id == *q.exclude_patent) continue;
        if (q.query_record_id && m.record_id == *q.query_record_id) continue;
        rows.push_back(r);
    }
    const auto qu = unit(q.vector);
    std::vector<double> score(index.size());
    for (auto r : rows) score[r] = std::clamp(item_dot(index.vector(r), qu), -1.0, 1.0);
    std::sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) {
        if (score[a] != score[b]) return score[a] > score[b];
        return index.item(a).record_id < index.item(b).record_id;
    });
    QueryResult out;
    out.cutoff_date = q.cutoff;
    out.query_record_id = q.query_record_id;
    for (std::size_t i = 0; i < std::min(q.k, rows.size()); ++i) {
        const auto& m = index.item(rows[i]);
        out.hits.push_back({m.record_id, score[rows[i]], m.class_id, m.patent_id, m.grant_date, rows[i]});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Metric oracle: evaluates queries from scratch without the metrics module.

struct NaiveBucket {
    std::size_t queries = 0;
    std::optional<double> map;
    std::map<std::size_t, std::optional<double>> recall_at;
    std::map<std::size_t, std::optional<double>> mrr_at;
};

struct NaiveReport {
    NaiveBucket head, tail, all;
    std::size_t zero_relevant = 0;
};

inline NaiveReport naive_evaluate(const TemporalIndex& index, const std::vector<const PatentImageRecord*>& queries,
                                  const EmbeddingMatrix& qv, const ClassDistribution& dist, const MetricConfig& cfg) {
    struct PerQuery {
        std::string cls;
        bool head = false;
        double ap = 0.0;
        std::map<std::size_t, double> hit;
        std::map<std::size_t, double> rr;
    };
    std::vector<PerQuery> scored;
    NaiveReport rep;
    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
        const auto& q = *queries[qi];
        auto rel = [&](const ItemMetadata& m) {
            return cfg.relevance == RelevanceMode::same_class ? m.class_id == q.class_id : m.patent_id == q.patent_id;
        };
        const auto qu = unit(qv.row(qi));
        std::vector<std::pair<double, std::size_t>> cands;
        for (std::size_t r = 0; r < index.size(); ++r) {
            const auto& m = index.item(r);
            if (!(m.grant_date < q.grant_date) || m.record_id == q.record_id) continue;
            if (cfg.exclude_same_patent && m.patent_id == q.patent_id) continue;
            cands.emplace_back(std::clamp(item_dot(index.vector(r), qu), -1.0, 1.0), r);
        }
        std::sort(cands.begin(), cands.end(), [&](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return index.item(a.second).record_id < index.item(b.second).record_id;
        });
        std::size_t eligible = 0;
        for (const auto& c : cands) eligible += rel(index.item(c.second)) ? 1 : 0;
        if (eligible == 0) {
            ++rep.zero_relevant;
            continue;
        }
        PerQuery pq;
        pq.cls = q.class_id;
        pq.head = dist.is_head(q.class_id);
        double hits = 0.0, sum = 0.0;
        std::optional<std::size_t> first;
        for (std::size_t i = 0; i < cands.size(); ++i) {
            if (!rel(index.item(cands[i].second))) continue;
            if (!first) first = i + 1;
            if (i < cfg.depth) {
                hits += 1.0;
                sum += hits / static_cast<double>(i + 1);
            }
        }
        pq.ap = sum / static_cast<double>(std::min(eligible, cfg.depth));
        for (auto k : cfg.ks) {
            pq.hit[k] = *first <= k ? 1.0 : 0.0;
            pq.rr[k] = *first <= k ? 1.0 / static_cast<double>(*first) : 0.0;
        }
        scored.push_back(std::move(pq));
    }

    auto fill = [&](NaiveBucket& b, int which) {
        std::map<std::string, std::pair<double, std::size_t>> by_class;
        std::map<std::size_t, double> hit, rr;
        for (const auto& pq : scored) {
            if (which == 0 && !pq.head) continue;
            if (which == 1 && pq.head) continue;
            ++b.queries;
            by_class[pq.cls].first += pq.ap;
            by_class[pq.cls].second += 1;
            for (auto k : cfg.ks) {
                hit[k] += pq.hit.at(k);
                rr[k] += pq.rr.at(k);
            }
        }
        for (auto k : cfg.ks) {
            b.recall_at[k] = std::nullopt;
            b.mrr_at[k] = std::nullopt;
        }
        if (b.queries == 0) return;
        double m = 0.0;
        for (const auto& [c, v] : by_class) m += v.first / static_cast<double>(v.second);
        b.map = m / static_cast<double>(by_class.size());
        for (auto k : cfg.ks) {
            b.recall_at[k] = hit[k] / static_cast<double>(b.queries);
            b.mrr_at[k] = rr[k] / static_cast<double>(b.queries);
        }
    };
    fill(rep.head, 0);
    fill(rep.tail, 1);
    fill(rep.all, 2);
    return rep;
}

// ---------------------------------------------------------------------------
// Worksheet fixture: ten records on the unit circle, every record indexed.

struct Worksheet {
    Corpus corpus;
    TemporalIndex index;
};

inline Worksheet load_worksheet() {
    Worksheet w;
    w.corpus = ingest_metadata(data_dir() / "worksheet" / "corpus.jsonl");
    const auto text = read_file(data_dir() / "worksheet" / "vectors.jsonl");
    std::map<std::string, std::vector<double>> by_id;
    std::size_t pos = 0;
    while (pos < text.size()) {
        auto eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        if (eol > pos) {
            const auto j = nlohmann::json::parse(text.substr(pos, eol - pos));
            by_id[j.at("record_id")] = j.at("vector").get<std::vector<double>>();
        }
        pos = eol + 1;
    }
    EmbeddingMatrix v(w.corpus.records.size(), 2);
    std::vector<ItemMetadata> meta;
    for (std::size_t i = 0; i < w.corpus.records.size(); ++i) {
        const auto& r = w.corpus.records[i];
        const auto& vec = by_id.at(r.record_id);
        v(i, 0) = vec[0];
        v(i, 1) = vec[1];
        meta.push_back({r.record_id, r.grant_date, r.class_id, r.patent_id});
    }
    w.index = TemporalIndex::build(v, std::move(meta));
    return w;
}

inline nlohmann::json worksheet_expected() {
    return nlohmann::json::parse(read_file(data_dir() / "worksheet" / "expected_report.json"));
}

inline constexpr double kJsonNumberTolerance = 1e-12;

// Same keys, same strings, booleans, nulls and integers; floating-point
// numbers within kJsonNumberTolerance. Returns the first differing path.
inline std::optional<std::string> json_mismatch(const nlohmann::json& a, const nlohmann::json& b,
                                                const std::string& path = "") {
    if (a.is_number() && b.is_number()) {
        if (a.is_number_float() || b.is_number_float()) {
            if (std::abs(a.get<double>() - b.get<double>()) <= kJsonNumberTolerance) return std::nullopt;
            return path;
        }
        return a == b ? std::nullopt : std::optional(path);
    }
    if (a.type() != b.type()) return path;
    if (a.is_object()) {
        if (a.size() != b.size()) return path;
        for (auto it = a.begin(); it != a.end(); ++it) {
            if (!b.contains(it.key())) return path + "/" + it.key();
            if (auto m = json_mismatch(*it, b.at(it.key()), path + "/" + it.key())) return m;
        }
        return std::nullopt;
    }
    if (a.is_array()) {
        if (a.size() != b.size()) return path;
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (auto m = json_mismatch(a[i], b[i], path + "/" + std::to_string(i))) return m;
        }
        return std::nullopt;
    }
    return a == b ? std::nullopt : std::optional(path);
}

}  // namespace pir::testing
