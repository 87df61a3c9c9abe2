#include "pir/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <unordered_map>

#include <boost/math/distributions/students_t.hpp>

namespace pir {

std::string_view to_string(RelevanceMode m) { return m == RelevanceMode::same_class ? "same_class" : "same_patent"; }

RelevanceMode parse_relevance_mode(std::string_view s) {
    if (s == "same_class" || s == "class") return RelevanceMode::same_class;
    if (s == "same_patent" || s == "patent") return RelevanceMode::same_patent;
    throw std::invalid_argument("unknown relevance mode '" + std::string(s) + "'");
}

std::string_view to_string(Bucket b) {
    switch (b) {
        case Bucket::head: return "head";
        case Bucket::tail: return "tail";
        case Bucket::all: return "all";
    }
    return "all";
}

bool relevance(const PatentImageRecord& query, const PatentImageRecord& candidate, RelevanceMode mode) {
    return mode == RelevanceMode::same_class ? query.class_id == candidate.class_id
                                             : query.patent_id == candidate.patent_id;
}

void CompensatedSum::add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
        comp_ += (sum_ - t) + x;
    } else {
        comp_ += (x - t) + sum_;
    }
    sum_ = t;
}

double average_precision(const RetrievalRun& run, std::size_t depth) {
    if (depth == 0) throw std::invalid_argument("depth must be at least 1");
    if (run.eligible_relevant_count == 0) return 0.0;
    const std::size_t limit = std::min(depth, run.ranked.size());
    CompensatedSum sum;
    std::size_t hits = 0;
    for (std::size_t r = 0; r < limit; ++r) {
        if (!run.ranked[r].relevant) continue;
        ++hits;
        sum.add(static_cast<double>(hits) / static_cast<double>(r + 1));
    }
    return sum.value() / static_cast<double>(std::min(run.eligible_relevant_count, depth));
}

namespace {

bool in_bucket(const RetrievalRun& run, Bucket b) {
    return b == Bucket::all || (b == Bucket::head) == (run.query_category == Category::head);
}

bool scored(const RetrievalRun& run) { return run.eligible_relevant_count > 0; }

std::optional<std::size_t> first_relevant_rank(const RetrievalRun& run) {
    for (std::size_t r = 0; r < run.ranked.size(); ++r) {
        if (run.ranked[r].relevant) return r + 1;
    }
    return std::nullopt;
}

template <class PerQuery>
BucketValues micro_mean(const std::vector<RetrievalRun>& runs, PerQuery&& per_query) {
    BucketValues out;
    for (Bucket b : kBuckets) {
        CompensatedSum sum;
        std::size_t n = 0;
        for (const auto& run : runs) {
            if (!scored(run) || !in_bucket(run, b)) continue;
            sum.add(per_query(run));
            ++n;
        }
        if (n > 0) out[b] = sum.value() / static_cast<double>(n);
    }
    return out;
}

struct ClassAccumulator {
    CompensatedSum sum;
    std::size_t n = 0;
    Category category = Category::tail;
};

// Ordered by class_id so the macro average has a fixed reduction order.
std::map<std::string, ClassAccumulator> class_means(const std::vector<RetrievalRun>& runs, std::size_t depth, Bucket b) {
    std::map<std::string, ClassAccumulator> per_class;
    for (const auto& run : runs) {
        if (!scored(run) || !in_bucket(run, b)) continue;
        auto& acc = per_class[run.query_class];
        acc.sum.add(average_precision(run, depth));
        ++acc.n;
        acc.category = run.query_category;
    }
    return per_class;
}

}  // namespace

BucketValues mean_average_precision(const std::vector<RetrievalRun>& runs, std::size_t depth) {
    if (depth == 0) throw std::invalid_argument("depth must be at least 1");
    BucketValues out;
    for (Bucket b : kBuckets) {
        const auto per_class = class_means(runs, depth, b);
        if (per_class.empty()) continue;
        CompensatedSum sum;
        for (const auto& [cls, acc] : per_class) sum.add(acc.sum.value() / static_cast<double>(acc.n));
        out[b] = sum.value() / static_cast<double>(per_class.size());
    }
    return out;
}

BucketValues recall_at_k(const std::vector<RetrievalRun>& runs, std::size_t k) {
    if (k == 0) throw std::invalid_argument("k must be at least 1");
    return micro_mean(runs, [k](const RetrievalRun& run) {
        const auto r = first_relevant_rank(run);
        return r && *r <= k ? 1.0 : 0.0;
    });
}

BucketValues mrr_at_k(const std::vector<RetrievalRun>& runs, std::size_t k) {
    if (k == 0) throw std::invalid_argument("k must be at least 1");
    return micro_mean(runs, [k](const RetrievalRun& run) {
        const auto r = first_relevant_rank(run);
        return r && *r <= k ? 1.0 / static_cast<double>(*r) : 0.0;
    });
}

MetricReport build_report(const std::vector<RetrievalRun>& runs, const MetricConfig& config) {
    MetricReport report;
    report.config = config;
    report.total_queries = runs.size();
    for (const auto& run : runs) {
        if (!scored(run)) ++report.zero_relevant_queries;
    }
    const auto map = mean_average_precision(runs, config.depth);
    for (Bucket b : kBuckets) {
        auto& br = report.bucket(b);
        br.map = map[b];
        br.classes = class_means(runs, config.depth, b).size();
        for (const auto& run : runs) {
            if (scored(run) && in_bucket(run, b)) ++br.queries;
        }
    }
    for (auto k : config.ks) {
        const auto rec = recall_at_k(runs, k);
        const auto mrr = mrr_at_k(runs, k);
        for (Bucket b : kBuckets) {
            report.bucket(b).recall_at[k] = rec[b];
            report.bucket(b).mrr_at[k] = mrr[b];
        }
    }
    for (const auto& [cls, acc] : class_means(runs, config.depth, Bucket::all)) {
        report.per_class.push_back({cls, acc.category, acc.n, acc.sum.value() / static_cast<double>(acc.n)});
    }
    return report;
}

namespace {

// Counts relevant items granted before a cutoff without scanning the index.
class EligibilityCounter {
public:
    explicit EligibilityCounter(const TemporalIndex& index) {
        for (std::size_t row = 0; row < index.size(); ++row) {
            const auto& m = index.item(row);
            by_class_[m.class_id].push_back(index.day(row));
            by_patent_[m.patent_id].push_back(index.day(row));
            by_class_patent_[m.class_id + '\x1f' + m.patent_id].push_back(index.day(row));
        }
        for (auto* table : {&by_class_, &by_patent_, &by_class_patent_}) {
            for (auto& [key, days] : *table) std::sort(days.begin(), days.end());
        }
    }

    std::size_t count(const PatentImageRecord& q, RelevanceMode mode, bool exclude_same_patent,
                      bool self_in_index_before_cutoff) const {
        const auto cutoff = q.grant_date.days();
        std::size_t n = 0;
        if (mode == RelevanceMode::same_class) {
            n = before(by_class_, q.class_id, cutoff);
            if (exclude_same_patent) n -= before(by_class_patent_, q.class_id + '\x1f' + q.patent_id, cutoff);
        } else if (!exclude_same_patent) {
            n = before(by_patent_, q.patent_id, cutoff);
        }
        // The query's own row is never a hit, so it is not eligible either.
        if (self_in_index_before_cutoff && n > 0) --n;
        return n;
    }

private:
    using Table = std::unordered_map<std::string, std::vector<std::int32_t>>;

    static std::size_t before(const Table& t, const std::string& key, std::int32_t cutoff) {
        auto it = t.find(key);
        if (it == t.end()) return 0;
        return static_cast<std::size_t>(std::lower_bound(it->second.begin(), it->second.end(), cutoff) - it->second.begin());
    }

    Table by_class_;
    Table by_patent_;
    Table by_class_patent_;
};

}  // namespace

Evaluation evaluate(const TemporalIndex& index, const std::vector<const PatentImageRecord*>& queries,
                    const EmbeddingMatrix& query_vectors, const ClassDistribution& dist, const MetricConfig& config) {
    if (queries.size() != query_vectors.rows()) throw std::invalid_argument("query record and vector counts differ");
    if (config.ks.empty()) throw std::invalid_argument("at least one k is required");
    if (config.depth == 0) throw std::invalid_argument("depth must be at least 1");

    std::size_t k = config.depth;
    for (auto kk : config.ks) {
        if (kk == 0) throw std::invalid_argument("k must be at least 1");
        k = std::max(k, kk);
    }

    BatchQueryOptions opts;
    opts.k = k;
    opts.workers = config.workers;
    std::vector<Date> cutoffs;
    for (const auto* q : queries) {
        cutoffs.push_back(q->grant_date);
        opts.query_record_ids.emplace_back(q->record_id);
        opts.exclude_patents.push_back(config.exclude_same_patent ? std::optional<std::string>(q->patent_id) : std::nullopt);
    }
    const auto results = query_batch(index, query_vectors, cutoffs, opts);

    const EligibilityCounter counter(index);
    Evaluation ev;
    std::size_t unseen = 0;
    for (std::size_t i = 0; i < queries.size(); ++i) {
        const auto& q = *queries[i];
        RetrievalRun run;
        run.query_record_id = q.record_id;
        run.query_class = q.class_id;
        if (!dist.counts.contains(q.class_id)) ++unseen;
        run.query_category = dist.category_of(q.class_id);
        for (const auto& h : results[i].hits) {
            const bool rel = config.relevance == RelevanceMode::same_class ? h.class_id == q.class_id
                                                                           : h.patent_id == q.patent_id;
            run.ranked.push_back({h.record_id, h.class_id, h.score, rel});
        }
        bool self_before = false;
        if (auto row = index.find(q.record_id)) {
            const auto& m = index.item(*row);
            const bool rel = config.relevance == RelevanceMode::same_class ? m.class_id == q.class_id
                                                                           : m.patent_id == q.patent_id;
            const bool excluded = config.exclude_same_patent && m.patent_id == q.patent_id;
            self_before = rel && !excluded && index.day(*row) < q.grant_date.days();
        }
        run.eligible_relevant_count = counter.count(q, config.relevance, config.exclude_same_patent, self_before);
        ev.runs.push_back(std::move(run));
    }
    ev.report = build_report(ev.runs, config);
    ev.report.unseen_class_queries = unseen;
    return ev;
}

namespace {

nlohmann::ordered_json optional_number(const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

}  // namespace

nlohmann::ordered_json report_to_json(const MetricReport& report) {
    nlohmann::ordered_json j;
    j["depth"] = report.config.depth;
    j["ks"] = report.config.ks;
    j["relevance"] = std::string(to_string(report.config.relevance));
    j["exclude_same_patent"] = report.config.exclude_same_patent;
    j["total_queries"] = report.total_queries;
    j["zero_relevant_queries"] = report.zero_relevant_queries;
    j["unseen_class_queries"] = report.unseen_class_queries;
    for (Bucket b : kBuckets) {
        const auto& br = report.bucket(b);
        nlohmann::ordered_json jb;
        jb["queries"] = br.queries;
        jb["classes"] = br.classes;
        jb["mAP"] = optional_number(br.map);
        nlohmann::ordered_json rec = nlohmann::ordered_json::object();
        nlohmann::ordered_json mrr = nlohmann::ordered_json::object();
        for (const auto& [k, v] : br.recall_at) rec[std::to_string(k)] = optional_number(v);
        for (const auto& [k, v] : br.mrr_at) mrr[std::to_string(k)] = optional_number(v);
        jb["recall_at"] = rec;
        jb["mrr_at"] = mrr;
        j["buckets"][std::string(to_string(b))] = jb;
    }
    return j;
}

void write_per_class_csv(const MetricReport& report, std::ostream& out) {
    out << "class_id,category,queries,mean_ap\n";
    const auto old = out.precision(17);
    for (const auto& c : report.per_class) {
        out << c.class_id << ',' << to_string(c.category) << ',' << c.queries << ',' << c.mean_ap << '\n';
    }
    out.precision(old);
}

TTestResult paired_t_test(const PairedSamples& samples) {
    const std::size_t n = samples.pairs.size();
    if (n < 2) throw DegenerateSamples("paired t-test needs at least two pairs");
    CompensatedSum sum;
    for (const auto& [a, b] : samples.pairs) sum.add(a - b);
    const double mean = sum.value() / static_cast<double>(n);
    CompensatedSum ss;
    for (const auto& [a, b] : samples.pairs) {
        const double d = (a - b) - mean;
        ss.add(d * d);
    }
    const double var = ss.value() / static_cast<double>(n - 1);
    if (!(var > 1e-300) || var <= 1e-24 * std::max(1.0, mean * mean)) {
        throw DegenerateSamples("degenerate differences: zero variance");
    }
    TTestResult res;
    res.mean_difference = mean;
    res.df = n - 1;
    res.t = mean / std::sqrt(var / static_cast<double>(n));
    const boost::math::students_t dist(static_cast<double>(res.df));
    res.p_two_tailed = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(res.t))));
    return res;
}

}  // namespace pir
