#pragma once

#include <cstddef>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pir/embedding.hpp"
#include "pir/index.hpp"
#include "pir/model.hpp"

namespace pir {

enum class RelevanceMode { same_class, same_patent };

std::string_view to_string(RelevanceMode m);
RelevanceMode parse_relevance_mode(std::string_view s);

bool relevance(const PatentImageRecord& query, const PatentImageRecord& candidate, RelevanceMode mode);

struct RankedEntry {
    std::string record_id;
    std::string class_id;
    double score = 0.0;
    bool relevant = false;
};

struct RetrievalRun {
    std::string query_record_id;
    std::string query_class;
    Category query_category = Category::tail;
    std::vector<RankedEntry> ranked;  // score descending
    std::size_t eligible_relevant_count = 0;
};

// (1 / min(eligible, depth)) * sum of precision@r over relevant ranks r <= depth.
// 0 when nothing relevant is eligible.
double average_precision(const RetrievalRun& run, std::size_t depth);

enum class Bucket { head, tail, all };
inline constexpr Bucket kBuckets[] = {Bucket::head, Bucket::tail, Bucket::all};
std::string_view to_string(Bucket b);

// Absent when the bucket has no scored queries.
struct BucketValues {
    std::optional<double> head;
    std::optional<double> tail;
    std::optional<double> all;

    std::optional<double>& operator[](Bucket b) { return b == Bucket::head ? head : b == Bucket::tail ? tail : all; }
    const std::optional<double>& operator[](Bucket b) const {
        return b == Bucket::head ? head : b == Bucket::tail ? tail : all;
    }
};

// Queries with eligible_relevant_count == 0 are left out of every metric.

// AP averaged within each query class, then across classes.
BucketValues mean_average_precision(const std::vector<RetrievalRun>& runs, std::size_t depth);

// Fraction of queries with a relevant item in the top k.
BucketValues recall_at_k(const std::vector<RetrievalRun>& runs, std::size_t k);

// Mean of 1 / rank of the first relevant item when that rank is <= k, else 0.
BucketValues mrr_at_k(const std::vector<RetrievalRun>& runs, std::size_t k);

struct ClassAp {
    std::string class_id;
    Category category = Category::tail;
    std::size_t queries = 0;
    double mean_ap = 0.0;
};

struct MetricConfig {
    std::vector<std::size_t> ks{5, 10};
    std::size_t depth = 100;
    RelevanceMode relevance = RelevanceMode::same_class;
    bool exclude_same_patent = false;
    std::size_t workers = 0;
};

struct BucketReport {
    std::size_t queries = 0;  // scored queries
    std::size_t classes = 0;
    std::optional<double> map;
    std::map<std::size_t, std::optional<double>> recall_at;
    std::map<std::size_t, std::optional<double>> mrr_at;
};

struct MetricReport {
    MetricConfig config;
    BucketReport head;
    BucketReport tail;
    BucketReport all;
    std::vector<ClassAp> per_class;
    std::size_t total_queries = 0;
    std::size_t zero_relevant_queries = 0;
    std::size_t unseen_class_queries = 0;

    const BucketReport& bucket(Bucket b) const { return b == Bucket::head ? head : b == Bucket::tail ? tail : all; }
    BucketReport& bucket(Bucket b) { return b == Bucket::head ? head : b == Bucket::tail ? tail : all; }
};

MetricReport build_report(const std::vector<RetrievalRun>& runs, const MetricConfig& config);

struct Evaluation {
    MetricReport report;
    std::vector<RetrievalRun> runs;
};

// One query per record/vector row; cutoff is the record's grant date and
// head/tail membership comes from `dist` (classes it has never seen count
// as tail and are tallied in unseen_class_queries).
Evaluation evaluate(const TemporalIndex& index, const std::vector<const PatentImageRecord*>& queries,
                    const EmbeddingMatrix& query_vectors, const ClassDistribution& dist, const MetricConfig& config);

nlohmann::ordered_json report_to_json(const MetricReport& report);
void write_per_class_csv(const MetricReport& report, std::ostream& out);

struct PairedSamples {
    std::vector<std::pair<double, double>> pairs;
    std::string label_a = "A";
    std::string label_b = "B";
};

struct TTestResult {
    double t = 0.0;
    std::size_t df = 0;
    double p_two_tailed = 1.0;
    double mean_difference = 0.0;
};

class DegenerateSamples : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Paired t-test on a - b. Throws DegenerateSamples when n < 2 or the
// differences have zero variance.
TTestResult paired_t_test(const PairedSamples& samples);

// Neumaier-compensated sum.
class CompensatedSum {
public:
    void add(double x);
    double value() const { return sum_ + comp_; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

}  // namespace pir
