#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "pir/date.hpp"
#include "pir/embedding.hpp"

namespace pir {

struct ItemMetadata {
    std::string record_id;
    Date grant_date;
    std::string class_id;
    std::string patent_id;

    friend bool operator==(const ItemMetadata&, const ItemMetadata&) = default;
};

// Immutable store of L2-normalized f32 vectors with grant-date, class and
// patent columns. Row order is insertion order; date_order() lists rows by
// (grant_date, row).
class TemporalIndex {
public:
    TemporalIndex() = default;

    // Normalizes every vector. Throws on a zero vector (naming the row), a
    // duplicate record_id, or a length mismatch.
    static TemporalIndex build(const EmbeddingMatrix& vectors, std::vector<ItemMetadata> metadata);

    // Takes f32 rows as-is when their norm is within 1e-5 of 1 and
    // renormalizes the others; used by the loader.
    static TemporalIndex from_f32(std::size_t dim, std::vector<float> vectors, std::vector<ItemMetadata> metadata);

    std::size_t dim() const { return dim_; }
    std::size_t size() const { return meta_.size(); }
    bool empty() const { return meta_.empty(); }

    std::span<const float> vector(std::size_t row) const { return {vectors_.data() + row * dim_, dim_}; }
    const std::vector<float>& raw_vectors() const { return vectors_; }
    const ItemMetadata& item(std::size_t row) const { return meta_[row]; }
    const std::vector<ItemMetadata>& items() const { return meta_; }
    std::int32_t day(std::size_t row) const { return days_[row]; }
    const std::vector<std::uint32_t>& date_order() const { return date_order_; }

    // Position of the row's record_id in ascending id order; the tie-break key.
    std::uint32_t id_rank(std::size_t row) const { return id_rank_[row]; }

    std::optional<std::size_t> find(const std::string& record_id) const;

    // Rows with grant_date strictly before `cutoff`.
    std::size_t count_before(Date cutoff) const;

private:
    void finalize();

    std::size_t dim_ = 0;
    std::vector<float> vectors_;
    std::vector<ItemMetadata> meta_;
    std::vector<std::int32_t> days_;
    std::vector<std::uint32_t> date_order_;
    std::vector<std::uint32_t> id_rank_;
    std::unordered_map<std::string, std::size_t> by_id_;
};

struct Hit {
    std::string record_id;
    double score = 0.0;
    std::string class_id;
    std::string patent_id;
    Date grant_date;
    std::size_t row = 0;

    friend bool operator==(const Hit&, const Hit&) = default;
};

struct QueryResult {
    std::vector<Hit> hits;
    std::optional<std::string> query_record_id;
    Date cutoff_date;

    friend bool operator==(const QueryResult&, const QueryResult&) = default;
};

struct QuerySpec {
    std::span<const double> vector;
    Date cutoff;
    std::size_t k = 10;
    // Items of this patent are skipped when set.
    std::optional<std::string> exclude_patent;
    // The query's own record; never returned as a hit.
    std::optional<std::string> query_record_id;
};

// Exact top-k by cosine over items granted strictly before the cutoff.
// Ties in score go to the smaller record_id.
QueryResult query_topk(const TemporalIndex& index, const QuerySpec& query);

struct BatchQueryOptions {
    std::size_t k = 10;
    // Optional per-query values; empty or same length as the query batch.
    std::vector<std::optional<std::string>> exclude_patents;
    std::vector<std::optional<std::string>> query_record_ids;
    // 0 picks std::thread::hardware_concurrency().
    std::size_t workers = 0;
};

// Elementwise identical to query_topk; output order follows input order and
// does not depend on the worker count.
std::vector<QueryResult> query_batch(const TemporalIndex& index, const EmbeddingMatrix& queries,
                                     const std::vector<Date>& cutoffs, const BatchQueryOptions& options);

// Dot product of an f32 item vector with an f64 query, in a fixed summation
// order shared by every scan path.
double item_dot(std::span<const float> item, std::span<const double> query);

enum class PirvErrorCode { io, bad_magic, bad_version, truncated, bad_metadata };

class PirvError : public std::runtime_error {
public:
    PirvError(PirvErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    PirvErrorCode code() const { return code_; }

private:
    PirvErrorCode code_;
};

inline constexpr std::uint32_t kPirvVersion = 1;

// Raw PIRV contents. Vectors are stored verbatim.
struct PirvFile {
    std::uint32_t dim = 0;
    std::vector<float> vectors;
    std::vector<ItemMetadata> metadata;
};

std::string encode_pirv(const PirvFile& file);
PirvFile decode_pirv(std::string_view bytes);
PirvFile read_pirv(const std::filesystem::path& path);
void write_pirv(const PirvFile& file, const std::filesystem::path& path);

void dump_index(const TemporalIndex& index, const std::filesystem::path& path);
TemporalIndex load_index(const std::filesystem::path& path);
std::string encode_index(const TemporalIndex& index);

}  // namespace pir
