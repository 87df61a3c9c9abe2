#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "pir/date.hpp"

namespace pir {

enum class Split { train, validation, query };

std::string_view to_string(Split s);
Split parse_split(std::string_view s);

enum class Category { head, tail };

std::string_view to_string(Category c);

struct PatentImageRecord {
    std::string record_id;
    std::string patent_id;
    std::string class_id;  // Locarno code, e.g. "12-08"
    Date grant_date;
    std::string object_name;
    std::string perspective;
    std::string description;
    Split split = Split::train;

    friend bool operator==(const PatentImageRecord&, const PatentImageRecord&) = default;
};

struct ClassDistribution {
    std::map<std::string, std::int64_t> counts;
    std::set<std::string> head_classes;
    std::set<std::string> tail_classes;
    double head_fraction = 0.4;

    bool is_head(const std::string& class_id) const { return head_classes.contains(class_id); }

    // Unseen classes are tail.
    Category category_of(const std::string& class_id) const {
        return is_head(class_id) ? Category::head : Category::tail;
    }

    friend bool operator==(const ClassDistribution&, const ClassDistribution&) = default;
};

struct Corpus {
    std::vector<PatentImageRecord> records;
    ClassDistribution distribution;

    const PatentImageRecord* find(std::string_view record_id) const;
    std::vector<const PatentImageRecord*> of_split(Split s) const;

    friend bool operator==(const Corpus&, const Corpus&) = default;
};

// Thrown by ingest_metadata. line() is 1-based; 0 when not line specific.
class IngestError : public std::runtime_error {
public:
    IngestError(const std::string& what, std::size_t line) : std::runtime_error(what), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

inline constexpr double kDefaultHeadFraction = 0.4;

// Classes sorted by (count desc, class_id asc); the first
// floor(head_fraction * |classes with count > 0|) are head. Zero-count
// entries are ignored.
ClassDistribution compute_head_tail(const std::map<std::string, std::int64_t>& counts,
                                    double head_fraction = kDefaultHeadFraction);

// Builds the corpus and derives its distribution from the train split.
Corpus make_corpus(std::vector<PatentImageRecord> records, double head_fraction = kDefaultHeadFraction);

Corpus ingest_metadata(const std::filesystem::path& path, double head_fraction = kDefaultHeadFraction);
Corpus parse_metadata(std::string_view jsonl, double head_fraction = kDefaultHeadFraction);

std::string record_to_json_line(const PatentImageRecord& r);
std::string serialize_metadata(const Corpus& corpus);
void write_metadata(const Corpus& corpus, const std::filesystem::path& path);

struct SyntheticCorpusSpec {
    std::uint64_t seed = 1;
    std::size_t n_classes = 0;
    std::vector<std::size_t> records_per_class;
    Date date_from = Date::from_ymd(2016, 1, 1);
    Date date_to = Date::from_ymd(2019, 12, 31);
    // Records are assigned to the query split with this probability; the
    // rest are train.
    double query_fraction = 0.0;
};

// Deterministic for a fixed spec. Classes are named c0..c{n-1}; records are
// emitted class by class.
Corpus generate_synthetic_corpus(const SyntheticCorpusSpec& spec);

}  // namespace pir
