#include "pir/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "pir/fs_util.hpp"
#include "pir/rng.hpp"

namespace pir {

using nlohmann::ordered_json;

std::string_view to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::validation: return "validation";
        case Split::query: return "query";
    }
    return "train";
}

Split parse_split(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "validation") return Split::validation;
    if (s == "query") return Split::query;
    throw std::invalid_argument("unknown split '" + std::string(s) + "'");
}

std::string_view to_string(Category c) { return c == Category::head ? "head" : "tail"; }

const PatentImageRecord* Corpus::find(std::string_view record_id) const {
    for (const auto& r : records) {
        if (r.record_id == record_id) return &r;
    }
    return nullptr;
}

std::vector<const PatentImageRecord*> Corpus::of_split(Split s) const {
    std::vector<const PatentImageRecord*> out;
    for (const auto& r : records) {
        if (r.split == s) out.push_back(&r);
    }
    return out;
}

ClassDistribution compute_head_tail(const std::map<std::string, std::int64_t>& counts, double head_fraction) {
    if (!(head_fraction > 0.0 && head_fraction < 1.0)) {
        throw std::invalid_argument("head_fraction must lie in (0, 1)");
    }
    std::vector<std::pair<std::string, std::int64_t>> ranked;
    for (const auto& [cls, n] : counts) {
        if (n < 0) throw std::invalid_argument("negative count for class '" + cls + "'");
        if (n > 0) ranked.emplace_back(cls, n);
    }
    if (ranked.empty()) {
        throw std::invalid_argument("empty class histogram");
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    const auto n_head = static_cast<std::size_t>(std::floor(head_fraction * static_cast<double>(ranked.size())));
    ClassDistribution dist;
    dist.head_fraction = head_fraction;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        dist.counts.emplace(ranked[i].first, ranked[i].second);
        (i < n_head ? dist.head_classes : dist.tail_classes).insert(ranked[i].first);
    }
    return dist;
}

Corpus make_corpus(std::vector<PatentImageRecord> records, double head_fraction) {
    std::map<std::string, std::int64_t> hist;
    for (const auto& r : records) {
        if (r.split == Split::train) ++hist[r.class_id];
    }
    Corpus c;
    c.records = std::move(records);
    if (!hist.empty()) {
        c.distribution = compute_head_tail(hist, head_fraction);
    } else {
        c.distribution.head_fraction = head_fraction;
    }
    return c;
}

namespace {

std::string required_string(const ordered_json& obj, const char* key, std::size_t line) {
    auto it = obj.find(key);
    if (it == obj.end() || !it->is_string()) {
        throw IngestError("malformed line " + std::to_string(line) + ": missing string field '" + key + "'", line);
    }
    return it->get<std::string>();
}

}  // namespace

Corpus parse_metadata(std::string_view jsonl, double head_fraction) {
    std::vector<PatentImageRecord> records;
    std::unordered_set<std::string> seen;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < jsonl.size()) {
        const auto eol = jsonl.find('\n', pos);
        std::string_view line = jsonl.substr(pos, eol == std::string_view::npos ? std::string_view::npos : eol - pos);
        pos = eol == std::string_view::npos ? jsonl.size() : eol + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.find_first_not_of(" \t") == std::string_view::npos) continue;

        ordered_json obj;
        try {
            obj = ordered_json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw IngestError("malformed line " + std::to_string(line_no) + ": " + e.what(), line_no);
        }
        if (!obj.is_object()) {
            throw IngestError("malformed line " + std::to_string(line_no) + ": not a JSON object", line_no);
        }

        PatentImageRecord r;
        r.record_id = required_string(obj, "record_id", line_no);
        r.patent_id = required_string(obj, "patent_id", line_no);
        r.class_id = required_string(obj, "class_id", line_no);
        r.object_name = required_string(obj, "object_name", line_no);
        r.perspective = required_string(obj, "perspective", line_no);
        r.description = required_string(obj, "description", line_no);
        const auto date = required_string(obj, "grant_date", line_no);
        const auto split = required_string(obj, "split", line_no);

        if (r.record_id.empty()) {
            throw IngestError("malformed line " + std::to_string(line_no) + ": empty record_id", line_no);
        }
        if (r.class_id.empty()) {
            throw IngestError("malformed line " + std::to_string(line_no) + ": empty class_id", line_no);
        }
        try {
            r.grant_date = Date::parse(date);
        } catch (const std::invalid_argument& e) {
            throw IngestError(std::string(e.what()) + " at line " + std::to_string(line_no), line_no);
        }
        try {
            r.split = parse_split(split);
        } catch (const std::invalid_argument& e) {
            throw IngestError(std::string(e.what()) + " at line " + std::to_string(line_no), line_no);
        }
        if (!seen.insert(r.record_id).second) {
            throw IngestError("duplicate record_id at line " + std::to_string(line_no), line_no);
        }
        records.push_back(std::move(r));
    }
    return make_corpus(std::move(records), head_fraction);
}

Corpus ingest_metadata(const std::filesystem::path& path, double head_fraction) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IngestError("cannot open metadata file " + path.string(), 0);
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_metadata(ss.str(), head_fraction);
}

std::string record_to_json_line(const PatentImageRecord& r) {
    ordered_json j;
    j["record_id"] = r.record_id;
    j["patent_id"] = r.patent_id;
    j["class_id"] = r.class_id;
    j["grant_date"] = r.grant_date.iso();
    j["object_name"] = r.object_name;
    j["perspective"] = r.perspective;
    j["description"] = r.description;
    j["split"] = std::string(to_string(r.split));
    return j.dump();
}

std::string serialize_metadata(const Corpus& corpus) {
    std::string out;
    for (const auto& r : corpus.records) {
        out += record_to_json_line(r);
        out += '\n';
    }
    return out;
}

void write_metadata(const Corpus& corpus, const std::filesystem::path& path) {
    write_file_atomic(path, serialize_metadata(corpus));
}

namespace {

constexpr std::array<std::string_view, 24> kObjectNames = {
    "lighting fixture", "toy car",     "shoe",          "shoelace",      "flashlight",   "charger",
    "chair",            "table",       "lamp shade",    "bottle",        "cup",          "wristwatch",
    "headphone",        "speaker",     "keyboard",      "mouse",         "handbag",      "backpack",
    "vehicle",          "bicycle",     "door handle",   "faucet",        "smartphone",   "display screen",
};

constexpr std::array<std::string_view, 7> kPerspectives = {
    "front elevational view", "rear elevational view", "left side view",     "right side view",
    "top plan view",          "bottom plan view",      "perspective view",
};

}  // namespace

Corpus generate_synthetic_corpus(const SyntheticCorpusSpec& spec) {
    if (spec.records_per_class.size() != spec.n_classes) {
        throw std::invalid_argument("records_per_class length must equal n_classes");
    }
    if (spec.date_to < spec.date_from) {
        throw std::invalid_argument("date range is reversed");
    }
    for (auto n : spec.records_per_class) {
        if (n == 0) throw std::invalid_argument("records_per_class entries must be positive");
    }

    const CounterRng root(spec.seed);
    const auto span = spec.date_to.days() - spec.date_from.days();
    std::vector<PatentImageRecord> records;
    std::size_t serial = 0;
    std::size_t patent_serial = 0;
    for (std::size_t c = 0; c < spec.n_classes; ++c) {
        CounterRng rng = root.split(c);
        const auto object = kObjectNames[static_cast<std::size_t>(rng.uniform_int(0, kObjectNames.size() - 1))];
        std::size_t left_in_patent = 0;
        std::string patent_id;
        Date patent_date;
        for (std::size_t i = 0; i < spec.records_per_class[c]; ++i) {
            // Up to three figures share a patent and its grant date.
            if (left_in_patent == 0) {
                left_in_patent = static_cast<std::size_t>(rng.uniform_int(1, 3));
                char buf[16];
                std::snprintf(buf, sizeof buf, "D%07zu", ++patent_serial);
                patent_id = buf;
                patent_date = spec.date_from.plus_days(static_cast<std::int32_t>(rng.uniform_int(0, span)));
            }
            --left_in_patent;

            PatentImageRecord r;
            char buf[16];
            std::snprintf(buf, sizeof buf, "r%06zu", serial++);
            r.record_id = buf;
            r.patent_id = patent_id;
            r.class_id = "c" + std::to_string(c);
            r.grant_date = patent_date;
            r.object_name = std::string(object);
            r.perspective = std::string(kPerspectives[static_cast<std::size_t>(rng.uniform_int(0, kPerspectives.size() - 1))]);
            r.description = "FIG. " + std::to_string(i % 7 + 1) + " is a " + r.perspective + " of a " + r.object_name;
            const bool is_query = spec.query_fraction > 0.0 && rng.uniform() < spec.query_fraction;
            r.split = is_query ? Split::query : Split::train;
            records.push_back(std::move(r));
        }
    }
    return make_corpus(std::move(records));
}

}  // namespace pir
