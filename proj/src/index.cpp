#include "pir/index.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <thread>

#include <json.hpp>

#include "pir/fs_util.hpp"

namespace pir {

void TemporalIndex::finalize() {
    const auto n = meta_.size();
    days_.resize(n);
    by_id_.clear();
    by_id_.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        days_[i] = meta_[i].grant_date.days();
        if (!by_id_.emplace(meta_[i].record_id, i).second) {
            throw std::invalid_argument("duplicate record_id '" + meta_[i].record_id + "' at row " + std::to_string(i));
        }
    }
    date_order_.resize(n);
    std::iota(date_order_.begin(), date_order_.end(), 0u);
    std::stable_sort(date_order_.begin(), date_order_.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return days_[a] < days_[b]; });

    std::vector<std::uint32_t> by_name(n);
    std::iota(by_name.begin(), by_name.end(), 0u);
    std::sort(by_name.begin(), by_name.end(),
              [&](std::uint32_t a, std::uint32_t b) { return meta_[a].record_id < meta_[b].record_id; });
    id_rank_.resize(n);
    for (std::size_t r = 0; r < n; ++r) id_rank_[by_name[r]] = static_cast<std::uint32_t>(r);
}

TemporalIndex TemporalIndex::build(const EmbeddingMatrix& vectors, std::vector<ItemMetadata> metadata) {
    if (vectors.rows() != metadata.size()) {
        throw std::invalid_argument("vector count does not match metadata count");
    }
    vectors.check_finite();
    TemporalIndex idx;
    idx.dim_ = vectors.dim();
    idx.vectors_.resize(vectors.rows() * vectors.dim());
    for (std::size_t i = 0; i < vectors.rows(); ++i) {
        const double n = l2_norm(vectors.row(i));
        if (!(n > 0.0)) throw std::invalid_argument("zero vector at row " + std::to_string(i));
        auto src = vectors.row(i);
        for (std::size_t k = 0; k < idx.dim_; ++k) {
            idx.vectors_[i * idx.dim_ + k] = static_cast<float>(src[k] / n);
        }
    }
    idx.meta_ = std::move(metadata);
    idx.finalize();
    return idx;
}

TemporalIndex TemporalIndex::from_f32(std::size_t dim, std::vector<float> vectors, std::vector<ItemMetadata> metadata) {
    if (vectors.size() != dim * metadata.size()) {
        throw std::invalid_argument("vector storage does not match dim x count");
    }
    TemporalIndex idx;
    idx.dim_ = dim;
    idx.vectors_ = std::move(vectors);
    for (std::size_t i = 0; i < metadata.size(); ++i) {
        float* row = idx.vectors_.data() + i * dim;
        double ss = 0.0;
        for (std::size_t k = 0; k < dim; ++k) {
            if (!std::isfinite(row[k])) throw std::invalid_argument("non-finite vector at row " + std::to_string(i));
            ss += static_cast<double>(row[k]) * row[k];
        }
        const double n = std::sqrt(ss);
        if (!(n > 0.0)) throw std::invalid_argument("zero vector at row " + std::to_string(i));
        if (std::abs(n - 1.0) > 1e-5) {
            for (std::size_t k = 0; k < dim; ++k) row[k] = static_cast<float>(row[k] / n);
        }
    }
    idx.meta_ = std::move(metadata);
    idx.finalize();
    return idx;
}

std::optional<std::size_t> TemporalIndex::find(const std::string& record_id) const {
    auto it = by_id_.find(record_id);
    if (it == by_id_.end()) return std::nullopt;
    return it->second;
}

std::size_t TemporalIndex::count_before(Date cutoff) const {
    auto it = std::partition_point(date_order_.begin(), date_order_.end(),
                                   [&](std::uint32_t r) { return days_[r] < cutoff.days(); });
    return static_cast<std::size_t>(it - date_order_.begin());
}

double item_dot(std::span<const float> item, std::span<const double> query) {
    const std::size_t n = item.size();
    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
    std::size_t k = 0;
    for (; k + 4 <= n; k += 4) {
        a0 += static_cast<double>(item[k]) * query[k];
        a1 += static_cast<double>(item[k + 1]) * query[k + 1];
        a2 += static_cast<double>(item[k + 2]) * query[k + 2];
        a3 += static_cast<double>(item[k + 3]) * query[k + 3];
    }
    for (; k < n; ++k) a0 += static_cast<double>(item[k]) * query[k];
    return (a0 + a1) + (a2 + a3);
}

namespace {

struct Candidate {
    double score;
    std::uint32_t rank;
    std::uint32_t row;
};

bool better(const Candidate& a, const Candidate& b) {
    return a.score > b.score || (a.score == b.score && a.rank < b.rank);
}

// Bounded heap with the worst kept candidate at the front.
class TopK {
public:
    explicit TopK(std::size_t k) : k_(k) { heap_.reserve(k); }

    void offer(const Candidate& c) {
        if (heap_.size() < k_) {
            heap_.push_back(c);
            std::push_heap(heap_.begin(), heap_.end(), better);
        } else if (better(c, heap_.front())) {
            std::pop_heap(heap_.begin(), heap_.end(), better);
            heap_.back() = c;
            std::push_heap(heap_.begin(), heap_.end(), better);
        }
    }

    std::vector<Candidate> sorted() && {
        std::sort(heap_.begin(), heap_.end(), better);
        return std::move(heap_);
    }

private:
    std::size_t k_;
    std::vector<Candidate> heap_;
};

struct PreparedQuery {
    std::vector<double> unit;
    std::int32_t cutoff_day = 0;
    const std::string* exclude_patent = nullptr;
    std::optional<std::size_t> self_row;
};

PreparedQuery prepare(const TemporalIndex& index, std::span<const double> vector, Date cutoff,
                      const std::optional<std::string>& exclude_patent, const std::optional<std::string>& self_id) {
    if (vector.size() != index.dim()) {
        throw std::invalid_argument("query dimension " + std::to_string(vector.size()) + " does not match index dimension " +
                                    std::to_string(index.dim()));
    }
    PreparedQuery q;
    const double n = l2_norm(vector);
    if (!(n > 0.0) || !std::isfinite(n)) throw std::invalid_argument("query vector must be finite and non-zero");
    q.unit.resize(vector.size());
    for (std::size_t k = 0; k < vector.size(); ++k) q.unit[k] = vector[k] / n;
    q.cutoff_day = cutoff.days();
    if (exclude_patent) q.exclude_patent = &*exclude_patent;
    if (self_id) q.self_row = index.find(*self_id);
    return q;
}

bool eligible(const TemporalIndex& index, const PreparedQuery& q, std::size_t row) {
    if (index.day(row) >= q.cutoff_day) return false;
    if (q.self_row && *q.self_row == row) return false;
    if (q.exclude_patent && index.item(row).patent_id == *q.exclude_patent) return false;
    return true;
}

QueryResult finish(const TemporalIndex& index, TopK&& top, Date cutoff, const std::optional<std::string>& self_id) {
    QueryResult res;
    res.cutoff_date = cutoff;
    res.query_record_id = self_id;
    for (const auto& c : std::move(top).sorted()) {
        const auto& m = index.item(c.row);
        res.hits.push_back({m.record_id, std::clamp(c.score, -1.0, 1.0), m.class_id, m.patent_id, m.grant_date, c.row});
    }
    return res;
}

}  // namespace

QueryResult query_topk(const TemporalIndex& index, const QuerySpec& query) {
    if (query.k == 0) throw std::invalid_argument("k must be at least 1");
    const auto q = prepare(index, query.vector, query.cutoff, query.exclude_patent, query.query_record_id);
    TopK top(query.k);
    for (std::size_t row = 0; row < index.size(); ++row) {
        if (!eligible(index, q, row)) continue;
        top.offer({item_dot(index.vector(row), q.unit), index.id_rank(row), static_cast<std::uint32_t>(row)});
    }
    return finish(index, std::move(top), query.cutoff, query.query_record_id);
}

std::vector<QueryResult> query_batch(const TemporalIndex& index, const EmbeddingMatrix& queries,
                                     const std::vector<Date>& cutoffs, const BatchQueryOptions& options) {
    const std::size_t n = queries.rows();
    if (cutoffs.size() != n) throw std::invalid_argument("cutoff count does not match query count");
    if (!options.exclude_patents.empty() && options.exclude_patents.size() != n) {
        throw std::invalid_argument("exclude_patents length does not match query count");
    }
    if (!options.query_record_ids.empty() && options.query_record_ids.size() != n) {
        throw std::invalid_argument("query_record_ids length does not match query count");
    }
    if (options.k == 0) throw std::invalid_argument("k must be at least 1");

    static const std::optional<std::string> kNone;
    auto exclude_of = [&](std::size_t i) -> const std::optional<std::string>& {
        return options.exclude_patents.empty() ? kNone : options.exclude_patents[i];
    };
    auto self_of = [&](std::size_t i) -> const std::optional<std::string>& {
        return options.query_record_ids.empty() ? kNone : options.query_record_ids[i];
    };

    std::vector<PreparedQuery> prepared;
    prepared.reserve(n);
    for (std::size_t i = 0; i < n; ++i) prepared.push_back(prepare(index, queries.row(i), cutoffs[i], exclude_of(i), self_of(i)));

    std::vector<QueryResult> results(n);
    constexpr std::size_t kQueryBlock = 8;
    constexpr std::size_t kItemTile = 256;
    const std::size_t n_blocks = (n + kQueryBlock - 1) / kQueryBlock;

    // Each block of queries streams the item matrix tile by tile so a tile
    // is reused from cache by every query in the block.
    auto run_block = [&](std::size_t block) {
        const std::size_t q0 = block * kQueryBlock;
        const std::size_t q1 = std::min(n, q0 + kQueryBlock);
        std::vector<TopK> tops;
        for (std::size_t i = q0; i < q1; ++i) tops.emplace_back(options.k);
        for (std::size_t t0 = 0; t0 < index.size(); t0 += kItemTile) {
            const std::size_t t1 = std::min(index.size(), t0 + kItemTile);
            for (std::size_t i = q0; i < q1; ++i) {
                const auto& q = prepared[i];
                auto& top = tops[i - q0];
                for (std::size_t row = t0; row < t1; ++row) {
                    if (!eligible(index, q, row)) continue;
                    top.offer({item_dot(index.vector(row), q.unit), index.id_rank(row), static_cast<std::uint32_t>(row)});
                }
            }
        }
        for (std::size_t i = q0; i < q1; ++i) results[i] = finish(index, std::move(tops[i - q0]), cutoffs[i], self_of(i));
    };

    std::size_t workers = options.workers ? options.workers : std::max(1u, std::thread::hardware_concurrency());
    workers = std::min(workers, std::max<std::size_t>(1, n_blocks));
    if (workers <= 1) {
        for (std::size_t b = 0; b < n_blocks; ++b) run_block(b);
        return results;
    }
    std::vector<std::exception_ptr> errors(workers);
    {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t b = w; b < n_blocks; b += workers) run_block(b);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return results;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    std::string_view take(std::size_t n, const char* what) {
        if (bytes_.size() - pos_ < n) {
            throw PirvError(PirvErrorCode::truncated, std::string("truncated PIRV file while reading ") + what);
        }
        auto out = bytes_.substr(pos_, n);
        pos_ += n;
        return out;
    }

    std::uint64_t uint(std::size_t width, const char* what) {
        auto b = take(width, what);
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
        return v;
    }

    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string encode_pirv(const PirvFile& file) {
    if (file.vectors.size() != static_cast<std::size_t>(file.dim) * file.metadata.size()) {
        throw std::invalid_argument("PIRV vector storage does not match dim x count");
    }
    std::string out = "PIRV";
    put_u32(out, kPirvVersion);
    put_u32(out, file.dim);
    put_u64(out, file.metadata.size());
    out.reserve(out.size() + file.vectors.size() * 4 + 8 + file.metadata.size() * 96);
    for (float f : file.vectors) put_u32(out, std::bit_cast<std::uint32_t>(f));

    std::string meta;
    for (const auto& m : file.metadata) {
        nlohmann::ordered_json j;
        j["record_id"] = m.record_id;
        j["grant_date"] = m.grant_date.iso();
        j["class_id"] = m.class_id;
        j["patent_id"] = m.patent_id;
        meta += j.dump();
        meta += '\n';
    }
    put_u64(out, meta.size());
    out += meta;
    return out;
}

PirvFile decode_pirv(std::string_view bytes) {
    Reader in(bytes);
    if (bytes.size() < 4) throw PirvError(PirvErrorCode::truncated, "truncated PIRV file while reading magic");
    if (in.take(4, "magic") != "PIRV") throw PirvError(PirvErrorCode::bad_magic, "bad magic");
    const auto version = static_cast<std::uint32_t>(in.uint(4, "version"));
    if (version != kPirvVersion) {
        throw PirvError(PirvErrorCode::bad_version, "unsupported PIRV version " + std::to_string(version));
    }
    PirvFile file;
    file.dim = static_cast<std::uint32_t>(in.uint(4, "dim"));
    const std::uint64_t count = in.uint(8, "count");
    const std::uint64_t n_floats = count * file.dim;
    if (file.dim != 0 && (count > in.remaining() / 4 / file.dim)) {
        throw PirvError(PirvErrorCode::truncated, "truncated PIRV file while reading vectors");
    }
    const auto raw = in.take(static_cast<std::size_t>(n_floats) * 4, "vectors");
    file.vectors.resize(static_cast<std::size_t>(n_floats));
    for (std::size_t i = 0; i < file.vectors.size(); ++i) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[4 * i + b])) << (8 * b);
        file.vectors[i] = std::bit_cast<float>(u);
    }
    const std::uint64_t meta_len = in.uint(8, "metadata length");
    if (meta_len > in.remaining()) throw PirvError(PirvErrorCode::truncated, "truncated PIRV file while reading metadata");
    const auto meta = in.take(static_cast<std::size_t>(meta_len), "metadata");
    if (in.remaining() != 0) throw PirvError(PirvErrorCode::bad_metadata, "trailing bytes after PIRV metadata block");

    std::size_t pos = 0;
    while (pos < meta.size()) {
        const auto eol = meta.find('\n', pos);
        if (eol == std::string_view::npos) throw PirvError(PirvErrorCode::bad_metadata, "unterminated PIRV metadata line");
        const auto line = meta.substr(pos, eol - pos);
        pos = eol + 1;
        try {
            const auto j = nlohmann::json::parse(line);
            file.metadata.push_back({j.at("record_id").get<std::string>(), Date::parse(j.at("grant_date").get<std::string>()),
                                     j.at("class_id").get<std::string>(), j.at("patent_id").get<std::string>()});
        } catch (const std::exception& e) {
            throw PirvError(PirvErrorCode::bad_metadata,
                            "bad PIRV metadata at row " + std::to_string(file.metadata.size()) + ": " + e.what());
        }
    }
    if (file.metadata.size() != count) {
        throw PirvError(PirvErrorCode::bad_metadata, "PIRV metadata row count " + std::to_string(file.metadata.size()) +
                                                         " does not match vector count " + std::to_string(count));
    }
    return file;
}

PirvFile read_pirv(const std::filesystem::path& path) {
    std::string bytes;
    try {
        bytes = read_file(path);
    } catch (const std::exception& e) {
        throw PirvError(PirvErrorCode::io, e.what());
    }
    return decode_pirv(bytes);
}

void write_pirv(const PirvFile& file, const std::filesystem::path& path) { write_file_atomic(path, encode_pirv(file)); }

std::string encode_index(const TemporalIndex& index) {
    PirvFile f;
    f.dim = static_cast<std::uint32_t>(index.dim());
    f.vectors = index.raw_vectors();
    f.metadata = index.items();
    return encode_pirv(f);
}

void dump_index(const TemporalIndex& index, const std::filesystem::path& path) {
    write_file_atomic(path, encode_index(index));
}

TemporalIndex load_index(const std::filesystem::path& path) {
    auto f = read_pirv(path);
    try {
        return TemporalIndex::from_f32(f.dim, std::move(f.vectors), std::move(f.metadata));
    } catch (const std::invalid_argument& e) {
        throw PirvError(PirvErrorCode::bad_metadata, e.what());
    }
}

}  // namespace pir
