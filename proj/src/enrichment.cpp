#include "pir/enrichment.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_set>

#include <httplib.h>

#include "pir/fs_util.hpp"
#include "pir/index.hpp"
#include "pir/rng.hpp"

namespace pir {

std::vector<std::string> placeholders_in(std::string_view pattern) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while ((pos = pattern.find('{', pos)) != std::string_view::npos) {
        const auto end = pattern.find('}', pos);
        if (end == std::string_view::npos) throw std::invalid_argument("unterminated placeholder in template");
        out.emplace_back(pattern.substr(pos + 1, end - pos - 1));
        pos = end + 1;
    }
    return out;
}

void validate_template(const PromptTemplate& t) {
    if (t.template_id.empty()) throw std::invalid_argument("template id must not be empty");
    for (const auto& name : placeholders_in(t.pattern)) {
        if (std::find(std::begin(kPlaceholders), std::end(kPlaceholders), name) == std::end(kPlaceholders)) {
            throw std::invalid_argument("template '" + t.template_id + "' uses unknown placeholder {" + name + "}");
        }
    }
    if (t.pattern.find('}') != std::string::npos &&
        std::count(t.pattern.begin(), t.pattern.end(), '{') != std::count(t.pattern.begin(), t.pattern.end(), '}')) {
        throw std::invalid_argument("template '" + t.template_id + "' has unbalanced braces");
    }
}

std::vector<PromptTemplate> default_templates() {
    return {
        {"photo", "This is a photo of {ObjectName}."},
        {"photo_class", "This is a photo of {ObjectName}, classified as {Class}."},
        {"features", "This image features {Details}"},
        {"alias", "{ObjectName} can also be referred to as {Synonym}."},
    };
}

std::string templates_fingerprint(const std::vector<PromptTemplate>& templates) {
    std::uint64_t h = fnv1a64("templates/v1");
    for (const auto& t : templates) {
        h = fnv1a64(t.template_id, h);
        h = fnv1a64(std::string_view("\x1f", 1), h);
        h = fnv1a64(t.pattern, h);
        h = fnv1a64(std::string_view("\x1e", 1), h);
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

namespace {

std::string substitute(std::string_view pattern, const std::map<std::string, std::string, std::less<>>& values) {
    std::string out;
    std::size_t pos = 0;
    while (pos < pattern.size()) {
        const auto open = pattern.find('{', pos);
        if (open == std::string_view::npos) {
            out.append(pattern.substr(pos));
            break;
        }
        out.append(pattern.substr(pos, open - pos));
        const auto close = pattern.find('}', open);
        out.append(values.find(pattern.substr(open + 1, close - open - 1))->second);
        pos = close + 1;
    }
    return out;
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

}  // namespace

RenderResult render_templates(const PatentImageRecord& record, std::string_view details,
                              const std::vector<std::string>& synonyms, const std::vector<PromptTemplate>& templates,
                              std::string_view class_label) {
    if (templates.empty()) throw std::invalid_argument("at least one template is required");
    const std::string cls = class_label.empty() ? record.class_id : std::string(class_label);
    std::map<std::string, std::string, std::less<>> values{
        {"ObjectName", record.object_name.empty() ? cls : record.object_name},
        {"Class", cls},
        {"Details", trim(details)},
        {"Perspective", record.perspective},
        {"OriginalDescription", record.description},
        {"Synonym", ""},
    };

    RenderResult out;
    std::unordered_set<std::string> seen;
    auto emit = [&](std::string s) {
        if (seen.insert(s).second) out.texts.push_back(std::move(s));
    };

    for (const auto& t : templates) {
        validate_template(t);
        const auto names = placeholders_in(t.pattern);
        const bool uses_synonym = std::find(names.begin(), names.end(), "Synonym") != names.end();
        std::string missing;
        for (const auto& n : names) {
            if (n != "Synonym" && values[n].empty()) missing = n;
        }
        if (!missing.empty()) {
            out.skipped.emplace_back(t.template_id, "empty {" + missing + "}");
            continue;
        }
        if (!uses_synonym) {
            emit(substitute(t.pattern, values));
            continue;
        }
        std::size_t used = 0;
        for (const auto& syn : synonyms) {
            const auto s = trim(syn);
            if (s.empty()) continue;
            values["Synonym"] = s;
            emit(substitute(t.pattern, values));
            ++used;
        }
        values["Synonym"].clear();
        if (used == 0) out.skipped.emplace_back(t.template_id, "no synonyms");
    }
    return out;
}

// ---------------------------------------------------------------------------

nlohmann::ordered_json CaptionRequest::to_payload(std::string_view model) const {
    nlohmann::ordered_json text_part{{"type", "text"}, {"text", instruction}};
    nlohmann::ordered_json image_part{{"type", "image_url"}, {"image_url", {{"url", image_ref}}}};
    nlohmann::ordered_json msg{{"role", "user"}, {"content", nlohmann::ordered_json::array({text_part, image_part})}};
    return {{"model", std::string(model)}, {"messages", nlohmann::ordered_json::array({msg})}};
}

CaptionRequest build_caption_request(const PatentImageRecord& record, std::string_view image_ref,
                                     std::string_view instruction) {
    if (record.record_id.empty()) throw std::invalid_argument("record_id must not be empty");
    if (image_ref.empty()) throw std::invalid_argument("missing image reference for record " + record.record_id);
    if (instruction.empty()) throw std::invalid_argument("caption instruction must not be empty");
    return {record.record_id, record.object_name, std::string(image_ref), std::string(instruction)};
}

nlohmann::ordered_json ChatRequest::to_payload(std::string_view model) const {
    auto messages = nlohmann::ordered_json::array();
    if (!system.empty()) messages.push_back({{"role", "system"}, {"content", system}});
    messages.push_back({{"role", "user"}, {"content", user}});
    return {{"model", std::string(model)}, {"messages", messages}, {"temperature", temperature}};
}

ChatRequest build_enrichment_request(const PatentImageRecord& record, std::string_view details,
                                     std::string_view class_label, std::size_t count, std::size_t round) {
    ChatRequest req;
    req.record_id = record.record_id;
    req.object_name = record.object_name;
    req.count = count;
    req.round = round;
    req.system =
        "You write short retrieval descriptions of design patent drawings. Prefer the specific object name over the "
        "generic class name. Reply with a JSON object only: {\"synonyms\": [string], \"descriptions\": [string]}.";
    std::ostringstream u;
    u << "Object name: " << record.object_name << "\n"
      << "Locarno class: " << (class_label.empty() ? record.class_id : std::string(class_label)) << "\n"
      << "Perspective: " << record.perspective << "\n"
      << "Original description: " << record.description << "\n"
      << "Visual details: " << details << "\n"
      << "List up to 5 alternative names for the object as \"synonyms\" and write " << count
      << " distinct one-sentence descriptions as \"descriptions\".";
    if (round > 0) u << " Do not repeat earlier descriptions (request " << round + 1 << ").";
    req.user = u.str();
    return req;
}

std::string_view to_string(Provenance p) {
    switch (p) {
        case Provenance::live_llm: return "live_llm";
        case Provenance::mock: return "mock";
        case Provenance::cached: return "cached";
    }
    return "mock";
}

Provenance parse_provenance(std::string_view s) {
    if (s == "live_llm") return Provenance::live_llm;
    if (s == "mock") return Provenance::mock;
    if (s == "cached") return Provenance::cached;
    throw std::invalid_argument("unknown provenance '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::array<std::string_view, 24> kMockAliases = {
    "device",    "apparatus", "unit",       "assembly",  "article",   "implement", "accessory", "gadget",
    "instrument", "module",   "component",  "product",   "tool",      "ornament",  "housing",   "casing",
    "appliance", "equipment", "fitting",    "contraption", "utensil", "element",   "mechanism", "piece",
};

constexpr std::array<std::string_view, 20> kMockFeatures = {
    "rounded edges",        "a flat base",          "a tapered body",       "symmetric contours",
    "a ribbed surface",     "a hollow interior",    "a cylindrical stem",   "beveled corners",
    "a smooth finish",      "a rectangular frame",  "curved side panels",   "a raised rim",
    "an oval opening",      "a grid of slots",      "a textured grip",      "a domed top",
    "stepped layers",       "a circular dial",      "parallel grooves",     "a hinged lid",
};

constexpr std::array<std::string_view, 10> kMockStyles = {
    "compact", "slender", "angular", "minimalist", "sturdy", "streamlined", "ornate", "modular", "low-profile", "tall",
};

template <std::size_t N>
std::string_view pick(const std::array<std::string_view, N>& pool, CounterRng& rng) {
    return pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(N) - 1))];
}

}  // namespace

std::string MockModelClient::caption(const CaptionRequest& request) {
    ++calls_;
    CounterRng rng = CounterRng(seed_).split(request.record_id).split("caption");
    const auto f1 = pick(kMockFeatures, rng);
    auto f2 = pick(kMockFeatures, rng);
    while (f2 == f1) f2 = pick(kMockFeatures, rng);
    const std::string name = request.object_name.empty() ? "object" : request.object_name;
    return "a " + name + " design with " + std::string(f1) + " and " + std::string(f2) + ".";
}

std::string MockModelClient::complete(const ChatRequest& request) {
    ++calls_;
    CounterRng rng = CounterRng(seed_).split(request.record_id).split("chat").split(request.round);
    std::vector<std::string> synonyms;
    while (synonyms.size() < 4) {
        std::string s(pick(kMockAliases, rng));
        if (std::find(synonyms.begin(), synonyms.end(), s) == synonyms.end()) synonyms.push_back(std::move(s));
    }
    const std::string name = request.object_name.empty() ? "object" : request.object_name;
    std::vector<std::string> descriptions;
    std::set<std::string> seen;
    for (std::size_t attempt = 0; descriptions.size() < request.count && attempt < 50 * (request.count + 1); ++attempt) {
        const auto style = pick(kMockStyles, rng);
        const auto f1 = pick(kMockFeatures, rng);
        const auto f2 = pick(kMockFeatures, rng);
        if (f1 == f2) continue;
        std::string d = "A " + std::string(style) + " " + name + " with " + std::string(f1) + " and " + std::string(f2) + ".";
        if (seen.insert(d).second) descriptions.push_back(std::move(d));
    }
    nlohmann::ordered_json j{{"synonyms", synonyms}, {"descriptions", descriptions}};
    return j.dump();
}

std::unique_ptr<MockModelClient> mock_model_client(std::uint64_t seed) { return std::make_unique<MockModelClient>(seed); }

// ---------------------------------------------------------------------------

OpenAiCompatibleClient::OpenAiCompatibleClient(EndpointConfig config) : config_(std::move(config)) {
    const char* token = std::getenv(config_.auth_env.c_str());
    if (token == nullptr || *token == '\0') {
        throw MissingCredentials("missing credentials: environment variable " + config_.auth_env + " is not set");
    }
    token_ = token;
    static const std::regex url_re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(config_.base_url, m, url_re)) {
        throw std::invalid_argument("invalid base URL '" + config_.base_url + "'");
    }
    scheme_host_port_ = m[1].str();
    path_prefix_ = m[2].matched ? m[2].str() : "";
    while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
}

std::string OpenAiCompatibleClient::post_chat(const nlohmann::ordered_json& payload) {
    if (config_.min_interval.count() > 0) {
        std::lock_guard lock(pace_mutex_);
        const auto now = std::chrono::steady_clock::now();
        const auto next = last_request_ + config_.min_interval;
        if (now < next) std::this_thread::sleep_for(next - now);
        last_request_ = std::chrono::steady_clock::now();
    }

    httplib::Client cli(scheme_host_port_);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.timeout - secs);
    cli.set_connection_timeout(secs.count(), usecs.count());
    cli.set_read_timeout(secs.count(), usecs.count());
    cli.set_write_timeout(secs.count(), usecs.count());
    const httplib::Headers headers{{"Authorization", "Bearer " + token_}};

    auto res = cli.Post(path_prefix_ + "/chat/completions", headers, payload.dump(), "application/json");
    if (!res) {
        const auto err = res.error();
        if (err == httplib::Error::Read || err == httplib::Error::Write || err == httplib::Error::ConnectionTimeout) {
            throw ClientTimeout("request to " + scheme_host_port_ + " timed out (" + httplib::to_string(err) + ")");
        }
        throw ClientError("request to " + scheme_host_port_ + " failed: " + httplib::to_string(err), true);
    }
    if (res->status == 429 || res->status >= 500) {
        throw ClientError("endpoint returned HTTP " + std::to_string(res->status), true);
    }
    if (res->status != 200) {
        throw ClientError("endpoint returned HTTP " + std::to_string(res->status) + ": " + res->body, false);
    }
    try {
        const auto body = nlohmann::json::parse(res->body);
        return body.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const std::exception& e) {
        throw MalformedResponse(std::string("unexpected chat-completion body: ") + e.what(), res->body);
    }
}

std::string OpenAiCompatibleClient::caption(const CaptionRequest& request) {
    return post_chat(request.to_payload(config_.caption_model.empty() ? config_.model : config_.caption_model));
}

std::string OpenAiCompatibleClient::complete(const ChatRequest& request) {
    auto payload = request.to_payload(config_.model);
    payload["temperature"] = config_.temperature;
    return post_chat(payload);
}

LlmEnrichment parse_enrichment_response(std::string_view raw) {
    std::string_view body = raw;
    const auto first = body.find('{');
    const auto last = body.rfind('}');
    if (first == std::string_view::npos || last == std::string_view::npos || last < first) {
        throw MalformedResponse("model response contains no JSON object", std::string(raw));
    }
    body = body.substr(first, last - first + 1);
    LlmEnrichment out;
    try {
        const auto j = nlohmann::json::parse(body);
        for (const auto& s : j.at("synonyms")) out.synonyms.push_back(trim(s.get<std::string>()));
        for (const auto& s : j.at("descriptions")) out.descriptions.push_back(trim(s.get<std::string>()));
    } catch (const std::exception& e) {
        throw MalformedResponse(std::string("malformed model response: ") + e.what(), std::string(raw));
    }
    std::erase_if(out.synonyms, [](const std::string& s) { return s.empty(); });
    std::erase_if(out.descriptions, [](const std::string& s) { return s.empty(); });
    return out;
}

// ---------------------------------------------------------------------------

EnrichmentCache::EnrichmentCache(std::filesystem::path path) : path_(std::move(path)) {
    if (!std::filesystem::exists(path_)) return;
    std::ifstream in(path_);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            EnrichedText e;
            e.record_id = j.at("record_id").get<std::string>();
            e.model_name = j.at("model_name").get<std::string>();
            e.template_hash = j.value("template_hash", std::string());
            e.provenance = parse_provenance(j.value("provenance", std::string("mock")));
            e.texts = j.at("texts").get<std::vector<std::string>>();
            put(e);
        } catch (const std::exception& e) {
            throw std::runtime_error("malformed enrichment cache line " + std::to_string(line_no) + " in " +
                                     path_.string() + ": " + e.what());
        }
    }
}

std::optional<EnrichedText> EnrichmentCache::get(const std::string& record_id, const std::string& model_name,
                                                 const std::string& template_hash) const {
    std::lock_guard lock(mutex_);
    auto it = entries_.find({record_id, model_name, template_hash});
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

void EnrichmentCache::put(const EnrichedText& entry) {
    std::lock_guard lock(mutex_);
    Key key{entry.record_id, entry.model_name, entry.template_hash};
    entries_[key] = entry;
    latest_[entry.record_id] = key;
}

std::size_t EnrichmentCache::size() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
}

std::optional<EnrichedText> EnrichmentCache::latest_for(const std::string& record_id) const {
    std::lock_guard lock(mutex_);
    auto it = latest_.find(record_id);
    if (it == latest_.end()) return std::nullopt;
    return entries_.at(it->second);
}

void EnrichmentCache::save() const {
    if (path_.empty()) throw std::logic_error("enrichment cache has no path");
    save(path_);
}

void EnrichmentCache::save(const std::filesystem::path& path) const {
    std::string out;
    {
        std::lock_guard lock(mutex_);
        for (const auto& [key, e] : entries_) {
            nlohmann::ordered_json j;
            j["record_id"] = e.record_id;
            j["model_name"] = e.model_name;
            j["template_hash"] = e.template_hash;
            j["provenance"] = std::string(to_string(e.provenance));
            j["texts"] = e.texts;
            out += j.dump();
            out += '\n';
        }
    }
    write_file_atomic(path, out);
}

namespace {

template <class Fn>
auto with_retry(const RetryPolicy& policy, Fn&& fn) -> decltype(fn()) {
    const std::size_t attempts = std::max<std::size_t>(1, policy.max_attempts);
    for (std::size_t attempt = 1;; ++attempt) {
        try {
            return fn();
        } catch (const ClientTimeout&) {
            if (attempt >= attempts) throw;
        } catch (const ClientError& e) {
            if (!e.retriable() || attempt >= attempts) throw;
        }
        if (policy.backoff.count() > 0) std::this_thread::sleep_for(policy.backoff * attempt);
    }
}

std::string clip_tokens(const std::string& text, std::size_t max_tokens) {
    if (max_tokens == 0) return text;
    std::istringstream in(text);
    std::string word;
    std::string out;
    std::size_t n = 0;
    while (in >> word) {
        if (n == max_tokens) break;
        if (!out.empty()) out += ' ';
        out += word;
        ++n;
    }
    return out;
}

}  // namespace

EnrichedText enrich_record(const PatentImageRecord& record, ModelClient& client,
                           const std::vector<PromptTemplate>& templates, const EnrichOptions& options,
                           EnrichmentCache* cache) {
    if (options.count_target == 0) throw std::invalid_argument("count_target must be positive");
    const auto hash = templates_fingerprint(templates);
    const auto model = client.model_name();
    if (cache != nullptr) {
        if (auto hit = cache->get(record.record_id, model, hash)) {
            hit->provenance = Provenance::cached;
            return *hit;
        }
    }

    const auto label_it = options.class_labels.find(record.class_id);
    const std::string class_label = label_it == options.class_labels.end() ? record.class_id : label_it->second;
    const std::string image_ref = (options.image_root.empty() ? std::string("images") : options.image_root) + "/" +
                                  record.record_id + ".png";

    const auto cap_req = build_caption_request(record, image_ref, options.caption_instruction);
    const std::string details = with_retry(options.retry, [&] { return client.caption(cap_req); });

    std::vector<std::string> texts;
    std::unordered_set<std::string> seen;
    auto add = [&](const std::string& s) {
        auto clipped = clip_tokens(s, options.max_tokens);
        if (!clipped.empty() && seen.insert(clipped).second) texts.push_back(std::move(clipped));
    };

    std::vector<std::string> descriptions;
    std::vector<std::string> synonyms;
    for (std::size_t round = 0; round < std::max<std::size_t>(1, options.max_rounds); ++round) {
        const std::size_t want = round == 0 ? options.count_target : options.count_target - texts.size();
        const auto chat = build_enrichment_request(record, details, class_label, want, round);
        const std::string raw = with_retry(options.retry, [&] { return client.complete(chat); });
        auto parsed = parse_enrichment_response(raw);
        if (round == 0) {
            synonyms = parsed.synonyms;
            for (auto& s : render_templates(record, details, synonyms, templates, class_label).texts) add(s);
        }
        for (auto& d : parsed.descriptions) add(d);
        if (texts.size() >= options.count_target) break;
    }
    if (texts.size() > options.count_target) texts.resize(options.count_target);
    if (texts.empty()) throw MalformedResponse("enrichment produced no text for record " + record.record_id, "");

    EnrichedText out{record.record_id, std::move(texts), client.provenance(), model, hash};
    if (cache != nullptr) cache->put(out);
    return out;
}

std::vector<EnrichedText> enrich_corpus(const std::vector<const PatentImageRecord*>& records, ModelClient& client,
                                        const std::vector<PromptTemplate>& templates, const EnrichOptions& options,
                                        EnrichmentCache* cache, std::size_t max_in_flight, EnrichStats* stats) {
    std::vector<EnrichedText> out(records.size());
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors;
    std::mutex error_mutex;
    auto worker = [&] {
        for (;;) {
            const auto i = next.fetch_add(1);
            if (i >= records.size()) return;
            try {
                out[i] = enrich_record(*records[i], client, templates, options, cache);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                errors.push_back(std::current_exception());
                next = records.size();
                return;
            }
        }
    };
    const std::size_t n_workers = std::clamp<std::size_t>(max_in_flight, 1, std::max<std::size_t>(1, records.size()));
    if (n_workers == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    }
    if (!errors.empty()) std::rethrow_exception(errors.front());
    if (stats != nullptr) {
        for (const auto& e : out) (e.provenance == Provenance::cached ? stats->cached : stats->enriched)++;
    }
    return out;
}

// ---------------------------------------------------------------------------

EmbeddingMatrix HashingTextEmbedder::embed(const std::vector<std::string>& texts) const {
    EmbeddingMatrix out(texts.size(), dim_);
    const CounterRng root = CounterRng(seed_).split("token");
    for (std::size_t i = 0; i < texts.size(); ++i) {
        auto row = out.row(i);
        std::string token;
        std::size_t n_tokens = 0;
        auto flush = [&] {
            if (token.empty()) return;
            CounterRng rng = root.split(token);
            for (auto& v : row) v += rng.normal();
            token.clear();
            ++n_tokens;
        };
        for (char c : texts[i]) {
            if (std::isalnum(static_cast<unsigned char>(c))) {
                token.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
            } else {
                flush();
            }
        }
        flush();
        if (n_tokens == 0) {
            CounterRng rng = root.split(std::string_view("\x00", 1));
            for (auto& v : row) v += rng.normal();
        }
        const double n = l2_norm(row);
        for (auto& v : row) v /= n;
    }
    return out;
}

PirvTextEmbedder::PirvTextEmbedder(const std::filesystem::path& path) {
    const auto file = read_pirv(path);
    dim_ = file.dim;
    rows_ = EmbeddingMatrix(file.metadata.size(), dim_);
    for (std::size_t k = 0; k < file.vectors.size(); ++k) rows_.data()[k] = file.vectors[k];
}

EmbeddingMatrix PirvTextEmbedder::embed(const std::vector<std::string>& texts) const {
    if (texts.size() != rows_.rows()) {
        throw std::invalid_argument("embedding file has " + std::to_string(rows_.rows()) + " rows for " +
                                    std::to_string(texts.size()) + " texts");
    }
    return rows_;
}

EmbeddingMatrix embed_texts(const std::vector<std::string>& texts, const TextEmbedder& provider,
                            std::optional<std::size_t> expected_dim) {
    if (expected_dim && *expected_dim != provider.dim()) {
        throw std::invalid_argument("text embedding dimension " + std::to_string(provider.dim()) +
                                    " does not match configured dimension " + std::to_string(*expected_dim));
    }
    return provider.embed(texts);
}

}  // namespace pir
