#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "pir/embedding.hpp"
#include "pir/model.hpp"

namespace pir {

// ---------------------------------------------------------------------------
// Templates

struct PromptTemplate {
    std::string template_id;
    std::string pattern;

    friend bool operator==(const PromptTemplate&, const PromptTemplate&) = default;
};

inline constexpr std::string_view kPlaceholders[] = {"ObjectName", "Class",       "Details",
                                                     "Synonym",    "Perspective", "OriginalDescription"};

// Names between braces, in order of appearance. Throws on an unterminated brace.
std::vector<std::string> placeholders_in(std::string_view pattern);

// Throws std::invalid_argument for an empty id or a placeholder outside kPlaceholders.
void validate_template(const PromptTemplate& t);

std::vector<PromptTemplate> default_templates();

// Hex digest of the ordered (id, pattern) list; part of the cache key.
std::string templates_fingerprint(const std::vector<PromptTemplate>& templates);

struct RenderResult {
    std::vector<std::string> texts;
    // (template_id, reason) for every template that could not be resolved.
    std::vector<std::pair<std::string, std::string>> skipped;
};

// One string per template, or per (template, synonym) when the template uses
// {Synonym}. {ObjectName} takes the record's object name and falls back to
// the class label only when the object name is empty. Output is
// de-duplicated in first-seen order. Templates needing an empty value
// ({Synonym} with no synonyms, {Details} with no caption, ...) are skipped.
RenderResult render_templates(const PatentImageRecord& record, std::string_view details,
                              const std::vector<std::string>& synonyms, const std::vector<PromptTemplate>& templates,
                              std::string_view class_label = {});

// ---------------------------------------------------------------------------
// Model client boundary

inline constexpr std::string_view kDefaultCaptionInstruction =
    "Describe the distinct visual elements present in the design, such as shapes, contours, texture, and the "
    "arrangement of various components.";

struct CaptionRequest {
    std::string record_id;
    std::string object_name;
    std::string image_ref;
    std::string instruction;

    // Chat-completion style payload: one user message carrying the
    // instruction text and the image reference.
    nlohmann::ordered_json to_payload(std::string_view model) const;
};

CaptionRequest build_caption_request(const PatentImageRecord& record, std::string_view image_ref,
                                     std::string_view instruction = kDefaultCaptionInstruction);

struct ChatRequest {
    std::string record_id;
    std::string object_name;
    std::size_t count = 0;  // free-form descriptions requested
    std::size_t round = 0;  // 0 for the first request, then top-up rounds
    std::string system;
    std::string user;
    double temperature = 0.7;

    nlohmann::ordered_json to_payload(std::string_view model) const;
};

ChatRequest build_enrichment_request(const PatentImageRecord& record, std::string_view details,
                                     std::string_view class_label, std::size_t count, std::size_t round = 0);

enum class Provenance { live_llm, mock, cached };
std::string_view to_string(Provenance p);
Provenance parse_provenance(std::string_view s);

class ClientTimeout : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ClientError : public std::runtime_error {
public:
    ClientError(const std::string& what, bool retriable) : std::runtime_error(what), retriable_(retriable) {}
    bool retriable() const { return retriable_; }

private:
    bool retriable_;
};

class MalformedResponse : public std::runtime_error {
public:
    MalformedResponse(const std::string& what, std::string raw) : std::runtime_error(what), raw_(std::move(raw)) {}
    const std::string& raw() const { return raw_; }

private:
    std::string raw_;
};

class MissingCredentials : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Implementations must be safe to call from several threads at once.
class ModelClient {
public:
    virtual ~ModelClient() = default;
    virtual std::string model_name() const = 0;
    virtual Provenance provenance() const = 0;
    // Returns the caption text.
    virtual std::string caption(const CaptionRequest& request) = 0;
    // Returns the raw assistant message content.
    virtual std::string complete(const ChatRequest& request) = 0;
};

// Deterministic offline client: outputs are a function of (seed, record_id,
// request) only. Counts calls for tests.
class MockModelClient : public ModelClient {
public:
    explicit MockModelClient(std::uint64_t seed) : seed_(seed) {}

    std::string model_name() const override { return "mock-" + std::to_string(seed_); }
    Provenance provenance() const override { return Provenance::mock; }
    std::string caption(const CaptionRequest& request) override;
    std::string complete(const ChatRequest& request) override;

    std::size_t calls() const { return calls_.load(); }

private:
    std::uint64_t seed_;
    std::atomic<std::size_t> calls_{0};
};

std::unique_ptr<MockModelClient> mock_model_client(std::uint64_t seed);

struct EndpointConfig {
    std::string base_url = "https://api.openai.com/v1";
    std::string auth_env = "OPENAI_API_KEY";
    std::string model = "gpt-4";
    std::string caption_model;  // empty: same as model
    double temperature = 0.7;
    std::chrono::milliseconds timeout{60000};
    // Minimum spacing between requests to the endpoint.
    std::chrono::milliseconds min_interval{0};
};

// Client for an OpenAI-compatible /chat/completions endpoint. The bearer
// token is read from the environment at construction and never written out.
class OpenAiCompatibleClient : public ModelClient {
public:
    explicit OpenAiCompatibleClient(EndpointConfig config);

    std::string model_name() const override { return config_.model; }
    Provenance provenance() const override { return Provenance::live_llm; }
    std::string caption(const CaptionRequest& request) override;
    std::string complete(const ChatRequest& request) override;

private:
    std::string post_chat(const nlohmann::ordered_json& payload);

    EndpointConfig config_;
    std::string token_;
    std::string scheme_host_port_;
    std::string path_prefix_;
    std::mutex pace_mutex_;
    std::chrono::steady_clock::time_point last_request_{};
};

struct LlmEnrichment {
    std::vector<std::string> synonyms;
    std::vector<std::string> descriptions;
};

// Parses {"synonyms": [...], "descriptions": [...]}, tolerating a ``` fence.
// Throws MalformedResponse carrying the raw text.
LlmEnrichment parse_enrichment_response(std::string_view raw);

// ---------------------------------------------------------------------------
// Enrichment and cache

struct EnrichedText {
    std::string record_id;
    std::vector<std::string> texts;
    Provenance provenance = Provenance::mock;
    std::string model_name;
    std::string template_hash;
};

// Entries keyed by (record_id, model_name, template fingerprint). Safe for
// concurrent use; save() writes a temporary file and renames it.
class EnrichmentCache {
public:
    EnrichmentCache() = default;
    explicit EnrichmentCache(std::filesystem::path path);

    std::optional<EnrichedText> get(const std::string& record_id, const std::string& model_name,
                                    const std::string& template_hash) const;
    void put(const EnrichedText& entry);
    std::size_t size() const;

    // Most recent texts for a record under any key.
    std::optional<EnrichedText> latest_for(const std::string& record_id) const;

    void save() const;
    void save(const std::filesystem::path& path) const;
    const std::filesystem::path& path() const { return path_; }

private:
    using Key = std::tuple<std::string, std::string, std::string>;
    std::filesystem::path path_;
    mutable std::mutex mutex_;
    std::map<Key, EnrichedText> entries_;
    std::map<std::string, Key> latest_;
};

struct RetryPolicy {
    std::size_t max_attempts = 3;
    std::chrono::milliseconds backoff{200};
};

struct EnrichOptions {
    std::size_t count_target = 20;
    std::size_t max_tokens = 77;  // whitespace tokens per text
    std::size_t max_rounds = 3;   // LLM requests per record
    RetryPolicy retry{};
    std::string caption_instruction = std::string(kDefaultCaptionInstruction);
    std::string image_root;
    std::map<std::string, std::string> class_labels;  // class_id -> name
};

// Caption, then LLM synonyms/descriptions, merged behind the rendered
// templates, de-duplicated and cut to count_target. Served from and stored
// into `cache` when given.
EnrichedText enrich_record(const PatentImageRecord& record, ModelClient& client,
                           const std::vector<PromptTemplate>& templates, const EnrichOptions& options,
                           EnrichmentCache* cache = nullptr);

struct EnrichStats {
    std::size_t enriched = 0;
    std::size_t cached = 0;
};

// Enriches records with up to max_in_flight concurrent client calls. Output
// order follows input order.
std::vector<EnrichedText> enrich_corpus(const std::vector<const PatentImageRecord*>& records, ModelClient& client,
                                        const std::vector<PromptTemplate>& templates, const EnrichOptions& options,
                                        EnrichmentCache* cache, std::size_t max_in_flight, EnrichStats* stats = nullptr);

// ---------------------------------------------------------------------------
// Text embedding providers

class TextEmbedder {
public:
    virtual ~TextEmbedder() = default;
    virtual std::size_t dim() const = 0;
    virtual EmbeddingMatrix embed(const std::vector<std::string>& texts) const = 0;
};

// Bag-of-words random projection: every lower-cased alphanumeric token maps
// to a seeded Gaussian vector; a text is the normalized sum of its tokens.
class HashingTextEmbedder : public TextEmbedder {
public:
    HashingTextEmbedder(std::size_t dim, std::uint64_t seed = 0) : dim_(dim), seed_(seed) {}
    std::size_t dim() const override { return dim_; }
    EmbeddingMatrix embed(const std::vector<std::string>& texts) const override;

private:
    std::size_t dim_;
    std::uint64_t seed_;
};

// Precomputed embeddings from a PIRV file, one row per text in order.
class PirvTextEmbedder : public TextEmbedder {
public:
    explicit PirvTextEmbedder(const std::filesystem::path& path);
    std::size_t dim() const override { return dim_; }
    EmbeddingMatrix embed(const std::vector<std::string>& texts) const override;

private:
    std::size_t dim_ = 0;
    EmbeddingMatrix rows_;
};

// Throws when expected_dim is set and differs from the provider's dimension.
EmbeddingMatrix embed_texts(const std::vector<std::string>& texts, const TextEmbedder& provider,
                            std::optional<std::size_t> expected_dim = std::nullopt);

}  // namespace pir
