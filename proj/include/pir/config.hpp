#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pir/augment.hpp"
#include "pir/enrichment.hpp"
#include "pir/metrics.hpp"
#include "pir/trainer.hpp"

namespace pir {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct PathsConfig {
    std::optional<std::filesystem::path> metadata;
    std::optional<std::filesystem::path> embeddings;
    std::optional<std::filesystem::path> cache;
    std::optional<std::filesystem::path> index;
};

struct EnrichConfig {
    std::string client = "mock";  // mock | live
    EndpointConfig endpoint{};
    std::size_t count_target = 20;
    std::size_t max_tokens = 77;
    std::size_t max_in_flight = 4;
};

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    // Variant label ("A", "B") -> index file. Labels never leave the server.
    std::map<std::string, std::filesystem::path> variant_indexes;
    std::optional<std::filesystem::path> metadata;
    std::optional<std::filesystem::path> cache;
    std::optional<std::filesystem::path> image_root;
    std::optional<std::filesystem::path> session_log;
    std::optional<std::uint64_t> assignment_seed;  // unset: the engine seed
    std::vector<std::string> tasks;
    std::string cors_origin = "*";
    std::string token_env;  // empty: no bearer token required
    std::size_t k_cap = 100;
};

struct EngineConfig {
    std::uint64_t seed = 0;
    double head_fraction = kDefaultHeadFraction;
    PathsConfig paths;
    AugmentPolicy augment;
    TrainerConfig trainer;
    MetricConfig metrics;
    EnrichConfig enrich;
    ServiceConfig service;
};

// Parses TOML text. Unknown keys are errors. Relative paths resolve against
// `base_dir`. Input paths (metadata, embeddings, variant indexes) must exist.
EngineConfig parse_config(std::string_view toml_text, const std::filesystem::path& base_dir = {});
EngineConfig load_config(const std::filesystem::path& path);

}  // namespace pir
