#include "pir/config.hpp"

#include <set>
#include <sstream>

#include <toml.hpp>

#include "pir/fs_util.hpp"

namespace pir {

namespace {

void check_keys(const toml::table& t, const std::string& where, const std::set<std::string, std::less<>>& allowed) {
    for (const auto& [key, node] : t) {
        if (!allowed.contains(key.str())) {
            throw ConfigError("unknown key '" + std::string(key.str()) + "' in " + where);
        }
    }
}

const toml::table* section(const toml::table& root, std::string_view name) {
    const auto* node = root.get(name);
    if (node == nullptr) return nullptr;
    const auto* t = node->as_table();
    if (t == nullptr) throw ConfigError("[" + std::string(name) + "] must be a table");
    return t;
}

template <class T>
void read(const toml::table& t, std::string_view key, T& out, const std::string& where) {
    const auto* node = t.get(key);
    if (node == nullptr) return;
    const std::string name = where + "." + std::string(key);
    if constexpr (std::is_same_v<T, bool>) {
        auto v = node->value<bool>();
        if (!v) throw ConfigError(name + " must be a boolean");
        out = *v;
    } else if constexpr (std::is_same_v<T, std::string>) {
        auto v = node->value<std::string>();
        if (!v) throw ConfigError(name + " must be a string");
        out = *v;
    } else if constexpr (std::is_floating_point_v<T>) {
        auto v = node->value<double>();
        if (!v) throw ConfigError(name + " must be a number");
        out = static_cast<T>(*v);
    } else {
        auto v = node->value<std::int64_t>();
        if (!v) throw ConfigError(name + " must be an integer");
        if (*v < 0 && std::is_unsigned_v<T>) throw ConfigError(name + " must be non-negative");
        out = static_cast<T>(*v);
    }
}

void read_path(const toml::table& t, std::string_view key, std::optional<std::filesystem::path>& out,
               const std::filesystem::path& base, const std::string& where) {
    std::string s;
    if (t.get(key) == nullptr) return;
    read(t, key, s, where);
    std::filesystem::path p(s);
    out = p.is_relative() && !base.empty() ? base / p : p;
}

std::vector<std::string> read_strings(const toml::table& t, std::string_view key, const std::string& where) {
    const auto* arr = t.get_as<toml::array>(key);
    if (arr == nullptr) throw ConfigError(where + "." + std::string(key) + " must be an array of strings");
    std::vector<std::string> out;
    for (const auto& el : *arr) {
        auto v = el.value<std::string>();
        if (!v) throw ConfigError(where + "." + std::string(key) + " must be an array of strings");
        out.push_back(*v);
    }
    return out;
}

void require_exists(const std::optional<std::filesystem::path>& p, const std::string& name) {
    if (p && !std::filesystem::exists(*p)) throw ConfigError(name + " does not exist: " + p->string());
}

}  // namespace

EngineConfig parse_config(std::string_view toml_text, const std::filesystem::path& base_dir) {
    toml::table root;
    try {
        root = toml::parse(toml_text);
    } catch (const toml::parse_error& e) {
        std::ostringstream msg;
        msg << "config parse error at line " << e.source().begin.line << ": " << e.description();
        throw ConfigError(msg.str());
    }

    EngineConfig cfg;
    check_keys(root, "config",
               {"seed", "head_fraction", "paths", "augment", "loss", "train", "metrics", "enrich", "service"});
    read(root, "seed", cfg.seed, "config");
    read(root, "head_fraction", cfg.head_fraction, "config");
    if (!(cfg.head_fraction > 0.0 && cfg.head_fraction < 1.0)) throw ConfigError("head_fraction must lie in (0,1)");

    if (const auto* t = section(root, "paths")) {
        check_keys(*t, "[paths]", {"metadata", "embeddings", "cache", "index"});
        read_path(*t, "metadata", cfg.paths.metadata, base_dir, "paths");
        read_path(*t, "embeddings", cfg.paths.embeddings, base_dir, "paths");
        read_path(*t, "cache", cfg.paths.cache, base_dir, "paths");
        read_path(*t, "index", cfg.paths.index, base_dir, "paths");
        require_exists(cfg.paths.metadata, "paths.metadata");
        require_exists(cfg.paths.embeddings, "paths.embeddings");
    }

    if (const auto* t = section(root, "augment")) {
        const std::string w = "augment";
        check_keys(*t, "[augment]",
                   {"flip_prob", "crop_scale_min", "crop_scale_max", "erase_prob", "erase_area_min", "erase_area_max",
                    "gridmask_ratio", "gridmask_unit_min", "gridmask_unit_max"});
        auto& a = cfg.augment;
        read(*t, "flip_prob", a.flip_prob, w);
        read(*t, "crop_scale_min", a.crop_scale_range.first, w);
        read(*t, "crop_scale_max", a.crop_scale_range.second, w);
        read(*t, "erase_prob", a.erase_prob, w);
        read(*t, "erase_area_min", a.erase_area_range.first, w);
        read(*t, "erase_area_max", a.erase_area_range.second, w);
        read(*t, "gridmask_ratio", a.gridmask_ratio, w);
        read(*t, "gridmask_unit_min", a.gridmask_unit_range.first, w);
        read(*t, "gridmask_unit_max", a.gridmask_unit_range.second, w);
        try {
            a.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("[augment]: ") + e.what());
        }
    }

    if (const auto* t = section(root, "loss")) {
        const std::string w = "loss";
        check_keys(*t, "[loss]", {"terms", "direction", "initial_tau", "learn_tau", "learn_uncertainty"});
        auto& tr = cfg.trainer;
        if (t->get("terms") != nullptr) {
            tr.terms = LossTerms{false, false, false};
            for (const auto& term : read_strings(*t, "terms", w)) {
                if (term == "clip") tr.terms.clip = true;
                else if (term == "cls") tr.terms.cls = true;
                else if (term == "cat") tr.terms.cat = true;
                else throw ConfigError("loss.terms: unknown term '" + term + "'");
            }
            if (!tr.terms.clip && !tr.terms.cls && !tr.terms.cat) throw ConfigError("loss.terms must not be empty");
        }
        std::string dir;
        read(*t, "direction", dir, w);
        if (dir == "image") tr.clip_direction = ClipDirection::image_anchored;
        else if (dir == "symmetric") tr.clip_direction = ClipDirection::symmetric;
        else if (!dir.empty()) throw ConfigError("loss.direction must be 'image' or 'symmetric'");
        read(*t, "initial_tau", tr.initial_tau, w);
        if (!(tr.initial_tau > 0.0)) throw ConfigError("loss.initial_tau must be positive");
        read(*t, "learn_tau", tr.learn_tau, w);
        read(*t, "learn_uncertainty", tr.learn_uncertainty, w);
    }

    if (const auto* t = section(root, "train")) {
        const std::string w = "train";
        check_keys(*t, "[train]", {"out_dim", "learning_rate", "momentum", "steps", "batch_size"});
        auto& tr = cfg.trainer;
        read(*t, "out_dim", tr.out_dim, w);
        read(*t, "learning_rate", tr.learning_rate, w);
        read(*t, "momentum", tr.momentum, w);
        read(*t, "steps", tr.steps, w);
        read(*t, "batch_size", tr.batch_size, w);
        if (tr.out_dim == 0) throw ConfigError("train.out_dim must be positive");
        if (tr.batch_size < 2) throw ConfigError("train.batch_size must be at least 2");
        if (tr.learning_rate < 0.0) throw ConfigError("train.learning_rate must be non-negative");
        if (tr.momentum < 0.0 || tr.momentum >= 1.0) throw ConfigError("train.momentum must lie in [0,1)");
    }

    if (const auto* t = section(root, "metrics")) {
        const std::string w = "metrics";
        check_keys(*t, "[metrics]", {"ks", "depth", "relevance", "exclude_same_patent", "workers"});
        auto& m = cfg.metrics;
        if (const auto* arr = t->get_as<toml::array>("ks")) {
            m.ks.clear();
            for (const auto& el : *arr) {
                auto v = el.value<std::int64_t>();
                if (!v || *v <= 0) throw ConfigError("metrics.ks must be positive integers");
                m.ks.push_back(static_cast<std::size_t>(*v));
            }
        } else if (t->get("ks") != nullptr) {
            throw ConfigError("metrics.ks must be an array");
        }
        read(*t, "depth", m.depth, w);
        if (m.depth == 0) throw ConfigError("metrics.depth must be positive");
        std::string rel;
        read(*t, "relevance", rel, w);
        if (!rel.empty()) {
            try {
                m.relevance = parse_relevance_mode(rel);
            } catch (const std::invalid_argument& e) {
                throw ConfigError(std::string("metrics.relevance: ") + e.what());
            }
        }
        read(*t, "exclude_same_patent", m.exclude_same_patent, w);
        read(*t, "workers", m.workers, w);
    }

    if (const auto* t = section(root, "enrich")) {
        const std::string w = "enrich";
        check_keys(*t, "[enrich]",
                   {"client", "base_url", "model", "caption_model", "auth_env", "temperature", "timeout_ms",
                    "min_interval_ms", "count_target", "max_tokens", "max_in_flight"});
        auto& e = cfg.enrich;
        read(*t, "client", e.client, w);
        if (e.client != "mock" && e.client != "live") throw ConfigError("enrich.client must be 'mock' or 'live'");
        read(*t, "base_url", e.endpoint.base_url, w);
        read(*t, "model", e.endpoint.model, w);
        read(*t, "caption_model", e.endpoint.caption_model, w);
        read(*t, "auth_env", e.endpoint.auth_env, w);
        read(*t, "temperature", e.endpoint.temperature, w);
        std::int64_t ms = e.endpoint.timeout.count();
        read(*t, "timeout_ms", ms, w);
        e.endpoint.timeout = std::chrono::milliseconds(ms);
        ms = e.endpoint.min_interval.count();
        read(*t, "min_interval_ms", ms, w);
        e.endpoint.min_interval = std::chrono::milliseconds(ms);
        read(*t, "count_target", e.count_target, w);
        read(*t, "max_tokens", e.max_tokens, w);
        read(*t, "max_in_flight", e.max_in_flight, w);
        if (e.count_target == 0) throw ConfigError("enrich.count_target must be positive");
        if (e.max_in_flight == 0) throw ConfigError("enrich.max_in_flight must be positive");
    }

    if (const auto* t = section(root, "service")) {
        const std::string w = "service";
        check_keys(*t, "[service]",
                   {"host", "port", "variants", "metadata", "cache", "image_root", "session_log", "assignment_seed",
                    "tasks", "cors_origin", "token_env", "k_cap"});
        auto& s = cfg.service;
        read(*t, "host", s.host, w);
        read(*t, "port", s.port, w);
        if (s.port < 0 || s.port > 65535) throw ConfigError("service.port must lie in [0,65535]");
        if (const auto* v = section(*t, "variants")) {
            for (const auto& [label, node] : *v) {
                std::optional<std::filesystem::path> p;
                read_path(*v, label.str(), p, base_dir, "service.variants");
                require_exists(p, "service.variants." + std::string(label.str()));
                s.variant_indexes[std::string(label.str())] = *p;
            }
        }
        read_path(*t, "metadata", s.metadata, base_dir, w);
        require_exists(s.metadata, "service.metadata");
        read_path(*t, "cache", s.cache, base_dir, w);
        read_path(*t, "image_root", s.image_root, base_dir, w);
        read_path(*t, "session_log", s.session_log, base_dir, w);
        if (t->get("assignment_seed") != nullptr) {
            std::uint64_t seed = 0;
            read(*t, "assignment_seed", seed, w);
            s.assignment_seed = seed;
        }
        if (t->get("tasks") != nullptr) s.tasks = read_strings(*t, "tasks", w);
        read(*t, "cors_origin", s.cors_origin, w);
        read(*t, "token_env", s.token_env, w);
        read(*t, "k_cap", s.k_cap, w);
        if (s.k_cap == 0) throw ConfigError("service.k_cap must be positive");
    }
    return cfg;
}

EngineConfig load_config(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const std::exception& e) {
        throw ConfigError("cannot read config " + path.string() + ": " + e.what());
    }
    return parse_config(text, path.parent_path());
}

}  // namespace pir
