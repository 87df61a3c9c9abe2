#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>

#include <json.hpp>

#include "pir/config.hpp"
#include "pir/enrichment.hpp"
#include "pir/index.hpp"
#include "pir/model.hpp"
#include "pir/study.hpp"

namespace httplib {
class Server;
}

namespace pir {

struct HttpReply {
    int status = 200;
    nlohmann::ordered_json body;
};

// Everything the service reads. Indexes are keyed by variant label ("A",
// "B"); the label-to-system mapping exists only here.
struct ServiceData {
    Corpus corpus;
    std::map<std::string, TemporalIndex> indexes;
    std::shared_ptr<const EnrichmentCache> enrichment;
    std::unique_ptr<StudyLog> study;
    std::size_t k_cap = 100;
    std::string cors_origin = "*";
    std::optional<std::string> bearer_token;
    std::optional<std::filesystem::path> image_root;
};

// Loads metadata, variant indexes, enrichment cache and the session log
// named by the config. Throws ConfigError for unusable settings.
ServiceData load_service_data(const ServiceConfig& config, std::uint64_t seed, double head_fraction);

class Service {
public:
    explicit Service(ServiceData data);
    ~Service();

    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    // Endpoint logic, callable without a socket.
    HttpReply get_record(const std::string& record_id) const;
    HttpReply post_query(const std::string& body) const;
    HttpReply post_session(const std::string& body);
    HttpReply get_study_report() const;
    HttpReply get_study_tasks(const std::string& participant_id) const;
    HttpReply get_embeddings(std::size_t limit) const;

    // Binds the HTTP server; port 0 picks a free port. Returns the bound
    // port or throws std::runtime_error when the address is unavailable.
    int bind(const std::string& host, int port);
    // Serves until stop(); call after bind().
    void listen();
    void stop();
    void wait_until_ready() const;

    const ServiceData& data() const { return data_; }

private:
    void install_routes();
    const TemporalIndex& index_for(const nlohmann::json& request) const;

    ServiceData data_;
    std::string default_variant_;
    std::unique_ptr<httplib::Server> server_;
};

}  // namespace pir
