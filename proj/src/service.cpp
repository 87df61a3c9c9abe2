#include "pir/service.hpp"

#include <cmath>
#include <cstdlib>

#include <httplib.h>

namespace pir {

namespace {

class HttpError : public std::runtime_error {
public:
    HttpError(int status, const std::string& what) : std::runtime_error(what), status_(status) {}
    int status() const { return status_; }

private:
    int status_;
};

HttpReply error_reply(int status, const std::string& message) {
    return {status, {{"error", message}, {"status", status}}};
}

template <class Fn>
HttpReply guarded(Fn&& fn) {
    try {
        return fn();
    } catch (const HttpError& e) {
        return error_reply(e.status(), e.what());
    } catch (const SessionRejected& e) {
        return error_reply(e.status(), e.what());
    } catch (const nlohmann::json::exception& e) {
        return error_reply(400, std::string("invalid JSON: ") + e.what());
    } catch (const std::exception& e) {
        return error_reply(500, e.what());
    }
}

nlohmann::json parse_body(const std::string& body) {
    auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded()) throw HttpError(400, "request body is not valid JSON");
    if (!j.is_object()) throw HttpError(400, "request body must be a JSON object");
    return j;
}

std::string image_url(const std::string& record_id) { return "/images/" + record_id + ".png"; }

}  // namespace

ServiceData load_service_data(const ServiceConfig& config, std::uint64_t seed, double head_fraction) {
    ServiceData data;
    if (config.variant_indexes.empty()) throw ConfigError("service needs at least one index under [service.variants]");
    for (const auto& [label, path] : config.variant_indexes) {
        if (label != "A" && label != "B") throw ConfigError("variant labels must be A or B, got '" + label + "'");
        data.indexes.emplace(label, load_index(path));
    }
    if (config.metadata) data.corpus = ingest_metadata(*config.metadata, head_fraction);
    if (config.cache) data.enrichment = std::make_shared<const EnrichmentCache>(*config.cache);
    if (!config.tasks.empty()) {
        if (!data.indexes.contains("A") || !data.indexes.contains("B")) {
            throw ConfigError("a study task list needs both variant A and variant B indexes");
        }
        data.study = std::make_unique<StudyLog>(VariantAssignment(config.assignment_seed.value_or(seed), config.tasks),
                                                config.session_log);
    }
    data.k_cap = config.k_cap;
    data.cors_origin = config.cors_origin;
    if (!config.token_env.empty()) {
        const char* token = std::getenv(config.token_env.c_str());
        if (token == nullptr || *token == '\0') {
            throw ConfigError("missing credentials: environment variable " + config.token_env + " is not set");
        }
        data.bearer_token = token;
    }
    data.image_root = config.image_root;
    return data;
}

Service::Service(ServiceData data) : data_(std::move(data)), server_(std::make_unique<httplib::Server>()) {
    if (data_.indexes.empty()) throw std::invalid_argument("service needs at least one index");
    default_variant_ = data_.indexes.contains("A") ? "A" : data_.indexes.begin()->first;
    const auto dim = data_.indexes.begin()->second.dim();
    for (const auto& [label, index] : data_.indexes) {
        if (index.dim() != dim) throw std::invalid_argument("variant indexes must share one dimension");
    }
    // No SO_REUSEPORT: a second server on the same port must fail to bind.
    server_->set_socket_options([](socket_t sock) {
        int yes = 1;
        ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const char*>(&yes), sizeof(yes));
    });
    install_routes();
}

Service::~Service() { stop(); }

HttpReply Service::get_record(const std::string& record_id) const {
    return guarded([&]() -> HttpReply {
        nlohmann::ordered_json j;
        if (const auto* r = data_.corpus.find(record_id)) {
            j = {{"record_id", r->record_id},
                 {"patent_id", r->patent_id},
                 {"class_id", r->class_id},
                 {"category", std::string(to_string(data_.corpus.distribution.category_of(r->class_id)))},
                 {"grant_date", r->grant_date.iso()},
                 {"object_name", r->object_name},
                 {"perspective", r->perspective},
                 {"description", r->description},
                 {"split", std::string(to_string(r->split))}};
        } else {
            const auto& index = data_.indexes.at(default_variant_);
            const auto row = index.find(record_id);
            if (!row) throw HttpError(404, "unknown record '" + record_id + "'");
            const auto& m = index.item(*row);
            j = {{"record_id", m.record_id},
                 {"patent_id", m.patent_id},
                 {"class_id", m.class_id},
                 {"category", std::string(to_string(data_.corpus.distribution.category_of(m.class_id)))},
                 {"grant_date", m.grant_date.iso()}};
        }
        j["image_url"] = image_url(record_id);
        j["texts"] = nlohmann::ordered_json::array();
        if (data_.enrichment) {
            if (auto e = data_.enrichment->latest_for(record_id)) {
                j["texts"] = e->texts;
                j["text_provenance"] = std::string(to_string(e->provenance));
            }
        }
        return {200, j};
    });
}

const TemporalIndex& Service::index_for(const nlohmann::json& req) const {
    std::string label = default_variant_;
    if (req.contains("variant")) {
        if (!req["variant"].is_string()) throw HttpError(400, "variant must be a string");
        label = req["variant"].get<std::string>();
    } else if (req.contains("participant_id") || req.contains("task_id")) {
        if (!data_.study) throw HttpError(400, "no study is configured");
        if (!req.contains("participant_id") || !req.contains("task_id") || !req["participant_id"].is_string() ||
            !req["task_id"].is_string()) {
            throw HttpError(400, "participant_id and task_id must be given together as strings");
        }
        label = std::string(to_string(data_.study->assignment().variant_for(req["participant_id"].get<std::string>(),
                                                                           req["task_id"].get<std::string>())));
    }
    const auto it = data_.indexes.find(label);
    if (it == data_.indexes.end()) throw HttpError(400, "unknown variant");
    return it->second;
}

HttpReply Service::post_query(const std::string& body) const {
    return guarded([&]() -> HttpReply {
        const auto req = parse_body(body);
        const bool has_record = req.contains("record_id");
        const bool has_vector = req.contains("vector");
        if (has_record == has_vector) throw HttpError(400, "give exactly one of record_id or vector");

        std::size_t k = 10;
        if (req.contains("k")) {
            if (!req["k"].is_number_integer() || req["k"].get<std::int64_t>() < 1) {
                throw HttpError(400, "k must be a positive integer");
            }
            const auto requested = req["k"].get<std::int64_t>();
            if (static_cast<std::uint64_t>(requested) > data_.k_cap) {
                throw HttpError(400, "k exceeds the server cap of " + std::to_string(data_.k_cap));
            }
            k = static_cast<std::size_t>(requested);
        }
        std::optional<Date> cutoff;
        if (req.contains("cutoff_date") && !req["cutoff_date"].is_null()) {
            if (!req["cutoff_date"].is_string()) throw HttpError(400, "cutoff_date must be a YYYY-MM-DD string");
            try {
                cutoff = Date::parse(req["cutoff_date"].get<std::string>());
            } catch (const std::invalid_argument& e) {
                throw HttpError(400, e.what());
            }
        }
        bool exclude_same_patent = false;
        if (req.contains("exclude_same_patent")) {
            if (!req["exclude_same_patent"].is_boolean()) throw HttpError(400, "exclude_same_patent must be a boolean");
            exclude_same_patent = req["exclude_same_patent"].get<bool>();
        }

        const TemporalIndex& index = index_for(req);
        std::vector<double> vec;
        QuerySpec spec;
        std::optional<std::string> query_class;
        if (has_record) {
            if (!req["record_id"].is_string()) throw HttpError(400, "record_id must be a string");
            const auto id = req["record_id"].get<std::string>();
            const auto row = index.find(id);
            if (!row) {
                throw HttpError(404, data_.corpus.find(id) ? "record '" + id + "' has no indexed embedding"
                                                           : "unknown record '" + id + "'");
            }
            const auto& item = index.item(*row);
            const auto v = index.vector(*row);
            vec.assign(v.begin(), v.end());
            spec.cutoff = cutoff.value_or(item.grant_date);
            spec.query_record_id = id;
            if (exclude_same_patent) spec.exclude_patent = item.patent_id;
            query_class = item.class_id;
        } else {
            if (!req["vector"].is_array()) throw HttpError(400, "vector must be an array of numbers");
            if (!cutoff) throw HttpError(400, "cutoff_date is required for vector queries");
            for (const auto& x : req["vector"]) {
                if (!x.is_number()) throw HttpError(400, "vector must be an array of numbers");
                vec.push_back(x.get<double>());
            }
            if (vec.size() != index.dim()) {
                throw HttpError(422, "vector has dimension " + std::to_string(vec.size()) + ", index expects " +
                                         std::to_string(index.dim()));
            }
            double norm = 0.0;
            for (double x : vec) {
                if (!std::isfinite(x)) throw HttpError(422, "vector contains a non-finite value");
                norm += x * x;
            }
            if (norm == 0.0) throw HttpError(422, "vector must be non-zero");
            spec.cutoff = *cutoff;
            if (req.contains("class_id")) {
                if (!req["class_id"].is_string()) throw HttpError(400, "class_id must be a string");
                query_class = req["class_id"].get<std::string>();
            }
        }
        spec.vector = vec;
        spec.k = k;
        const auto result = query_topk(index, spec);

        nlohmann::ordered_json hits = nlohmann::ordered_json::array();
        for (std::size_t i = 0; i < result.hits.size(); ++i) {
            const auto& h = result.hits[i];
            nlohmann::ordered_json hj{{"rank", i + 1},
                                      {"record_id", h.record_id},
                                      {"score", h.score},
                                      {"class_id", h.class_id},
                                      {"patent_id", h.patent_id},
                                      {"grant_date", h.grant_date.iso()}};
            hj["class_match"] = query_class ? nlohmann::ordered_json(h.class_id == *query_class) : nullptr;
            hj["image_url"] = image_url(h.record_id);
            hits.push_back(std::move(hj));
        }
        nlohmann::ordered_json out;
        out["query_record_id"] = result.query_record_id ? nlohmann::ordered_json(*result.query_record_id) : nullptr;
        out["query_class_id"] = query_class ? nlohmann::ordered_json(*query_class) : nullptr;
        out["cutoff_date"] = result.cutoff_date.iso();
        out["k"] = k;
        out["hits"] = std::move(hits);
        return {200, out};
    });
}

HttpReply Service::post_session(const std::string& body) {
    return guarded([&]() -> HttpReply {
        if (!data_.study) throw HttpError(404, "no study is configured");
        const auto req = parse_body(body);
        const auto stored = data_.study->submit(SessionSubmission::from_json(req));
        auto j = session_to_json(stored);
        j.erase("variant");
        return {201, j};
    });
}

HttpReply Service::get_study_report() const {
    return guarded([&]() -> HttpReply {
        if (!data_.study) throw HttpError(404, "no study is configured");
        return {200, study_report_to_json(build_study_report(data_.study->sessions()))};
    });
}

HttpReply Service::get_study_tasks(const std::string& participant_id) const {
    return guarded([&]() -> HttpReply {
        if (!data_.study) throw HttpError(404, "no study is configured");
        if (participant_id.empty()) throw HttpError(400, "participant_id is required");
        const auto done = data_.study->completed_tasks(participant_id);
        nlohmann::ordered_json tasks = nlohmann::ordered_json::array();
        for (const auto& t : data_.study->assignment().task_order(participant_id)) {
            tasks.push_back({{"task_id", t}, {"completed", std::find(done.begin(), done.end(), t) != done.end()}});
        }
        return {200,
                {{"participant_id", participant_id},
                 {"total", tasks.size()},
                 {"completed", done.size()},
                 {"tasks", tasks}}};
    });
}

HttpReply Service::get_embeddings(std::size_t limit) const {
    return guarded([&]() -> HttpReply {
        const auto& index = data_.indexes.at(default_variant_);
        const std::size_t n = limit == 0 ? index.size() : std::min(limit, index.size());
        nlohmann::ordered_json items = nlohmann::ordered_json::array();
        for (std::size_t row = 0; row < n; ++row) {
            const auto& m = index.item(row);
            const auto v = index.vector(row);
            items.push_back({{"record_id", m.record_id},
                             {"class_id", m.class_id},
                             {"category", std::string(to_string(data_.corpus.distribution.category_of(m.class_id)))},
                             {"grant_date", m.grant_date.iso()},
                             {"vector", std::vector<float>(v.begin(), v.end())}});
        }
        return {200, {{"dim", index.dim()}, {"count", n}, {"items", items}}};
    });
}

void Service::install_routes() {
    auto& srv = *server_;
    srv.set_default_headers({{"Access-Control-Allow-Origin", data_.cors_origin},
                             {"Access-Control-Allow-Headers", "Content-Type, Authorization"},
                             {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    auto send = [](httplib::Response& res, const HttpReply& reply) {
        res.status = reply.status;
        res.set_content(reply.body.dump(), "application/json");
    };

    srv.set_pre_routing_handler([this, send](const httplib::Request& req, httplib::Response& res) {
        if (!data_.bearer_token || req.method == "OPTIONS" || req.path == "/health") {
            return httplib::Server::HandlerResponse::Unhandled;
        }
        if (req.get_header_value("Authorization") != "Bearer " + *data_.bearer_token) {
            send(res, error_reply(401, "missing or invalid bearer token"));
            return httplib::Server::HandlerResponse::Handled;
        }
        return httplib::Server::HandlerResponse::Unhandled;
    });

    srv.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    srv.Get("/health", [send](const httplib::Request&, httplib::Response& res) {
        send(res, {200, {{"status", "ok"}}});
    });
    srv.Get(R"(/records/([^/]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
        send(res, get_record(req.matches[1].str()));
    });
    srv.Post("/query", [this, send](const httplib::Request& req, httplib::Response& res) {
        send(res, post_query(req.body));
    });
    srv.Post("/sessions", [this, send](const httplib::Request& req, httplib::Response& res) {
        send(res, post_session(req.body));
    });
    srv.Get("/study/report", [this, send](const httplib::Request&, httplib::Response& res) {
        send(res, get_study_report());
    });
    srv.Get("/study/tasks", [this, send](const httplib::Request& req, httplib::Response& res) {
        send(res, get_study_tasks(req.get_param_value("participant_id")));
    });
    srv.Get("/embeddings", [this, send](const httplib::Request& req, httplib::Response& res) {
        std::size_t limit = 0;
        if (req.has_param("limit")) {
            try {
                limit = std::stoul(req.get_param_value("limit"));
            } catch (const std::exception&) {
                send(res, error_reply(400, "limit must be a non-negative integer"));
                return;
            }
        }
        send(res, get_embeddings(limit));
    });
    if (data_.image_root) srv.set_mount_point("/images", data_.image_root->string());
    srv.set_error_handler([send](const httplib::Request&, httplib::Response& res) {
        if (res.body.empty()) send(res, error_reply(res.status, httplib::status_message(res.status)));
    });
}

int Service::bind(const std::string& host, int port) {
    int bound = port;
    if (port == 0) {
        bound = server_->bind_to_any_port(host);
        if (bound <= 0) throw std::runtime_error("cannot bind to " + host);
    } else if (!server_->bind_to_port(host, port)) {
        throw std::runtime_error("cannot bind to " + host + ":" + std::to_string(port) + " (address in use?)");
    }
    return bound;
}

void Service::listen() { server_->listen_after_bind(); }

void Service::stop() {
    if (server_) server_->stop();
}

void Service::wait_until_ready() const { server_->wait_until_ready(); }

}  // namespace pir
