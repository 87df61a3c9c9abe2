// pir: command-line entry point for the patent image retrieval engine.

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "pir/config.hpp"
#include "pir/enrichment.hpp"
#include "pir/experiments.hpp"
#include "pir/fs_util.hpp"
#include "pir/index.hpp"
#include "pir/metrics.hpp"
#include "pir/model.hpp"
#include "pir/service.hpp"
#include "pir/trainer.hpp"

namespace {

using nlohmann::ordered_json;
using namespace pir;

// Exit code 2: bad flags, bad config, unreadable or malformed inputs.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Globals {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    bool json = false;
};

EngineConfig effective_config(const Globals& g) {
    EngineConfig cfg = g.config_path.empty() ? EngineConfig{} : load_config(g.config_path);
    if (g.seed) cfg.seed = *g.seed;
    return cfg;
}

void require_file(const std::filesystem::path& p, const std::string& what) {
    if (p.empty()) throw UsageError(what + " is required");
    if (!std::filesystem::exists(p)) throw UsageError(what + " not found: " + p.string());
}

Corpus load_corpus(const std::filesystem::path& p, double head_fraction) {
    require_file(p, "corpus");
    try {
        return ingest_metadata(p, head_fraction);
    } catch (const IngestError& e) {
        throw UsageError(p.string() + ": " + e.what());
    }
}

TemporalIndex load_index_file(const std::filesystem::path& p) {
    require_file(p, "index");
    try {
        return load_index(p);
    } catch (const PirvError& e) {
        throw UsageError(p.string() + ": " + e.what());
    }
}

std::vector<ItemMetadata> metadata_of(const std::vector<const PatentImageRecord*>& records) {
    std::vector<ItemMetadata> out;
    for (const auto* r : records) out.push_back({r->record_id, r->grant_date, r->class_id, r->patent_id});
    return out;
}

std::vector<const PatentImageRecord*> all_records(const Corpus& c) {
    std::vector<const PatentImageRecord*> out;
    for (const auto& r : c.records) out.push_back(&r);
    return out;
}

void emit(const Globals& g, const ordered_json& j, const std::string& text) {
    if (g.json) {
        std::cout << j.dump(2) << '\n';
    } else {
        std::cout << text;
    }
}

// ---------------------------------------------------------------------------

struct IngestArgs {
    std::filesystem::path metadata;
    std::filesystem::path out;
    std::optional<double> head_fraction;
};

int run_ingest(const Globals& g, const IngestArgs& a) {
    const auto cfg = effective_config(g);
    const auto metadata = a.metadata.empty() && cfg.paths.metadata ? *cfg.paths.metadata : a.metadata;
    const double fraction = a.head_fraction.value_or(cfg.head_fraction);
    const auto corpus = load_corpus(metadata, fraction);
    if (!a.out.empty()) write_metadata(corpus, a.out);

    const auto& d = corpus.distribution;
    ordered_json splits;
    for (auto s : {Split::train, Split::validation, Split::query}) splits[std::string(to_string(s))] = corpus.of_split(s).size();
    ordered_json histogram = ordered_json::array();
    std::vector<std::pair<std::string, std::int64_t>> sorted(d.counts.begin(), d.counts.end());
    std::stable_sort(sorted.begin(), sorted.end(), [](const auto& x, const auto& y) { return x.second > y.second; });
    for (const auto& [cls, n] : sorted) {
        histogram.push_back({{"class_id", cls}, {"count", n}, {"category", std::string(to_string(d.category_of(cls)))}});
    }
    ordered_json j{{"records", corpus.records.size()},
                   {"classes", d.counts.size()},
                   {"head_classes", d.head_classes.size()},
                   {"tail_classes", d.tail_classes.size()},
                   {"head_fraction", d.head_fraction},
                   {"splits", splits},
                   {"histogram", histogram}};
    std::ostringstream text;
    text << corpus.records.size() << " records, " << d.counts.size() << " classes\n"
         << "head/tail cut at head fraction " << d.head_fraction << ": " << d.head_classes.size() << " head, "
         << d.tail_classes.size() << " tail\n";
    const std::size_t shown = std::min<std::size_t>(sorted.size(), 10);
    for (std::size_t i = 0; i < shown; ++i) {
        text << "  " << sorted[i].first << "  " << sorted[i].second << "  " << to_string(d.category_of(sorted[i].first))
             << '\n';
    }
    if (sorted.size() > shown) text << "  ... " << sorted.size() - shown << " more classes\n";
    emit(g, j, text.str());
    return 0;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    std::filesystem::path out;
    std::size_t classes = 5;
    std::size_t records_per_class = 80;
    std::size_t head_classes = 0;
    std::size_t tail_records = 0;
    double query_fraction = 0.25;
};

int run_synth(const Globals& g, const SynthArgs& a) {
    const auto cfg = effective_config(g);
    if (a.out.empty()) throw UsageError("--out is required");
    if (a.classes == 0 || a.records_per_class == 0) throw UsageError("--classes and --records-per-class must be positive");
    SyntheticCorpusSpec spec;
    spec.seed = cfg.seed;
    spec.n_classes = a.classes;
    spec.query_fraction = a.query_fraction;
    for (std::size_t c = 0; c < a.classes; ++c) {
        const bool skewed = a.head_classes > 0 && c >= a.head_classes;
        spec.records_per_class.push_back(skewed ? std::max<std::size_t>(1, a.tail_records) : a.records_per_class);
    }
    auto corpus = generate_synthetic_corpus(spec);
    corpus = make_corpus(std::move(corpus.records), cfg.head_fraction);
    write_metadata(corpus, a.out);
    ordered_json j{{"records", corpus.records.size()}, {"classes", corpus.distribution.counts.size()}, {"out", a.out.string()}};
    emit(g, j, "wrote " + std::to_string(corpus.records.size()) + " synthetic records to " + a.out.string() + "\n");
    return 0;
}

// ---------------------------------------------------------------------------

struct EnrichArgs {
    std::filesystem::path corpus;
    std::optional<std::string> client;
    std::filesystem::path out;
    std::optional<std::size_t> count;
    std::optional<std::size_t> max_in_flight;
    std::filesystem::path templates;
    std::filesystem::path class_labels;
};

std::vector<PromptTemplate> load_templates(const std::filesystem::path& p) {
    if (p.empty()) return default_templates();
    require_file(p, "templates");
    std::vector<PromptTemplate> out;
    try {
        const auto j = nlohmann::json::parse(read_file(p));
        for (const auto& t : j) {
            PromptTemplate pt{t.at("id").get<std::string>(), t.at("pattern").get<std::string>()};
            validate_template(pt);
            out.push_back(std::move(pt));
        }
    } catch (const std::exception& e) {
        throw UsageError("templates " + p.string() + ": " + e.what());
    }
    if (out.empty()) throw UsageError("templates " + p.string() + " is empty");
    return out;
}

int run_enrich(const Globals& g, const EnrichArgs& a) {
    const auto cfg = effective_config(g);
    const auto corpus_path = a.corpus.empty() && cfg.paths.metadata ? *cfg.paths.metadata : a.corpus;
    const auto out = a.out.empty() && cfg.paths.cache ? *cfg.paths.cache : a.out;
    if (out.empty()) throw UsageError("--out is required");
    const auto corpus = load_corpus(corpus_path, cfg.head_fraction);
    const auto templates = load_templates(a.templates);
    const std::string client_kind = a.client.value_or(cfg.enrich.client);

    std::unique_ptr<ModelClient> client;
    if (client_kind == "mock") {
        client = mock_model_client(cfg.seed);
    } else if (client_kind == "live") {
        try {
            client = std::make_unique<OpenAiCompatibleClient>(cfg.enrich.endpoint);
        } catch (const MissingCredentials& e) {
            throw UsageError(e.what());
        }
    } else {
        throw UsageError("--client must be mock or live");
    }

    EnrichOptions opts;
    opts.count_target = a.count.value_or(cfg.enrich.count_target);
    opts.max_tokens = cfg.enrich.max_tokens;
    if (!a.class_labels.empty()) {
        require_file(a.class_labels, "class labels");
        try {
            opts.class_labels = nlohmann::json::parse(read_file(a.class_labels)).get<std::map<std::string, std::string>>();
        } catch (const std::exception& e) {
            throw UsageError("class labels " + a.class_labels.string() + ": " + e.what());
        }
    }

    EnrichmentCache cache(out);
    EnrichStats stats;
    const auto results = enrich_corpus(all_records(corpus), *client, templates, opts, &cache,
                                       a.max_in_flight.value_or(cfg.enrich.max_in_flight), &stats);
    cache.save();

    std::size_t texts = 0;
    for (const auto& r : results) texts += r.texts.size();
    ordered_json j{{"records", results.size()},
                   {"enriched", stats.enriched},
                   {"cached", stats.cached},
                   {"texts", texts},
                   {"model", client->model_name()},
                   {"provenance", std::string(to_string(client->provenance()))},
                   {"template_hash", templates_fingerprint(templates)},
                   {"out", out.string()}};
    emit(g, j,
         "enriched " + std::to_string(stats.enriched) + " records, " + std::to_string(stats.cached) +
             " served from cache, " + std::to_string(texts) + " texts -> " + out.string() + "\n");
    return 0;
}

// ---------------------------------------------------------------------------

struct EmbedArgs {
    std::filesystem::path corpus;
    std::filesystem::path cache;
    std::filesystem::path out;
    std::size_t dim = 64;
};

int run_embed(const Globals& g, const EmbedArgs& a) {
    const auto cfg = effective_config(g);
    const auto corpus_path = a.corpus.empty() && cfg.paths.metadata ? *cfg.paths.metadata : a.corpus;
    const auto cache_path = a.cache.empty() && cfg.paths.cache ? *cfg.paths.cache : a.cache;
    const auto out = a.out.empty() && cfg.paths.embeddings ? *cfg.paths.embeddings : a.out;
    if (out.empty()) throw UsageError("--out is required");
    if (a.dim == 0) throw UsageError("--dim must be positive");
    const auto corpus = load_corpus(corpus_path, cfg.head_fraction);
    std::optional<EnrichmentCache> cache;
    if (!cache_path.empty()) {
        require_file(cache_path, "cache");
        cache.emplace(cache_path);
    }

    // Each record's vector is the mean of its normalized text embeddings:
    // enriched texts when cached, otherwise the original description.
    const HashingTextEmbedder embedder(a.dim, cfg.seed);
    EmbeddingMatrix vectors(corpus.records.size(), a.dim);
    std::size_t from_cache = 0;
    for (std::size_t i = 0; i < corpus.records.size(); ++i) {
        const auto& r = corpus.records[i];
        std::vector<std::string> texts;
        if (cache) {
            if (auto e = cache->latest_for(r.record_id)) texts = e->texts;
        }
        if (texts.empty()) {
            texts.push_back(r.description.empty() ? r.object_name : r.description);
        } else {
            ++from_cache;
        }
        const auto emb = embed_texts(texts, embedder, a.dim);
        auto row = vectors.row(i);
        for (std::size_t t = 0; t < emb.rows(); ++t) {
            for (std::size_t k = 0; k < a.dim; ++k) row[k] += emb(t, k) / static_cast<double>(emb.rows());
        }
    }
    const auto index = TemporalIndex::build(vectors, metadata_of(all_records(corpus)));
    dump_index(index, out);
    ordered_json j{{"records", corpus.records.size()}, {"from_cache", from_cache}, {"dim", a.dim}, {"out", out.string()}};
    emit(g, j,
         "embedded " + std::to_string(corpus.records.size()) + " records (" + std::to_string(from_cache) +
             " with enriched texts), dim " + std::to_string(a.dim) + " -> " + out.string() + "\n");
    return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::filesystem::path corpus;
    std::filesystem::path weights;
    std::filesystem::path trace;
    std::optional<std::size_t> steps;
    std::optional<double> learning_rate;
};

ordered_json weights_json(const TrainResult& r) {
    ordered_json w = ordered_json::array();
    for (std::size_t o = 0; o < r.projector.out_dim(); ++o) {
        const auto row = r.projector.weight.row(o);
        w.push_back(std::vector<double>(row.begin(), row.end()));
    }
    return {{"in_dim", r.projector.in_dim()},
            {"out_dim", r.projector.out_dim()},
            {"tau", r.params.tau()},
            {"s_clip", r.params.s_clip},
            {"s_cls", r.params.s_cls},
            {"s_cat", r.params.s_cat},
            {"weight", w}};
}

int run_train_demo(const Globals& g, const TrainArgs& a) {
    const auto cfg = effective_config(g);
    if (a.weights.empty() || a.trace.empty()) throw UsageError("--out WEIGHTS,TRACE is required");
    const Corpus corpus = a.corpus.empty() ? generate_synthetic_corpus(demo_corpus_spec(cfg.seed))
                                           : load_corpus(a.corpus, cfg.head_fraction);
    SyntheticRunSpec spec = demo_run_spec(cfg.seed);
    if (!g.config_path.empty()) {
        spec.trainer = cfg.trainer;
        spec.metrics = cfg.metrics;
    }
    spec.trainer.seed = cfg.seed;
    if (a.steps) spec.trainer.steps = *a.steps;
    if (a.learning_rate) spec.trainer.learning_rate = *a.learning_rate;
    spec.features.seed = cfg.seed;
    spec.features.text_dim = spec.trainer.out_dim;

    const auto result = run_synthetic_training(corpus, spec);
    write_file_atomic(a.weights, weights_json(result.training).dump(2) + "\n");
    std::ostringstream csv;
    write_trace_csv(result.training.trace, csv);
    write_file_atomic(a.trace, csv.str());

    auto opt = [](const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); };
    ordered_json j{{"steps", spec.trainer.steps},
                   {"initial_loss", result.initial_loss},
                   {"final_loss", result.final_loss},
                   {"map", opt(result.trained.all.map)},
                   {"random_baseline_map", opt(result.random_baseline.all.map)},
                   {"depth", spec.metrics.depth},
                   {"weights", a.weights.string()},
                   {"trace", a.trace.string()}};
    char buf[256];
    std::snprintf(buf, sizeof buf, "combined loss %.4f -> %.4f over %zu steps\nmAP@%zu %.4f (random embeddings %.4f)\n",
                  result.initial_loss, result.final_loss, spec.trainer.steps, spec.metrics.depth,
                  result.trained.all.map.value_or(0.0), result.random_baseline.all.map.value_or(0.0));
    emit(g, j, buf);
    return 0;
}

// ---------------------------------------------------------------------------

struct BuildIndexArgs {
    std::filesystem::path vectors;
    std::filesystem::path corpus;
    std::filesystem::path out;
};

int run_build_index(const Globals& g, const BuildIndexArgs& a) {
    const auto cfg = effective_config(g);
    const auto vectors_path = a.vectors.empty() && cfg.paths.embeddings ? *cfg.paths.embeddings : a.vectors;
    const auto out = a.out.empty() && cfg.paths.index ? *cfg.paths.index : a.out;
    if (out.empty()) throw UsageError("--out is required");
    require_file(vectors_path, "vectors");

    TemporalIndex index;
    if (vectors_path.extension() == ".jsonl") {
        const auto corpus_path = a.corpus.empty() && cfg.paths.metadata ? *cfg.paths.metadata : a.corpus;
        const auto corpus = load_corpus(corpus_path, cfg.head_fraction);
        std::ifstream in(vectors_path);
        std::string line;
        std::vector<std::vector<double>> rows;
        std::vector<ItemMetadata> meta;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            try {
                const auto j = nlohmann::json::parse(line);
                const auto id = j.at("record_id").get<std::string>();
                const auto* r = corpus.find(id);
                if (r == nullptr) throw std::runtime_error("record '" + id + "' is not in the corpus");
                rows.push_back(j.at("vector").get<std::vector<double>>());
                meta.push_back({r->record_id, r->grant_date, r->class_id, r->patent_id});
            } catch (const std::exception& e) {
                throw UsageError(vectors_path.string() + " line " + std::to_string(line_no) + ": " + e.what());
            }
        }
        if (rows.empty()) throw UsageError(vectors_path.string() + " has no vectors");
        const auto dim = rows.front().size();
        std::vector<double> flat;
        for (const auto& r : rows) {
            if (r.size() != dim) throw UsageError("vectors in " + vectors_path.string() + " differ in dimension");
            flat.insert(flat.end(), r.begin(), r.end());
        }
        index = TemporalIndex::build(EmbeddingMatrix(rows.size(), dim, std::move(flat)), std::move(meta));
    } else {
        index = load_index_file(vectors_path);
    }
    dump_index(index, out);
    ordered_json j{{"items", index.size()}, {"dim", index.dim()}, {"out", out.string()}};
    emit(g, j, "indexed " + std::to_string(index.size()) + " items, dim " + std::to_string(index.dim()) + " -> " +
                   out.string() + "\n");
    return 0;
}

// ---------------------------------------------------------------------------

struct QueryArgs {
    std::filesystem::path index;
    std::string record_id;
    std::string cutoff;
    std::size_t k = 10;
    bool exclude_same_patent = false;
};

int run_query(const Globals& g, const QueryArgs& a) {
    const auto cfg = effective_config(g);
    const auto index = load_index_file(a.index.empty() && cfg.paths.index ? *cfg.paths.index : a.index);
    if (a.record_id.empty()) throw UsageError("--record-id is required");
    if (a.k == 0) throw UsageError("--k must be positive");
    const auto row = index.find(a.record_id);
    if (!row) throw UsageError("record '" + a.record_id + "' is not in the index");
    const auto& item = index.item(*row);
    const auto v = index.vector(*row);
    const std::vector<double> vec(v.begin(), v.end());
    QuerySpec spec;
    spec.vector = vec;
    try {
        spec.cutoff = a.cutoff.empty() ? item.grant_date : Date::parse(a.cutoff);
    } catch (const std::invalid_argument& e) {
        throw UsageError(std::string("--cutoff: ") + e.what());
    }
    spec.k = a.k;
    spec.query_record_id = a.record_id;
    if (a.exclude_same_patent) spec.exclude_patent = item.patent_id;
    const auto result = query_topk(index, spec);

    ordered_json hits = ordered_json::array();
    std::ostringstream text;
    text << "query " << a.record_id << " (class " << item.class_id << ") before " << spec.cutoff.iso() << "\n";
    for (std::size_t i = 0; i < result.hits.size(); ++i) {
        const auto& h = result.hits[i];
        const bool match = h.class_id == item.class_id;
        hits.push_back({{"rank", i + 1},
                        {"record_id", h.record_id},
                        {"score", h.score},
                        {"class_id", h.class_id},
                        {"grant_date", h.grant_date.iso()},
                        {"class_match", match}});
        char buf[160];
        std::snprintf(buf, sizeof buf, "%3zu  %-12s  %.6f  %-8s  %s  %s\n", i + 1, h.record_id.c_str(), h.score,
                      h.class_id.c_str(), h.grant_date.iso().c_str(), match ? "match" : "-");
        text << buf;
    }
    ordered_json j{{"query_record_id", a.record_id}, {"cutoff_date", spec.cutoff.iso()}, {"k", a.k}, {"hits", hits}};
    emit(g, j, text.str());
    return 0;
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
    std::filesystem::path index;
    std::filesystem::path corpus;
    std::filesystem::path query_vectors;
    std::filesystem::path out;
    std::filesystem::path per_class;
    std::optional<std::size_t> depth;
    std::vector<std::size_t> ks;
    std::optional<std::string> relevance;
    bool exclude_same_patent = false;
    std::optional<std::size_t> workers;
};

int run_evaluate(const Globals& g, const EvaluateArgs& a) {
    const auto cfg = effective_config(g);
    const auto index = load_index_file(a.index.empty() && cfg.paths.index ? *cfg.paths.index : a.index);
    const auto corpus =
        load_corpus(a.corpus.empty() && cfg.paths.metadata ? *cfg.paths.metadata : a.corpus, cfg.head_fraction);

    MetricConfig mc = cfg.metrics;
    if (a.depth) mc.depth = *a.depth;
    if (!a.ks.empty()) mc.ks = a.ks;
    if (a.relevance) {
        try {
            mc.relevance = parse_relevance_mode(*a.relevance);
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
    }
    if (a.exclude_same_patent) mc.exclude_same_patent = true;
    if (a.workers) mc.workers = *a.workers;
    if (mc.depth == 0) throw UsageError("--depth must be positive");
    for (auto k : mc.ks) {
        if (k == 0) throw UsageError("--k values must be positive");
    }

    auto queries = corpus.of_split(Split::query);
    if (queries.empty()) queries = all_records(corpus);

    EmbeddingMatrix qv;
    if (!a.query_vectors.empty()) {
        const auto qi = load_index_file(a.query_vectors);
        qv = EmbeddingMatrix(queries.size(), qi.dim());
        for (std::size_t i = 0; i < queries.size(); ++i) {
            const auto row = qi.find(queries[i]->record_id);
            if (!row) throw UsageError("query record '" + queries[i]->record_id + "' has no query vector");
            const auto v = qi.vector(*row);
            std::copy(v.begin(), v.end(), qv.row(i).begin());
        }
    } else {
        qv = EmbeddingMatrix(queries.size(), index.dim());
        for (std::size_t i = 0; i < queries.size(); ++i) {
            const auto row = index.find(queries[i]->record_id);
            if (!row) {
                throw UsageError("query record '" + queries[i]->record_id +
                                 "' is not in the index; pass --query-vectors");
            }
            const auto v = index.vector(*row);
            std::copy(v.begin(), v.end(), qv.row(i).begin());
        }
    }
    if (qv.dim() != index.dim()) throw UsageError("query vectors and index differ in dimension");

    const auto ev = evaluate(index, queries, qv, corpus.distribution, mc);
    const auto report = report_to_json(ev.report);
    if (!a.out.empty()) write_file_atomic(a.out, report.dump(2) + "\n");
    if (!a.per_class.empty()) {
        std::ostringstream csv;
        write_per_class_csv(ev.report, csv);
        write_file_atomic(a.per_class, csv.str());
    }

    std::ostringstream text;
    text << "queries " << ev.report.total_queries << " (zero relevant " << ev.report.zero_relevant_queries
         << ", unseen class " << ev.report.unseen_class_queries << "), depth " << mc.depth << ", relevance "
         << to_string(mc.relevance) << "\n";
    for (auto b : kBuckets) {
        const auto& br = ev.report.bucket(b);
        char buf[64];
        text << "  " << to_string(b) << ": queries " << br.queries << ", mAP ";
        std::snprintf(buf, sizeof buf, br.map ? "%.4f" : "n/a", br.map.value_or(0.0));
        text << buf;
        for (const auto& [k, v] : br.recall_at) {
            std::snprintf(buf, sizeof buf, v ? "%.4f" : "n/a", v.value_or(0.0));
            text << ", R@" << k << " " << buf;
        }
        for (const auto& [k, v] : br.mrr_at) {
            std::snprintf(buf, sizeof buf, v ? "%.4f" : "n/a", v.value_or(0.0));
            text << ", MRR@" << k << " " << buf;
        }
        text << '\n';
    }
    emit(g, report, text.str());
    return 0;
}

// ---------------------------------------------------------------------------

struct ServeArgs {
    std::optional<int> port;
    std::optional<std::string> host;
};

Service* g_service = nullptr;

void on_signal(int) {
    if (g_service != nullptr) g_service->stop();
}

int run_serve(const Globals& g, const ServeArgs& a) {
    if (g.config_path.empty()) throw UsageError("serve needs --config");
    const auto cfg = effective_config(g);
    ServiceData data;
    try {
        data = load_service_data(cfg.service, cfg.seed, cfg.head_fraction);
    } catch (const PirvError& e) {
        throw UsageError(e.what());
    } catch (const IngestError& e) {
        throw UsageError(e.what());
    }
    Service service(std::move(data));
    const std::string host = a.host.value_or(cfg.service.host);
    int port = 0;
    try {
        port = service.bind(host, a.port.value_or(cfg.service.port));
    } catch (const std::runtime_error& e) {
        throw UsageError(e.what());
    }
    ordered_json j{{"host", host}, {"port", port}};
    emit(g, j, "listening on http://" + host + ":" + std::to_string(port) + "\n");
    std::cout.flush();
    g_service = &service;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    service.listen();
    g_service = nullptr;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pir: patent image retrieval engine"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    std::uint64_t seed = 0;
    app.add_option("--config", g.config_path, "TOML config file; flags override it");
    auto* seed_opt = app.add_option("--seed", seed, "Seed for every random choice");
    app.add_flag("--json", g.json, "Machine-readable output");

    IngestArgs ingest;
    auto* c_ingest = app.add_subcommand("ingest", "Validate metadata and report the class histogram");
    c_ingest->add_option("--metadata", ingest.metadata, "Metadata JSONL");
    c_ingest->add_option("--out", ingest.out, "Normalized corpus JSONL");
    c_ingest->add_option("--head-fraction", ingest.head_fraction, "Fraction of classes counted as head");

    SynthArgs synth;
    auto* c_synth = app.add_subcommand("synth", "Write a seeded synthetic corpus");
    c_synth->add_option("--out", synth.out, "Corpus JSONL")->required();
    c_synth->add_option("--classes", synth.classes, "Number of classes");
    c_synth->add_option("--records-per-class", synth.records_per_class, "Records per (head) class");
    c_synth->add_option("--head-classes", synth.head_classes, "Classes that get --records-per-class; the rest get --tail-records");
    c_synth->add_option("--tail-records", synth.tail_records, "Records per tail class");
    c_synth->add_option("--query-fraction", synth.query_fraction, "Share of records in the query split");

    EnrichArgs enrich;
    auto* c_enrich = app.add_subcommand("enrich", "Caption and enrich records into a text cache");
    c_enrich->add_option("--corpus", enrich.corpus, "Corpus JSONL");
    c_enrich->add_option("--client", enrich.client, "mock or live")->check(CLI::IsMember({"mock", "live"}));
    c_enrich->add_option("--out", enrich.out, "Cache JSONL (existing entries are reused)");
    c_enrich->add_option("--count", enrich.count, "Texts per record");
    c_enrich->add_option("--max-in-flight", enrich.max_in_flight, "Concurrent client requests");
    c_enrich->add_option("--templates", enrich.templates, "JSON list of {id, pattern}");
    c_enrich->add_option("--class-labels", enrich.class_labels, "JSON map class_id -> label");

    EmbedArgs embed;
    auto* c_embed = app.add_subcommand("embed", "Embed enriched texts into per-record vectors (PIRV)");
    c_embed->add_option("--corpus", embed.corpus, "Corpus JSONL");
    c_embed->add_option("--cache", embed.cache, "Enrichment cache");
    c_embed->add_option("--out", embed.out, "Output PIRV");
    c_embed->add_option("--dim", embed.dim, "Embedding dimension");

    TrainArgs train;
    std::vector<std::string> train_out;
    auto* c_train = app.add_subcommand("train-demo", "Train the linear projector on synthetic features");
    c_train->add_option("--corpus", train.corpus, "Corpus JSONL (default: built-in 5-class corpus)");
    c_train->add_option("--out", train_out, "WEIGHTS,TRACE")->delimiter(',')->expected(2)->required();
    c_train->add_option("--steps", train.steps, "Gradient steps");
    c_train->add_option("--lr", train.learning_rate, "Learning rate");

    BuildIndexArgs build;
    auto* c_build = app.add_subcommand("build-index", "Build a PIRV index from vectors (PIRV or JSONL)");
    c_build->add_option("--vectors", build.vectors, "PIRV file or JSONL of {record_id, vector}");
    c_build->add_option("--corpus", build.corpus, "Corpus JSONL (for JSONL vectors)");
    c_build->add_option("--out", build.out, "Output PIRV");

    QueryArgs query;
    auto* c_query = app.add_subcommand("query", "Top-k prior art for an indexed record");
    c_query->add_option("--index", query.index, "PIRV index");
    c_query->add_option("--record-id", query.record_id, "Query record")->required();
    c_query->add_option("--cutoff", query.cutoff, "YYYY-MM-DD; default the record's grant date");
    c_query->add_option("--k", query.k, "Hits to return");
    c_query->add_flag("--exclude-same-patent", query.exclude_same_patent, "Skip figures of the query's patent");

    EvaluateArgs eval;
    auto* c_eval = app.add_subcommand("evaluate", "mAP / R@K / MRR@K with head/tail buckets");
    c_eval->add_option("--index", eval.index, "PIRV index");
    c_eval->add_option("--corpus", eval.corpus, "Corpus JSONL; its query split is evaluated (all records if empty)");
    c_eval->add_option("--query-vectors", eval.query_vectors, "PIRV with query vectors (default: the index rows)");
    c_eval->add_option("--out", eval.out, "Report JSON");
    c_eval->add_option("--per-class", eval.per_class, "Per-class AP CSV");
    c_eval->add_option("--depth", eval.depth, "mAP depth");
    c_eval->add_option("--k", eval.ks, "Cutoffs for R@K and MRR@K")->delimiter(',');
    c_eval->add_option("--relevance", eval.relevance, "same_class or same_patent");
    c_eval->add_flag("--exclude-same-patent", eval.exclude_same_patent, "Skip figures of the query's patent");
    c_eval->add_option("--workers", eval.workers, "Query threads (0: all cores)");

    ServeArgs serve;
    auto* c_serve = app.add_subcommand("serve", "Run the HTTP service");
    c_serve->add_option("--port", serve.port, "Port (0 picks a free one)");
    c_serve->add_option("--host", serve.host, "Bind address");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    if (*seed_opt) g.seed = seed;

    try {
        if (c_ingest->parsed()) return run_ingest(g, ingest);
        if (c_synth->parsed()) return run_synth(g, synth);
        if (c_enrich->parsed()) return run_enrich(g, enrich);
        if (c_embed->parsed()) return run_embed(g, embed);
        if (c_train->parsed()) {
            train.weights = train_out.at(0);
            train.trace = train_out.at(1);
            return run_train_demo(g, train);
        }
        if (c_build->parsed()) return run_build_index(g, build);
        if (c_query->parsed()) return run_query(g, query);
        if (c_eval->parsed()) return run_evaluate(g, eval);
        if (c_serve->parsed()) return run_serve(g, serve);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
