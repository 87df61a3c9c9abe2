#include <doctest.h>

#include <httplib.h>

#include <atomic>
#include <cstdlib>
#include <thread>

#include "pir/enrichment.hpp"
#include "support.hpp"

using namespace pir;
using namespace pir::testing;

namespace {

PatentImageRecord blender() {
    PatentImageRecord r;
    r.record_id = "USD0900001-fig1";
    r.patent_id = "USD0900001";
    r.class_id = "31-00";
    r.grant_date = Date::parse("2020-06-02");
    r.object_name = "blender";
    r.perspective = "front view";
    r.description = "FIG. 1 is a front view of a blender";
    return r;
}

// Fails `failures` times with the given exception before delegating to a mock.
class FlakyClient : public ModelClient {
public:
    FlakyClient(int failures, bool retriable) : failures_(failures), retriable_(retriable) {}
    std::string model_name() const override { return "flaky"; }
    Provenance provenance() const override { return Provenance::mock; }
    std::string caption(const CaptionRequest& r) override {
        ++calls;
        if (failures_-- > 0) throw ClientError("boom", retriable_);
        return inner_.caption(r);
    }
    std::string complete(const ChatRequest& r) override { return inner_.complete(r); }

    std::atomic<int> calls{0};

private:
    std::atomic<int> failures_;
    bool retriable_;
    MockModelClient inner_{1};
};

class CannedClient : public ModelClient {
public:
    explicit CannedClient(std::string reply) : reply_(std::move(reply)) {}
    std::string model_name() const override { return "canned"; }
    Provenance provenance() const override { return Provenance::mock; }
    std::string caption(const CaptionRequest&) override { return "a plain box"; }
    std::string complete(const ChatRequest&) override { return reply_; }

private:
    std::string reply_;
};

EnrichOptions fast_options() {
    EnrichOptions o;
    o.retry.backoff = std::chrono::milliseconds(0);
    return o;
}

// Replays a recorded chat-completion transcript: image requests get the
// caption reply, text-only requests the enrichment reply.
struct TranscriptServer {
    httplib::Server server;
    std::thread thread;
    int port = 0;
    std::vector<nlohmann::json> requests;
    std::vector<std::string> auth;
    std::mutex mutex;
    std::atomic<int> fail_next{0};
    int fail_status = 503;

    TranscriptServer() {
        const auto caption = read_file(data_dir() / "llm_transcript" / "caption_response.json");
        const auto enrich = read_file(data_dir() / "llm_transcript" / "enrichment_response.json");
        server.Post("/v1/chat/completions", [=, this](const httplib::Request& req, httplib::Response& res) {
            {
                std::lock_guard lock(mutex);
                requests.push_back(nlohmann::json::parse(req.body));
                auth.push_back(req.get_header_value("Authorization"));
            }
            if (fail_next > 0) {
                --fail_next;
                res.status = fail_status;
                res.set_content("{\"error\":\"busy\"}", "application/json");
                return;
            }
            const bool is_caption = req.body.find("image_url") != std::string::npos;
            res.set_content(is_caption ? caption : enrich, "application/json");
        });
        server.Post("/bad/chat/completions", [](const httplib::Request&, httplib::Response& res) {
            res.set_content("{\"choices\": []}", "application/json");
        });
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~TranscriptServer() {
        server.stop();
        thread.join();
    }

    EndpointConfig endpoint(const std::string& prefix = "/v1") const {
        EndpointConfig e;
        e.base_url = "http://127.0.0.1:" + std::to_string(port) + prefix;
        e.auth_env = "PIR_TEST_LLM_KEY";
        e.timeout = std::chrono::milliseconds(5000);
        return e;
    }
};

}  // namespace

TEST_SUITE("enrichment") {

TEST_CASE("template validation and rendering") {
    CHECK(placeholders_in("{A} and {B}") == std::vector<std::string>{"A", "B"});
    CHECK_THROWS_AS(placeholders_in("{A"), std::invalid_argument);
    CHECK_THROWS_AS(validate_template({"x", "{Nope}"}), std::invalid_argument);
    CHECK_THROWS_AS(validate_template({"", "plain"}), std::invalid_argument);
    for (const auto& t : default_templates()) CHECK_NOTHROW(validate_template(t));

    auto r = blender();
    const auto out = render_templates(r, " ridged sides ", {"mixer", " ", "mixer"}, default_templates(), "food machines");
    CHECK(out.texts == std::vector<std::string>{"This is a photo of blender.",
                                                "This is a photo of blender, classified as food machines.",
                                                "This image features ridged sides",
                                                "blender can also be referred to as mixer."});
    CHECK(out.skipped.empty());

    r.object_name.clear();
    const auto fallback = render_templates(r, "", {}, default_templates());
    CHECK(fallback.texts.front() == "This is a photo of 31-00.");
    CHECK(fallback.skipped.size() == 2);
}

TEST_CASE("template fingerprint tracks content") {
    const auto a = templates_fingerprint(default_templates());
    CHECK(a.size() == 16);
    auto t = default_templates();
    t[0].pattern += " ";
    CHECK(templates_fingerprint(t) != a);
    CHECK(templates_fingerprint(default_templates()) == a);
}

TEST_CASE("response parsing") {
    const auto p = parse_enrichment_response("```json\n{\"synonyms\":[\"a\"],\"descriptions\":[\"b\",\"c\"]}\n```");
    CHECK(p.synonyms == std::vector<std::string>{"a"});
    CHECK(p.descriptions.size() == 2);
    CHECK_THROWS_AS(parse_enrichment_response("sorry, I cannot"), MalformedResponse);
    try {
        parse_enrichment_response("{\"synonyms\": 3}");
        FAIL("expected MalformedResponse");
    } catch (const MalformedResponse& e) {
        CHECK(e.raw() == "{\"synonyms\": 3}");
    }
}

TEST_CASE("mock enrichment is deterministic and reaches the target") {
    const auto r = blender();
    MockModelClient a(3), b(3);
    auto opts = fast_options();
    opts.count_target = 12;
    const auto ea = enrich_record(r, a, default_templates(), opts);
    const auto eb = enrich_record(r, b, default_templates(), opts);
    CHECK(ea.texts == eb.texts);
    CHECK(ea.texts.size() == 12);
    CHECK(ea.provenance == Provenance::mock);
    CHECK(ea.texts[0] == "This is a photo of blender.");
    std::set<std::string> unique(ea.texts.begin(), ea.texts.end());
    CHECK(unique.size() == ea.texts.size());
    MockModelClient c(4);
    CHECK(enrich_record(r, c, default_templates(), opts).texts != ea.texts);
}

TEST_CASE("token clipping") {
    CannedClient client(R"({"synonyms":[],"descriptions":["one two three four five six"]})");
    auto opts = fast_options();
    opts.max_tokens = 3;
    opts.max_rounds = 1;
    const auto e = enrich_record(blender(), client, {{"plain", "{OriginalDescription}"}}, opts);
    CHECK(e.texts == std::vector<std::string>{"FIG. 1 is", "one two three"});
}

TEST_CASE("cache serves repeats and survives a reload") {
    const auto dir = scratch_dir("cache");
    const auto r = blender();
    auto opts = fast_options();
    MockModelClient client(1);
    {
        EnrichmentCache cache(dir / "cache.jsonl");
        const auto first = enrich_record(r, client, default_templates(), opts, &cache);
        const auto calls = client.calls();
        const auto again = enrich_record(r, client, default_templates(), opts, &cache);
        CHECK(client.calls() == calls);
        CHECK(again.provenance == Provenance::cached);
        CHECK(again.texts == first.texts);
        cache.save();
    }
    EnrichmentCache reloaded(dir / "cache.jsonl");
    CHECK(reloaded.size() == 1);
    const auto calls = client.calls();
    enrich_record(r, client, default_templates(), opts, &reloaded);
    CHECK(client.calls() == calls);
    // A different template set is a different key.
    enrich_record(r, client, {{"only", "{ObjectName}"}}, opts, &reloaded);
    CHECK(client.calls() > calls);
    CHECK(reloaded.size() == 2);
    CHECK(reloaded.latest_for(r.record_id)->template_hash == templates_fingerprint({{"only", "{ObjectName}"}}));

    write_file_atomic(dir / "bad.jsonl", "{\"record_id\": 1}\n");
    CHECK_THROWS_AS(EnrichmentCache(dir / "bad.jsonl"), std::runtime_error);
}

TEST_CASE("retry policy") {
    auto opts = fast_options();
    SUBCASE("retriable errors are retried up to max_attempts") {
        FlakyClient c(2, true);
        CHECK_NOTHROW(enrich_record(blender(), c, default_templates(), opts));
        CHECK(c.calls == 3);
        FlakyClient d(3, true);
        CHECK_THROWS_AS(enrich_record(blender(), d, default_templates(), opts), ClientError);
        CHECK(d.calls == 3);
    }
    SUBCASE("non-retriable errors fail at once") {
        FlakyClient c(1, false);
        CHECK_THROWS_AS(enrich_record(blender(), c, default_templates(), opts), ClientError);
        CHECK(c.calls == 1);
    }
}

TEST_CASE("enrich_corpus keeps order across workers") {
    SyntheticCorpusSpec s;
    s.n_classes = 2;
    s.records_per_class = {6, 5};
    const auto corpus = generate_synthetic_corpus(s);
    std::vector<const PatentImageRecord*> recs;
    for (const auto& r : corpus.records) recs.push_back(&r);
    auto opts = fast_options();
    opts.count_target = 8;
    MockModelClient a(2), b(2);
    EnrichStats stats;
    const auto one = enrich_corpus(recs, a, default_templates(), opts, nullptr, 1);
    const auto four = enrich_corpus(recs, b, default_templates(), opts, nullptr, 4, &stats);
    REQUIRE(one.size() == recs.size());
    for (std::size_t i = 0; i < one.size(); ++i) {
        CHECK(one[i].record_id == recs[i]->record_id);
        CHECK(one[i].texts == four[i].texts);
    }
    CHECK(stats.enriched == recs.size());
}

TEST_CASE("live client requires credentials") {
    ::unsetenv("PIR_TEST_MISSING_KEY");
    EndpointConfig e;
    e.auth_env = "PIR_TEST_MISSING_KEY";
    CHECK_THROWS_WITH_AS(OpenAiCompatibleClient{e},
                         "missing credentials: environment variable PIR_TEST_MISSING_KEY is not set",
                         MissingCredentials);
}

TEST_CASE("live client replays a recorded transcript") {
    ::setenv("PIR_TEST_LLM_KEY", "sk-test-123", 1);
    TranscriptServer server;
    OpenAiCompatibleClient client(server.endpoint());
    auto opts = fast_options();
    opts.max_rounds = 1;
    opts.class_labels = {{"31-00", "machines for preparing food"}};
    const auto e = enrich_record(blender(), client, default_templates(), opts);
    CHECK(e.provenance == Provenance::live_llm);
    CHECK(e.texts ==
          std::vector<std::string>{
              "This is a photo of blender.",
              "This is a photo of blender, classified as machines for preparing food.",
              "This image features a rounded rectangular body with a recessed circular dial on the front face and two "
              "slim vertical handles.",
              "blender can also be referred to as food blender.",
              "blender can also be referred to as kitchen mixer.",
              "blender can also be referred to as juicer.",
              "A countertop blender with a rounded rectangular base and a circular control dial.",
              "Kitchen appliance featuring a recessed dial and two vertical handles on a smooth body.",
              "An ornamental design for a blender base with soft edges and a centered round knob.",
          });
    REQUIRE(server.requests.size() == 2);
    CHECK(server.auth[0] == "Bearer sk-test-123");
    CHECK(server.requests[0]["messages"][0]["content"][1]["image_url"]["url"] == "images/USD0900001-fig1.png");
    CHECK(server.requests[1]["model"] == "gpt-4");
    CHECK(server.requests[1]["messages"][0]["role"] == "system");

    SUBCASE("503 is retried") {
        server.fail_next = 2;
        CHECK_NOTHROW(enrich_record(blender(), client, default_templates(), opts));
        CHECK(server.requests.size() == 2 + 2 + 2);
    }
    SUBCASE("400 is not retried") {
        server.fail_status = 400;
        server.fail_next = 1;
        CHECK_THROWS_AS(enrich_record(blender(), client, default_templates(), opts), ClientError);
        CHECK(server.requests.size() == 3);
    }
    SUBCASE("unexpected body shape") {
        OpenAiCompatibleClient bad(server.endpoint("/bad"));
        CHECK_THROWS_AS(enrich_record(blender(), bad, default_templates(), opts), MalformedResponse);
    }
    SUBCASE("unreachable endpoint") {
        auto ep = server.endpoint();
        ep.base_url = "http://127.0.0.1:1/v1";
        OpenAiCompatibleClient dead(ep);
        CHECK_THROWS(enrich_record(blender(), dead, default_templates(), opts));
    }
}

TEST_CASE("hashing embedder") {
    HashingTextEmbedder h(32, 5);
    const auto m = h.embed({"A red chair", "a RED chair!", "blue table"});
    CHECK(m.rows() == 3);
    CHECK(l2_norm(m.row(0)) == doctest::Approx(1.0));
    for (std::size_t k = 0; k < 32; ++k) CHECK(m(0, k) == m(1, k));
    CHECK_THROWS_AS(embed_texts({"x"}, h, 16), std::invalid_argument);
}

}  // TEST_SUITE
