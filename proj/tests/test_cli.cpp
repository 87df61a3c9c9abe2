#include <doctest.h>

#include <httplib.h>
#include <sys/wait.h>

#include <chrono>
#include <csignal>
#include <regex>
#include <thread>

#include "support.hpp"

using namespace pir;
using namespace pir::testing;

namespace {

struct CliResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

std::string quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) {
        if (c == '\'') out += "'\\''";
        else out += c;
    }
    return out + "'";
}

CliResult run_cli(const std::vector<std::string>& args) {
    static int counter = 0;
    const auto dir = std::filesystem::temp_directory_path() / "pir_test_cli_io";
    std::filesystem::create_directories(dir);
    const auto out_path = dir / ("out" + std::to_string(counter) + ".txt");
    const auto err_path = dir / ("err" + std::to_string(counter++) + ".txt");
    std::string cmd = "timeout 120 " + quote(PIR_CLI_PATH);
    for (const auto& a : args) cmd += " " + quote(a);
    cmd += " > " + quote(out_path.string()) + " 2> " + quote(err_path.string());
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = read_file(out_path);
    r.err = read_file(err_path);
    return r;
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

std::filesystem::path worksheet_index(const std::filesystem::path& dir) {
    const auto out = dir / "worksheet.pirv";
    const auto r = run_cli({"build-index", "--vectors", (data_dir() / "worksheet" / "vectors.jsonl").string(), "--corpus",
                            (data_dir() / "worksheet" / "corpus.jsonl").string(), "--out", out.string()});
    REQUIRE(r.exit_code == 0);
    return out;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("usage errors exit 2") {
    CHECK(run_cli({}).exit_code == 2);
    CHECK(run_cli({"frobnicate"}).exit_code == 2);
    CHECK(run_cli({"ingest", "--metadata", "/nonexistent/meta.jsonl"}).exit_code == 2);
    CHECK(run_cli({"query", "--index", "/nonexistent/x.pirv", "--record-id", "r1"}).exit_code == 2);
    CHECK(run_cli({"--config", "/nonexistent/engine.toml", "ingest"}).exit_code == 2);
    CHECK(run_cli({"serve"}).exit_code == 2);
    CHECK(run_cli({"--help"}).exit_code == 0);
}

TEST_CASE("ingest reports the head/tail cut") {
    const auto dir = scratch_dir("cli_ingest");
    const auto meta = (data_dir() / "worksheet" / "corpus.jsonl").string();
    auto r = run_cli({"ingest", "--metadata", meta, "--head-fraction", "0.7", "--out", (dir / "norm.jsonl").string()});
    REQUIRE(r.exit_code == 0);
    CHECK(r.out.find("10 records, 3 classes") != std::string::npos);
    CHECK(r.out.find("head fraction 0.7: 2 head, 1 tail") != std::string::npos);
    CHECK(read_file(dir / "norm.jsonl") == read_file(meta));

    r = run_cli({"ingest", "--metadata", meta, "--json"});
    REQUIRE(r.exit_code == 0);
    const auto j = nlohmann::json::parse(r.out);
    CHECK(j["head_classes"] == 1);
    CHECK(j["head_fraction"] == 0.4);

    write_file_atomic(dir / "bad.jsonl", read_file(meta) + "{oops\n");
    r = run_cli({"ingest", "--metadata", (dir / "bad.jsonl").string()});
    CHECK(r.exit_code == 2);
    CHECK(r.err.find("line 11") != std::string::npos);
}

TEST_CASE("worksheet evaluation matches the committed report") {
    const auto dir = scratch_dir("cli_worksheet");
    const auto index = worksheet_index(dir);
    const auto r = run_cli({"evaluate", "--index", index.string(), "--corpus",
                            (data_dir() / "worksheet" / "corpus.jsonl").string(), "--out", (dir / "report.json").string(),
                            "--per-class", (dir / "per_class.csv").string()});
    REQUIRE(r.exit_code == 0);
    CHECK(r.out.find("queries 4 (zero relevant 1, unseen class 1)") != std::string::npos);
    const auto got = nlohmann::json::parse(read_file(dir / "report.json"));
    const auto mismatch = json_mismatch(got, worksheet_expected());
    INFO(mismatch.value_or(""));
    CHECK_FALSE(mismatch.has_value());
    CHECK(read_file(dir / "per_class.csv").rfind("class_id,category,queries,mean_ap\n", 0) == 0);
}

TEST_CASE("query prints at most k rows") {
    const auto dir = scratch_dir("cli_query");
    const auto index = worksheet_index(dir);
    auto r = run_cli({"query", "--index", index.string(), "--record-id", "r09", "--k", "5"});
    REQUIRE(r.exit_code == 0);
    CHECK(count_lines(r.out) == 1 + 5);
    CHECK(r.out.find("r03") < r.out.find("r06"));
    CHECK(r.out.find("match") == std::string::npos);

    r = run_cli({"query", "--index", index.string(), "--record-id", "r07", "--k", "5", "--json"});
    REQUIRE(r.exit_code == 0);
    const auto j = nlohmann::json::parse(r.out);
    CHECK(j["hits"].size() == 5);
    CHECK(j["hits"][0]["class_match"] == true);
    for (const auto& h : j["hits"]) CHECK(h["grant_date"].get<std::string>() < "2017-01-01");

    CHECK(run_cli({"query", "--index", index.string(), "--record-id", "nope"}).exit_code == 2);
    CHECK(run_cli({"query", "--index", index.string(), "--record-id", "r07", "--cutoff", "2017-13-01"}).exit_code == 2);

    write_file_atomic(dir / "corrupt.pirv", "PIRX");
    r = run_cli({"query", "--index", (dir / "corrupt.pirv").string(), "--record-id", "r07"});
    CHECK(r.exit_code == 2);
    CHECK(r.err.find("bad magic") != std::string::npos);
}

TEST_CASE("mock enrichment resumes from its cache") {
    const auto dir = scratch_dir("cli_enrich");
    const auto corpus = (data_dir() / "worksheet" / "corpus.jsonl").string();
    const auto cache = (dir / "cache.jsonl").string();
    auto r = run_cli({"enrich", "--corpus", corpus, "--client", "mock", "--out", cache, "--count", "6", "--json"});
    REQUIRE(r.exit_code == 0);
    auto j = nlohmann::json::parse(r.out);
    CHECK(j["enriched"] == 10);
    CHECK(j["cached"] == 0);
    CHECK(j["provenance"] == "mock");
    const auto first = read_file(cache);

    r = run_cli({"enrich", "--corpus", corpus, "--client", "mock", "--out", cache, "--count", "6", "--json"});
    REQUIRE(r.exit_code == 0);
    j = nlohmann::json::parse(r.out);
    CHECK(j["enriched"] == 0);
    CHECK(j["cached"] == 10);
    CHECK(read_file(cache) == first);

    r = run_cli({"embed", "--corpus", corpus, "--cache", cache, "--out", (dir / "vec.pirv").string(), "--dim", "16"});
    REQUIRE(r.exit_code == 0);
    const auto f = read_pirv(dir / "vec.pirv");
    CHECK(f.dim == 16);
    CHECK(f.metadata.size() == 10);
}

TEST_CASE("live enrichment without a key is a usage error") {
    const auto dir = scratch_dir("cli_live");
    write_file_atomic(dir / "engine.toml", "[enrich]\nauth_env = \"PIR_TEST_ABSENT_KEY\"\n");
    ::unsetenv("PIR_TEST_ABSENT_KEY");
    const auto r = run_cli({"--config", (dir / "engine.toml").string(), "enrich", "--corpus",
                            (data_dir() / "worksheet" / "corpus.jsonl").string(), "--client", "live", "--out",
                            (dir / "cache.jsonl").string()});
    CHECK(r.exit_code == 2);
    CHECK(r.err.find("missing credentials") != std::string::npos);
}

TEST_CASE("train-demo is reproducible") {
    const auto dir = scratch_dir("cli_train");
    auto run = [&](const std::string& tag, const std::string& steps) {
        return run_cli({"--seed", "3", "train-demo", "--steps", steps, "--out",
                        (dir / ("w" + tag + ".json")).string() + "," + (dir / ("t" + tag + ".csv")).string(), "--json"});
    };
    const auto a = run("a", "40");
    const auto b = run("b", "40");
    REQUIRE(a.exit_code == 0);
    REQUIRE(b.exit_code == 0);
    CHECK(read_file(dir / "wa.json") == read_file(dir / "wb.json"));
    CHECK(read_file(dir / "ta.csv") == read_file(dir / "tb.csv"));
    CHECK(count_lines(read_file(dir / "ta.csv")) == 1 + 41);
    const auto j = nlohmann::json::parse(a.out);
    CHECK(j["final_loss"].get<double>() < j["initial_loss"].get<double>());

    const auto zero = run("z", "0");
    REQUIRE(zero.exit_code == 0);
    CHECK(count_lines(read_file(dir / "tz.csv")) == 2);
    const auto z = nlohmann::json::parse(zero.out);
    CHECK(z["final_loss"] == z["initial_loss"]);
}

TEST_CASE("serve answers over http and refuses a taken port") {
    const auto dir = scratch_dir("cli_serve");
    const auto index = worksheet_index(dir);
    write_file_atomic(dir / "engine.toml", "[service]\nmetadata = \"" +
                                               (data_dir() / "worksheet" / "corpus.jsonl").string() +
                                               "\"\n[service.variants]\nA = \"" + index.string() + "\"\n");
    const auto cfg = (dir / "engine.toml").string();

    SUBCASE("taken port") {
        httplib::Server blocker;
        const int port = blocker.bind_to_any_port("127.0.0.1");
        REQUIRE(port > 0);
        const auto r = run_cli({"--config", cfg, "serve", "--port", std::to_string(port)});
        CHECK(r.exit_code == 2);
    }
    SUBCASE("round trip") {
        const auto out = dir / "serve.out";
        const auto pid_file = dir / "serve.pid";
        const std::string cmd = quote(PIR_CLI_PATH) + " --config " + quote(cfg) + " serve --port 0 > " +
                                quote(out.string()) + " 2>&1 & echo $! > " + quote(pid_file.string());
        REQUIRE(std::system(cmd.c_str()) == 0);
        std::smatch m;
        std::string text;
        const std::regex re(R"(listening on http://127\.0\.0\.1:(\d+))");
        for (int i = 0; i < 100 && !std::regex_search(text, m, re); ++i) {
            std::this_thread::sleep_for(std::chrono::milliseconds(50));
            text = std::filesystem::exists(out) ? read_file(out) : "";
        }
        REQUIRE(std::regex_search(text, m, re));
        const int port = std::stoi(m[1].str());
        httplib::Client cli("127.0.0.1", port);
        const auto q = cli.Post("/query", R"({"record_id": "r07", "k": 2})", "application/json");
        const auto pid = std::stoi(read_file(pid_file));
        ::kill(pid, SIGTERM);
        REQUIRE(q);
        CHECK(q->status == 200);
        CHECK(nlohmann::json::parse(q->body)["hits"].size() == 2);
    }
}

}  // TEST_SUITE
