#include <doctest.h>

#include "pir/config.hpp"
#include "pir/fs_util.hpp"
#include "support.hpp"

using namespace pir;
using namespace pir::testing;

TEST_SUITE("config") {

TEST_CASE("defaults from an empty document") {
    const auto c = parse_config("");
    CHECK(c.seed == 0);
    CHECK(c.head_fraction == 0.4);
    CHECK(c.trainer.steps == 500);
    CHECK(c.metrics.depth == 100);
    CHECK(c.enrich.client == "mock");
    CHECK(c.service.k_cap == 100);
}

TEST_CASE("a full document") {
    const auto dir = scratch_dir("config");
    write_file_atomic(dir / "meta.jsonl", "");
    write_file_atomic(dir / "a.pirv", "");
    write_file_atomic(dir / "b.pirv", "");
    write_file_atomic(dir / "engine.toml", R"(
seed = 17
head_fraction = 0.5

[paths]
metadata = "meta.jsonl"
cache = "cache.jsonl"

[augment]
flip_prob = 0.0
gridmask_unit_min = 4
gridmask_unit_max = 8

[loss]
terms = ["clip", "cls"]
direction = "symmetric"
initial_tau = 0.1
learn_tau = false

[train]
out_dim = 8
steps = 20
learning_rate = 0.1

[metrics]
ks = [1, 3]
depth = 50
relevance = "same_patent"
exclude_same_patent = true

[enrich]
client = "live"
base_url = "http://localhost:9000/v1"
timeout_ms = 1500
count_target = 7

[service]
port = 0
metadata = "meta.jsonl"
tasks = ["t1", "t2"]
token_env = "PIR_TOKEN"
k_cap = 50

[service.variants]
A = "a.pirv"
B = "b.pirv"
)");
    const auto c = load_config(dir / "engine.toml");
    CHECK(c.seed == 17);
    CHECK(c.head_fraction == 0.5);
    CHECK(*c.paths.metadata == dir / "meta.jsonl");
    CHECK(*c.paths.cache == dir / "cache.jsonl");
    CHECK(c.augment.flip_prob == 0.0);
    CHECK(c.augment.gridmask_unit_range == std::pair<int, int>{4, 8});
    CHECK(c.trainer.terms.clip);
    CHECK(c.trainer.terms.cls);
    CHECK_FALSE(c.trainer.terms.cat);
    CHECK(c.trainer.clip_direction == ClipDirection::symmetric);
    CHECK(c.trainer.initial_tau == 0.1);
    CHECK_FALSE(c.trainer.learn_tau);
    CHECK(c.trainer.out_dim == 8);
    CHECK(c.metrics.ks == std::vector<std::size_t>{1, 3});
    CHECK(c.metrics.relevance == RelevanceMode::same_patent);
    CHECK(c.metrics.exclude_same_patent);
    CHECK(c.enrich.client == "live");
    CHECK(c.enrich.endpoint.timeout == std::chrono::milliseconds(1500));
    CHECK(c.enrich.count_target == 7);
    CHECK(c.service.port == 0);
    CHECK(c.service.variant_indexes.at("B") == dir / "b.pirv");
    CHECK(c.service.tasks.size() == 2);
    CHECK(c.service.token_env == "PIR_TOKEN");
}

TEST_CASE("errors") {
    CHECK_THROWS_AS(parse_config("seed = "), ConfigError);
    CHECK_THROWS_AS(parse_config("colour = 1"), ConfigError);
    CHECK_THROWS_AS(parse_config("[train]\nstepz = 3"), ConfigError);
    CHECK_THROWS_AS(parse_config("seed = \"x\""), ConfigError);
    CHECK_THROWS_AS(parse_config("head_fraction = 1.5"), ConfigError);
    CHECK_THROWS_AS(parse_config("[loss]\nterms = []"), ConfigError);
    CHECK_THROWS_AS(parse_config("[loss]\nterms = [\"clap\"]"), ConfigError);
    CHECK_THROWS_AS(parse_config("[loss]\ndirection = \"text\""), ConfigError);
    CHECK_THROWS_AS(parse_config("[train]\nsteps = -1"), ConfigError);
    CHECK_THROWS_AS(parse_config("[train]\nmomentum = 1.0"), ConfigError);
    CHECK_THROWS_AS(parse_config("[metrics]\nks = [0]"), ConfigError);
    CHECK_THROWS_AS(parse_config("[metrics]\nrelevance = \"same_vibe\""), ConfigError);
    CHECK_THROWS_AS(parse_config("[augment]\nflip_prob = 2.0"), ConfigError);
    CHECK_THROWS_AS(parse_config("[enrich]\nclient = \"remote\""), ConfigError);
    CHECK_THROWS_AS(parse_config("[service]\nport = 70000"), ConfigError);
    CHECK_THROWS_AS(parse_config("[paths]\nmetadata = \"/nonexistent/meta.jsonl\""), ConfigError);
    CHECK_THROWS_AS(parse_config("[service.variants]\nA = \"/nonexistent/a.pirv\""), ConfigError);
    CHECK_THROWS_AS(load_config("/nonexistent/engine.toml"), ConfigError);
    CHECK_THROWS_WITH(parse_config("seed = 1\nseed = 2"), doctest::Contains("line 2"));
}

}  // TEST_SUITE
