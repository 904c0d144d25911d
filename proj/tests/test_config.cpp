#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oawam/config.hpp"
#include "oawam/errors.hpp"

using oawam::Config;

TEST_CASE("defaults materialize and validate") {
  const Config c = Config::defaults();
  CHECK(c.model.hidden % c.model.heads == 0);
  CHECK(c.model.slot_dim() == c.model.addr_dim + c.model.cnt_dim +
                                  c.model.temporal_dim + c.model.role_dim);
  CHECK(c.sim.n_max == 8);
}

TEST_CASE("unknown keys are rejected") {
  nlohmann::json j;
  j["train"] = {{"not_a_key", 3}};
  CHECK_THROWS_AS(Config::from_json(j), oawam::ConfigError);
  nlohmann::json j2;
  j2["nope"] = nlohmann::json::object();
  CHECK_THROWS_AS(Config::from_json(j2), oawam::ConfigError);
}

TEST_CASE("hash is stable under key reordering") {
  nlohmann::json a;
  a["train"] = {{"batch", 4}, {"total_steps", 100}};
  nlohmann::json b;
  b["train"] = {{"total_steps", 100}, {"batch", 4}};
  CHECK(Config::from_json(a).hash() == Config::from_json(b).hash());

  nlohmann::json c;
  c["train"] = {{"batch", 5}, {"total_steps", 100}};
  CHECK(Config::from_json(a).hash() != Config::from_json(c).hash());
}

TEST_CASE("dot-path overrides") {
  Config c = Config::defaults();
  c.apply_override("train.total_steps=123");
  CHECK(c.train.total_steps == 123);
  c.apply_override("model.oa_key_mask=false");
  CHECK_FALSE(c.model.oa_key_mask);
  CHECK_THROWS_AS(c.apply_override("train.bogus=1"), oawam::ConfigError);
  CHECK_THROWS_AS(c.apply_override("no_equals"), oawam::ConfigError);
}

TEST_CASE("validation catches bad shapes") {
  nlohmann::json j;
  j["model"] = {{"hidden", 130}, {"heads", 4}};
  CHECK_THROWS_AS(Config::from_json(j), oawam::ConfigError);
  nlohmann::json j2;
  j2["model"] = {{"addr_dim", 128}};
  CHECK_THROWS_AS(Config::from_json(j2), oawam::ConfigError);
}

TEST_CASE("variants flip exactly the two OA switches") {
  Config base = Config::defaults();
  Config v2 = base;
  oawam::apply_variant(v2, "v2");
  CHECK_FALSE(v2.model.oa_key_mask);
  CHECK_FALSE(v2.model.oa_reset_hook);
  // Config trees differ in exactly the two flag leaves.
  const auto da = base.tree.flatten();
  const auto db = v2.tree.flatten();
  int diffs = 0;
  for (const auto& [k, v] : da.items()) {
    if (db.at(k) != v) ++diffs;
  }
  CHECK(diffs == 2);
  CHECK_THROWS_AS(oawam::apply_variant(base, "v9"), oawam::ConfigError);
}
