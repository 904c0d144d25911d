#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "oawam/container.hpp"
#include "oawam/errors.hpp"

using oawam::io::Container;

namespace {
std::string tmp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}
}  // namespace

TEST_CASE("round-trips tensors and metadata") {
  Container c;
  const float f[6] = {1.0f, -2.5f, 3.25f, 0.0f, 1e-7f, -42.0f};
  const std::int32_t ids[3] = {7, -1, 12};
  const double d[2] = {3.141592653589793, -1e-12};
  c.put_f32("a", {2, 3}, f);
  c.put_i32("ids", {3}, ids);
  c.put_f64("d", {2, 1}, d);
  c.meta["seed"] = 17;
  c.meta["note"] = "x";

  const std::string path = tmp_path("oawam_container_test.oaw");
  c.save(path);
  const Container r = Container::load(path);

  CHECK(r.meta["seed"] == 17);
  const auto fa = r.get_f32("a");
  for (int i = 0; i < 6; ++i) CHECK(fa[static_cast<std::size_t>(i)] == f[i]);
  const auto ra = r.get_i32("ids");
  CHECK(ra[1] == -1);
  const auto rd = r.get_f64("d");
  CHECK(rd[0] == d[0]);
  CHECK(r.entry("a").shape[0] == 2);
  CHECK(r.entry("a").shape[1] == 3);
  std::filesystem::remove(path);
}

TEST_CASE("peek reads the manifest without decoding blobs") {
  Container c;
  const float f[4] = {1, 2, 3, 4};
  c.put_f32("w", {4}, f);
  c.meta["kind"] = "checkpoint";
  const std::string path = tmp_path("oawam_container_peek.oaw");
  c.save(path);

  const auto manifest = Container::peek_manifest(path);
  CHECK(manifest["meta"]["kind"] == "checkpoint");
  CHECK(manifest["tensors"].contains("w"));
  CHECK(manifest["tensors"]["w"]["dtype"] == "f32");
  std::filesystem::remove(path);
}

TEST_CASE("errors on duplicates, missing names, and wrong dtype") {
  Container c;
  const float f[1] = {1.0f};
  c.put_f32("x", {1}, f);
  CHECK_THROWS_AS(c.put_f32("x", {1}, f), oawam::ConfigError);
  CHECK_THROWS_AS(c.entry("nope"), oawam::ConfigError);
  CHECK_THROWS_AS(c.get_i32("x"), oawam::ConfigError);
}
