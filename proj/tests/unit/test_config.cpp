#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "nvnmr/config.hpp"

using namespace nvnmr;

TEST_CASE("values and units") {
  auto num = [](const std::string& s) { return std::get<double>(parse_config_value(s).data); };
  CHECK(num("8 nm") == doctest::Approx(8e-9));
  CHECK(num("8nm") == doctest::Approx(8e-9));
  CHECK(num("20 mT") == doctest::Approx(0.02));
  CHECK(num("32 us") == doctest::Approx(32e-6));
  CHECK(num("851.5 kHz") == doctest::Approx(851.5e3));
  CHECK(num("1.2 MHz") == doctest::Approx(1.2e6));
  CHECK(num("60 /nm3") == doctest::Approx(6e28));
  CHECK(num("200 G") == doctest::Approx(0.02));
  CHECK(num("42.577 MHz/T") == doctest::Approx(42.577e6));
  CHECK(num("-3e-2") == doctest::Approx(-0.03));
  CHECK(num("inf") == std::numeric_limits<double>::infinity());
  CHECK(std::get<std::string>(parse_config_value("\"a # b\"").data) == "a # b");
  CHECK(std::get<bool>(parse_config_value("true").data));
  const auto arr = parse_config_value("[17 mT, 20 mT, 23mT]");
  REQUIRE(arr.is_array());
  CHECK(std::get<double>(std::get<ConfigValue::Array>(arr.data)[2].data) == doctest::Approx(0.023));
  CHECK_THROWS_AS(parse_config_value("8 furlongs"), ConfigError);
  CHECK_THROWS_AS(parse_config_value("\"open"), ConfigError);
  CHECK_THROWS_AS(parse_config_value("[1, 2"), ConfigError);
}

TEST_CASE("sections, arrays and lookups") {
  const std::string text = R"(# run
[sensor]
depth = 8 nm   # below the surface
b0 = [17 mT, 20 mT]

[[layer]]
species = "1H"
rho = 60 /nm3

[[layer]]
species = "19F"
z1 = 1 nm
)";
  const Config c = parse_config(text, "run.toml");
  CHECK(c.table("sensor").number("depth") == doctest::Approx(8e-9));
  CHECK(c.table("sensor").numbers("b0").size() == 2);
  CHECK(c.table("sensor").number("missing", 4.0) == 4.0);
  REQUIRE(c.array("layer").size() == 2);
  CHECK(c.array("layer")[1].string("species") == "19F");
  CHECK(c.array("nothing").empty());
  CHECK(c.table("absent").values.empty());
  CHECK_NOTHROW(c.check_sections({"sensor"}, {"layer"}));
  CHECK_THROWS_WITH_AS(c.check_sections({}, {"layer"}), doctest::Contains("run.toml:2"), ConfigError);
  CHECK_THROWS_WITH_AS(c.table("sensor").check_keys({"depth"}), doctest::Contains("run.toml:4"), ConfigError);
  CHECK_THROWS_WITH_AS(c.table("sensor").string("depth"), doctest::Contains("run.toml:3"), ConfigError);
  CHECK_THROWS_WITH_AS(c.array("layer")[0].number("z1"), doctest::Contains("z1"), ConfigError);
  CHECK(c.array("layer")[0].integer("n", 3) == 3);

  const auto j = c.to_json();
  CHECK(j["sensor"]["depth"].get<double>() == doctest::Approx(8e-9));
  CHECK(j["layer"].size() == 2);
}

TEST_CASE("syntax errors carry the line") {
  CHECK_THROWS_WITH_AS(parse_config("[a]\nx = 1\nx = 2\n", "f"), doctest::Contains("f:3"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config("[a]\nnot a pair\n", "f"), doctest::Contains("f:2"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config("[a\n", "f"), doctest::Contains("f:1"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config("[a]\n[a]\n", "f"), doctest::Contains("f:2"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/run.toml"), ConfigError);
}

TEST_CASE("overrides") {
  Config c = parse_config("[sensor]\ndepth = 8 nm\n[[layer]]\nrho = 1\n", "f");
  c.set("sensor.depth=5 nm");
  c.set("sequence.k=4");
  c.set("layer.0.rho=60 /nm3");
  CHECK(c.table("sensor").number("depth") == doctest::Approx(5e-9));
  CHECK(c.table("sequence").integer("k") == 4);
  CHECK(c.array("layer")[0].number("rho") == doctest::Approx(6e28));
  CHECK_THROWS_AS(c.set("sensor.depth"), ConfigError);
  CHECK_THROWS_AS(c.set("layer.3.rho=1"), ConfigError);
  CHECK_THROWS_AS(c.set("a.b.c.d=1"), ConfigError);
  CHECK_THROWS_WITH_AS(c.table("sensor").string("depth"), doctest::Contains("--set"), ConfigError);
}

TEST_CASE("relative paths resolve next to the file") {
  const auto dir = std::filesystem::temp_directory_path() / "nvnmr-unit-config";
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "c.toml") << "[fit]\ninputs = [\"a.csv\"]\n";
  const Config c = load_config(dir / "c.toml");
  CHECK(c.resolve("a.csv") == dir / "a.csv");
  CHECK(c.resolve("/abs/a.csv") == std::filesystem::path("/abs/a.csv"));
}
