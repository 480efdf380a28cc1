#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "tformer/cli.hpp"
#include "tformer/cost.hpp"

using namespace tformer;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path temp(const std::string& name) { return fs::temp_directory_path() / ("tformer_cli_" + name); }

}  // namespace

TEST_CASE("summarize: table and structured agree") {
  const auto table = run({"summarize", "--variant", "s", "--input", "224x224"});
  REQUIRE(table.code == 0);
  const auto js = run({"summarize", "--variant", "s", "--input", "224x224", "--format", "structured"});
  REQUIRE(js.code == 0);
  const auto j = nlohmann::json::parse(js.out);
  const auto report = model_cost(make_config(Variant::S), 224, 224);
  CHECK(j.at("totals").at("params") == report.totals.params);
  CHECK(j.at("totals").at("madds") == report.totals.madds);
  const double params = j.at("totals").at("params").get<double>();
  CHECK(std::abs(params / 8e6 - 1) <= 0.10);

  // Every structured row appears in the table with the same numbers.
  for (const auto& row : j.at("rows")) {
    std::istringstream lines(table.out);
    std::string line;
    bool found = false;
    while (std::getline(lines, line)) {
      std::istringstream fields(line);
      std::string name;
      std::uint64_t p = 0, m = 0;
      if (fields >> name >> p >> m && name == row.at("component").get<std::string>()) {
        CHECK(p == row.at("params").get<std::uint64_t>());
        CHECK(m == row.at("madds").get<std::uint64_t>());
        found = true;
      }
    }
    CHECK(found);
  }
}

TEST_CASE("compare prints the ratios") {
  const auto r = run({"compare", "--d", "64", "--n", "3136", "--heads", "8"});
  CHECK(r.code == 0);
  CHECK(r.out.find("R_P = 4.00") != std::string::npos);
  const auto j = nlohmann::json::parse(run({"compare", "--d", "64", "--n", "3136", "--heads", "8", "--format", "structured"}).out);
  CHECK(j.at("ratios").at("R_P") == 4.0);
  CHECK(j.at("rows").size() == 2);
}

TEST_CASE("usage errors exit 2") {
  CHECK(run({}).code == kExitUsage);
  CHECK(run({"frobnicate"}).code == kExitUsage);
  CHECK(run({"summarize", "--variant", "xl"}).code == kExitUsage);
  CHECK(run({"summarize", "--bogus"}).code == kExitUsage);
  CHECK(run({"summarize", "--variant", "s", "--input", "225x224"}).code == kExitUsage);
  CHECK(run({"compare", "--d", "64", "--heads", "7"}).code == kExitUsage);
  CHECK(run({"export", "--variant", "micro"}).code == kExitUsage);
  CHECK(run({"--help"}).code == kExitOk);
}

TEST_CASE("export, import-check and corruption") {
  const auto path = temp("micro.tfwa");
  const auto e = run({"export", "--variant", "micro", "--out", path.string()});
  REQUIRE(e.code == 0);
  CHECK(fs::file_size(path) == archive_size(make_config(Variant::Micro, 4), DType::f32));
  const auto ok = run({"import-check", path.string()});
  CHECK(ok.code == 0);
  CHECK(ok.out.find("re-export identical") != std::string::npos);

  auto bytes = read_file(path);
  bytes[bytes.size() / 2] ^= 0x01;
  const auto bad = temp("corrupt.tfwa");
  std::ofstream(bad, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  const auto r = run({"import-check", bad.string()});
  CHECK(r.code == kExitIO);
  CHECK(r.err.find("ChecksumMismatch") != std::string::npos);
  CHECK(run({"import-check", temp("missing.tfwa").string()}).code == kExitIO);

  const auto js = run({"export", "--variant", "micro", "--out", path.string(), "--format", "structured"});
  const auto j = nlohmann::json::parse(js.out);
  CHECK(j.at("payload_bytes") == fs::file_size(path));
  fs::remove(path);
  fs::remove(bad);
}

TEST_CASE("ppm reading and inference") {
  Image img{5, 3, {}};
  for (std::size_t i = 0; i < 15; ++i) img.rgb.insert(img.rgb.end(), {std::uint8_t(i * 10), 128, 255});
  const auto ppm = temp("img.ppm");
  write_ppm(img, ppm);
  const auto back = read_ppm(ppm);
  CHECK(back.width == 5);
  CHECK(back.height == 3);
  CHECK(back.rgb == img.rgb);

  const std::string with_comment = "P6\n# hi\n1 1\n255\n\x01\x02\x03";
  const auto one = read_ppm(std::span(reinterpret_cast<const std::uint8_t*>(with_comment.data()), with_comment.size()));
  CHECK(one.rgb == std::vector<std::uint8_t>{1, 2, 3});
  const std::string p3 = "P3\n1 1\n255\n1 2 3";
  CHECK_THROWS(read_ppm(std::span(reinterpret_cast<const std::uint8_t*>(p3.data()), p3.size())));
  const std::string shortp = "P6\n2 2\n255\n\x01";
  CHECK_THROWS(read_ppm(std::span(reinterpret_cast<const std::uint8_t*>(shortp.data()), shortp.size())));

  const auto t = image_to_tensor(img, 10);
  CHECK(t.dims() == Shape{1, 3, 10, 10});
  CHECK(t.at(0, 2, 9, 9) == 1.0f);
  CHECK(t.at(0, 0, 0, 0) == 0.0f);

  const auto w = temp("infer.tfwa");
  REQUIRE(run({"export", "--variant", "micro", "--out", w.string(), "--seed", "3"}).code == 0);
  const auto a = run({"infer", "--weights", w.string(), "--image", ppm.string()});
  CHECK(a.code == 0);
  CHECK(std::count(a.out.begin(), a.out.end(), '\n') == 3);
  CHECK(run({"infer", "--weights", w.string(), "--image", ppm.string()}).out == a.out);
  const auto j = nlohmann::json::parse(run({"infer", "--weights", w.string(), "--image", ppm.string(), "--format", "structured"}).out);
  double sum_top = 0;
  for (const auto& e : j.at("top")) sum_top += e.at("score").get<double>();
  CHECK(sum_top <= 1.0 + 1e-9);
  CHECK(run({"infer", "--weights", w.string(), "--image", temp("nope.ppm").string()}).code == kExitIO);
  fs::remove(ppm);
  fs::remove(w);
}

TEST_CASE("gradcheck and a short train-demo") {
  CHECK(run({"gradcheck", "--seed", "1"}).code == 0);
  const auto r = run({"train-demo", "--steps", "2", "--samples", "16", "--batch", "8"});
  CHECK(r.code == kExitCheckFailed);
  CHECK(r.out.find("final_accuracy") != std::string::npos);
  CHECK(run({"train-demo", "--steps", "2", "--samples", "16", "--batch", "8"}).out == r.out);
}
