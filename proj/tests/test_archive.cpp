#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "tformer/archive.hpp"
#include "tformer/cli.hpp"
#include "tformer/training.hpp"

using namespace tformer;

namespace {

template <class T>
bool same_weights(const TFormerModel<T>& a, const TFormerModel<T>& b) {
  const auto na = a.named_tensors(), nb = b.named_tensors();
  if (na.size() != nb.size()) return false;
  for (std::size_t i = 0; i < na.size(); ++i)
    if (na[i].first != nb[i].first || !(*na[i].second == *nb[i].second)) return false;
  return true;
}

ArchiveErrorCode import_code(const std::vector<std::uint8_t>& bytes) {
  try {
    import_archive<float>(bytes);
  } catch (const ArchiveError& e) {
    return e.code();
  }
  FAIL("archive was accepted");
  return ArchiveErrorCode::io;
}

void put_u32(std::vector<std::uint8_t>& b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[at + i] = std::uint8_t(v >> (8 * i));
}

void reseal(std::vector<std::uint8_t>& b) {
  const auto crc = crc32(std::span(b.data(), b.size() - 4));
  put_u32(b, b.size() - 4, crc);
}

std::size_t find(const std::vector<std::uint8_t>& b, const std::string& s) {
  const auto it = std::search(b.begin(), b.end(), s.begin(), s.end());
  REQUIRE(it != b.end());
  return std::size_t(it - b.begin());
}

}  // namespace

TEST_CASE("crc32 check value") {
  const char* s = "123456789";
  CHECK(crc32(std::span(reinterpret_cast<const std::uint8_t*>(s), 9)) == 0xCBF43926u);
}

TEST_CASE("export format") {
  Rng rng(1);
  const auto model = build_variant<float>(Variant::Micro, 4, rng);
  const auto bytes = export_archive(model);
  CHECK(std::memcmp(bytes.data(), "TFWA", 4) == 0);
  CHECK(bytes[4] == 1);
  CHECK(export_archive(model) == bytes);

  // Size from the record layout, computed here independently of archive_size().
  const std::string cfg_text = config_to_json(model.config());
  std::size_t expected = 4 + 4 + 4 + cfg_text.size() + 4 + 4;
  for (const auto& [name, t] : model.named_tensors())
    expected += 2 + name.size() + 1 + 1 + 4 * t->rank() + 4 * t->numel();
  CHECK(bytes.size() == expected);
  CHECK(archive_size(model.config(), DType::f32) == expected);

  const auto info = inspect_archive(bytes);
  CHECK(info.version == 1);
  CHECK(info.config == model.config());
  CHECK(info.tensor_count == model.named_tensors().size());
  CHECK(info.bytes == bytes.size());

  const auto path = std::filesystem::temp_directory_path() / "tformer_test_export.tfwa";
  CHECK(export_archive(model, path) == bytes.size());
  CHECK(read_file(path) == bytes);
  CHECK(std::filesystem::file_size(path) == bytes.size());
  std::filesystem::remove(path);
}

TEST_CASE("round trip is bit-exact") {
  Rng rng(2);
  auto model = build_variant<float>(Variant::Micro, 4, rng);
  auto back = import_archive<float>(export_archive(model));
  CHECK(back.config() == model.config());
  CHECK(same_weights(model, back));
  const auto x = TensorF::randn({2, 3, 32, 32}, rng);
  CHECK(back.forward(x) == model.forward(x));

  // After one optimizer step.
  const auto ds = synth_dataset(0, 8);
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  ModelOp<float> op;
  const auto logits = op.forward(model, ds.gather<float>(idx));
  const auto loss = cross_entropy(logits, std::span<const std::size_t>(ds.labels.data(), 4));
  auto grads = zeros_like_weights(model.weights());
  op.vjp(loss.dlogits, grads);
  auto velocity = zeros_like_weights(model.weights());
  sgd_step(model.weights(), grads, velocity, SgdConfig{});
  CHECK_FALSE(same_weights(model, back));
  CHECK(same_weights(model, import_archive<float>(export_archive(model))));

  Rng r64(3);
  const auto m64 = build_variant<double>(Variant::Micro, 4, r64);
  const auto b64 = export_archive(m64);
  CHECK(same_weights(m64, import_archive<double>(b64)));
  CHECK(b64.size() == archive_size(m64.config(), DType::f64));
  CHECK(import_code(b64) == ArchiveErrorCode::dtype_mismatch);
}

TEST_CASE("every single-byte corruption and truncation is rejected") {
  Rng rng(4);
  const auto model = build_variant<float>(Variant::Micro, 4, rng);
  const auto bytes = export_archive(model);
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    auto bad = bytes;
    bad[i] ^= 0x5A;
    CHECK_THROWS_AS(import_archive<float>(bad), ArchiveError);
  }
  for (std::size_t n = 0; n < bytes.size(); n += 97) {
    const std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + std::ptrdiff_t(n));
    CHECK_THROWS_AS(import_archive<float>(cut), ArchiveError);
  }
  auto payload = bytes;
  payload[bytes.size() / 2] ^= 1;
  CHECK(import_code(payload) == ArchiveErrorCode::checksum_mismatch);
  auto longer = bytes;
  longer.push_back(0);
  CHECK_THROWS_AS(import_archive<float>(longer), ArchiveError);
}

TEST_CASE("each failure has its own error") {
  Rng rng(5);
  const auto model = build_variant<float>(Variant::Micro, 4, rng);
  const auto bytes = export_archive(model);

  auto magic = bytes;
  magic[0] = 'X';
  CHECK(import_code(magic) == ArchiveErrorCode::bad_magic);

  auto version = bytes;
  put_u32(version, 4, 2);
  reseal(version);
  CHECK(import_code(version) == ArchiveErrorCode::unsupported_version);

  // Rename a tensor without changing lengths; the sort order stays valid.
  auto unknown = bytes;
  unknown[find(unknown, "head.weight")] = 'q';
  reseal(unknown);
  CHECK(import_code(unknown) == ArchiveErrorCode::unknown_tensor);

  // A config with fewer classes makes the stored head shapes wrong.
  auto cfg = model.config();
  cfg.num_classes = 3;
  auto other = TFormerModel<float>::build(cfg, nullptr);
  auto shape = export_archive(other);
  {
    // Splice the original config into the 3-class archive (same length: 3 vs 4).
    const std::string a = config_to_json(model.config()), b = config_to_json(cfg);
    REQUIRE(a.size() == b.size());
    const std::size_t at = find(shape, b);
    std::copy(a.begin(), a.end(), shape.begin() + std::ptrdiff_t(at));
    reseal(shape);
  }
  CHECK(import_code(shape) == ArchiveErrorCode::shape_mismatch);

  // Config says bias, records come from a bias-free model.
  auto nobias_cfg = model.config();
  nobias_cfg.bias = false;
  auto missing = export_archive(TFormerModel<float>::build(nobias_cfg, nullptr));
  {
    const std::string a = config_to_json(model.config()), b = config_to_json(nobias_cfg);
    const std::size_t at = find(missing, b);
    std::vector<std::uint8_t> rebuilt(missing.begin(), missing.begin() + std::ptrdiff_t(at - 4));
    const auto len = std::uint32_t(a.size());
    for (int i = 0; i < 4; ++i) rebuilt.push_back(std::uint8_t(len >> (8 * i)));
    rebuilt.insert(rebuilt.end(), a.begin(), a.end());
    rebuilt.insert(rebuilt.end(), missing.begin() + std::ptrdiff_t(at + b.size()), missing.end());
    reseal(rebuilt);
    missing = rebuilt;
  }
  CHECK(import_code(missing) == ArchiveErrorCode::missing_tensor);

  auto badcfg = bytes;
  badcfg[find(badcfg, "{")] = '[';
  reseal(badcfg);
  CHECK(import_code(badcfg) == ArchiveErrorCode::malformed);

  CHECK(import_code({}) == ArchiveErrorCode::truncated);
  CHECK_THROWS_AS(read_file("/nonexistent/dir/x.tfwa"), ArchiveError);
  CHECK(archive_error_name(ArchiveErrorCode::checksum_mismatch) == "ChecksumMismatch");
}

TEST_CASE("payload report") {
  for (Variant v : {Variant::S, Variant::M, Variant::L}) {
    const auto model = TFormerModel<float>::build(make_config(v), nullptr);
    const auto refs = classification_references();
    const auto report = payload_report(model, refs);
    CHECK(report.payload_bytes == archive_size(model.config(), DType::f32));
    CHECK(report.parameter_count == model.count_parameters().total);
    CHECK(report.bytes_per_parameter > 4.0);
    CHECK(report.bytes_per_parameter < 4.1);
    CHECK(report.savings.size() == refs.size());
    if (v == Variant::S) {
      CHECK(report.savings[0].reference == "ResNet18");
      CHECK(std::abs(report.savings[0].ratio - 1.4) <= 0.1);
    }
  }
  const auto s = savings_against(30'000'000, {"ResNet101", 57'000'000});
  CHECK(std::abs(s.fraction_saved - 0.47) <= 0.01);
  CHECK(s.ratio == doctest::Approx(1.9));
}
