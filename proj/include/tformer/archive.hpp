#pragma once

// Weight archive (.tfwa), all integers little-endian:
//
//   "TFWA" | u32 version = 1 | u32 config length | config JSON (UTF-8)
//   | u32 tensor count | records sorted bytewise by name | u32 CRC-32
//
//   record: u16 name length | name | u8 dtype (0 f32, 1 f64) | u8 rank
//           | u32 dims[rank] | values, row-major
//
// The CRC (zlib polynomial) covers every byte before it. There is no
// compression, so the byte count is a pure function of config and dtype.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tformer/model.hpp"

namespace tformer {

inline constexpr char kArchiveMagic[4] = {'T', 'F', 'W', 'A'};
inline constexpr std::uint32_t kArchiveVersion = 1;

enum class ArchiveErrorCode {
  bad_magic,
  unsupported_version,
  checksum_mismatch,
  unknown_tensor,
  shape_mismatch,
  missing_tensor,
  dtype_mismatch,
  truncated,
  malformed,
  io,
};

std::string archive_error_name(ArchiveErrorCode code);

class ArchiveError : public std::runtime_error {
 public:
  ArchiveError(ArchiveErrorCode code, const std::string& what)
      : std::runtime_error(archive_error_name(code) + ": " + what), code_(code) {}

  ArchiveErrorCode code() const { return code_; }

 private:
  ArchiveErrorCode code_;
};

/// CRC-32 as used by zip/png.
std::uint32_t crc32(std::span<const std::uint8_t> bytes);

template <Real T>
std::vector<std::uint8_t> export_archive(const TFormerModel<T>& model);

/// Writes the archive to `sink`; returns the byte count. Throws ArchiveError(io) on write failure.
template <Real T>
std::size_t export_archive(const TFormerModel<T>& model, std::ostream& sink);

template <Real T>
std::size_t export_archive(const TFormerModel<T>& model, const std::filesystem::path& path);

/// Header fields and record directory after full structural and CRC validation.
struct ArchiveInfo {
  std::uint32_t version = 0;
  TFormerConfig config;
  DType dtype = DType::f32;
  std::size_t tensor_count = 0;
  std::size_t bytes = 0;
};

ArchiveInfo inspect_archive(std::span<const std::uint8_t> bytes);

/// Rebuilds the model. Records must be stored as T (dtype_mismatch otherwise).
template <Real T>
TFormerModel<T> import_archive(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

/// Byte count of an archive for this config, from the weight layout alone.
std::size_t archive_size(const TFormerConfig& cfg, DType dtype);

struct ReferenceModel {
  std::string name;
  std::uint64_t params = 0;
};

struct Savings {
  std::string reference;
  std::uint64_t reference_params = 0;
  /// reference / model parameter count.
  double ratio = 0;
  /// 1 - model / reference.
  double fraction_saved = 0;
};

Savings savings_against(std::uint64_t model_params, const ReferenceModel& ref);

struct TransmissionReport {
  std::uint64_t payload_bytes = 0;
  std::uint64_t parameter_count = 0;
  double bytes_per_parameter = 0;
  std::vector<Savings> savings;
};

template <Real T>
TransmissionReport payload_report(const TFormerModel<T>& model,
                                  std::span<const ReferenceModel> references);

std::string format_table(const TransmissionReport& report);
std::string to_json(const TransmissionReport& report, int indent = 2);

}  // namespace tformer
