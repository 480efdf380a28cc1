#pragma once

// Command-line front end. run_cli is the whole program minus argv handling,
// so tests drive it in-process.
//
// Exit codes: 0 success, 1 a check failed, 2 usage error, 3 I/O or format error.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "tformer/archive.hpp"

namespace tformer {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitIO = 3;

/// Learning rate the train-demo subcommand uses unless --lr is given.
inline constexpr double kDemoLearningRate = 0.03;

/// `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Classification parameter counts the payload report compares against.
std::vector<ReferenceModel> classification_references();

struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel
};

/// Binary P6 with maxval <= 255; '#' comments allowed in the header.
/// Throws std::runtime_error describing the first format problem.
Image read_ppm(std::span<const std::uint8_t> bytes);
Image read_ppm(const std::filesystem::path& path);
void write_ppm(const Image& image, const std::filesystem::path& path);

/// Nearest-neighbour resize to side x side, scaled to [0, 1], as [1, 3, side, side].
TensorF image_to_tensor(const Image& image, std::size_t side);

}  // namespace tformer
