#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "itlumm/dataset.hpp"
#include "itlumm/nn.hpp"

namespace itlumm {

/// Whole file, transparently gunzipped when it starts with the gzip magic.
/// Throws FormatError naming the path when it cannot be read.
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);

/// IDX images (magic 0x00000803) + labels (0x00000801). Pixels scaled to [0, 1].
LabeledDataset load_mnist(const std::filesystem::path& images, const std::filesystem::path& labels);
/// Parses in-memory IDX buffers; `what` names the source in error messages.
LabeledDataset parse_mnist(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels,
                           const std::string& what = "mnist");
/// train-images-idx3-ubyte[.gz] / train-labels-idx1-ubyte[.gz] (or t10k-*) in `dir`.
LabeledDataset load_mnist_split(const std::filesystem::path& dir, bool train);

/// CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes.
LabeledDataset load_cifar10(std::span<const std::filesystem::path> batches);
LabeledDataset parse_cifar10(std::span<const std::uint8_t> bytes, const std::string& what = "cifar10");

inline constexpr std::uint32_t kModelFormatVersion = 1;

/// "ITLM" + u32 version + typed sections + CRC-32 of everything before it.
/// Little-endian, doubles stored bit-exact.
std::vector<std::uint8_t> serialize_model(const MlpModel& model);
/// Throws FormatError on bad magic, unsupported version or section type,
/// truncation, trailing bytes, or checksum mismatch.
MlpModel deserialize_model(std::span<const std::uint8_t> bytes);

void save_model(const MlpModel& model, const std::filesystem::path& path);
MlpModel load_model(const std::filesystem::path& path);

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

}  // namespace itlumm
