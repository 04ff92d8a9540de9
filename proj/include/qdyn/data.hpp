/* Copyright 2026 The qdyn Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "qdyn/common.hpp"
#include "qdyn/tensor.hpp"

namespace qdyn {

struct Dataset {
  Tensor images;                     // N x H x W x C
  std::vector<std::uint8_t> labels;  // empty when unlabeled

  std::size_t size() const { return images.shape().n; }
  bool has_labels() const { return !labels.empty(); }
};

inline constexpr std::size_t kCifarRecordBytes = 1 + 32 * 32 * 3;

// CIFAR-10 binary batches: each record is one label byte followed by the
// R, G and B planes (32x32 each, row-major). Pixels map to [-1, 1].
inline Dataset parse_cifar10_binary(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % kCifarRecordBytes != 0) {
    fail(ErrorKind::kData, "CIFAR-10 data is truncated: ", bytes.size(),
         " bytes is not a multiple of ", kCifarRecordBytes);
  }
  const std::size_t records = bytes.size() / kCifarRecordBytes;
  Dataset ds;
  ds.images = Tensor(Shape{records, 32, 32, 3});
  ds.labels.resize(records);
  for (std::size_t r = 0; r < records; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] > 9) fail(ErrorKind::kData, "CIFAR-10 record ", r, " has label ", int(rec[0]), " > 9");
    ds.labels[r] = rec[0];
    const std::uint8_t* pixels = rec + 1;
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = 0; y < 32; ++y) {
        for (std::size_t x = 0; x < 32; ++x) {
          ds.images.at(r, y, x, c) =
              static_cast<float>(pixels[(c * 32 + y) * 32 + x]) / 127.5f - 1.0f;
        }
      }
    }
  }
  return ds;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open '", path.string(), "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>());
}

// Reads one CIFAR-10 binary batch file, or every *.bin file of a directory
// in lexicographic order.
inline Dataset read_cifar10_binary(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    fail(ErrorKind::kIo, "data path '", path.string(),
         "' does not exist (pass a CIFAR-10 .bin file or directory, or omit --data to use "
         "synthetic data)");
  }
  if (!std::filesystem::is_directory(path)) return parse_cifar10_binary(read_file_bytes(path));
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(path)) {
    if (entry.is_regular_file() && entry.path().extension() == ".bin") files.push_back(entry.path());
  }
  if (files.empty()) fail(ErrorKind::kIo, "no .bin files in '", path.string(), "'");
  std::sort(files.begin(), files.end());
  std::vector<std::uint8_t> bytes;
  for (const auto& f : files) {
    const auto part = read_file_bytes(f);
    bytes.insert(bytes.end(), part.begin(), part.end());
  }
  return parse_cifar10_binary(bytes);
}

// Seeded Gaussian images (stddev 0.5, clamped to [-1, 1]) with uniform labels.
inline Dataset make_synthetic_dataset(std::size_t count, std::uint64_t seed,
                                      Shape sample = Shape{1, 32, 32, 3},
                                      std::size_t classes = 10) {
  Rng rng(seed);
  Dataset ds;
  ds.images = Tensor(Shape{count, sample.h, sample.w, sample.c});
  for (float& v : ds.images.values()) {
    v = static_cast<float>(std::clamp(rng.normal(0.0, 0.5), -1.0, 1.0));
  }
  ds.labels.resize(count);
  for (auto& l : ds.labels) l = static_cast<std::uint8_t>(rng.below(classes));
  return ds;
}

}  // namespace qdyn
