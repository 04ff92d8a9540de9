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

// Model manifest (JSON) + weight blob (little-endian fp32) pair. The byte
// layout is documented in docs/FORMAT.md.

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qdyn/common.hpp"
#include "qdyn/data.hpp"
#include "qdyn/model.hpp"

namespace qdyn {

inline constexpr int kFormatVersion = 1;

inline std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int length = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &length, EVP_sha256(), nullptr) != 1) {
    fail(ErrorKind::kIo, "sha256 computation failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(length * 2);
  for (unsigned int i = 0; i < length; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

namespace detail {

using nlohmann::json;

class BlobWriter {
 public:
  json append(std::span<const float> values) {
    json ref = {{"offset", bytes_.size()}, {"count", values.size()}};
    for (float v : values) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      for (int b = 0; b < 4; ++b) bytes_.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
    }
    return ref;
  }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class BlobReader {
 public:
  explicit BlobReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::vector<float> read(const json& ref) {
    const std::size_t offset = ref.at("offset").get<std::size_t>();
    const std::size_t count = ref.at("count").get<std::size_t>();
    if (offset != cursor_) {
      fail(ErrorKind::kFormat, "blob tensor at offset ", offset, " is out of order (expected ",
           cursor_, ")");
    }
    if (offset + count * 4 > bytes_.size()) {
      fail(ErrorKind::kFormat, "blob length mismatch: tensor needs bytes up to ",
           offset + count * 4, ", blob has ", bytes_.size());
    }
    std::vector<float> out(count);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        bits |= static_cast<std::uint32_t>(bytes_[offset + i * 4 + static_cast<std::size_t>(b)])
                << (8 * b);
      }
      std::memcpy(&out[i], &bits, sizeof bits);
    }
    cursor_ = offset + count * 4;
    return out;
  }

  std::size_t consumed() const { return cursor_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t cursor_ = 0;
};

inline json encode_layer(const Layer& l, BlobWriter& blob) {
  json j;
  j["name"] = l.name;
  j["kind"] = std::string(layer_kind(l.spec));
  if (l.input_from) j["input_from"] = *l.input_from;
  std::visit(
      [&](const auto& spec) {
        using T = std::decay_t<decltype(spec)>;
        if constexpr (std::is_same_v<T, layer::Conv2D>) {
          j["out_c"] = spec.out_c;
          j["k"] = spec.k;
          j["stride"] = spec.stride;
          j["padding"] = std::string(padding_name(spec.padding));
          j["has_bias"] = spec.has_bias;
        } else if constexpr (std::is_same_v<T, layer::DepthwiseConv2D>) {
          j["k"] = spec.k;
          j["stride"] = spec.stride;
          j["padding"] = std::string(padding_name(spec.padding));
          j["has_bias"] = spec.has_bias;
        } else if constexpr (std::is_same_v<T, layer::Dense>) {
          j["out"] = spec.out;
        } else if constexpr (std::is_same_v<T, layer::BatchNorm>) {
          j["use_gamma"] = spec.use_gamma;
          j["epsilon"] = spec.epsilon;
        } else if constexpr (std::is_same_v<T, layer::MaxPool>) {
          j["k"] = spec.k;
          j["stride"] = spec.stride;
        } else if constexpr (std::is_same_v<T, layer::Add>) {
          j["skip_from"] = spec.skip_from;
        } else if constexpr (std::is_same_v<T, layer::DropoutMarker>) {
          j["keep_prob"] = spec.keep_prob;
        }
      },
      l.spec);
  if (l.weights) {
    json w = blob.append(l.weights->values());
    w["layout"] = std::string(layout_name(l.weights->layout()));
    w["dims"] = l.weights->dims();
    j["weights"] = w;
  }
  if (!l.bias.empty()) j["bias"] = blob.append(l.bias);
  if (l.bn) {
    json bn;
    if (l.bn->has_gamma()) bn["gamma"] = blob.append(l.bn->gamma);
    bn["beta"] = blob.append(l.bn->beta);
    bn["moving_mean"] = blob.append(l.bn->moving_mean);
    bn["moving_var"] = blob.append(l.bn->moving_var);
    bn["epsilon"] = l.bn->epsilon;
    j["bn"] = bn;
  }
  return j;
}

inline LayerSpec decode_spec(const json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "conv2d") {
    return layer::Conv2D{j.at("out_c").get<std::size_t>(), j.at("k").get<std::size_t>(),
                         j.at("stride").get<std::size_t>(),
                         parse_padding(j.at("padding").get<std::string>()),
                         j.at("has_bias").get<bool>()};
  }
  if (kind == "depthwise_conv2d") {
    return layer::DepthwiseConv2D{j.at("k").get<std::size_t>(), j.at("stride").get<std::size_t>(),
                                  parse_padding(j.at("padding").get<std::string>()),
                                  j.at("has_bias").get<bool>()};
  }
  if (kind == "dense") return layer::Dense{j.at("out").get<std::size_t>()};
  if (kind == "batch_norm") {
    return layer::BatchNorm{j.at("use_gamma").get<bool>(), j.at("epsilon").get<float>()};
  }
  if (kind == "relu") return layer::ReLU{};
  if (kind == "max_pool") {
    return layer::MaxPool{j.at("k").get<std::size_t>(), j.at("stride").get<std::size_t>()};
  }
  if (kind == "global_avg_pool") return layer::GlobalAvgPool{};
  if (kind == "flatten") return layer::Flatten{};
  if (kind == "add") return layer::Add{j.at("skip_from").get<std::size_t>()};
  if (kind == "softmax") return layer::Softmax{};
  if (kind == "dropout") return layer::DropoutMarker{j.at("keep_prob").get<float>()};
  fail(ErrorKind::kParse, "unknown layer kind '", kind, "'");
}

inline void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write '", path.string(), "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::kIo, "write to '", path.string(), "' failed");
}

}  // namespace detail

struct SerializedModel {
  std::string manifest;
  std::vector<std::uint8_t> blob;
};

inline SerializedModel serialize_model(const ModelGraph& graph) {
  graph.infer_shapes(1);
  detail::BlobWriter blob;
  nlohmann::json layers = nlohmann::json::array();
  for (const Layer& l : graph.layers) layers.push_back(detail::encode_layer(l, blob));
  nlohmann::json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["architecture"] = graph.architecture;
  manifest["input_shape"] = {graph.input_shape.h, graph.input_shape.w, graph.input_shape.c};
  manifest["layers"] = std::move(layers);
  manifest["blob_bytes"] = blob.bytes().size();
  manifest["blob_sha256"] = sha256_hex(blob.bytes());
  return {manifest.dump(2) + "\n", blob.bytes()};
}

inline ModelGraph deserialize_model(std::string_view manifest_text,
                                    std::span<const std::uint8_t> blob) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(manifest_text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, "manifest is not valid JSON: ", e.what());
  }
  try {
    const int version = manifest.at("format_version").get<int>();
    if (version != kFormatVersion) {
      fail(ErrorKind::kFormat, "manifest format version mismatch: file has ", version,
           ", reader supports ", kFormatVersion);
    }
    const std::size_t expected = manifest.at("blob_bytes").get<std::size_t>();
    if (blob.size() != expected) {
      fail(ErrorKind::kFormat, "blob length mismatch: manifest expects ", expected,
           " bytes, blob has ", blob.size());
    }
    if (sha256_hex(blob) != manifest.at("blob_sha256").get<std::string>()) {
      fail(ErrorKind::kFormat, "blob checksum mismatch (sha256)");
    }
    ModelGraph graph;
    graph.architecture = manifest.value("architecture", std::string());
    const auto dims = manifest.at("input_shape").get<std::vector<std::size_t>>();
    if (dims.size() != 3) fail(ErrorKind::kParse, "input_shape must have 3 entries");
    graph.input_shape = Shape{1, dims[0], dims[1], dims[2]};
    detail::BlobReader reader(blob);
    for (const auto& j : manifest.at("layers")) {
      Layer l;
      l.name = j.at("name").get<std::string>();
      l.spec = detail::decode_spec(j);
      if (j.contains("input_from")) l.input_from = j.at("input_from").get<std::size_t>();
      if (j.contains("weights")) {
        const auto& w = j.at("weights");
        l.weights = WeightTensor(parse_layout(w.at("layout").get<std::string>()),
                                 w.at("dims").get<std::vector<std::size_t>>(), reader.read(w));
      }
      if (j.contains("bias")) l.bias = reader.read(j.at("bias"));
      if (j.contains("bn")) {
        const auto& b = j.at("bn");
        BatchNormParams bn;
        if (b.contains("gamma")) bn.gamma = reader.read(b.at("gamma"));
        bn.beta = reader.read(b.at("beta"));
        bn.moving_mean = reader.read(b.at("moving_mean"));
        bn.moving_var = reader.read(b.at("moving_var"));
        bn.epsilon = b.at("epsilon").get<float>();
        l.bn = std::move(bn);
      }
      graph.layers.push_back(std::move(l));
    }
    if (reader.consumed() != blob.size()) {
      fail(ErrorKind::kFormat, "blob length mismatch: manifest references ", reader.consumed(),
           " bytes, blob has ", blob.size());
    }
    graph.infer_shapes(1);
    return graph;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, "malformed manifest: ", e.what());
  }
}

inline void save_model(const ModelGraph& graph, const std::filesystem::path& manifest_path,
                       const std::filesystem::path& blob_path) {
  const SerializedModel s = serialize_model(graph);
  detail::write_bytes(manifest_path, std::span<const std::uint8_t>(
                                         reinterpret_cast<const std::uint8_t*>(s.manifest.data()),
                                         s.manifest.size()));
  detail::write_bytes(blob_path, s.blob);
}

inline ModelGraph load_model(const std::filesystem::path& manifest_path,
                             const std::filesystem::path& blob_path) {
  const std::vector<std::uint8_t> manifest = read_file_bytes(manifest_path);
  const std::vector<std::uint8_t> blob = read_file_bytes(blob_path);
  return deserialize_model(
      std::string_view(reinterpret_cast<const char*>(manifest.data()), manifest.size()), blob);
}

}  // namespace qdyn
