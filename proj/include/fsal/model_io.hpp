#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsal/model.hpp"

namespace fsal {

// Layout (all integers little-endian):
//   "FSAL" | u16 version | u32 descriptor length | descriptor (UTF-8 JSON)
//   | f32 blobs, one per parameter in declaration order | u32 CRC32
// The CRC covers every byte after the version field up to the CRC itself.
inline constexpr char kModelMagic[4] = {'F', 'S', 'A', 'L'};
inline constexpr std::uint16_t kModelFormatVersion = 1;

namespace detail {

inline void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint32_t crc32_of(const unsigned char* p, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(crc32(crc, p, static_cast<uInt>(n)));
}

template <typename T>
std::vector<const Tensor<T>*> model_blobs(const ModelGraph<T>& model) {
  std::vector<const Tensor<T>*> blobs;
  for (const auto& layer : model.layers)
    for (const Tensor<T>* p : layer_params(layer, false)) blobs.push_back(p);
  if (model.head) {
    blobs.push_back(&model.head->weight);
    blobs.push_back(&model.head->bias);
  }
  return blobs;
}

}  // namespace detail

template <typename T>
nlohmann::json model_descriptor(const ModelGraph<T>& model) {
  nlohmann::json d;
  d["arch"] = model.arch;
  d["embedding_dim"] = model.embedding_dim;
  d["input"] = {model.channels, model.height, model.width};
  if (model.head) {
    d["head"] = {{"mode", to_string(model.head->mode)},
                 {"classes", model.head->classes},
                 {"margin", static_cast<double>(model.head->margin)},
                 {"scale", static_cast<double>(model.head->scale)}};
  }
  return d;
}

template <typename T>
std::vector<unsigned char> serialize_model(const ModelGraph<T>& model) {
  std::vector<unsigned char> out(std::begin(kModelMagic), std::end(kModelMagic));
  detail::put_u16(out, kModelFormatVersion);
  const std::size_t payload_begin = out.size();
  const std::string descriptor = model_descriptor(model).dump();
  detail::put_u32(out, static_cast<std::uint32_t>(descriptor.size()));
  out.insert(out.end(), descriptor.begin(), descriptor.end());
  for (const Tensor<T>* blob : detail::model_blobs(model)) {
    for (T v : blob->values()) {
      const float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      detail::put_u32(out, bits);
    }
  }
  detail::put_u32(out, detail::crc32_of(out.data() + payload_begin, out.size() - payload_begin));
  return out;
}

/// Parses a model file image. Nothing is returned unless every check passes.
template <typename T = float>
ModelGraph<T> deserialize_model(const std::vector<unsigned char>& bytes) {
  require(bytes.size() >= 6 && std::memcmp(bytes.data(), kModelMagic, 4) == 0, Errc::io, "not an FSAL model file");
  const std::uint16_t version = static_cast<std::uint16_t>(bytes[4] | (bytes[5] << 8));
  require(version == kModelFormatVersion, Errc::version,
          "unsupported model format version " + std::to_string(version) + " (expected " +
              std::to_string(kModelFormatVersion) + ")");
  require(bytes.size() >= 6 + 4 + 4, Errc::truncated, "model file truncated");
  const std::size_t payload_begin = 6;
  const std::size_t crc_pos = bytes.size() - 4;
  require(detail::crc32_of(bytes.data() + payload_begin, crc_pos - payload_begin) == detail::get_u32(bytes.data() + crc_pos),
          Errc::checksum, "model checksum mismatch");

  const std::uint32_t dlen = detail::get_u32(bytes.data() + payload_begin);
  require(payload_begin + 4 + dlen <= crc_pos, Errc::truncated, "descriptor extends past end of file");
  const std::string text(reinterpret_cast<const char*>(bytes.data() + payload_begin + 4), dlen);
  nlohmann::json d;
  try {
    d = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::io, std::string("bad model descriptor: ") + e.what());
  }

  ModelGraph<T> model;
  try {
    const auto input = d.at("input").get<std::vector<std::size_t>>();
    require(input.size() == 3, Errc::io, "descriptor input geometry must have 3 entries");
    model = model_skeleton<T>(d.at("arch").get<std::string>(), d.at("embedding_dim").get<std::size_t>(), input[0],
                              input[1], input[2]);
    if (d.contains("head")) {
      const auto& h = d.at("head");
      ClassifierHead<T> head;
      head.mode = head_mode_from_string(h.at("mode").get<std::string>());
      head.classes = h.at("classes").get<std::size_t>();
      head.margin = static_cast<T>(h.at("margin").get<double>());
      head.scale = static_cast<T>(h.at("scale").get<double>());
      head.weight = Tensor<T>({model.embedding_dim, head.classes});
      head.bias = Tensor<T>({head.classes});
      model.head = std::move(head);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::io, std::string("bad model descriptor: ") + e.what());
  }

  std::size_t pos = payload_begin + 4 + dlen;
  std::vector<Tensor<T>*> blobs;
  for (auto& layer : model.layers)
    for (Tensor<T>* p : layer_params(layer, false)) blobs.push_back(p);
  if (model.head) {
    blobs.push_back(&model.head->weight);
    blobs.push_back(&model.head->bias);
  }
  std::size_t needed = 0;
  for (const Tensor<T>* b : blobs) needed += b->size() * 4;
  require(pos + needed <= crc_pos, Errc::truncated, "parameter data truncated");
  require(pos + needed == crc_pos, Errc::io, "trailing bytes after parameter data");
  for (Tensor<T>* blob : blobs) {
    for (auto& v : blob->values()) {
      const std::uint32_t bits = detail::get_u32(bytes.data() + pos);
      float f;
      std::memcpy(&f, &bits, sizeof f);
      v = static_cast<T>(f);
      pos += 4;
    }
  }
  return model;
}

template <typename T>
void save_model(const ModelGraph<T>& model, const std::filesystem::path& path) {
  const auto bytes = serialize_model(model);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(os), Errc::io, "cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(os), Errc::io, "write failed for " + path.string());
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), Errc::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

template <typename T = float>
ModelGraph<T> load_model(const std::filesystem::path& path) {
  return deserialize_model<T>(read_file_bytes(path));
}

}  // namespace fsal
