#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cer/model.hpp"

namespace cer {

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
inline std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

}  // namespace detail

constexpr char kCheckpointMagic[4] = {'C', 'E', 'R', 'M'};
constexpr std::uint32_t kCheckpointVersion = 1;

// Layout: magic, version, config JSON (u64 length + bytes), parameter count,
// then per parameter: name (u32 length + bytes), dims (u32 count + u64 each),
// row-major little-endian f32 data.
template <class S>
void save_checkpoint(const std::string& path, const TransformerModel<S>& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  out.write(kCheckpointMagic, 4);
  detail::write_u32(out, kCheckpointVersion);

  const std::string cfg = model.config().to_json().dump();
  detail::write_u64(out, cfg.size());
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

  const auto params = model.named_params();
  detail::write_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, tensor] : params) {
    detail::write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(out, static_cast<std::uint32_t>(tensor.shape().size()));
    for (Index d : tensor.shape()) detail::write_u64(out, static_cast<std::uint64_t>(d));
    const Mat<S>& v = tensor.value();
    for (Index r = 0; r < v.rows(); ++r)
      for (Index c = 0; c < v.cols(); ++c) {
        const float f = static_cast<float>(v(r, c));
        out.write(reinterpret_cast<const char*>(&f), sizeof f);
      }
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

// Loads and verifies that the stored parameter names and shapes match the
// model rebuilt from the embedded config exactly (no missing, no extras).
template <class S>
TransformerModel<S> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot read " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != std::string(kCheckpointMagic, 4))
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const std::uint32_t version = detail::read_u32(in);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));

  const std::uint64_t cfg_len = detail::read_u64(in);
  std::string cfg_text(cfg_len, '\0');
  in.read(cfg_text.data(), static_cast<std::streamsize>(cfg_len));
  const ModelConfig cfg = ModelConfig::from_json(nlohmann::json::parse(cfg_text));

  struct Blob {
    Shape shape;
    std::vector<float> data;
  };
  std::map<std::string, Blob> blobs;
  const std::uint32_t count = detail::read_u32(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = detail::read_u32(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    Blob blob;
    const std::uint32_t ndim = detail::read_u32(in);
    for (std::uint32_t d = 0; d < ndim; ++d)
      blob.shape.push_back(static_cast<Index>(detail::read_u64(in)));
    blob.data.resize(static_cast<std::size_t>(shape_numel(blob.shape)));
    in.read(reinterpret_cast<char*>(blob.data.data()),
            static_cast<std::streamsize>(blob.data.size() * sizeof(float)));
    if (!in) throw std::runtime_error("checkpoint: truncated file " + path);
    blobs.emplace(std::move(name), std::move(blob));
  }

  TransformerModel<S> model(cfg, 0);
  for (auto& [name, tensor] : model.named_params()) {
    auto it = blobs.find(name);
    if (it == blobs.end())
      throw std::runtime_error("checkpoint: missing parameter '" + name + "' in " + path);
    if (it->second.shape != tensor.shape())
      throw std::runtime_error("checkpoint: parameter '" + name + "' has shape " +
                               shape_str(it->second.shape) + ", expected " +
                               shape_str(tensor.shape()));
    Mat<S>& v = tensor.value();
    std::size_t k = 0;
    for (Index r = 0; r < v.rows(); ++r)
      for (Index c = 0; c < v.cols(); ++c) v(r, c) = S(it->second.data[k++]);
    blobs.erase(it);
  }
  if (!blobs.empty())
    throw std::runtime_error("checkpoint: unexpected parameter '" + blobs.begin()->first +
                             "' in " + path);
  return model;
}

}  // namespace cer
