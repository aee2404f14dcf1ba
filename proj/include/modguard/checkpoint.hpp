#pragma once

// MGM1 model checkpoints.
//
//   magic      "MGM1"
//   u32 x 3    input shape (C, H, W)
//   u32        layer count L
//   u32        feature layer index
//   L records  u8 tag (1 conv, 2 relu, 3 dense), then u32 out, u32 kh, u32 kw
//   params     float32, per parametrised layer: weights then biases

#include <string>

#include "modguard/binary_io.hpp"
#include "modguard/nn.hpp"

namespace modguard {

inline io::ByteWriter encode_model(const nn::Model& m, io::ByteWriter w = {}) {
  w.put_bytes("MGM1");
  w.put(static_cast<std::uint32_t>(m.input_shape().c));
  w.put(static_cast<std::uint32_t>(m.input_shape().h));
  w.put(static_cast<std::uint32_t>(m.input_shape().w));
  w.put(static_cast<std::uint32_t>(m.specs().size()));
  w.put(static_cast<std::uint32_t>(m.feature_layer()));
  for (const auto& s : m.specs()) {
    w.put(static_cast<std::uint8_t>(s.kind));
    w.put(static_cast<std::uint32_t>(s.out));
    w.put(static_cast<std::uint32_t>(s.kh));
    w.put(static_cast<std::uint32_t>(s.kw));
  }
  for (const auto& p : m.parameters())
    for (double v : p) w.put(static_cast<float>(v));
  return w;
}

inline void save_model(const nn::Model& m, const std::string& path) { encode_model(m).write_file(path); }

inline nn::Model decode_model(io::ByteReader& r) {
  if (r.remaining() < 4) throw MalformedHeaderError("model file too short for a header");
  const auto magic = r.get_bytes(4);
  if (magic.substr(0, 3) != "MGM") throw MalformedHeaderError("not an MGM model checkpoint");
  if (magic[3] != '1') throw VersionMismatchError(std::string("unsupported model format version '") + magic[3] + "'");
  nn::Shape3 in;
  std::vector<nn::LayerSpec> specs;
  std::uint32_t feature;
  try {
    in.c = r.get<std::uint32_t>();
    in.h = r.get<std::uint32_t>();
    in.w = r.get<std::uint32_t>();
    const auto count = r.get<std::uint32_t>();
    feature = r.get<std::uint32_t>();
    if (count > 4096) throw MalformedHeaderError("implausible layer count");
    for (std::uint32_t i = 0; i < count; ++i) {
      nn::LayerSpec s;
      const auto tag = r.get<std::uint8_t>();
      if (tag < 1 || tag > 3) throw MalformedHeaderError("unknown layer tag " + std::to_string(tag));
      s.kind = static_cast<nn::LayerSpec::Kind>(tag);
      s.out = r.get<std::uint32_t>();
      s.kh = r.get<std::uint32_t>();
      s.kw = r.get<std::uint32_t>();
      specs.push_back(s);
    }
  } catch (const TruncatedPayloadError&) {
    throw MalformedHeaderError("model header is incomplete");
  }
  nn::Model m;
  try {
    m = nn::Model(in, std::move(specs), feature);
  } catch (const ShapeError& e) {
    throw MalformedHeaderError(std::string("inconsistent architecture: ") + e.what());
  }
  if (r.remaining() < m.parameter_count() * 4) throw TruncatedPayloadError("model parameters are truncated");
  for (auto p : m.parameters())
    for (double& v : p) v = static_cast<double>(r.get<float>());
  return m;
}

inline nn::Model load_model(const std::string& path) {
  auto r = io::ByteReader::from_file(path);
  return decode_model(r);
}

} // namespace modguard
