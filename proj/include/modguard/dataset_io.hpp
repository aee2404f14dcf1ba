#pragma once

// MGD1 dataset files.
//
//   magic        "MGD1"
//   u32          K (class count)
//   u32          number of distinct SNR levels
//   u32          frame count
//   u32          N (complex samples per frame)
//   u8           provenance (0 = generated, 1 = adversarial)
//   K x string   class names, each u32 byte length + UTF-8 bytes
//   records      u16 label, i16 SNR in centi-dB, u8 split (0 train, 1 test),
//                2N float32 samples (I row then Q row)
//
// All integers and floats little-endian.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

#include "modguard/binary_io.hpp"
#include "modguard/error.hpp"
#include "modguard/signal.hpp"

namespace modguard {

inline constexpr std::string_view kDatasetMagicPrefix = "MGD";
inline constexpr char kDatasetVersion = '1';
inline constexpr std::size_t kFrameRecordOverhead = 2 + 2 + 1;

inline std::size_t dataset_header_size(const Dataset& d) {
  std::size_t size = 4 + 4 * 4 + 1;
  for (const auto& name : d.class_names) size += 4 + name.size();
  return size;
}

inline io::ByteWriter encode_dataset(const Dataset& d) {
  if (d.frames.size() != d.splits.size()) throw InvalidArgument("dataset split table does not match frame count");
  io::ByteWriter w;
  w.put_bytes(kDatasetMagicPrefix);
  w.put(kDatasetVersion);
  w.put(static_cast<std::uint32_t>(d.class_names.size()));
  w.put(static_cast<std::uint32_t>(d.num_snr_levels()));
  w.put(static_cast<std::uint32_t>(d.frames.size()));
  w.put(static_cast<std::uint32_t>(d.frame_length));
  w.put(static_cast<std::uint8_t>(d.provenance));
  for (const auto& name : d.class_names) w.put_string(name);
  for (std::size_t i = 0; i < d.frames.size(); ++i) {
    const auto& f = d.frames[i];
    if (f.samples.size() != 2 * d.frame_length) throw ShapeError("frame length differs from dataset frame length");
    const double centi = std::round(f.snr_db * 100.0);
    if (!(centi >= -32768.0 && centi <= 32767.0)) throw InvalidArgument("SNR outside the encodable centi-dB range");
    w.put(f.label);
    w.put(static_cast<std::int16_t>(centi));
    w.put(static_cast<std::uint8_t>(d.splits[i]));
    for (float v : f.samples) w.put(v);
  }
  return w;
}

inline void save_dataset(const Dataset& d, const std::string& path) { encode_dataset(d).write_file(path); }

inline Dataset decode_dataset(io::ByteReader& r) {
  if (r.size() < 4) throw MalformedHeaderError("dataset file too short for a header");
  const auto magic = r.get_bytes(4);
  if (magic.substr(0, 3) != kDatasetMagicPrefix) throw MalformedHeaderError("not an MGD dataset file");
  if (magic[3] != kDatasetVersion)
    throw VersionMismatchError(std::string("unsupported dataset format version '") + magic[3] + "'");

  Dataset d;
  std::uint32_t k, n_snr, count, n;
  std::uint8_t prov;
  try {
    k = r.get<std::uint32_t>();
    n_snr = r.get<std::uint32_t>();
    count = r.get<std::uint32_t>();
    n = r.get<std::uint32_t>();
    prov = r.get<std::uint8_t>();
    if (prov > 1) throw MalformedHeaderError("unknown provenance flag");
    for (std::uint32_t c = 0; c < k; ++c) {
      auto name = r.get_string();
      d.class_names.push_back(std::move(name));
    }
  } catch (const TruncatedPayloadError&) {
    throw MalformedHeaderError("dataset header is incomplete");
  }
  d.frame_length = n;
  d.provenance = static_cast<Provenance>(prov);

  const std::size_t record = kFrameRecordOverhead + 2 * static_cast<std::size_t>(n) * 4;
  if (r.remaining() < record * count)
    throw TruncatedPayloadError("dataset payload holds " + std::to_string(r.remaining()) + " bytes, expected " +
                                std::to_string(record * count));
  d.frames.resize(count);
  d.splits.resize(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto& f = d.frames[i];
    f.label = r.get<std::uint16_t>();
    f.snr_db = static_cast<double>(r.get<std::int16_t>()) / 100.0;
    const auto split = r.get<std::uint8_t>();
    if (split > 1) throw MalformedHeaderError("frame " + std::to_string(i) + " has an unknown split tag");
    if (f.label >= k) throw MalformedHeaderError("frame " + std::to_string(i) + " has an out-of-range label");
    d.splits[i] = static_cast<Split>(split);
    f.samples.resize(2 * static_cast<std::size_t>(n));
    for (auto& v : f.samples) v = r.get<float>();
  }
  if (d.num_snr_levels() != n_snr && count > 0)
    throw MalformedHeaderError("SNR level count in header does not match the records");
  return d;
}

inline Dataset load_dataset(const std::string& path) {
  auto r = io::ByteReader::from_file(path);
  return decode_dataset(r);
}

/// One line per frame for inspection: index,label,class,snr_db,split,power
inline std::string dataset_metadata_csv(const Dataset& d) {
  std::ostringstream os;
  os << "index,label,class,snr_db,split,power\n";
  os << std::setprecision(10);
  for (std::size_t i = 0; i < d.frames.size(); ++i) {
    const auto& f = d.frames[i];
    os << i << ',' << f.label << ',' << d.class_names.at(f.label) << ',' << f.snr_db << ','
       << (d.splits[i] == Split::Train ? "train" : "test") << ',' << signal_power(f) << '\n';
  }
  return os.str();
}

} // namespace modguard
