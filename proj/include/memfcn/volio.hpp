#ifndef MEMFCN_VOLIO_HPP
#define MEMFCN_VOLIO_HPP

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "memfcn/common.hpp"
#include "memfcn/half.hpp"
#include "memfcn/tensor.hpp"
#include "memfcn/unet.hpp"

namespace memfcn {

/* VOL1 volume container:

     bytes 0..3   magic "VOL1"
     byte  4      dtype code: 0 = float32, 1 = binary16, 2 = uint8 labels
     byte  5      rank
     then rank    little-endian uint32 extents
     then         payload, little-endian, C-contiguous

   Labels are written as uint8 and come back as an F32 tensor of small
   integers (the in-memory convention everywhere else). */

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open for writing: " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("write failed: " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return bytes;
}

}  // namespace detail

struct VolData {
  Tensor tensor;       // F32 or F16; labels decode to F32
  bool labels = false;
};

inline void write_vol(const std::string& path, const Tensor& t, bool as_labels = false) {
  check_config(t.defined(), "write_vol: undefined tensor");
  if (as_labels)
    check_config(t.dtype() == DType::F32, "write_vol: labels must be an F32 tensor");
  else
    check_config(t.dtype() == DType::F32 || t.dtype() == DType::F16,
                 "write_vol: volumes are stored as float32 or binary16");
  check_config(t.ndim() <= 255, "write_vol: rank too large");
  std::string out;
  out.reserve(static_cast<std::size_t>(t.bytes()) + 64);
  out += "VOL1";
  out.push_back(as_labels ? 2 : (t.dtype() == DType::F16 ? 1 : 0));
  out.push_back(static_cast<char>(t.ndim()));
  for (int i = 0; i < t.ndim(); ++i) {
    const std::int64_t e = t.dim(i);
    check_config(e > 0 && e <= 0xffffffffLL, "write_vol: extent out of range");
    detail::put_u32_le(out, static_cast<std::uint32_t>(e));
  }
  if (as_labels) {
    auto p = t.f32();
    for (float v : p) {
      const long iv = std::lround(v);
      check_config(iv >= 0 && iv <= 255 && static_cast<float>(iv) == v,
                   "write_vol: label values must be integers in [0, 255]");
      out.push_back(static_cast<char>(static_cast<unsigned char>(iv)));
    }
  } else if (t.dtype() == DType::F32) {
    auto p = t.f32();
    for (float v : p) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      detail::put_u32_le(out, bits);
    }
  } else {
    auto p = t.f16();
    for (std::uint16_t bits : p) {
      out.push_back(static_cast<char>(bits & 0xff));
      out.push_back(static_cast<char>((bits >> 8) & 0xff));
    }
  }
  detail::write_file(path, out);
}

inline VolData read_vol(const std::string& path) {
  const std::string bytes = detail::read_file(path);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  if (n < 6 || std::memcmp(p, "VOL1", 4) != 0)
    throw FormatError("not a VOL1 volume: " + path);
  const int code = p[4];
  const int rank = p[5];
  if (code > 2) throw FormatError("unknown dtype code in " + path);
  std::size_t off = 6;
  if (n < off + 4 * static_cast<std::size_t>(rank))
    throw FormatError("truncated extent table in " + path);
  Shape shape;
  std::int64_t numel = 1;
  for (int i = 0; i < rank; ++i) {
    const std::uint32_t e = detail::get_u32_le(p + off);
    off += 4;
    if (e == 0) throw FormatError("zero extent in " + path);
    shape.push_back(e);
    numel *= e;
  }
  const std::size_t elem = code == 0 ? 4 : (code == 1 ? 2 : 1);
  if (n != off + elem * static_cast<std::size_t>(numel))
    throw FormatError("payload length mismatch in " + path);
  VolData out;
  if (code == 0) {
    out.tensor = Tensor(shape, DType::F32);
    auto dst = out.tensor.f32();
    for (std::int64_t i = 0; i < numel; ++i) {
      const std::uint32_t bits = detail::get_u32_le(p + off + 4 * static_cast<std::size_t>(i));
      float v;
      std::memcpy(&v, &bits, 4);
      dst[static_cast<std::size_t>(i)] = v;
    }
  } else if (code == 1) {
    out.tensor = Tensor(shape, DType::F16);
    auto dst = out.tensor.f16();
    for (std::int64_t i = 0; i < numel; ++i) {
      const std::size_t b = off + 2 * static_cast<std::size_t>(i);
      dst[static_cast<std::size_t>(i)] =
          static_cast<std::uint16_t>(p[b] | (static_cast<std::uint16_t>(p[b + 1]) << 8));
    }
  } else {
    out.labels = true;
    out.tensor = Tensor(shape, DType::F32);
    auto dst = out.tensor.f32();
    for (std::int64_t i = 0; i < numel; ++i)
      dst[static_cast<std::size_t>(i)] = static_cast<float>(p[off + static_cast<std::size_t>(i)]);
  }
  return out;
}

// ---------------------------------------------------------------- checkpoint

/* Checkpoint container: a little-endian uint64 header length, a JSON header
   {"config": ..., "tensors": [{name, shape, dtype, offset, bytes}...]}, then
   the raw tensor payloads. Offsets are relative to the end of the header.
   Tensors appear in walk order (parameters, then per-site running stats), so
   two checkpoints of the same state are byte-identical. */

namespace detail {

inline nlohmann::json config_json(const UNetConfig& c) {
  nlohmann::json j;
  j["in_channels"] = c.in_channels;
  j["classes"] = c.classes;
  j["levels"] = c.levels;
  j["channels"] = c.channels;
  j["bottleneck_k"] = c.bottleneck_k;
  j["block"] = block_kind_name(c.block);
  j["slope"] = c.slope;
  j["bn_eps"] = c.bn_eps;
  j["bn_momentum"] = c.bn_momentum;
  j["gamma_floor"] = c.gamma_floor;
  return j;
}

inline UNetConfig config_from_json(const nlohmann::json& j) {
  UNetConfig c;
  c.in_channels = j.at("in_channels").get<std::int64_t>();
  c.classes = j.at("classes").get<std::int64_t>();
  c.levels = j.at("levels").get<int>();
  c.channels = j.at("channels").get<std::vector<std::int64_t>>();
  c.bottleneck_k = j.at("bottleneck_k").get<std::int64_t>();
  c.block = block_kind_from_name(j.at("block").get<std::string>());
  c.slope = j.at("slope").get<double>();
  c.bn_eps = j.at("bn_eps").get<double>();
  c.bn_momentum = j.at("bn_momentum").get<double>();
  c.gamma_floor = j.at("gamma_floor").get<double>();
  c.validate();
  return c;
}

inline void append_f32_payload(std::string& out, const Tensor& t) {
  auto p = t.f32();
  for (float v : p) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32_le(out, bits);
  }
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Model& m) {
  struct Entry {
    std::string name;
    const Tensor* t;
  };
  std::vector<Entry> entries;
  for (const std::string& name : m.param_order) entries.push_back({name, &m.params.at(name)});
  for (const std::string& site : m.norm_sites) {
    const BnRunning& r = m.running.at(site);
    entries.push_back({site + ".running_mean", &r.mean});
    entries.push_back({site + ".running_var", &r.var});
  }
  nlohmann::json tensors = nlohmann::json::array();
  std::string payload;
  for (const Entry& e : entries) {
    check_config(e.t->dtype() == DType::F32, "save_checkpoint: state must be F32");
    nlohmann::json tj;
    tj["name"] = e.name;
    tj["shape"] = e.t->shape();
    tj["dtype"] = dtype_name(e.t->dtype());
    tj["offset"] = payload.size();
    tj["bytes"] = e.t->bytes();
    tensors.push_back(std::move(tj));
    detail::append_f32_payload(payload, *e.t);
  }
  nlohmann::json header;
  header["config"] = detail::config_json(m.cfg);
  header["tensors"] = std::move(tensors);
  const std::string htext = header.dump();
  std::string out;
  detail::put_u64_le(out, htext.size());
  out += htext;
  out += payload;
  detail::write_file(path, out);
}

inline Model load_checkpoint(const std::string& path) {
  const std::string bytes = detail::read_file(path);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 8) throw FormatError("truncated checkpoint: " + path);
  const std::uint64_t hlen = detail::get_u64_le(p);
  if (bytes.size() < 8 + hlen) throw FormatError("truncated checkpoint header: " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what());
  }
  Model m;
  try {
    m.cfg = detail::config_from_json(header.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint config: ") + e.what());
  }
  // Rebuild layout from the config, then overwrite state from the payload;
  // this validates that the checkpoint matches its own declared shape.
  Model fresh = build_model(m.cfg, 0);
  m.param_order = fresh.param_order;
  m.gamma_flag = fresh.gamma_flag;
  m.norm_sites = fresh.norm_sites;
  const std::size_t payload_off = 8 + static_cast<std::size_t>(hlen);
  std::unordered_map<std::string, Tensor> loaded;
  for (const nlohmann::json& tj : header.at("tensors")) {
    const std::string name = tj.at("name").get<std::string>();
    Shape shape = tj.at("shape").get<Shape>();
    const std::uint64_t off = tj.at("offset").get<std::uint64_t>();
    const std::uint64_t nbytes = tj.at("bytes").get<std::uint64_t>();
    if (tj.at("dtype").get<std::string>() != "f32")
      throw FormatError("checkpoint tensor " + name + " is not f32");
    if (payload_off + off + nbytes > bytes.size())
      throw FormatError("checkpoint payload out of range for " + name);
    Tensor t(shape, DType::F32);
    if (static_cast<std::uint64_t>(t.bytes()) != nbytes)
      throw FormatError("checkpoint byte count mismatch for " + name);
    auto dst = t.f32();
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      const std::uint32_t bits =
          detail::get_u32_le(p + payload_off + off + 4 * static_cast<std::size_t>(i));
      float v;
      std::memcpy(&v, &bits, 4);
      dst[static_cast<std::size_t>(i)] = v;
    }
    loaded.emplace(name, std::move(t));
  }
  for (const std::string& name : m.param_order) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw FormatError("checkpoint is missing parameter " + name);
    check_shape(it->second.shape() == fresh.params.at(name).shape(),
                "checkpoint shape mismatch for " + name);
    m.params.emplace(name, std::move(it->second));
  }
  for (const std::string& site : m.norm_sites) {
    auto mi = loaded.find(site + ".running_mean");
    auto vi = loaded.find(site + ".running_var");
    if (mi == loaded.end() || vi == loaded.end())
      throw FormatError("checkpoint is missing running stats for " + site);
    BnRunning r;
    r.mean = std::move(mi->second);
    r.var = std::move(vi->second);
    m.running.emplace(site, std::move(r));
  }
  return m;
}

}  // namespace memfcn

#endif  // MEMFCN_VOLIO_HPP
