#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include "memfcn/memfcn.hpp"

using namespace memfcn;
namespace fs = std::filesystem;

namespace {

fs::path scratch() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "memfcn-volio-tests";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  REQUIRE(f.good());
}

Tensor random_f32(Shape shape, std::uint64_t seed) {
  Tensor t(std::move(shape), DType::F32);
  Rng rng(seed);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.normal() * 10.0);
  return t;
}

}  // namespace

TEST_CASE("float32 volumes survive a write/read round trip bit for bit") {
  const fs::path p = scratch() / "f32.vol";
  Tensor t = random_f32({2, 3, 4, 5}, 11);
  t.set(0, -0.0f);  // signed zero must survive too
  write_vol(p.string(), t);
  VolData back = read_vol(p.string());
  REQUIRE(!back.labels);
  REQUIRE(back.tensor.dtype() == DType::F32);
  REQUIRE(back.tensor.shape() == t.shape());
  REQUIRE(back.tensor.bitwise_equal(t));
}

TEST_CASE("binary16 volumes keep their exact bit patterns") {
  const fs::path p = scratch() / "f16.vol";
  Tensor t = random_f32({1, 2, 6, 6, 6}, 12).to(DType::F16);
  write_vol(p.string(), t);
  VolData back = read_vol(p.string());
  REQUIRE(!back.labels);
  REQUIRE(back.tensor.dtype() == DType::F16);
  REQUIRE(back.tensor.bitwise_equal(t));
}

TEST_CASE("label volumes are stored as bytes and decode back to small floats") {
  const fs::path p = scratch() / "lab.vol";
  Tensor t({4, 4, 4}, DType::F32);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, static_cast<double>(i % 3));
  write_vol(p.string(), t, /*as_labels=*/true);
  // one byte per voxel on disk
  REQUIRE(fs::file_size(p) == 6 + 3 * 4 + 64);
  VolData back = read_vol(p.string());
  REQUIRE(back.labels);
  REQUIRE(back.tensor.dtype() == DType::F32);
  REQUIRE(back.tensor.bitwise_equal(t));
}

TEST_CASE("label writing rejects anything that is not a small integer") {
  const fs::path p = scratch() / "bad-lab.vol";
  Tensor frac({2, 2}, DType::F32);
  frac.set(0, 0.5);
  REQUIRE_THROWS_AS(write_vol(p.string(), frac, true), ConfigError);
  Tensor big({2, 2}, DType::F32);
  big.set(1, 300.0);
  REQUIRE_THROWS_AS(write_vol(p.string(), big, true), ConfigError);
  Tensor neg({2, 2}, DType::F32);
  neg.set(0, -1.0);
  REQUIRE_THROWS_AS(write_vol(p.string(), neg, true), ConfigError);
  REQUIRE_THROWS_AS(write_vol(p.string(), frac.to(DType::F16), true), ConfigError);
}

TEST_CASE("malformed volume files are rejected with a format error") {
  const fs::path good = scratch() / "good.vol";
  write_vol(good.string(), random_f32({2, 3, 4}, 13));
  const std::string bytes = slurp(good);

  SECTION("missing file") {
    REQUIRE_THROWS_AS(read_vol((scratch() / "nope.vol").string()), FormatError);
  }
  SECTION("bad magic") {
    std::string bad = bytes;
    bad[0] = 'X';
    const fs::path p = scratch() / "magic.vol";
    spit(p, bad);
    REQUIRE_THROWS_AS(read_vol(p.string()), FormatError);
  }
  SECTION("unknown dtype code") {
    std::string bad = bytes;
    bad[4] = 7;
    const fs::path p = scratch() / "code.vol";
    spit(p, bad);
    REQUIRE_THROWS_AS(read_vol(p.string()), FormatError);
  }
  SECTION("truncated extent table") {
    const fs::path p = scratch() / "exts.vol";
    spit(p, bytes.substr(0, 9));
    REQUIRE_THROWS_AS(read_vol(p.string()), FormatError);
  }
  SECTION("truncated payload") {
    const fs::path p = scratch() / "short.vol";
    spit(p, bytes.substr(0, bytes.size() - 3));
    REQUIRE_THROWS_AS(read_vol(p.string()), FormatError);
  }
  SECTION("trailing garbage") {
    const fs::path p = scratch() / "long.vol";
    spit(p, bytes + "zz");
    REQUIRE_THROWS_AS(read_vol(p.string()), FormatError);
  }
  SECTION("zero extent") {
    std::string bad = bytes.substr(0, 6);
    for (int i = 0; i < 12; ++i) bad.push_back(0);  // three u32 extents, all zero
    const fs::path p = scratch() / "zero.vol";
    spit(p, bad);
    REQUIRE_THROWS_AS(read_vol(p.string()), FormatError);
  }
}

TEST_CASE("checkpoints restore parameters, statistics, and config exactly") {
  UNetConfig cfg;
  cfg.levels = 2;
  cfg.channels = {4, 8};
  cfg.block = BlockKind::Bottleneck;
  cfg.bottleneck_k = 2;
  Model m = build_model(cfg, 77);
  // make the state distinguishable from a fresh build
  Tensor& hb = m.params.at("head.b");
  for (std::int64_t i = 0; i < hb.numel(); ++i) hb.set(i, 0.25 * static_cast<double>(i + 1));
  BnRunning& r0 = m.running.at(m.norm_sites.front());
  r0.mean.set(0, 3.5);
  r0.var.set(0, 0.125);

  const fs::path p = scratch() / "model.ckpt";
  save_checkpoint(p.string(), m);
  Model back = load_checkpoint(p.string());

  REQUIRE(back.cfg.block == BlockKind::Bottleneck);
  REQUIRE(back.cfg.channels == cfg.channels);
  REQUIRE(back.cfg.bottleneck_k == 2);
  REQUIRE(back.param_order == m.param_order);
  REQUIRE(back.norm_sites == m.norm_sites);
  for (const std::string& name : m.param_order)
    REQUIRE(back.params.at(name).bitwise_equal(m.params.at(name)));
  for (const std::string& site : m.norm_sites) {
    REQUIRE(back.running.at(site).mean.bitwise_equal(m.running.at(site).mean));
    REQUIRE(back.running.at(site).var.bitwise_equal(m.running.at(site).var));
  }
}

TEST_CASE("saving the same state twice produces identical files") {
  UNetConfig cfg;
  cfg.levels = 2;
  cfg.channels = {4, 8};
  Model m = build_model(cfg, 5);
  const fs::path a = scratch() / "twice-a.ckpt";
  const fs::path b = scratch() / "twice-b.ckpt";
  save_checkpoint(a.string(), m);
  save_checkpoint(b.string(), m);
  REQUIRE(slurp(a) == slurp(b));
}

TEST_CASE("damaged checkpoints are rejected with a format error") {
  UNetConfig cfg;
  cfg.levels = 2;
  cfg.channels = {4, 8};
  Model m = build_model(cfg, 5);
  const fs::path good = scratch() / "dmg.ckpt";
  save_checkpoint(good.string(), m);
  const std::string bytes = slurp(good);

  SECTION("truncated before the header length") {
    const fs::path p = scratch() / "dmg-a.ckpt";
    spit(p, bytes.substr(0, 4));
    REQUIRE_THROWS_AS(load_checkpoint(p.string()), FormatError);
  }
  SECTION("truncated inside the payload") {
    const fs::path p = scratch() / "dmg-b.ckpt";
    spit(p, bytes.substr(0, bytes.size() - 16));
    REQUIRE_THROWS_AS(load_checkpoint(p.string()), FormatError);
  }
  SECTION("header is not json") {
    std::string bad = bytes;
    bad[8] = '!';
    const fs::path p = scratch() / "dmg-c.ckpt";
    spit(p, bad);
    REQUIRE_THROWS_AS(load_checkpoint(p.string()), FormatError);
  }
}
