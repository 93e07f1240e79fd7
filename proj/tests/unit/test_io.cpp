#include <gtest/gtest.h>

#include <cstring>
#include <fstream>
#include <iterator>

#include "rawshield/errors.hpp"
#include "rawshield/io.hpp"
#include "rawshield/rng.hpp"
#include "rawshield/synthetic.hpp"

using namespace rawshield;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::path(testing::TempDir()) / "rawshield_io";
  fs::create_directories(dir);
  return dir / name;
}

std::string bytes_of(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST(Png, HalfQuantizesTo128) {
  EXPECT_EQ(io::quantize(0.5), 128);
  EXPECT_EQ(io::quantize(-0.2), 0);
  EXPECT_EQ(io::quantize(1.7), 255);
  ImagePlane img(4, 6, 3, ColorDomain::SrgbNonlinear);
  img.data().setConstant(0.5);
  const auto path = scratch("half.png");
  io::write_png(path, img);
  const ImagePlane back = io::read_png(path);
  ASSERT_EQ(back.height(), 4);
  ASSERT_EQ(back.width(), 6);
  ASSERT_EQ(back.channels(), 3);
  for (Index i = 0; i < back.data().size(); ++i) EXPECT_DOUBLE_EQ(back.data()[i], 128.0 / 255.0);
  EXPECT_NEAR(back.data()[0], 0.50196, 1e-5);
}

TEST(Png, NoColorChunks) {
  ImagePlane img(2, 2, 3, ColorDomain::SrgbNonlinear);
  img.data().setConstant(0.25);
  const auto path = scratch("chunks.png");
  io::write_png(path, img);
  const std::string b = bytes_of(path);
  EXPECT_EQ(b.find("sRGB"), std::string::npos);
  EXPECT_EQ(b.find("gAMA"), std::string::npos);
  EXPECT_EQ(b.find("iCCP"), std::string::npos);
}

TEST(Png, RoundTripWithinQuantization) {
  CounterRng rng(5);
  const ImagePlane img = procedural_patch(32, rng);
  const auto path = scratch("patch.png");
  io::write_png(path, img);
  const ImagePlane back = io::read_png(path);
  EXPECT_LE((back.data() - img.data()).abs().maxCoeff(), 0.5 / 255.0 + 1e-12);
  EXPECT_EQ(back.data().matrix(), io::quantize_image(img).data().matrix());
}

TEST(Png, GarbageIsFormatError) {
  const auto path = scratch("garbage.png");
  write_bytes(path, "definitely not a png");
  EXPECT_THROW(io::read_png(path), FormatError);
  EXPECT_THROW(io::read_png(scratch("missing.png")), IoError);
}

TEST(Adt1, BayerRoundTripBitExact) {
  CounterRng rng(9);
  BayerPlane raw(6, 8);
  for (Index y = 0; y < 6; ++y)
    for (Index x = 0; x < 8; ++x) raw(y, x) = static_cast<double>(static_cast<float>(rng.uniform(-0.1, 1.2)));
  const auto path = scratch("raw.adt1");
  io::save_bayer(path, raw);
  const BayerPlane back = io::load_bayer(path);
  ASSERT_EQ(back.height(), 6);
  ASSERT_EQ(back.width(), 8);
  EXPECT_EQ(std::memcmp(back.data().data(), raw.data().data(), sizeof(double) * 48), 0);
}

TEST(Adt1, NamedTensorsAndMeta) {
  std::vector<io::NamedArray> ts{{"a", {2, 3}, {1, 2, 3, 4, 5, 6}}, {"b", {}, {7.5f}}, {"c", {0}, {}}};
  const auto path = scratch("named.adt1");
  io::save_adt1(path, ts, {{"note", "x"}});
  const auto back = io::load_adt1(path);
  ASSERT_EQ(back.tensors.size(), 3u);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    EXPECT_EQ(back.tensors[i].name, ts[i].name);
    EXPECT_EQ(back.tensors[i].shape, ts[i].shape);
    EXPECT_EQ(back.tensors[i].data, ts[i].data);
  }
  EXPECT_EQ(back.meta.at("note"), "x");
}

TEST(Adt1, HeaderLayout) {
  const auto path = scratch("layout.adt1");
  io::save_adt1(path, {{"t", {1, 2}, {1.0f, -2.0f}}});
  const std::string b = bytes_of(path);
  ASSERT_EQ(b.size(), 4u + 4u + 1u + 8u + 8u);
  EXPECT_EQ(b.substr(0, 4), "ADT1");
  EXPECT_EQ(static_cast<unsigned char>(b[4]), 1);
  EXPECT_EQ(static_cast<unsigned char>(b[8]), 2);
  float second = 0;
  std::memcpy(&second, b.data() + 21, 4);
  EXPECT_EQ(second, -2.0f);
}

TEST(Adt1, FailureContract) {
  BayerPlane raw(4, 4);
  raw.data().setConstant(0.25);
  const auto path = scratch("victim.adt1");
  io::save_bayer(path, raw);
  const std::string good = bytes_of(path);

  std::string bad = good;
  bad[0] = 'X';
  write_bytes(path, bad);
  EXPECT_THROW(io::load_bayer(path), FormatError);

  for (std::size_t cut : {std::size_t{2}, std::size_t{6}, std::size_t{10}, good.size() - 1}) {
    write_bytes(path, good.substr(0, cut));
    EXPECT_THROW(io::load_bayer(path), FormatError) << "cut at " << cut;
  }

  write_bytes(path, good + "z");
  EXPECT_THROW(io::load_bayer(path), FormatError);

  // Extents claiming far more data than the file holds.
  std::string huge = good;
  const std::uint32_t big = 0x7fffffffu;
  std::memcpy(huge.data() + 9, &big, 4);
  write_bytes(path, huge);
  EXPECT_THROW(io::load_bayer(path), FormatError);

  EXPECT_THROW(io::load_adt1(scratch("nothing.adt1")), IoError);
}

TEST(Text, WriteReadReplace) {
  const auto path = scratch("note.txt");
  io::write_text(path, "one");
  io::write_text(path, "two\n");
  EXPECT_EQ(io::read_text(path), "two\n");
  EXPECT_THROW(io::read_text(scratch("absent.txt")), IoError);
}
