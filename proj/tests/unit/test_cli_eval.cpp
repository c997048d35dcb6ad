#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include "lbc/bytes.hpp"
#include "lbc/codec.hpp"
#include "lbc/eval.hpp"
#include "lbc/image_io.hpp"
#include "lbc/metrics.hpp"
#include "test_util.hpp"

namespace lbc {
namespace {

namespace fs = std::filesystem;

TEST(Metrics, PsnrValues) {
  const auto a = ImageRGB::filled(4, 4, 0.5f);
  EXPECT_TRUE(is_infinite_psnr(psnr(a, a)));
  auto b = a;
  // One sample off by one level out of 48: MSE = 1/48.
  b.at(0, 0, 0) = 0.5f + 1.0f / 255.0f;
  EXPECT_NEAR(psnr(a, b), 10.0 * std::log10(255.0 * 255.0 * 48.0), 1e-3);
  EXPECT_NEAR(psnr(a, ImageRGB::filled(4, 4, 0.5f + 1.0f / 255.0f)), 48.1308, 1e-3);

  Rng rng(1);
  const auto x = test::random_image(8, 8, rng), y = test::random_image(8, 8, rng);
  EXPECT_DOUBLE_EQ(psnr(x, y), psnr(y, x));
  EXPECT_THROW(psnr(x, test::random_image(8, 9, rng)), DimensionError);
}

TEST(Metrics, PsnrOfUniformErrorOfTen) {
  const auto a = ImageRGB::filled(3, 5, 100.0f / 255.0f);
  const auto b = ImageRGB::filled(3, 5, 110.0f / 255.0f);
  EXPECT_NEAR(psnr(a, b), 28.1308, 1e-3);
  EXPECT_NEAR(mse_255(a, b), 100.0, 1e-3);
}

TEST(Eval, CsvRoundTrip) {
  std::vector<RDPoint> rows = {{"a.png", "m", 2, 0.123456789012345678, 31.5},
                               {"b.png", "m", 2, 1.0 / 3.0, std::numeric_limits<double>::infinity()},
                               {kAverageRow, "m", 2, 0.2, 40.0}};
  const auto csv = rd_table_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "image,model,lambda_index,bpp,psnr");
  EXPECT_NE(csv.find(",inf"), std::string::npos);
  EXPECT_EQ(parse_rd_csv(csv), rows);
  EXPECT_THROW(parse_rd_csv("image,model\nx,y\n"), Error);
}

TEST(Eval, AveragesIndependently) {
  const auto model = Model::initialize(test::tiny_hps(8, 8, 2, 1), 1);
  const std::vector<ImageRGB> imgs = {synthetic_image(16, 16, 1), synthetic_image(24, 16, 2)};
  const auto rows = evaluate_model(model, "m", {"x", "y"}, imgs);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[2].image, kAverageRow);
  EXPECT_DOUBLE_EQ(rows[2].bpp, (rows[0].bpp + rows[1].bpp) / 2);
  EXPECT_DOUBLE_EQ(rows[2].psnr, (rows[0].psnr + rows[1].psnr) / 2);

  const auto single = evaluate_model(model, "m", {"x"}, {imgs[0]});
  EXPECT_EQ(single[1].bpp, single[0].bpp);
  EXPECT_EQ(single[1].psnr, single[0].psnr);
  EXPECT_THROW(evaluate_model(model, "m", {}, {}), Error);
  EXPECT_THROW(evaluate_model(model, "m", {"x", "y"}, {imgs[0]}), Error);
}

class ImageIo : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / "lbc_io_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

TEST_F(ImageIo, PngAndPpmRoundTrip) {
  const auto img = synthetic_image(13, 17, 4);  // already on the 8-bit grid
  for (const char* name : {"a.png", "a.ppm"}) {
    const auto p = (dir_ / name).string();
    write_image(p, img);
    const auto back = read_image(p);
    EXPECT_EQ(back.data.shape(), img.data.shape());
    EXPECT_EQ(to_rgb8(back), to_rgb8(img)) << name;
    EXPECT_EQ(test::vec(back.data), test::vec(img.data)) << name;
  }
  EXPECT_EQ(list_images(dir_.string()).size(), 2u);
}

TEST_F(ImageIo, GrayIsReplicated) {
  const auto p = (dir_ / "g.pgm").string();
  const std::string pgm = std::string("P5\n2 1\n255\n") + char(0) + char(255);
  write_file(p, std::vector<std::uint8_t>(pgm.begin(), pgm.end()));
  const auto img = read_image(p);
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(img.at(c, 0, 0), 0.0f);
    EXPECT_EQ(img.at(c, 0, 1), 1.0f);
  }
}

TEST_F(ImageIo, UnreadableIsDataError) {
  EXPECT_THROW(read_image((dir_ / "missing.png").string()), DataError);
  const auto p = (dir_ / "junk.png").string();
  write_file(p, std::vector<std::uint8_t>{1, 2, 3});
  EXPECT_THROW(read_image(p), DataError);
}

TEST(ImageIo8, QuantizationRoundsHalfAway) {
  auto img = ImageRGB::filled(1, 1, 0.0f);
  img.at(0, 0, 0) = 0.5f / 255.0f;
  img.at(1, 0, 0) = 0.49f / 255.0f;
  img.at(2, 0, 0) = 1.0f;
  const auto q = to_rgb8(img);
  EXPECT_EQ(q, (std::vector<std::uint8_t>{1, 0, 255}));
}

// ---------------------------------------------------------------------------
// Command line

struct Run {
  int code;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(LBC_CLI_PATH) + " " + args + " 2>/dev/null";
  FILE* p = popen(cmd.c_str(), "r");
  std::string out;
  char buf[512];
  while (std::fgets(buf, sizeof buf, p)) out += buf;
  const int status = pclose(p);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

double field(const std::string& out, const std::string& key) {
  std::istringstream in(out);
  std::string k;
  double v;
  while (in >> k >> v) {
    if (k == key) return v;
  }
  return std::nan("");
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / "lbc_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const char* name) const { return (dir_ / name).string(); }
  fs::path dir_;
};

TEST_F(Cli, EncodeDecodeMatchesInMemory) {
  ASSERT_EQ(run("init -o " + path("m.lbcm") + " --block 8 --n 16 --m 4 --seed 3").code, 0);
  const auto img = synthetic_image(30, 41, 7);
  write_image(path("in.png"), img);

  const auto enc = run("encode -m " + path("m.lbcm") + " -i " + path("in.png") + " -o " + path("x.lbc"));
  ASSERT_EQ(enc.code, 0);
  const double size = static_cast<double>(fs::file_size(path("x.lbc")));
  EXPECT_NEAR(field(enc.out, "bpp"), 8.0 * size / (30.0 * 41.0), 1e-6);

  ASSERT_EQ(run("decode -m " + path("m.lbcm") + " -i " + path("x.lbc") + " -o " + path("out.png")).code, 0);
  const auto model = load_checkpoint_file(path("m.lbcm"));
  const auto expect = quantize_8bit(decode_image(read_file(path("x.lbc")), model).image);
  EXPECT_EQ(test::vec(read_image(path("out.png")).data), test::vec(expect.data));

  const auto info = run("info -i " + path("x.lbc"));
  EXPECT_EQ(info.code, 0);
  EXPECT_EQ(field(info.out, "block"), 8.0);
}

TEST_F(Cli, ErrorsMapToExitCodes) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("encode -m only").code, 1);
  EXPECT_EQ(run("init -o " + path("bad.lbcm") + " --block 5").code, 1);

  ASSERT_EQ(run("init -o " + path("a.lbcm") + " --block 4 --n 8 --m 2 --seed 1").code, 0);
  ASSERT_EQ(run("init -o " + path("b.lbcm") + " --block 4 --n 8 --m 2 --seed 2").code, 0);
  write_image(path("in.png"), synthetic_image(8, 8, 1));
  ASSERT_EQ(run("encode -m " + path("a.lbcm") + " -i " + path("in.png") + " -o " + path("x.lbc")).code, 0);
  EXPECT_EQ(run("decode -m " + path("b.lbcm") + " -i " + path("x.lbc") + " -o " + path("o.png")).code, 2);
  EXPECT_EQ(run("encode -m " + path("a.lbcm") + " -i " + path("nope.png") + " -o " + path("y.lbc")).code, 2);
  EXPECT_EQ(run("eval -m " + path("a.lbcm") + " -d " + path("empty_dir")).code, 2);

  write_file(path("bad.json"), std::vector<std::uint8_t>{'{', '}'});
  EXPECT_EQ(run("train --config " + path("bad.json")).code, 1);
}

TEST_F(Cli, EvalPrintsTable) {
  ASSERT_EQ(run("init -o " + path("a.lbcm") + " --block 4 --n 8 --m 2").code, 0);
  ASSERT_EQ(run("synth -o " + path("imgs") + " --count 2 --height 16 --width 16").code, 0);
  const auto r = run("eval -m " + path("a.lbcm") + " -d " + path("imgs") + " -o -");
  ASSERT_EQ(r.code, 0);
  const auto rows = parse_rd_csv(r.out);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[2].image, kAverageRow);
}

}  // namespace
}  // namespace lbc
