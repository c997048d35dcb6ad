// lbc: train, encode, decode, evaluate and inspect.
//
// Exit codes: 0 ok, 1 usage, 2 data error, 3 internal error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "lbc/bytes.hpp"
#include "lbc/codec.hpp"
#include "lbc/eval.hpp"
#include "lbc/image_io.hpp"
#include "lbc/layers.hpp"
#include "lbc/training.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitInternal = 3;

// Config problems are usage errors; everything else keeps its category.
struct UsageError : lbc::Error {
  using lbc::Error::Error;
};

int cmd_train(const std::string& config_path) {
  lbc::TrainConfig cfg;
  try {
    cfg = lbc::TrainConfig::from_json_file(config_path);
  } catch (const lbc::DataError&) {
    throw;
  } catch (const lbc::Error& e) {
    throw UsageError(e.what());
  }
  if (cfg.run_dir.empty()) throw UsageError("config must set run_dir");
  auto [train, val] = lbc::load_datasets(cfg);
  lbc::AclHooks hooks;
  hooks.on_iteration = [](const lbc::AclRecord& r, const lbc::Model&) {
    std::cout << "k=" << r.k << (r.phase == lbc::AclPhase::kMain ? " main" : " finetune")
              << " closed=" << r.closed_cost << " open=" << r.open_cost << " steps=" << r.steps
              << std::endl;
  };
  lbc::acl_train(train, val, cfg, hooks);
  std::cout << "run directory: " << cfg.run_dir << '\n';
  return kExitOk;
}

int cmd_encode(const std::string& model_path, const std::string& in, const std::string& out) {
  const auto model = lbc::load_checkpoint_file(model_path);
  const auto img = lbc::read_image(in);
  const auto enc = lbc::encode_image(img, model);
  lbc::write_file(out, enc.bytes);
  std::cout << std::fixed << std::setprecision(6) << "bytes " << enc.bytes.size() << "\nbpp "
            << enc.stats.bpp << "\nestimated_bpp " << enc.stats.estimated_bpp << "\npsnr "
            << enc.stats.psnr << '\n';
  return kExitOk;
}

int cmd_decode(const std::string& model_path, const std::string& in, const std::string& out) {
  const auto model = lbc::load_checkpoint_file(model_path);
  const auto bytes = lbc::read_file(in);
  const auto dec = lbc::decode_image(bytes, model);
  lbc::write_image(out, dec.image);
  std::cout << "decoded " << dec.header.orig_w << "x" << dec.header.orig_h << " -> " << out << '\n';
  return kExitOk;
}

int cmd_eval(const std::vector<std::string>& models, const std::string& dir, const std::string& out) {
  const auto images = lbc::list_images(dir);
  if (images.empty()) throw lbc::DataError("no images in " + dir);
  std::vector<std::string> ids;
  std::vector<lbc::ImageRGB> data;
  for (const auto& p : images) {
    ids.push_back(std::filesystem::path(p).filename().string());
    data.push_back(lbc::read_image(p));
  }
  std::vector<lbc::RDPoint> rows;
  for (const auto& mp : models) {
    const auto model = lbc::load_checkpoint_file(mp);
    const auto pts = lbc::evaluate_model(model, std::filesystem::path(mp).filename().string(), ids, data);
    rows.insert(rows.end(), pts.begin(), pts.end());
  }
  const std::string csv = lbc::rd_table_csv(rows);
  if (out.empty() || out == "-") {
    std::cout << csv;
  } else {
    std::ofstream f(out);
    if (!f) throw lbc::DataError("cannot write " + out);
    f << csv;
  }
  return kExitOk;
}

int cmd_info(const std::string& in) {
  const auto bytes = lbc::read_file(in);
  const auto h = lbc::BitstreamHeader::parse(bytes);
  std::cout << "version " << int(h.version) << "\nhps_id " << int(h.hps_id) << "\nlambda_index "
            << int(h.lambda_index) << "\nblock " << h.block << "\norig " << h.orig_w << "x" << h.orig_h
            << "\npadded " << h.padded_w << "x" << h.padded_h << "\nmodel_checksum " << std::hex
            << std::setw(16) << std::setfill('0') << h.model_checksum << std::dec << "\npayload_bytes "
            << h.payload_length << "\nbpp " << std::setprecision(6)
            << 8.0 * static_cast<double>(bytes.size()) / (double(h.orig_h) * h.orig_w) << '\n';
  return kExitOk;
}

int cmd_init(const std::string& out, int block, int n, int m, int k2, double lambda, std::uint64_t seed) {
  lbc::HyperParams h;
  h.block = block;
  h.n = n;
  h.m = m;
  h.k2 = k2;
  h.lambda = lambda;
  try {
    h.validate();
  } catch (const lbc::Error& e) {
    throw UsageError(e.what());
  }
  lbc::save_checkpoint_file(lbc::Model::initialize(h, seed), out);
  return kExitOk;
}

int cmd_synth(const std::string& dir, int count, int height, int width, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  for (int i = 0; i < count; ++i) {
    std::ostringstream name;
    name << "synth_" << std::setw(3) << std::setfill('0') << i << ".png";
    lbc::write_image((std::filesystem::path(dir) / name.str()).string(),
                     lbc::synthetic_image(height, width, seed + static_cast<std::uint64_t>(i)));
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learned block-based image codec"};
  app.require_subcommand(1);

  std::string config;
  auto* train = app.add_subcommand("train", "Run ACL training from a JSON config");
  train->add_option("--config", config, "Config file")->required();

  std::string model, in, out;
  auto* encode = app.add_subcommand("encode", "Compress an image");
  encode->add_option("-m,--model", model)->required();
  encode->add_option("-i,--input", in)->required();
  encode->add_option("-o,--output", out)->required();

  auto* decode = app.add_subcommand("decode", "Decompress a bitstream");
  decode->add_option("-m,--model", model)->required();
  decode->add_option("-i,--input", in)->required();
  decode->add_option("-o,--output", out)->required();

  std::vector<std::string> models;
  std::string dataset;
  auto* eval = app.add_subcommand("eval", "Per-image and average RD points as CSV");
  eval->add_option("-m,--model", models)->required();
  eval->add_option("-d,--dataset", dataset)->required();
  eval->add_option("-o,--output", out, "CSV path, '-' for stdout");

  auto* info = app.add_subcommand("info", "Print a bitstream header");
  info->add_option("-i,--input", in)->required();

  int block = 8, n = 48, m = 8, k2 = 1, count = 8, height = 96, width = 96;
  double lambda = 0.01;
  std::uint64_t seed = 1;
  auto* init = app.add_subcommand("init", "Write a randomly initialized model");
  init->add_option("-o,--output", out)->required();
  init->add_option("--block", block);
  init->add_option("--n", n);
  init->add_option("--m", m);
  init->add_option("--k2", k2);
  init->add_option("--lambda", lambda);
  init->add_option("--seed", seed);

  auto* synth = app.add_subcommand("synth", "Write generated test images");
  synth->add_option("-o,--output", out, "Directory")->required();
  synth->add_option("--count", count);
  synth->add_option("--height", height);
  synth->add_option("--width", width);
  synth->add_option("--seed", seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train) return cmd_train(config);
    if (*encode) return cmd_encode(model, in, out);
    if (*decode) return cmd_decode(model, in, out);
    if (*eval) return cmd_eval(models, dataset, out);
    if (*info) return cmd_info(in);
    if (*init) return cmd_init(out, block, n, m, k2, lambda, seed);
    if (*synth) return cmd_synth(out, count, height, width, seed);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const lbc::DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitUsage;
}
