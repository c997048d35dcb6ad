#include "lbc/training.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "lbc/bytes.hpp"
#include "lbc/codec.hpp"
#include "lbc/image_io.hpp"
#include "lbc/metrics.hpp"

namespace lbc {

namespace fs = std::filesystem;
using ad::Var;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  hps.validate();
  if (!(hps.lambda >= 0.0)) throw Error("lambda must be >= 0");
  if (patch < hps.block || patch % hps.block != 0) throw Error("patch must be a positive multiple of the block size");
  if (batch < 1) throw Error("batch must be >= 1");
  if (!(lr_init > 0.0) || !(lr_min > 0.0) || lr_min > lr_init) throw Error("need 0 < lr_min <= lr_init");
  if (!(lr_factor > 0.0 && lr_factor < 1.0)) throw Error("lr_factor must lie in (0, 1)");
  if (plateau_patience < 1 || steps_per_epoch < 1 || sgd_steps_per_acl < 1) {
    throw Error("plateau_patience, steps_per_epoch and sgd_steps_per_acl must be >= 1");
  }
  if (acl_min_iters < 1 || acl_max_iters < acl_min_iters) throw Error("need 1 <= acl_min_iters <= acl_max_iters");
  if (finetune_iters < 0) throw Error("finetune_iters must be >= 0");
  const bool synthetic = synthetic_train > 0;
  if (!synthetic && (train_dir.empty() || val_dir.empty())) {
    throw Error("set train_dir and val_dir, or synthetic_train and synthetic_val");
  }
  if (synthetic && (synthetic_val < 1 || synthetic_height < 1 || synthetic_width < 1)) {
    throw Error("synthetic data needs synthetic_val >= 1 and positive dimensions");
  }
}

TrainConfig TrainConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error("config must be a JSON object");
  TrainConfig c;
  try {
    const std::string preset = j.value("hps", std::string("custom"));
    if (preset == "hps1" || preset == "hps2") {
      const int li = j.at("lambda_index").get<int>();
      c.hps = preset == "hps1" ? HyperParams::hps1(li) : HyperParams::hps2(li);
      if (j.contains("block")) c.hps.block = j["block"].get<int>();
    } else if (preset == "custom") {
      c.hps.block = j.value("block", c.hps.block);
      c.hps.n = j.value("n", c.hps.n);
      c.hps.m = j.value("m", c.hps.m);
      c.hps.k2 = j.value("k2", c.hps.k2);
      c.hps.lambda = j.value("lambda", c.hps.lambda);
      c.hps.hps_id = kCustomHps;
      c.hps.lambda_index = kCustomLambdaIndex;
    } else {
      throw Error("unknown hps preset '" + preset + "'");
    }
    static const char* kKnown[] = {"hps", "lambda_index", "block", "n", "m", "k2", "lambda", "seed",
                                   "train_dir", "val_dir", "synthetic_train", "synthetic_val",
                                   "synthetic_height", "synthetic_width", "patch", "batch",
                                   "lr_init", "lr_factor", "lr_min", "plateau_patience",
                                   "plateau_threshold", "steps_per_epoch", "sgd_steps_per_acl",
                                   "acl_min_iters", "acl_max_iters", "acl_tolerance",
                                   "finetune_iters", "run_dir"};
    for (const auto& [key, _] : j.items()) {
      if (std::find(std::begin(kKnown), std::end(kKnown), key) == std::end(kKnown)) {
        throw Error("unknown config key '" + key + "'");
      }
    }
    c.seed = j.value("seed", c.seed);
    c.train_dir = j.value("train_dir", c.train_dir);
    c.val_dir = j.value("val_dir", c.val_dir);
    c.synthetic_train = j.value("synthetic_train", c.synthetic_train);
    c.synthetic_val = j.value("synthetic_val", c.synthetic_val);
    c.synthetic_height = j.value("synthetic_height", c.synthetic_height);
    c.synthetic_width = j.value("synthetic_width", c.synthetic_width);
    c.patch = j.value("patch", c.patch);
    c.batch = j.value("batch", c.batch);
    c.lr_init = j.value("lr_init", c.lr_init);
    c.lr_factor = j.value("lr_factor", c.lr_factor);
    c.lr_min = j.value("lr_min", c.lr_min);
    c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
    c.plateau_threshold = j.value("plateau_threshold", c.plateau_threshold);
    c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
    c.sgd_steps_per_acl = j.value("sgd_steps_per_acl", c.sgd_steps_per_acl);
    c.acl_min_iters = j.value("acl_min_iters", c.acl_min_iters);
    c.acl_max_iters = j.value("acl_max_iters", c.acl_max_iters);
    c.acl_tolerance = j.value("acl_tolerance", c.acl_tolerance);
    c.finetune_iters = j.value("finetune_iters", c.finetune_iters);
    c.run_dir = j.value("run_dir", c.run_dir);
  } catch (const json::exception& e) {
    throw Error(std::string("bad config value: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

std::string TrainConfig::to_json_text() const {
  json j;
  if (hps.hps_id == 1 || hps.hps_id == 2) {
    j["hps"] = hps.hps_id == 1 ? "hps1" : "hps2";
    j["lambda_index"] = hps.lambda_index;
  } else {
    j["hps"] = "custom";
    j["n"] = hps.n;
    j["m"] = hps.m;
    j["k2"] = hps.k2;
    j["lambda"] = hps.lambda;
  }
  j["block"] = hps.block;
  j["seed"] = seed;
  if (!train_dir.empty()) j["train_dir"] = train_dir;
  if (!val_dir.empty()) j["val_dir"] = val_dir;
  if (synthetic_train > 0) {
    j["synthetic_train"] = synthetic_train;
    j["synthetic_val"] = synthetic_val;
    j["synthetic_height"] = synthetic_height;
    j["synthetic_width"] = synthetic_width;
  }
  j["patch"] = patch;
  j["batch"] = batch;
  j["lr_init"] = lr_init;
  j["lr_factor"] = lr_factor;
  j["lr_min"] = lr_min;
  j["plateau_patience"] = plateau_patience;
  j["plateau_threshold"] = plateau_threshold;
  j["steps_per_epoch"] = steps_per_epoch;
  j["sgd_steps_per_acl"] = sgd_steps_per_acl;
  j["acl_min_iters"] = acl_min_iters;
  j["acl_max_iters"] = acl_max_iters;
  j["acl_tolerance"] = acl_tolerance;
  j["finetune_iters"] = finetune_iters;
  if (!run_dir.empty()) j["run_dir"] = run_dir;
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Differentiable pieces

template <typename T>
OpenLoopOutput<T> open_loop_forward(const Var<T>& x_blocks, const Var<T>& ctx_blocks,
                                    const BasicModel<T>& model, const Tensor<T>* noise) {
  OpenLoopOutput<T> out;
  out.y = analysis_ta(x_blocks, ctx_blocks, model);
  if (noise) {
    if (noise->shape() != out.y.shape()) {
      throw DimensionError("open_loop_forward: noise shape " + shape_str(noise->shape()) +
                           " does not match latents " + shape_str(out.y.shape()));
    }
    out.y_tilde = ad::add(out.y, ad::constant(*noise));
  } else {
    Tensor<T> r = out.y.value();
    for (auto& v : r.data()) v = std::round(v);
    out.y_tilde = ad::constant(std::move(r));
  }
  out.gp = entropy_net_n(ctx_blocks, model);
  out.x_tilde = synthesis_ts(out.y_tilde, ctx_blocks, model, false);
  return out;
}

template <typename T>
Var<T> rd_cost(const Var<T>& x_blocks, const OpenLoopOutput<T>& out, double lambda, double pixels) {
  auto rate = ad::scale(rate_bits(gaussian_likelihood(out.y_tilde, out.gp.mu, out.gp.sigma)),
                        static_cast<T>(1.0 / pixels));
  auto mse = ad::mean(ad::square(ad::sub(out.x_tilde, x_blocks)));
  return ad::add(rate, ad::scale(mse, static_cast<T>(lambda * 255.0 * 255.0)));
}

template <typename T>
Var<T> finetune_cost(const Var<T>& x_blocks, const Var<T>& ctx_blocks, const BasicModel<T>& model,
                     const Tensor<T>& noise0, const Tensor<T>& noise1, double lambda,
                     double pixels) {
  const auto first = open_loop_forward(x_blocks, ctx_blocks, model, &noise0);
  auto cost0 = rd_cost(x_blocks, first, lambda, pixels);
  const auto ctx1 = ad::clamp(first.x_tilde, T(0), T(1));
  const auto second = open_loop_forward(x_blocks, ctx1, model, &noise1);
  auto cost1 = rd_cost(x_blocks, second, lambda, pixels);
  return ad::add(ad::scale(cost0, T(0.5)), ad::scale(cost1, T(0.5)));
}

#define LBC_TRAIN_INSTANTIATE(T)                                                                  \
  template OpenLoopOutput<T> open_loop_forward(const Var<T>&, const Var<T>&, const BasicModel<T>&, \
                                               const Tensor<T>*);                                  \
  template Var<T> rd_cost(const Var<T>&, const OpenLoopOutput<T>&, double, double);               \
  template Var<T> finetune_cost(const Var<T>&, const Var<T>&, const BasicModel<T>&,               \
                                const Tensor<T>&, const Tensor<T>&, double, double);
LBC_TRAIN_INSTANTIATE(float)
LBC_TRAIN_INSTANTIATE(double)
#undef LBC_TRAIN_INSTANTIATE

// ---------------------------------------------------------------------------
// Optimizer and schedule

void Adam::step(std::map<std::string, Var<float>>& params) {
  for (const auto& [name, p] : params) {
    if (p.has_grad() && !p.grad().all_finite()) {
      throw NumericError("non-finite gradient for parameter " + name);
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  for (auto& [name, p] : params) {
    auto& value = p.mutable_value();
    auto [mit, mnew] = m_.try_emplace(name, Tensor<double>(value.shape()));
    auto [vit, vnew] = v_.try_emplace(name, Tensor<double>(value.shape()));
    (void)mnew;
    (void)vnew;
    auto& m = mit->second;
    auto& v = vit->second;
    if (m.shape() != value.shape()) throw DimensionError("Adam: moment shape mismatch for " + name);
    const bool has = p.has_grad();
    for (std::size_t i = 0; i < value.numel(); ++i) {
      const double g = has ? static_cast<double>(p.grad()[i]) : 0.0;
      m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g;
      v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g * g;
      const double mhat = m[i] / bc1, vhat = v[i] / bc2;
      value[i] = static_cast<float>(static_cast<double>(value[i]) - lr_ * mhat / (std::sqrt(vhat) + kEps));
    }
  }
}

std::vector<std::uint8_t> Adam::serialize() const {
  ByteWriter w;
  w.raw("ADAM");
  w.f64(lr_);
  w.u64(static_cast<std::uint64_t>(t_));
  w.u32(static_cast<std::uint32_t>(m_.size()));
  for (const auto& [name, m] : m_) {
    const auto& v = v_.at(name);
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.raw(name);
    w.u8(static_cast<std::uint8_t>(m.rank()));
    for (auto d : m.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double x : m.data()) w.f64(x);
    for (double x : v.data()) w.f64(x);
  }
  return w.take();
}

Adam Adam::deserialize(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.str(4) != "ADAM") throw DataError("not an optimizer state");
  Adam a(r.f64());
  a.t_ = static_cast<std::int64_t>(r.u64());
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.u16());
    Shape shape(r.u8());
    for (auto& d : shape) d = r.u32();
    Tensor<double> m(shape), v(shape);
    for (auto& x : m.data()) x = r.f64();
    for (auto& x : v.data()) x = r.f64();
    a.m_.emplace(name, std::move(m));
    a.v_.emplace(name, std::move(v));
  }
  if (r.remaining() != 0) throw DataError("trailing bytes in optimizer state");
  return a;
}

PlateauScheduler::Event PlateauScheduler::observe(double metric, double& lr) {
  if (metric < best_ * (1.0 - threshold_) || !std::isfinite(best_)) {
    best_ = metric;
    bad_ = 0;
    return Event::kImproved;
  }
  if (++bad_ < patience_) return Event::kNone;
  bad_ = 0;
  if (lr <= min_lr_) return Event::kExhausted;
  lr = std::max(lr * factor_, min_lr_);
  return Event::kReduced;
}

// ---------------------------------------------------------------------------
// Data

namespace {
std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  i %= period;
  return i < n ? i : period - i;
}

ImageRGB crop(const ImageRGB& img, std::int64_t y0, std::int64_t x0, std::int64_t h, std::int64_t w) {
  ImageRGB out = ImageRGB::filled(h, w, 0.0f);
  for (std::int64_t c = 0; c < 3; ++c) {
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
    }
  }
  return out;
}
}  // namespace

ImageRGB reflect_pad(const ImageRGB& img, std::int64_t height, std::int64_t width) {
  height = std::max(height, img.height());
  width = std::max(width, img.width());
  ImageRGB out = ImageRGB::filled(height, width, 0.0f);
  for (std::int64_t c = 0; c < 3; ++c) {
    for (std::int64_t y = 0; y < height; ++y) {
      const std::int64_t sy = reflect_index(y, img.height());
      for (std::int64_t x = 0; x < width; ++x) out.at(c, y, x) = img.at(c, sy, reflect_index(x, img.width()));
    }
  }
  return out;
}

Batch crop_batch(const std::vector<ImageRGB>& xs, const std::vector<ImageRGB>& x_hats, int patch,
                 int batch, int block, Rng& rng) {
  if (xs.empty()) throw Error("crop_batch: empty image set");
  if (xs.size() != x_hats.size()) throw DimensionError("crop_batch: image and reconstruction sets differ in size");
  if (block < 1 || patch < block || patch % block != 0) throw Error("crop_batch: patch must be a multiple of the block size");
  Batch b;
  for (int i = 0; i < batch; ++i) {
    const std::size_t idx = static_cast<std::size_t>(rng.below(xs.size()));
    const ImageRGB* x = &xs[idx];
    const ImageRGB* xh = &x_hats[idx];
    if (x->data.shape() != xh->data.shape()) {
      throw DimensionError("crop_batch: image " + std::to_string(idx) + " and its reconstruction differ in size");
    }
    ImageRGB xp, xhp;
    if (x->height() < patch || x->width() < patch) {
      xp = reflect_pad(*x, patch, patch);
      xhp = reflect_pad(*xh, patch, patch);
      x = &xp;
      xh = &xhp;
    }
    const std::int64_t ny = (x->height() - patch) / block + 1;
    const std::int64_t nx = (x->width() - patch) / block + 1;
    const std::int64_t y0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(ny))) * block;
    const std::int64_t x0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(nx))) * block;
    b.x.push_back(crop(*x, y0, x0, patch, patch));
    b.x_hat.push_back(crop(*xh, y0, x0, patch, patch));
    b.index.push_back(idx);
    b.origin.emplace_back(y0, x0);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Validation and regeneration

namespace {
struct PaddedPair {
  BlockTensor x, ctx;
  PadInfo pad;
};

PaddedPair pad_pair(const ImageRGB& x, const ImageRGB& x_hat, int block) {
  if (x.data.shape() != x_hat.data.shape()) {
    throw DimensionError("image and reconstruction differ in size: " + shape_str(x.data.shape()) +
                         " vs " + shape_str(x_hat.data.shape()));
  }
  auto [xp, pad] = pad_to_block_multiple(x, block);
  auto [xhp, pad2] = pad_to_block_multiple(x_hat, block);
  (void)pad2;
  return {b2c(xp, block), b2c(xhp, block), pad};
}
}  // namespace

double closed_loop_cost(const Model& model, const ImageRGB& x, double lambda) {
  const auto enc = encode_image(x, model);
  return enc.stats.estimated_bpp + lambda * mse_255(x, enc.recon_image);
}

double open_loop_cost(const Model& model, const ImageRGB& x, const ImageRGB& x_hat, double lambda) {
  ad::NoGradGuard no_grad;
  const auto p = pad_pair(x, x_hat, model.hps().block);
  const auto out = open_loop_forward(ad::constant(p.x.data), ad::constant(p.ctx.data), model,
                                     static_cast<const Tensor<float>*>(nullptr));
  double bits = 0.0;
  const auto& yt = out.y_tilde.value();
  for (std::size_t i = 0; i < yt.numel(); ++i) {
    bits -= std::log2(std::max(gaussian_bin_probability(yt[i], out.gp.mu.value()[i], out.gp.sigma.value()[i]),
                               kLikelihoodFloor));
  }
  Tensor<float> rec = out.x_tilde.value();
  for (auto& v : rec.data()) v = std::clamp(v, 0.0f, 1.0f);
  const ImageRGB recon = crop_to_original(c2b(rec, model.hps().block), p.pad);
  return bits / static_cast<double>(x.pixels()) + lambda * mse_255(x, recon);
}

ImageRGB regenerate(const Model& model, const ImageRGB& x, const ImageRGB& x_hat) {
  ad::NoGradGuard no_grad;
  const auto p = pad_pair(x, x_hat, model.hps().block);
  const auto out = open_loop_forward(ad::constant(p.x.data), ad::constant(p.ctx.data), model,
                                     static_cast<const Tensor<float>*>(nullptr));
  Tensor<float> rec = out.x_tilde.value();
  for (auto& v : rec.data()) v = std::clamp(v, 0.0f, 1.0f);
  return crop_to_original(c2b(rec, model.hps().block), p.pad);
}

// ---------------------------------------------------------------------------
// ACL driver

namespace {

constexpr char kStateMagic[] = "LBCS";
constexpr std::uint8_t kStateVersion = 1;

struct DriverState {
  Model model;
  Model main_model;
  Adam adam;
  AclState acl;
  AclPhase phase = AclPhase::kMain;
  int finetune_done = 0;
  std::int64_t global_step = 0;
};

void write_image_tensor(ByteWriter& w, const ImageRGB& img) {
  w.u32(static_cast<std::uint32_t>(img.height()));
  w.u32(static_cast<std::uint32_t>(img.width()));
  for (float v : img.data.data()) w.f32(v);
}

ImageRGB read_image_tensor(ByteReader& r) {
  const std::int64_t h = r.u32(), w = r.u32();
  Tensor<float> t(Shape{3, h, w});
  for (auto& v : t.data()) v = r.f32();
  return ImageRGB(std::move(t));
}

void write_blob(ByteWriter& w, const std::vector<std::uint8_t>& blob) {
  w.u64(blob.size());
  w.raw(blob);
}

std::span<const std::uint8_t> read_blob(ByteReader& r) { return r.take(r.u64()); }

std::vector<std::uint8_t> serialize_state(const DriverState& s) {
  ByteWriter w;
  w.raw(std::string_view(kStateMagic, 4));
  w.u8(kStateVersion);
  write_blob(w, save_checkpoint(s.model));
  const bool has_main = s.phase == AclPhase::kFinetune;
  w.u8(has_main ? 1 : 0);
  if (has_main) write_blob(w, save_checkpoint(s.main_model));
  write_blob(w, s.adam.serialize());
  w.u32(static_cast<std::uint32_t>(s.acl.k));
  w.u8(s.phase == AclPhase::kMain ? 0 : 1);
  w.u32(static_cast<std::uint32_t>(s.finetune_done));
  w.u64(static_cast<std::uint64_t>(s.global_step));
  w.u32(static_cast<std::uint32_t>(s.acl.history.size()));
  for (const auto& rec : s.acl.history) {
    w.u32(static_cast<std::uint32_t>(rec.k));
    w.u8(rec.phase == AclPhase::kMain ? 0 : 1);
    w.f64(rec.closed_cost);
    w.f64(rec.open_cost);
    w.u64(static_cast<std::uint64_t>(rec.steps));
  }
  w.u32(static_cast<std::uint32_t>(s.acl.recon_train.size()));
  for (const auto& img : s.acl.recon_train) write_image_tensor(w, img);
  w.u32(static_cast<std::uint32_t>(s.acl.recon_val.size()));
  for (const auto& img : s.acl.recon_val) write_image_tensor(w, img);
  return w.take();
}

DriverState deserialize_state(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.str(4) != std::string_view(kStateMagic, 4)) throw DataError("not a training state file");
  if (r.u8() != kStateVersion) throw DataError("unsupported training state version");
  DriverState s;
  s.model = load_checkpoint(read_blob(r));
  if (r.u8() != 0) s.main_model = load_checkpoint(read_blob(r));
  s.adam = Adam::deserialize(read_blob(r));
  s.acl.k = static_cast<int>(r.u32());
  s.phase = r.u8() == 0 ? AclPhase::kMain : AclPhase::kFinetune;
  s.finetune_done = static_cast<int>(r.u32());
  s.global_step = static_cast<std::int64_t>(r.u64());
  const std::uint32_t nh = r.u32();
  for (std::uint32_t i = 0; i < nh; ++i) {
    AclRecord rec;
    rec.k = static_cast<int>(r.u32());
    rec.phase = r.u8() == 0 ? AclPhase::kMain : AclPhase::kFinetune;
    rec.closed_cost = r.f64();
    rec.open_cost = r.f64();
    rec.steps = static_cast<std::int64_t>(r.u64());
    s.acl.history.push_back(rec);
  }
  for (auto* set : {&s.acl.recon_train, &s.acl.recon_val}) {
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) set->push_back(read_image_tensor(r));
  }
  if (r.remaining() != 0) throw DataError("trailing bytes in training state");
  return s;
}

const char* phase_name(AclPhase p) { return p == AclPhase::kMain ? "main" : "finetune"; }

void append_line(const fs::path& path, const std::string& header, const std::string& line) {
  const bool fresh = !fs::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw DataError("cannot write " + path.string());
  if (fresh) out << header << '\n';
  out << line << '\n';
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss << std::setprecision(10) << v;
  return ss.str();
}

double mean_cost(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double val_open_cost(const Model& model, const std::vector<ImageRGB>& val,
                     const std::vector<ImageRGB>& recon, double lambda) {
  std::vector<double> costs;
  for (std::size_t i = 0; i < val.size(); ++i) costs.push_back(open_loop_cost(model, val[i], recon[i], lambda));
  return mean_cost(costs);
}

double val_closed_cost(const Model& model, const std::vector<ImageRGB>& val, double lambda) {
  std::vector<double> costs;
  for (const auto& x : val) costs.push_back(closed_loop_cost(model, x, lambda));
  return mean_cost(costs);
}

// One SGD step on a fresh batch; returns the batch loss.
double sgd_step(DriverState& s, const std::vector<ImageRGB>& train, const TrainConfig& cfg,
                bool finetune) {
  ++s.global_step;
  Rng rng = Rng::from_words({cfg.seed, static_cast<std::uint64_t>(s.global_step)});
  const int block = s.model.hps().block;
  const Batch b = crop_batch(train, s.acl.recon_train, cfg.patch, cfg.batch, block, rng);
  const double pixels = static_cast<double>(cfg.patch) * cfg.patch;
  const double lambda = s.model.hps().lambda;

  s.model.zero_grad();
  Var<float> total;
  for (std::size_t i = 0; i < b.x.size(); ++i) {
    auto x = ad::constant(b2c(b.x[i], block).data);
    auto ctx = ad::constant(b2c(b.x_hat[i], block).data);
    const Shape lshape{s.model.hps().m, x.shape()[1], x.shape()[2]};
    const auto u0 = uniform_noise(lshape, rng);
    Var<float> cost;
    if (finetune) {
      const auto u1 = uniform_noise(lshape, rng);
      cost = finetune_cost(x, ctx, s.model, u0, u1, lambda, pixels);
    } else {
      cost = rd_cost(x, open_loop_forward(x, ctx, s.model, &u0), lambda, pixels);
    }
    total = total ? ad::add(total, cost) : cost;
  }
  auto loss = ad::scale(total, 1.0f / static_cast<float>(b.x.size()));
  ad::backward(loss);
  s.adam.step(s.model.params());
  return static_cast<double>(loss.value().item());
}

}  // namespace

std::pair<std::vector<ImageRGB>, std::vector<ImageRGB>> load_datasets(const TrainConfig& cfg) {
  std::vector<ImageRGB> train, val;
  if (cfg.synthetic_train > 0) {
    for (int i = 0; i < cfg.synthetic_train; ++i) {
      train.push_back(synthetic_image(cfg.synthetic_height, cfg.synthetic_width, cfg.seed * 1000003ull + static_cast<std::uint64_t>(i)));
    }
    for (int i = 0; i < cfg.synthetic_val; ++i) {
      val.push_back(synthetic_image(cfg.synthetic_height, cfg.synthetic_width, cfg.seed * 1000003ull + 500000ull + static_cast<std::uint64_t>(i)));
    }
    return {train, val};
  }
  for (const auto& p : list_images(cfg.train_dir)) train.push_back(read_image(p));
  for (const auto& p : list_images(cfg.val_dir)) val.push_back(read_image(p));
  if (train.empty()) throw DataError("no images in " + cfg.train_dir);
  if (val.empty()) throw DataError("no images in " + cfg.val_dir);
  return {train, val};
}

AclResult acl_train(const std::vector<ImageRGB>& train, const std::vector<ImageRGB>& val,
                    const TrainConfig& cfg, const AclHooks& hooks) {
  cfg.validate();
  if (train.empty() || val.empty()) throw Error("acl_train needs non-empty training and validation sets");

  const bool write = !cfg.run_dir.empty();
  const fs::path dir(cfg.run_dir);
  const fs::path state_path = dir / "state.bin";
  DriverState s;
  if (write && fs::exists(state_path)) {
    s = deserialize_state(read_file(state_path.string()));
    if (!(s.model.hps() == cfg.hps)) throw Error("run directory holds a state for different hyper-parameters");
    if (s.acl.recon_train.size() != train.size() || s.acl.recon_val.size() != val.size()) {
      throw Error("run directory holds a state for a different dataset");
    }
  } else {
    s.model = Model::initialize(cfg.hps, cfg.seed);
    s.adam = Adam(cfg.lr_init);
    s.acl.recon_train = train;  // x_hat^(0) = x
    s.acl.recon_val = val;
    if (write) {
      fs::create_directories(dir);
      std::ofstream(dir / "config.json") << cfg.to_json_text() << '\n';
    }
  }

  const double lambda = cfg.hps.lambda;
  PlateauScheduler sched(cfg.lr_factor, cfg.lr_min, cfg.plateau_patience, cfg.plateau_threshold);
  int completed = 0;

  while (!(s.phase == AclPhase::kFinetune && s.finetune_done >= cfg.finetune_iters)) {
    const bool finetune = s.phase == AclPhase::kFinetune;
    sched.reset();
    AclRecord rec;
    rec.k = s.acl.k;
    rec.phase = s.phase;

    int epoch = 0;
    while (rec.steps < cfg.sgd_steps_per_acl) {
      const std::int64_t n = std::min<std::int64_t>(cfg.steps_per_epoch, cfg.sgd_steps_per_acl - rec.steps);
      double loss_sum = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        try {
          loss_sum += sgd_step(s, train, cfg, finetune);
        } catch (const NumericError&) {
          if (write) save_checkpoint_file(s.model, (dir / "last_good.lbcm").string());
          throw;
        }
      }
      rec.steps += n;
      ++epoch;
      const double val_cost = val_open_cost(s.model, val, s.acl.recon_val, lambda);
      double lr = s.adam.lr();
      const auto ev = sched.observe(val_cost, lr);
      s.adam.set_lr(lr);
      if (write) {
        append_line(dir / "epochs.csv", "k,phase,epoch,step,train_loss,val_open_cost,lr",
                    std::to_string(rec.k) + "," + phase_name(rec.phase) + "," + std::to_string(epoch) +
                        "," + std::to_string(s.global_step) + "," + fmt(loss_sum / static_cast<double>(n)) +
                        "," + fmt(val_cost) + "," + fmt(s.adam.lr()));
      }
      if (ev == PlateauScheduler::Event::kExhausted) break;
    }

    rec.closed_cost = val_closed_cost(s.model, val, lambda);
    rec.open_cost = val_open_cost(s.model, val, s.acl.recon_val, lambda);
    s.acl.history.push_back(rec);
    if (write) {
      append_line(dir / "acl.csv", "k,phase,closed_cost,open_cost,steps",
                  std::to_string(rec.k) + "," + phase_name(rec.phase) + "," + fmt(rec.closed_cost) + "," +
                      fmt(rec.open_cost) + "," + std::to_string(rec.steps));
      save_checkpoint_file(s.model, (dir / ("ckpt_k" + std::to_string(rec.k) + ".lbcm")).string());
    }
    if (hooks.on_iteration) hooks.on_iteration(rec, s.model);

    if (finetune) {
      ++s.finetune_done;
    } else {
      const int done = s.acl.k + 1;
      bool converged = false;
      const auto& h = s.acl.history;
      if (h.size() >= 3) {
        const double prev = h[h.size() - 3].closed_cost;
        converged = std::abs(rec.closed_cost - prev) < cfg.acl_tolerance * std::abs(prev);
      }
      if (done >= cfg.acl_max_iters || (done >= cfg.acl_min_iters && converged)) {
        s.phase = AclPhase::kFinetune;
        s.main_model = s.model.clone();
      }
    }

    // x_hat^(k+1) from x_hat^(k) with the model just trained.
    for (std::size_t i = 0; i < train.size(); ++i) {
      s.acl.recon_train[i] = regenerate(s.model, train[i], s.acl.recon_train[i]);
    }
    for (std::size_t i = 0; i < val.size(); ++i) {
      s.acl.recon_val[i] = regenerate(s.model, val[i], s.acl.recon_val[i]);
    }
    ++s.acl.k;
    if (write) {
      const auto bytes = serialize_state(s);
      const fs::path tmp = dir / "state.bin.tmp";
      write_file(tmp.string(), bytes);
      fs::rename(tmp, state_path);
    }
    ++completed;
    if (hooks.stop_after && completed >= *hooks.stop_after) break;
  }

  if (write) save_checkpoint_file(s.model, (dir / "model.lbcm").string());
  AclResult out;
  out.model = std::move(s.model);
  out.main_model = s.phase == AclPhase::kFinetune ? std::move(s.main_model) : out.model.clone();
  out.state = std::move(s.acl);
  return out;
}

}  // namespace lbc
