#include "lbc/layers.hpp"

#include <cmath>

#include "lbc/bytes.hpp"
#include "lbc/blocks.hpp"
#include "lbc/random.hpp"

namespace lbc {

using ad::Var;

void HyperParams::validate() const {
  if (block != 4 && block != 8 && block != 16) {
    throw Error("block size must be 4, 8 or 16, got " + std::to_string(block));
  }
  if (k2 != 1 && k2 != 3) throw Error("K2 must be 1 or 3, got " + std::to_string(k2));
  if (n < 8 || n % 8 != 0) throw Error("N must be a positive multiple of 8, got " + std::to_string(n));
  if (m < 1) throw Error("M must be >= 1");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw Error("lambda must be finite and >= 0");
}

HyperParams HyperParams::hps1(int lambda_index) {
  if (lambda_index < 0 || lambda_index >= static_cast<int>(kLambdaTable.size())) {
    throw Error("lambda index must be in [0, 7], got " + std::to_string(lambda_index));
  }
  HyperParams h;
  h.block = 8;
  h.n = 768;
  h.m = 96;
  h.k2 = 1;
  h.hps_id = 1;
  h.lambda_index = static_cast<std::uint8_t>(lambda_index);
  h.lambda = kLambdaTable.at(static_cast<std::size_t>(lambda_index));
  return h;
}

HyperParams HyperParams::hps2(int lambda_index) {
  HyperParams h = hps1(lambda_index);
  h.n = 1152;
  h.m = 128;
  h.k2 = 3;
  h.hps_id = 2;
  return h;
}

ad::TapMask causal_mask(MaskType type) {
  return {1, 1, 1, 1, static_cast<std::uint8_t>(type == MaskType::B ? 1 : 0), 0, 0, 0, 0};
}

template <typename T>
BasicModel<T>::BasicModel(HyperParams hps, std::uint64_t seed, ParamMap params)
    : hps_(hps), seed_(seed), params_(std::move(params)) {}

namespace {

template <typename T>
class Initializer {
 public:
  Initializer(std::uint64_t seed, typename BasicModel<T>::ParamMap& out) : rng_(seed), out_(out) {}

  // Uniform(+-1/sqrt(fan_in)) over enabled taps; disabled taps stay zero.
  void conv(const std::string& name, int cout, int cin, int k, const ad::TapMask& mask,
            bool with_bias, float bias_value = 0.0f) {
    int active = 0;
    for (int t = 0; t < k * k; ++t) active += mask.empty() || mask[t] ? 1 : 0;
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * active));
    Tensor<T> w(Shape{cout, cin, k, k});
    std::size_t i = 0;
    for (int co = 0; co < cout; ++co) {
      for (int ci = 0; ci < cin; ++ci) {
        for (int t = 0; t < k * k; ++t, ++i) {
          const double v = rng_.uniform(-bound, bound);
          w[i] = (mask.empty() || mask[t]) ? static_cast<T>(v) : T(0);
        }
      }
    }
    out_.emplace(name + ".weight", ad::parameter(std::move(w)));
    if (with_bias) out_.emplace(name + ".bias", ad::parameter(Tensor<T>(Shape{cout}, T(bias_value))));
  }

  // beta = 1 + 1e-6, gamma = 0.1 on the diagonal and 1e-4 elsewhere.
  void gdn(const std::string& name, int c) {
    out_.emplace(name + ".beta", ad::parameter(Tensor<T>(Shape{c}, T(1))));
    Tensor<T> g(Shape{c, c, 1, 1}, static_cast<T>(0.01));
    for (int i = 0; i < c; ++i) g[static_cast<std::size_t>(i * c + i)] = static_cast<T>(std::sqrt(0.1));
    out_.emplace(name + ".gamma", ad::parameter(std::move(g)));
  }

 private:
  Rng rng_;
  typename BasicModel<T>::ParamMap& out_;
};

}  // namespace

template <typename T>
BasicModel<T> BasicModel<T>::initialize(const HyperParams& hps, std::uint64_t seed) {
  hps.validate();
  ParamMap p;
  Initializer<T> init(seed, p);
  const int c = hps.pixel_channels();
  const auto mask_a = causal_mask(MaskType::A);
  const auto mask_k2 = hps.k2 == 3 ? causal_mask(MaskType::B) : ad::TapMask{};

  init.conv("ta.fuse_x", hps.n, c, 1, {}, true);
  init.conv("ta.fuse_ctx", hps.n, c, 3, mask_a, false);
  init.gdn("ta.gdn0", hps.n);
  init.conv("ta.conv1", hps.n1(), hps.n, 1, {}, true);
  init.gdn("ta.gdn1", hps.n1());
  init.conv("ta.conv2", hps.n2(), hps.n1(), 1, {}, true);
  init.gdn("ta.gdn2", hps.n2());
  init.conv("ta.conv3", hps.m, hps.n2(), 1, {}, true);

  init.conv("ts.fuse_y", hps.m1(), hps.m, 1, {}, true);
  init.conv("ts.fuse_ctx", hps.m1(), c, 3, mask_a, false);
  init.gdn("ts.igdn0", hps.m1());
  init.conv("ts.conv1", hps.m2(), hps.m1(), 1, {}, true);
  init.gdn("ts.igdn1", hps.m2());
  init.conv("ts.conv2", hps.m3(), hps.m2(), 1, {}, true);
  init.gdn("ts.igdn2", hps.m3());
  init.conv("ts.conv3", c, hps.m3(), 1, {}, true, 0.5f);

  init.conv("n.conv0", hps.n2(), c, 3, mask_a, true);
  init.conv("n.conv1", hps.n2(), hps.n2(), hps.k2, mask_k2, true);
  init.conv("n.conv2", 2 * hps.m, hps.n2(), 1, {}, true);
  // Start scales near 1 rather than at the floor.
  auto& nb = p.at("n.conv2.bias").mutable_value();
  for (int i = hps.m; i < 2 * hps.m; ++i) nb[static_cast<std::size_t>(i)] = T(1);

  return BasicModel(hps, seed, std::move(p));
}

template <typename T>
const Var<T>& BasicModel<T>::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error("model has no parameter '" + name + "'");
  return it->second;
}

template <typename T>
Var<T>& BasicModel<T>::param(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error("model has no parameter '" + name + "'");
  return it->second;
}

template <typename T>
std::vector<Var<T>> BasicModel<T>::parameter_list() const {
  std::vector<Var<T>> out;
  for (const auto& [name, v] : params_) out.push_back(v);
  return out;
}

template <typename T>
std::size_t BasicModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : params_) n += v.numel();
  return n;
}

template <typename T>
void BasicModel<T>::zero_grad() {
  for (auto& [name, v] : params_) v.zero_grad();
}

template <typename T>
Var<T> masked_conv(const Var<T>& ctx, const Var<T>& weight, const Var<T>& bias, MaskType type) {
  if (weight.shape().size() != 4 || weight.shape()[2] != 3 || weight.shape()[3] != 3) {
    throw DimensionError("masked_conv needs a 3x3 kernel, got " + shape_str(weight.shape()));
  }
  return ad::conv2d(ctx, weight, bias, 1, causal_mask(type));
}

template <typename T>
Var<T> gdn_beta(const Var<T>& raw) {
  return ad::add_scalar(ad::square(raw), static_cast<T>(kGdnBetaOffset));
}

template <typename T>
Var<T> gdn_gamma(const Var<T>& raw) {
  return ad::square(raw);
}

template <typename T>
Var<T> gdn(const Var<T>& x, const Var<T>& beta, const Var<T>& gamma) {
  auto norm = ad::sqrt(ad::conv2d(ad::square(x), gamma, beta, 0));
  return ad::div(x, norm);
}

template <typename T>
Var<T> igdn(const Var<T>& x, const Var<T>& beta, const Var<T>& gamma) {
  auto norm = ad::sqrt(ad::conv2d(ad::square(x), gamma, beta, 0));
  return ad::mul(x, norm);
}

namespace {

template <typename T>
Var<T> conv1x1(const Var<T>& x, const BasicModel<T>& m, const std::string& name) {
  return ad::conv2d(x, m.param(name + ".weight"), m.param(name + ".bias"), 0);
}

template <typename T>
Var<T> gdn_layer(const Var<T>& x, const BasicModel<T>& m, const std::string& name, bool inverse) {
  auto beta = gdn_beta(m.param(name + ".beta"));
  auto gamma = gdn_gamma(m.param(name + ".gamma"));
  return inverse ? igdn(x, beta, gamma) : gdn(x, beta, gamma);
}

void check_grids(const Shape& a, const Shape& b, std::int64_t a_channels, std::int64_t b_channels,
                 const char* who) {
  if (a.size() != 3 || b.size() != 3 || a[1] != b[1] || a[2] != b[2] || a[0] != a_channels ||
      b[0] != b_channels) {
    throw DimensionError(std::string(who) + ": grid mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
  }
}

}  // namespace

template <typename T>
Var<T> analysis_ta(const Var<T>& x_blocks, const Var<T>& ctx, const BasicModel<T>& model) {
  const auto& h = model.hps();
  check_grids(x_blocks.shape(), ctx.shape(), h.pixel_channels(), h.pixel_channels(), "analysis_ta");
  auto v = ad::add(conv1x1(x_blocks, model, "ta.fuse_x"),
                   masked_conv(ctx, model.param("ta.fuse_ctx.weight"), Var<T>(), MaskType::A));
  v = gdn_layer(v, model, "ta.gdn0", false);
  v = conv1x1(v, model, "ta.conv1");
  v = gdn_layer(v, model, "ta.gdn1", false);
  v = conv1x1(v, model, "ta.conv2");
  v = gdn_layer(v, model, "ta.gdn2", false);
  return conv1x1(v, model, "ta.conv3");
}

template <typename T>
Var<T> synthesis_ts(const Var<T>& y_hat, const Var<T>& ctx, const BasicModel<T>& model,
                    bool clamp_output) {
  const auto& h = model.hps();
  check_grids(y_hat.shape(), ctx.shape(), h.m, h.pixel_channels(), "synthesis_ts");
  auto v = ad::add(conv1x1(y_hat, model, "ts.fuse_y"),
                   masked_conv(ctx, model.param("ts.fuse_ctx.weight"), Var<T>(), MaskType::A));
  v = gdn_layer(v, model, "ts.igdn0", true);
  v = conv1x1(v, model, "ts.conv1");
  v = gdn_layer(v, model, "ts.igdn1", true);
  v = conv1x1(v, model, "ts.conv2");
  v = gdn_layer(v, model, "ts.igdn2", true);
  v = conv1x1(v, model, "ts.conv3");
  return clamp_output ? ad::clamp(v, T(0), T(1)) : v;
}

template <typename T>
GaussianParams<T> entropy_net_n(const Var<T>& ctx, const BasicModel<T>& model) {
  const auto& h = model.hps();
  if (ctx.shape().size() != 3 || ctx.shape()[0] != h.pixel_channels()) {
    throw DimensionError("entropy_net_n: context shape " + shape_str(ctx.shape()));
  }
  auto v = masked_conv(ctx, model.param("n.conv0.weight"), model.param("n.conv0.bias"), MaskType::A);
  v = ad::leaky_relu(v, static_cast<T>(kLeakySlope));
  if (h.k2 == 3) {
    v = masked_conv(v, model.param("n.conv1.weight"), model.param("n.conv1.bias"), MaskType::B);
  } else {
    v = conv1x1(v, model, "n.conv1");
  }
  v = ad::leaky_relu(v, static_cast<T>(kLeakySlope));
  v = conv1x1(v, model, "n.conv2");
  GaussianParams<T> out;
  out.mu = ad::slice_channels(v, 0, h.m);
  out.sigma = ad::clamp_min(ad::slice_channels(v, h.m, 2 * h.m), static_cast<T>(kSigmaMin));
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "LBCM" | version u8 | scan order u8 | hps id u8 | lambda index u8 |
//   B u16 | N u32 | M u32 | K2 u8 | lambda f64 | seed u64 | count u32 |
//   count x { name_len u16 | name | rank u8 | dims u32 x rank | f32 x numel }

namespace {
constexpr char kCheckpointMagic[] = "LBCM";
constexpr std::uint8_t kCheckpointVersion = 1;
}  // namespace

std::vector<std::uint8_t> save_checkpoint(const Model& model) {
  const auto& h = model.hps();
  ByteWriter w;
  w.raw(std::string_view(kCheckpointMagic, 4));
  w.u8(kCheckpointVersion);
  w.u8(kScanOrderColorRowCol);
  w.u8(h.hps_id);
  w.u8(h.lambda_index);
  w.u16(static_cast<std::uint16_t>(h.block));
  w.u32(static_cast<std::uint32_t>(h.n));
  w.u32(static_cast<std::uint32_t>(h.m));
  w.u8(static_cast<std::uint8_t>(h.k2));
  w.f64(h.lambda);
  w.u64(model.seed());
  w.u32(static_cast<std::uint32_t>(model.params().size()));
  for (const auto& [name, v] : model.params()) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.raw(name);
    const auto& t = v.value();
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float f : t.data()) w.f32(f);
  }
  return w.take();
}

Model load_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.str(4) != std::string_view(kCheckpointMagic, 4)) throw DataError("not a checkpoint (bad magic)");
  if (r.u8() != kCheckpointVersion) throw DataError("unsupported checkpoint version");
  if (r.u8() != kScanOrderColorRowCol) throw DataError("unsupported intra-block scan order");
  HyperParams h;
  h.hps_id = r.u8();
  h.lambda_index = r.u8();
  h.block = r.u16();
  h.n = static_cast<int>(r.u32());
  h.m = static_cast<int>(r.u32());
  h.k2 = r.u8();
  h.lambda = r.f64();
  const std::uint64_t seed = r.u64();
  try {
    h.validate();
  } catch (const Error& e) {
    throw DataError(std::string("checkpoint hyper-parameters: ") + e.what());
  }
  const std::uint32_t count = r.u32();
  Model::ParamMap params;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u16());
    Shape shape(r.u8());
    for (auto& d : shape) d = r.u32();
    std::vector<float> data(shape_numel(shape));
    for (auto& f : data) f = r.f32();
    params.emplace(std::move(name), ad::parameter(Tensor<float>(std::move(shape), std::move(data))));
  }
  if (r.remaining() != 0) throw DataError("trailing bytes after checkpoint");

  // Every expected parameter must be present with the expected shape.
  const Model reference = Model::initialize(h, 0);
  if (reference.params().size() != params.size()) throw DataError("checkpoint parameter set mismatch");
  for (const auto& [name, v] : reference.params()) {
    auto it = params.find(name);
    if (it == params.end() || it->second.shape() != v.shape()) {
      throw DataError("checkpoint parameter '" + name + "' missing or misshapen");
    }
  }
  return Model(h, seed, std::move(params));
}

void save_checkpoint_file(const Model& model, const std::string& path) {
  write_file(path, save_checkpoint(model));
}

Model load_checkpoint_file(const std::string& path) { return load_checkpoint(read_file(path)); }

std::uint64_t model_checksum(const Model& model) { return fnv1a64(save_checkpoint(model)); }

#define LBC_INSTANTIATE(T)                                                                     \
  template class BasicModel<T>;                                                               \
  template Var<T> masked_conv(const Var<T>&, const Var<T>&, const Var<T>&, MaskType);        \
  template Var<T> gdn(const Var<T>&, const Var<T>&, const Var<T>&);                          \
  template Var<T> igdn(const Var<T>&, const Var<T>&, const Var<T>&);                         \
  template Var<T> gdn_beta(const Var<T>&);                                                   \
  template Var<T> gdn_gamma(const Var<T>&);                                                  \
  template Var<T> analysis_ta(const Var<T>&, const Var<T>&, const BasicModel<T>&);           \
  template Var<T> synthesis_ts(const Var<T>&, const Var<T>&, const BasicModel<T>&, bool);    \
  template GaussianParams<T> entropy_net_n(const Var<T>&, const BasicModel<T>&);

LBC_INSTANTIATE(float)
LBC_INSTANTIATE(double)

#undef LBC_INSTANTIATE

}  // namespace lbc
