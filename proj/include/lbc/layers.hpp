#pragma once

// The three networks of the block codec, all operating on the block grid:
//
//   analysis    y      = t_a(x_j, ctx)   fuses the current block with its causal
//                                        reconstructed neighbours, then 1x1 stages
//   synthesis   x_hat  = t_s(y_hat, ctx) mirror of the analysis transform
//   entropy     mu,sig = n(ctx)          Gaussian parameters for every latent
//
// Context enters only through type-A masked 3x3 convolutions (upper-left,
// upper, upper-right, left neighbours), so every output at grid site (r, c)
// depends on ctx only at sites that precede (r, c) in raster order. Grid sites
// outside the image read as zero blocks (conv zero padding).
//
// Layer stacks, with widths from HyperParams:
//   t_a: [1x1(x) + maskA(ctx)] N -> GDN -> 1x1 N1 -> GDN -> 1x1 N2 -> GDN -> 1x1 M
//   t_s: [1x1(y) + maskA(ctx)] M1 -> IGDN -> 1x1 M2 -> IGDN -> 1x1 M3 -> IGDN -> 1x1 3B^2
//   n:   maskA N2 -> LReLU -> K2xK2 (maskB when 3x3) N2 -> LReLU -> 1x1 2M

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lbc/autodiff.hpp"

namespace lbc {

inline constexpr std::array<double, 8> kLambdaTable = {0.0018, 0.0035, 0.0067, 0.0130,
                                                       0.0250, 0.0483, 0.0932, 0.1800};
inline constexpr std::uint8_t kCustomLambdaIndex = 0xFF;
inline constexpr std::uint8_t kCustomHps = 0;

inline constexpr float kSigmaMin = 0.04f;
inline constexpr float kLeakySlope = 0.01f;
inline constexpr double kGdnBetaOffset = 1e-6;

struct HyperParams {
  int block = 8;
  int n = 768;
  int m = 96;
  int k2 = 1;
  double lambda = 0.0067;
  std::uint8_t hps_id = kCustomHps;
  std::uint8_t lambda_index = kCustomLambdaIndex;

  int n1() const { return 7 * n / 8; }
  int n2() const { return 6 * n / 8; }
  int m1() const { return 6 * n / 4; }
  int m2() const { return 5 * n / 4; }
  int m3() const { return 4 * n / 4; }
  int pixel_channels() const { return 3 * block * block; }
  // Grid radius of n(.)'s causal receptive field (1 with a 1x1 interior layer).
  int entropy_context_radius() const { return k2 == 3 ? 2 : 1; }

  // Throws Error unless B in {4, 8, 16}, K2 in {1, 3}, N % 8 == 0, M >= 1.
  void validate() const;

  // The two published configurations; lambda taken from kLambdaTable.
  static HyperParams hps1(int lambda_index);
  static HyperParams hps2(int lambda_index);

  bool operator==(const HyperParams&) const = default;
};

enum class MaskType { A, B };

// 3x3 tap flags: type A = upper row + left; type B adds the centre.
ad::TapMask causal_mask(MaskType type);

template <typename T>
class BasicModel {
 public:
  using ParamMap = std::map<std::string, ad::Var<T>>;

  BasicModel() = default;
  BasicModel(HyperParams hps, std::uint64_t seed, ParamMap params);

  // Fan-in scaled uniform weights from `seed`; GDN starts near identity.
  static BasicModel initialize(const HyperParams& hps, std::uint64_t seed);

  const HyperParams& hps() const { return hps_; }
  std::uint64_t seed() const { return seed_; }

  const ad::Var<T>& param(const std::string& name) const;
  ad::Var<T>& param(const std::string& name);
  const ParamMap& params() const { return params_; }
  ParamMap& params() { return params_; }
  std::vector<ad::Var<T>> parameter_list() const;
  std::size_t parameter_count() const;

  void zero_grad();

  // Deep copy with converted parameter values (fresh leaves).
  template <typename U>
  BasicModel<U> cast() const {
    typename BasicModel<U>::ParamMap out;
    for (const auto& [name, v] : params_) out.emplace(name, ad::parameter(v.value().template cast<U>()));
    return BasicModel<U>(hps_, seed_, std::move(out));
  }
  BasicModel clone() const { return cast<T>(); }

 private:
  HyperParams hps_;
  std::uint64_t seed_ = 0;
  ParamMap params_;
};

using Model = BasicModel<float>;

// Throws DimensionError unless the weight is 3x3.
template <typename T>
ad::Var<T> masked_conv(const ad::Var<T>& ctx, const ad::Var<T>& weight, const ad::Var<T>& bias,
                       MaskType type);

// y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2), per grid site.
// beta: C; gamma: C x C x 1 x 1.
template <typename T>
ad::Var<T> gdn(const ad::Var<T>& x, const ad::Var<T>& beta, const ad::Var<T>& gamma);

// y_i = x_i * sqrt(beta_i + sum_j gamma_ij x_j^2).
template <typename T>
ad::Var<T> igdn(const ad::Var<T>& x, const ad::Var<T>& beta, const ad::Var<T>& gamma);

// Stored GDN parameters are unconstrained: beta = raw^2 + 1e-6, gamma = raw^2.
template <typename T>
ad::Var<T> gdn_beta(const ad::Var<T>& raw);
template <typename T>
ad::Var<T> gdn_gamma(const ad::Var<T>& raw);

// x_blocks, ctx: 3B^2 x Hb x Wb. Returns M x Hb x Wb.
template <typename T>
ad::Var<T> analysis_ta(const ad::Var<T>& x_blocks, const ad::Var<T>& ctx,
                       const BasicModel<T>& model);

// y_hat: M x Hb x Wb. Returns 3B^2 x Hb x Wb, clamped to [0, 1] when
// clamp_output is set (the training loss uses the unclamped output).
template <typename T>
ad::Var<T> synthesis_ts(const ad::Var<T>& y_hat, const ad::Var<T>& ctx,
                        const BasicModel<T>& model, bool clamp_output);

template <typename T>
struct GaussianParams {
  ad::Var<T> mu;
  ad::Var<T> sigma;  // >= kSigmaMin
};

template <typename T>
GaussianParams<T> entropy_net_n(const ad::Var<T>& ctx, const BasicModel<T>& model);

// Checkpoint bytes: header + parameters sorted by name, little-endian f32.
std::vector<std::uint8_t> save_checkpoint(const Model& model);
Model load_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint_file(const Model& model, const std::string& path);
Model load_checkpoint_file(const std::string& path);
// FNV-1a 64 of the checkpoint bytes; stored in every bitstream header.
std::uint64_t model_checksum(const Model& model);

}  // namespace lbc
