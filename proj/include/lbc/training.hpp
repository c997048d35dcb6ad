#pragma once

// Open-loop training of the block codec and the asymptotic closed loop (ACL)
// outer iteration around it.
//
// Open loop: the context of every block is taken from a fixed reconstruction
// set x_hat^(k) instead of the codec's own output, so a whole image (or crop)
// goes through the networks in one pass. ACL alternates open-loop SGD with
// regeneration of x_hat^(k+1) by the freshly trained model, starting from
// x_hat^(0) = x. Validation compares the open-loop cost with the cost of the
// real closed-loop codec.
//
// Cost unit: rate in bits per original pixel plus lambda * MSE on the [0, 255]
// scale, averaged over images.

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lbc/blocks.hpp"
#include "lbc/layers.hpp"
#include "lbc/quant_entropy.hpp"
#include "lbc/random.hpp"

namespace lbc {

struct TrainConfig {
  HyperParams hps;
  std::uint64_t seed = 1;

  // Data: directories of images, or generated content when the counts are set.
  std::string train_dir, val_dir;
  int synthetic_train = 0, synthetic_val = 0;
  int synthetic_height = 96, synthetic_width = 96;

  int patch = 64;
  int batch = 4;

  double lr_init = 1e-4;
  double lr_factor = 0.8;
  double lr_min = 2e-5;
  int plateau_patience = 5;
  double plateau_threshold = 1e-3;  // relative improvement that resets patience
  int steps_per_epoch = 100;

  int sgd_steps_per_acl = 2000;
  int acl_min_iters = 4;
  int acl_max_iters = 8;
  double acl_tolerance = 0.005;  // relative closed-loop cost change over two iterations
  int finetune_iters = 2;

  std::string run_dir;  // empty: no files written

  // Throws Error on inconsistent values.
  void validate() const;

  static TrainConfig from_json_text(const std::string& text);
  static TrainConfig from_json_file(const std::string& path);
  std::string to_json_text() const;
};

// ---------------------------------------------------------------------------
// Differentiable pieces (float for training, double for gradient checks).

template <typename T>
struct OpenLoopOutput {
  ad::Var<T> y;        // analysis output
  ad::Var<T> y_tilde;  // y + u with the given noise, or round(y) as a constant
  ad::Var<T> x_tilde;  // synthesis output, unclamped
  GaussianParams<T> gp;
};

// x_blocks, ctx_blocks: 3B^2 x Hb x Wb (ctx from b2c of x_hat^(k)). With
// `noise` null the latents are hard-rounded.
template <typename T>
OpenLoopOutput<T> open_loop_forward(const ad::Var<T>& x_blocks, const ad::Var<T>& ctx_blocks,
                                    const BasicModel<T>& model, const Tensor<T>* noise);

// rate_bits(p(y_tilde | mu, sigma)) / pixels + lambda * 255^2 * mean((x_tilde - x)^2)
template <typename T>
ad::Var<T> rd_cost(const ad::Var<T>& x_blocks, const OpenLoopOutput<T>& out, double lambda,
                   double pixels);

// Two open-loop runs: the first with ctx_blocks, the second with the first
// run's reconstruction (clamped to [0, 1]) as context. Returns the mean of the
// two RD costs; gradients flow through the first reconstruction.
template <typename T>
ad::Var<T> finetune_cost(const ad::Var<T>& x_blocks, const ad::Var<T>& ctx_blocks,
                         const BasicModel<T>& model, const Tensor<T>& noise0,
                         const Tensor<T>& noise1, double lambda, double pixels);

// ---------------------------------------------------------------------------
// Optimizer and schedule.

class Adam {
 public:
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

  explicit Adam(double lr = 1e-4) : lr_(lr) {}

  // One update from the current gradients; parameters without a gradient are
  // treated as having a zero gradient.
  void step(std::map<std::string, ad::Var<float>>& params);

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::int64_t steps() const { return t_; }

  std::vector<std::uint8_t> serialize() const;
  static Adam deserialize(std::span<const std::uint8_t> bytes);

 private:
  double lr_;
  std::int64_t t_ = 0;
  std::map<std::string, Tensor<double>> m_, v_;
};

// Multiplies the learning rate by `factor` when the observed metric has not
// improved by more than `threshold` (relative) for `patience` observations.
// Never goes below `min_lr`.
class PlateauScheduler {
 public:
  PlateauScheduler(double factor, double min_lr, int patience, double threshold)
      : factor_(factor), min_lr_(min_lr), patience_(patience), threshold_(threshold) {}

  enum class Event { kNone, kImproved, kReduced, kExhausted };
  // kExhausted: a plateau was reached with the rate already at the floor.
  Event observe(double metric, double& lr);
  void reset() {
    best_ = std::numeric_limits<double>::infinity();
    bad_ = 0;
  }

  double best() const { return best_; }

 private:
  double factor_, min_lr_;
  int patience_;
  double threshold_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_ = 0;
};

// ---------------------------------------------------------------------------
// Data.

struct Batch {
  std::vector<ImageRGB> x, x_hat;
  std::vector<std::size_t> index;                             // source image
  std::vector<std::pair<std::int64_t, std::int64_t>> origin;  // crop (row, col)
};

// `patch` x `patch` crops at block-aligned positions; the same window is taken
// from each x and its paired reconstruction. Images smaller than the patch are
// reflect-padded first. Throws Error unless patch % block == 0.
Batch crop_batch(const std::vector<ImageRGB>& xs, const std::vector<ImageRGB>& x_hats, int patch,
                 int batch, int block, Rng& rng);

// Mirror padding on the bottom/right (edge sample not repeated).
ImageRGB reflect_pad(const ImageRGB& img, std::int64_t height, std::int64_t width);

// ---------------------------------------------------------------------------
// Validation and regeneration.

// Closed-loop codec cost: estimated rate at the coded latents + lambda * MSE.
double closed_loop_cost(const Model& model, const ImageRGB& x, double lambda);

// Open-loop cost with hard rounding and context x_hat: same units as above,
// reconstruction clamped.
double open_loop_cost(const Model& model, const ImageRGB& x, const ImageRGB& x_hat, double lambda);

// x_hat^(k+1) = clamp(t_s(round(t_a(x, x_hat^(k))), x_hat^(k))), whole image.
ImageRGB regenerate(const Model& model, const ImageRGB& x, const ImageRGB& x_hat);

// ---------------------------------------------------------------------------
// ACL driver.

enum class AclPhase { kMain, kFinetune };

struct AclRecord {
  int k = 0;
  AclPhase phase = AclPhase::kMain;
  double closed_cost = 0.0;
  double open_cost = 0.0;
  std::int64_t steps = 0;  // SGD steps spent in this iteration
};

struct AclState {
  int k = 0;
  std::vector<ImageRGB> recon_train, recon_val;
  std::vector<AclRecord> history;
};

struct AclResult {
  Model model;
  AclState state;
  Model main_model;  // model at the end of the main phase, before fine-tuning
};

struct AclHooks {
  // Called after every completed iteration (main or fine-tune).
  std::function<void(const AclRecord&, const Model&)> on_iteration;
  // Stop after this many completed iterations in this call (resume test aid).
  std::optional<int> stop_after;
};

// Runs the main ACL phase, then cfg.finetune_iters fine-tune iterations.
// With cfg.run_dir set, writes config.json, epochs.csv, acl.csv, one
// checkpoint per iteration and a resumable state.bin; if state.bin already
// exists there the run continues from it. A non-finite loss aborts with a
// NumericError after saving last_good.lbcm.
AclResult acl_train(const std::vector<ImageRGB>& train, const std::vector<ImageRGB>& val,
                    const TrainConfig& cfg, const AclHooks& hooks = {});

// Images for a config: directory contents or generated ones.
std::pair<std::vector<ImageRGB>, std::vector<ImageRGB>> load_datasets(const TrainConfig& cfg);

}  // namespace lbc
