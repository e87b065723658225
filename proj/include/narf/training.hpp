#pragma once

// Ray-batch sampling, the color + mask reconstruction loss and the
// optimization loop.

#include "narf/autodiff.hpp"
#include "narf/checkpoint.hpp"
#include "narf/dataset.hpp"
#include "narf/fields.hpp"
#include "narf/gradcheck.hpp"
#include "narf/random.hpp"
#include "narf/renderer.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace narf {

struct TrainConfig {
  Architecture arch = Architecture::NarfD;

  // Model.
  std::size_t depth = 4;
  std::size_t width = 64;
  std::size_t color_width = 32;
  std::size_t skip_layer = 0;
  double density_scale = 1.0;
  bool equalized_lr = true;
  double temperature = 100.0;
  SelectorActivation selector = SelectorActivation::Softmax;
  bool rt_color_twist = true;
  bool rt_global = false;
  bool latent = false;
  std::size_t latent_shape_dim = 16;
  std::size_t latent_appearance_dim = 16;

  // Optimization.
  std::size_t batch_images = 16;
  std::size_t rays_per_image = 128;
  std::size_t samples = 64;
  std::size_t fine_samples = 0;
  double learning_rate = 0.01;
  double decay = 0.99995;
  std::size_t iterations = 2000;
  double mask_weight = 1.0;
  // Std of the Gaussian noise on the raw density during training steps
  // (never at validation or render time). 0 disables it.
  double density_noise = 0.1;
  std::uint64_t seed = 0;

  // Bookkeeping.
  std::size_t val_every = 500;  // 0 disables validation
  std::size_t val_images = 8;
  std::size_t checkpoint_every = 0;  // 0 writes only the final checkpoint
  std::size_t chunk_rays = 32;  // rays per independent tape

  // Throws Error naming the first invalid field.
  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep their defaults; unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j);
  // FNV-1a over the canonical JSON form.
  std::uint64_t hash() const;
  FieldDescriptor descriptor(const SceneSpec& scene) const;
};

struct LossTerms {
  ad::Var total;
  double color = 0.0;
  double mask = 0.0;
};

// sum_r |C_gt - C|^2 + lambda (M_gt - M)^2 over the rays of the batch.
LossTerms compute_loss(ad::Var color, ad::Var mask, const Tensor& color_gt, const Tensor& mask_gt,
                       double mask_weight);

struct RayBatch {
  std::vector<std::size_t> record;  // index into the record list, per ray
  std::vector<Pixel> pixels;
  Tensor rgb;   // [R x 3]
  Tensor mask;  // [R x 1]
};

// batch_images distinct images (all images when fewer exist), then
// rays_per_image uniformly random pixels from each.
RayBatch sample_ray_batch(const std::vector<DatasetRecord>& records, const TrainConfig& cfg, Rng& rng);

struct TrainLogRow {
  std::size_t iteration = 0;
  double loss = 0.0;
  double color_loss = 0.0;
  double mask_loss = 0.0;
  double val_psnr = 0.0;  // NaN when not evaluated this iteration
  double learning_rate = 0.0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<TrainLogRow> log;
  bool diverged = false;
  std::string message;
};

using ProgressFn = std::function<void(const TrainLogRow&)>;

// Trains on the dataset's train split. With a non-empty out_dir, writes
// metrics.csv and checkpoint.narf there (plus periodic checkpoints). A
// non-finite loss or gradient stops training and keeps the last finite
// state, reported through TrainResult::diverged.
TrainResult train(const TrainConfig& cfg, const Dataset& data, const std::filesystem::path& out_dir = {},
                  const ProgressFn& progress = {});

// Loss of `model` on one fixed batch, without updating anything.
double probe_loss(const FieldModel& model, const TrainConfig& cfg, const std::vector<DatasetRecord>& records,
                  const RayBatch& batch);

// Named model variants covered by render_gradcheck: every architecture tag
// plus "rtnerf_no_twist", "rpnerf" and "narf_d_latent".
const std::vector<std::string>& gradcheck_variants();

struct RenderGradCheckConfig {
  std::size_t rays = 6;
  std::size_t samples = 12;
  std::size_t coords_per_parameter = 12;
  double step = 3e-4;
  bool fourth_order = true;
};

// Finite-difference check of the full render + loss gradient for a small
// model of the named variant on a random tree, pose, ray set and target.
GradCheckResult render_gradcheck(const std::string& variant, std::uint64_t seed,
                                 const RenderGradCheckConfig& cfg = {});

inline constexpr const char* kMetricsHeader = "iteration,loss,color_loss,mask_loss,val_psnr,lr,wall_seconds";

}  // namespace narf
