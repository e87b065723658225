#pragma once

// Image-quality metrics, split evaluation of a trained model, and analytic
// per-ray cost accounting.

#include "narf/checkpoint.hpp"
#include "narf/dataset.hpp"
#include "narf/fields.hpp"
#include "narf/renderer.hpp"
#include "narf/tensor.hpp"

#include "json.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace narf {

inline constexpr const char* kReportSchema = "narf-report/1";
inline constexpr const char* kCostSchema = "narf-cost/1";
inline constexpr double kPsnrCap = 99.0;

// Images are [pixels x channels] tensors with values in [0, 1].
double mse(const Tensor& a, const Tensor& b);
// Peak 1.0; identical images give kPsnrCap.
double psnr(const Tensor& a, const Tensor& b);
// 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, over the valid
// region, averaged over channels.
double ssim(const Tensor& a, const Tensor& b, int width, int height);
// Sum of squared differences after scaling masks to [0, 255].
double mask_l2(const Tensor& a, const Tensor& b);

struct ImageScore {
  std::string split;
  std::size_t index = 0;
  double psnr = 0.0;
  double ssim = 0.0;
  double mask_l2 = 0.0;
};

struct SplitScore {
  std::string split;
  std::size_t images = 0;
  double psnr = 0.0;
  double ssim = 0.0;
  double mask_l2 = 0.0;
};

struct EvalReport {
  std::uint64_t config_hash = 0;
  std::vector<SplitScore> splits;
  std::vector<ImageScore> images;

  // Throws Error when the split was not evaluated.
  const SplitScore& split(const std::string& name) const;
  nlohmann::json to_json() const;
  // One row per split followed by one row per image.
  std::string to_csv() const;
};

struct EvaluateConfig {
  RenderConfig render;
  // 0 evaluates every image of a split.
  std::size_t max_images_per_split = 0;
};

// Renders every selected test image and scores it against the ground truth.
// Throws Error when a split is missing or the model does not fit the scene.
EvalReport evaluate(const FieldModel& model, const Dataset& data, const std::vector<std::string>& splits,
                    const EvaluateConfig& cfg = {}, std::uint64_t config_hash = 0);
EvalReport evaluate(const Checkpoint& ckpt, const Dataset& data, const std::vector<std::string>& splits,
                    const EvaluateConfig& cfg = {});

struct CostReport {
  std::string arch;
  std::size_t samples = 0;
  std::uint64_t parameters = 0;
  std::uint64_t macs_per_sample = 0;
  std::uint64_t macs_per_ray = 0;
  std::uint64_t flops_per_ray = 0;   // 2 x MACs
  std::uint64_t memory_per_ray = 0;  // retained activation elements

  nlohmann::json to_json() const;
  static std::string csv_header();
  std::string csv_row() const;
};

// Pure function of the descriptor and the sample count. Counts affine layers
// only; NARF_P adds its per-part blending.
CostReport cost_report(const FieldDescriptor& desc, std::size_t samples);

// 23-part human-like skeleton with an 8 x 256 trunk, skip connection at the
// fifth layer and a 128-wide color layer.
FieldDescriptor paper_scale_descriptor(Architecture arch);

}  // namespace narf
